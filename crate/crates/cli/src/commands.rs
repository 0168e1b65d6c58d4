use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use funquad::design::{eval_surfaces, linspace};
use funquad::estimator::{fit, predict_curve, FitData, FittedModel, ModelDocument, PredictorInfo};
use funquad::selection::{select, write_selection_csv};
use funquad::simulate::{run_study, study_cells};
use funquad::smoothing::{smooth_dataset, FunctionalCurve, LongitudinalDataset};
use funquad::{BasisConfig, BasisSystem, QuadraticModelSpec};

use crate::config::{
    load, resolve, CurveFile, FitConfig, PredictConfig, SelectConfig, SimulateConfig, SmoothConfig, TimeMap,
};
use crate::error::CliError;
use crate::output::{Metadata, OutDir};

type CmdResult = Result<(), CliError>;

fn read_curves(file: &CurveFile, dir: &Path, time_map: Option<&TimeMap>, fallback: &str) -> Result<LongitudinalDataset, CliError> {
    let path = resolve(dir, &file.path);
    let variable = file.variable.as_deref().unwrap_or(fallback);
    let domain = file.domain.map(|d| (d[0], d[1]));
    let ds = match std::fs::File::open(&path) {
        Ok(f) => LongitudinalDataset::from_csv_reader(f, variable, domain)?,
        Err(e) => return Err(CliError::io(&path, e)),
    };
    match time_map {
        Some(tm) => {
            tm.validate()?;
            Ok(ds.rescale_times((tm.from[0], tm.from[1]), (tm.to[0], tm.to[1]))?)
        }
        None => Ok(ds),
    }
}

/// Reorder `y` so that its subjects follow the order of `x`.
fn pair_subjects(x: &LongitudinalDataset, y: LongitudinalDataset) -> Result<LongitudinalDataset, CliError> {
    if x.len() != y.len() {
        return Err(CliError::config(format!(
            "{} predictor subjects but {} response subjects",
            x.len(),
            y.len()
        )));
    }
    let mut pool = y.subjects;
    let mut ordered = Vec::with_capacity(pool.len());
    for s in &x.subjects {
        let pos = pool
            .iter()
            .position(|r| r.id == s.id)
            .ok_or_else(|| CliError::config(format!("subject {} has no response curve", s.id)))?;
        ordered.push(pool.swap_remove(pos));
    }
    Ok(LongitudinalDataset::new(y.variable, y.domain, ordered)?)
}

struct Prepared {
    x: LongitudinalDataset,
    y: LongitudinalDataset,
    curves: Vec<FunctionalCurve>,
    predictor: PredictorInfo,
}

fn prepare(
    pred: &CurveFile,
    resp: &CurveFile,
    time_map: Option<&TimeMap>,
    basis: &BasisConfig,
    roughness: Option<f64>,
    dir: &Path,
) -> Result<Prepared, CliError> {
    let x = read_curves(pred, dir, time_map, "predictor")?;
    let y = pair_subjects(&x, read_curves(resp, dir, time_map, "response")?)?;
    let xb = Arc::new(basis.build()?);
    let (curves, r) = smooth_dataset(&x, &xb, roughness)?;
    Ok(Prepared {
        x,
        y,
        curves,
        predictor: PredictorInfo::new(xb, Some(r)),
    })
}

fn document(model: &FittedModel, meta: &Metadata) -> ModelDocument {
    let mut doc = model.to_document();
    doc.metadata = meta.entries();
    doc
}

fn write_fit_report(out: &mut Vec<u8>, ids: &[String], model: &FittedModel, data: &FitData) -> CmdResult {
    let fitted = model.fitted_values(data);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["subject_id", "n_obs", "rss", "rmse", "max_abs_residual"])?;
    for (i, id) in ids.iter().enumerate() {
        let r = data.y(i) - &fitted[i];
        let rss = r.norm_squared();
        w.write_record([
            id.clone(),
            r.len().to_string(),
            rss.to_string(),
            (rss / r.len() as f64).sqrt().to_string(),
            r.amax().to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn write_surfaces(out: &OutDir, model: &FittedModel, points: usize) -> CmdResult {
    if model.spec.order > 2 {
        eprintln!("surfaces are only exported for interaction order <= 2");
        return Ok(());
    }
    let pb = &model.predictor.as_ref().expect("fit attaches the predictor basis").basis;
    let (slo, shi) = pb.domain();
    let (tlo, thi) = model.response_basis.domain();
    let s = linspace(slo, shi, points);
    let t = linspace(tlo, thi, points);
    let surf = eval_surfaces(&model.theta, pb, &model.response_basis, &s, &t, &s)?;
    out.csv("alpha.csv", |b| Ok(surf.write_alpha_csv(b)?))?;
    out.csv("beta_grid.csv", |b| Ok(surf.write_beta_csv(b)?))?;
    out.csv("gamma_grid.csv", |b| Ok(surf.write_gamma_csv(b)?))?;
    Ok(())
}

fn warn_unconverged(model: &FittedModel) {
    if !model.converged() {
        eprintln!(
            "warning: fit did not converge after {} iterations{}",
            model.diagnostics.iterations,
            model.diagnostics.message.as_deref().map(|m| format!(": {m}")).unwrap_or_default()
        );
    }
}

pub fn cmd_fit(config: &Path, out_dir: &Path, seed: Option<u64>) -> CmdResult {
    let (mut cfg, dir): (FitConfig, _) = load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let meta = Metadata::new("fit", &cfg, cfg.seed);
    let prep = prepare(&cfg.predictor, &cfg.response, cfg.time_map.as_ref(), &cfg.predictor_basis, cfg.roughness, &dir)?;
    let yb = Arc::new(cfg.response_basis.build()?);
    let data = FitData::from_curves(&prep.curves, &prep.predictor.gram, cfg.order, &prep.y, yb)?;
    let spec = QuadraticModelSpec::with_difference_penalties(
        prep.predictor.basis.len(),
        data.m_y(),
        cfg.order,
        cfg.penalty_order,
        cfg.lambda,
    )?;
    let model = fit(&data, &spec, &cfg.controls)?.with_predictor(prep.predictor);
    warn_unconverged(&model);

    let out = OutDir::create(out_dir, meta)?;
    out.json("model.json", &document(&model, out.meta()))?;
    out.csv("fit_report.csv", |b| write_fit_report(b, &prep.x.ids(), &model, &data))?;
    write_surfaces(&out, &model, cfg.surface_points)?;
    println!(
        "fit: converged={} iterations={} objective={}",
        model.converged(),
        model.diagnostics.iterations,
        model.diagnostics.final_objective
    );
    Ok(())
}

pub fn cmd_select(config: &Path, out_dir: &Path, seed: Option<u64>) -> CmdResult {
    let (mut cfg, dir): (SelectConfig, _) = load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let meta = Metadata::new("select", &cfg, cfg.seed).with("criterion", cfg.criterion);
    let prep = prepare(&cfg.predictor, &cfg.response, cfg.time_map.as_ref(), &cfg.predictor_basis, cfg.roughness, &dir)?;
    let m_x = prep.predictor.basis.len();
    let outcome = select(
        |m_y| {
            let mut bc = cfg.response_basis.clone();
            bc.m = m_y;
            let yb = Arc::new(bc.build()?);
            let data = FitData::from_curves(&prep.curves, &prep.predictor.gram, cfg.order, &prep.y, yb)?;
            let spec = QuadraticModelSpec::with_difference_penalties(m_x, m_y, cfg.order, cfg.penalty_order, 0.0)?;
            Ok((data, spec))
        },
        &cfg.m_y_grid,
        &cfg.lambda_grid,
        cfg.criterion,
        &cfg.controls,
        cfg.q_form,
    )?;
    let best = outcome.best.with_predictor(prep.predictor);
    warn_unconverged(&best);

    let out = OutDir::create(out_dir, meta)?;
    out.csv("selection_report.csv", |b| Ok(write_selection_csv(b, &outcome.table)?))?;
    out.json("model.json", &document(&best, out.meta()))?;
    let row = &outcome.table[outcome.best_index];
    println!(
        "select: {} minimized at M_y={} lambda={} ({} grid points)",
        outcome.criterion,
        row.m_y,
        row.lambda,
        outcome.table.len()
    );
    Ok(())
}

pub fn cmd_predict(config: &Path, out_dir: &Path, seed: Option<u64>) -> CmdResult {
    let (mut cfg, dir): (PredictConfig, _) = load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let meta = Metadata::new("predict", &cfg, cfg.seed);
    let model_path = resolve(&dir, &cfg.model);
    let text = std::fs::read_to_string(&model_path).map_err(|e| CliError::io(&model_path, e))?;
    let doc: ModelDocument =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", model_path.display())))?;
    let model = FittedModel::from_document(&doc)?;
    let predictor = model
        .predictor
        .clone()
        .ok_or_else(|| CliError::config("model.json carries no predictor basis"))?;

    let x = read_curves(&cfg.predictor, &dir, cfg.time_map.as_ref(), "predictor")?;
    let (curves, _) = smooth_dataset(&x, &predictor.basis, predictor.roughness)?;
    // evaluation times in model units, reported in raw units
    let (model_t, raw_t): (Vec<f64>, Vec<f64>) = match (&cfg.times, cfg.time_map) {
        (Some(ts), Some(tm)) => (ts.iter().map(|&t| tm.apply(t)).collect(), ts.clone()),
        (Some(ts), None) => (ts.clone(), ts.clone()),
        (None, tm) => {
            let (lo, hi) = model.response_basis.domain();
            let grid = linspace(lo, hi, cfg.grid_points);
            let raw = match tm {
                Some(tm) => grid.iter().map(|&t| tm.invert(t)).collect(),
                None => grid.clone(),
            };
            (grid, raw)
        }
    };
    let preds = curves
        .iter()
        .map(|c| predict_curve(&model, c, &model_t))
        .collect::<funquad::Result<Vec<_>>>()?;

    let out = OutDir::create(out_dir, meta)?;
    out.csv("predictions.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["subject_id", "t", "value"])?;
        for (s, p) in x.subjects.iter().zip(&preds) {
            for (t, v) in raw_t.iter().zip(p.iter()) {
                w.write_record([s.id.clone(), t.to_string(), v.to_string()])?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    })?;
    println!("predict: {} subjects x {} times", preds.len(), raw_t.len());
    Ok(())
}

pub fn cmd_smooth(config: &Path, out_dir: &Path, seed: Option<u64>) -> CmdResult {
    let (mut cfg, dir): (SmoothConfig, _) = load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = read_curves(&cfg.data, &dir, cfg.time_map.as_ref(), "value")?;
    let basis = Arc::new(BasisSystem::from_config(&cfg.basis)?);
    let (curves, r) = smooth_dataset(&ds, &basis, cfg.roughness)?;
    let meta = Metadata::new("smooth", &cfg, cfg.seed).with("roughness", r);
    let out = OutDir::create(out_dir, meta)?;
    out.csv("coefficients.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        let mut header = vec!["subject_id".to_string()];
        header.extend((1..=basis.len()).map(|k| format!("c{k}")));
        w.write_record(&header)?;
        for (s, c) in ds.subjects.iter().zip(&curves) {
            let mut row = vec![s.id.clone()];
            row.extend(c.coefficients.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    })?;
    let (lo, hi) = basis.domain();
    let grid = linspace(lo, hi, cfg.grid_points);
    let psi = basis.design_matrix(&grid)?;
    out.csv("smoothed.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["subject_id", "t", "value"])?;
        for (s, c) in ds.subjects.iter().zip(&curves) {
            let v = &psi * &c.coefficients;
            for (t, y) in grid.iter().zip(v.iter()) {
                w.write_record([s.id.clone(), t.to_string(), y.to_string()])?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    })?;
    println!("smooth: {} subjects, roughness {r}", curves.len());
    Ok(())
}

pub fn cmd_simulate(config: &Path, out_dir: &Path, seed: Option<u64>) -> CmdResult {
    let (mut cfg, _): (SimulateConfig, _) = load(config)?;
    if let Some(s) = seed {
        cfg.base.seed = s;
    }
    let meta = Metadata::new("simulate", &cfg, cfg.base.seed)
        .with("replications", cfg.base.replications)
        .with("toeplitz_rho", cfg.base.toeplitz_rho)
        .with("wishart_df", cfg.base.wishart_df)
        .with("predictor_noise_ratio", cfg.base.predictor_noise_ratio)
        .with("nu1", cfg.base.noise.nu1)
        .with("nu2", cfg.base.noise.nu2);
    let cells = study_cells(&cfg.base, &cfg.sample_sizes, &cfg.noise_levels);
    let table = run_study(&cells, &cfg.estimators)?;

    let out = OutDir::create(out_dir, meta)?;
    out.csv("table1.csv", |b| Ok(table.write_table1(b)?))?;
    out.csv("table2.csv", |b| Ok(table.write_table2(b)?))?;
    out.csv("boxplots.csv", |b| Ok(table.write_boxplots(b)?))?;
    out.csv("ase.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["estimator", "n", "nu3", "replication", "ase"])?;
        for c in &table.cells {
            for (r, a) in c.ases.iter().enumerate() {
                let v = a.map_or("NA".to_string(), |x| x.to_string());
                w.write_record([c.estimator.to_string(), c.n.to_string(), c.nu3.to_string(), r.to_string(), v])?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    })?;
    let failures: usize = table.cells.iter().map(|c| c.failures()).sum();
    println!(
        "simulate: {} cells x {} estimators x {} replications, {failures} failed fits",
        cells.len(),
        cfg.estimators.len(),
        table.replications
    );
    let _ = std::io::stdout().flush();
    Ok(())
}
