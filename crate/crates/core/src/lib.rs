//! Function-on-function quadratic regression.
//!
//! Predictor curves are smoothed onto a basis, the quadratic interaction
//! term is assembled through Kronecker products of the basis Gram matrix,
//! and the coefficient matrix together with Gaussian-process error
//! parameters is estimated by penalized maximum likelihood. Tuning
//! parameters are chosen with GCV, mAIC, GIC or GBIC, and a Monte Carlo
//! harness compares the model against functional and multivariate
//! baselines.

pub mod basis;
pub mod design;
pub mod error;
pub mod estimator;
pub mod gpcov;
pub mod linalg;
pub mod selection;
pub mod simulate;
pub mod smoothing;

pub use basis::{BasisConfig, BasisKind, BasisSystem, PenaltyMatrix};
pub use design::{CoefficientTensor, QuadraticModelSpec, Surfaces, ThetaMatrix};
pub use error::{Error, Result};
pub use estimator::{FitControls, FitData, FittedModel};
pub use gpcov::{CovBundle, NoiseParam, NuParams};
pub use selection::{Criterion, CriterionReport, QForm};
pub use smoothing::{FunctionalCurve, LongitudinalDataset};
