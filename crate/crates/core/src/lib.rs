//! Structural-similarity feature distillation.
//!
//! The crate provides the building blocks for distilling a student network's
//! intermediate feature maps toward a teacher's:
//!
//! * [`tensor`]: feature maps, min-max normalization and the 1x1 adapter,
//! * [`window`]: Gaussian and unbiased uniform windows, separable
//!   convolution and local moments,
//! * [`loss`]: SSIM, MS-SSIM, `lp`, smooth-l1 and their combinations,
//! * [`grad`]: analytic gradients and a finite-difference checker,
//! * [`harness`]: synthetic scenarios and an SGD-with-momentum loop,
//! * [`io`]: the FDMP tensor dump format and PGM/CSV map export.

pub mod error;
pub mod exec;
pub mod grad;
pub mod harness;
pub mod io;
pub mod loss;
pub mod tensor;
pub mod window;

pub use error::{Error, Result};
pub use exec::Exec;
pub use harness::{DistillConfig, Generator, GeneratorSpec, Scenario, StudentKind, TrainLog};
pub use loss::{LossConfig, LossKind, LossResult, SsimExponents, StabilizerConfig};
pub use tensor::{AdapterParams, FeatureMap, MultiScaleFeatures, NormalizeScope};
pub use window::{Estimator, MomentMaps, Window, WindowSpec};
