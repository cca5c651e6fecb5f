//! Parts-and-appearance factorization of convolutional feature maps.
//!
//! Batches of mode-3 unfolded activations `Z_i ∈ R^{C×S}` are factorized as
//! `Z_i ≈ A Λ_i Pᵀ` with nonnegative spatial parts `P` and unconstrained
//! appearance directions `A`, where `Λ_i = Aᵀ Z_i P`. The learned factors
//! drive concept saliency maps, rank-one local feature-map edits and
//! locality metrics.

pub mod analysis;
pub mod editing;
pub mod error;
pub mod factorization;
pub mod io;
mod linalg;
pub mod metrics;
pub mod refinement;
pub mod synthetic;
pub mod tensor;

pub use analysis::{ConceptMask, SaliencyMap};
pub use editing::{EditSpec, PartNorm};
pub use error::{Error, Result};
pub use factorization::{CoefficientMatrix, FactorModel, FitConfig, FitStats, LossRecord, StepRule};
pub use linalg::{largest_principal_angle, leading_eigenvectors};
pub use metrics::{ImageBatch, RoiMask, RoirReport};
pub use refinement::{RefineConfig, RefinedParts};
pub use synthetic::{PlantDims, PlantedTruth, RecoveryScore};
pub use tensor::{ActivationBatch, ActivationSample};
