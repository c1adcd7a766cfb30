//! Polychromatic fan-beam CT toolkit.
//!
//! The crate simulates metal-corrupted sinograms from an energy-dependent
//! Beer-Lambert model and reconstructs artifact-free images by fitting a
//! hash-grid neural field through a differentiable polychromatic projector.
//! Classical baselines (filtered backprojection, linear sinogram inpainting)
//! and image metrics live here too, so the whole pipeline can be driven
//! from one binary.

pub mod baselines;
pub mod error;
pub mod field;
pub mod forward;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod presets;
pub mod spectrum;
pub mod train;

pub use baselines::{fbp, li_inpaint, metal_trace, FilterWindow, MetalTrace};
pub use error::{Error, Result};
pub use field::{
    encode, field_backward, field_forward, init_params, FieldCache, GradAccum, HashEncoderConfig,
    MlpGrad, NeuralFieldParams,
};
pub use forward::{poly_with_softmin, project_mono, project_poly, project_poly_grad, RayPrediction};
pub use geometry::{
    ray_for, sample_ray, AngleRange, DetectorArrangement, FanBeamGeometry, Ray, SamplePoint,
};
pub use grid::{Grid2, MetalMask};
pub use metrics::{psnr, ssim};
pub use presets::Preset;
pub use phantom::{
    compose_polychromatic, extract_metal_mask, make_disk_phantom, simulate_sinogram, Disk,
    MaterialTable, PolyImage, SimulateOptions, Sinogram,
};
pub use spectrum::{normalize, Spectrum};
pub use train::{
    adam_step, batch_loss, dc_loss, eds_loss, extract_image, lr_at, train, AdamState, BatchLoss,
    LossRecord, TrainConfig, TrainOutcome,
};
