//! Optical-flow-guided attention for video diffusion editing.
//!
//! The crate covers the full editing loop at desk scale:
//!
//! - [`flow`]: dense displacement fields (`.flo` I/O, synthesis, downsampling,
//!   perturbation) and point projection along a field.
//! - [`trajectory`]: partitioning a video's patch grid into flow trajectories
//!   with deterministic occlusion resolution.
//! - [`attention`]: dense spatio-temporal attention plus the flow-guided
//!   variant that restricts each patch's key/value set to its own trajectory.
//! - [`diffusion`]: linear beta schedules, DDIM inversion/sampling with a
//!   pluggable denoiser, and a feature-injection cache.
//! - [`pipeline`]: a toy attention U-Net wiring the above into invert / edit /
//!   reconstruct experiments.
//! - [`metrics`]: flow-warping consistency error, edit score, PSNR, SSIM.
//!
//! All randomness is seeded (ChaCha8) and all iteration orders are fixed, so
//! every operation is bit-reproducible for a given seed.

pub mod attention;
pub mod diffusion;
pub mod flow;
pub mod metrics;
pub mod pipeline;
pub mod trajectory;

// Re-exported so callers can construct the array and image types our public
// signatures use without pinning matching versions themselves.
pub use image;
pub use ndarray;
