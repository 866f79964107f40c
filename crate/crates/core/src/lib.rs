//! Joint spectral unmixing of multitemporal hyperspectral image sequences.
//!
//! Each frame follows the linear mixing model `X_k = S_k A_k + E_k`. Endmembers
//! are tied to fixed reference spectra through per-frame scale factors
//! (`S_k ~ S_0 diag(psi_k)`), abundances change sparsely between frames, and
//! all frames are unmixed together by alternating ADMM solves
//! ([`solver::joint_unmix`]). A frame-by-frame baseline
//! ([`baseline::separate_unmix`]), a synthetic scene generator
//! ([`model::generate_synthetic`]), scaled-MSE metrics and the on-disk
//! formats live alongside.
//!
//! With the default `parallel` feature, per-frame work runs on the rayon
//! pool; results are identical for every thread count.

pub mod admm_abundance;
pub mod admm_endmember;
pub mod baseline;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod par;
pub mod rng;
pub mod solver;

pub use error::{Result, UnmixError};
pub use model::{
    AbundanceTrajectory, Dims, EndmemberTrajectory, FrameSequence, GroundTruth, Matrix, NoiseSpec, ReferenceSpectra,
    ScaleSeries, Scenario,
};
pub use objective::{Hyperparams, SpectralWeight};
pub use solver::{joint_unmix, Init, SolverConfig, UnmixResult};
