//! Joint channel-and-signal estimation for massive MIMO with generalized
//! spatial modulation (GSM).
//!
//! The receiver observes `Y = A_R G A_T^H X + N`, where `G` is a sparse
//! angular-domain channel and `X` is a sparse GSM signal matrix. This crate
//! implements blind estimation (BCSE: AMP-based factorization of
//! `Y ≈ A_R S X` with structured priors on both factors), the semi-blind
//! variant (SBCSE: short pilots resolve phase/permutation ambiguities
//! mid-iteration, ISTA refines the angular channel), and EM updates of the
//! model hyperparameters.

pub mod amp;
pub mod channel;
pub mod em;
pub mod matio;
pub mod modulation;
pub mod rng;
pub mod semiblind;

pub use num_complex::Complex64;

/// `M x N` complex matrix used throughout.
pub type CMat = ndarray::Array2<Complex64>;
/// `M x N` real matrix (variances, probabilities).
pub type RMat = ndarray::Array2<f64>;
