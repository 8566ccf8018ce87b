//! Switch-style modulation for modality-agnostic embedding alignment.
//!
//! A frozen convolutional embedding backbone is augmented with trainable,
//! sample-routed style modulation blocks. Each block computes per-channel
//! statistics of its incoming feature map, routes every sample to one of a
//! small pool of affine "style experts" via a softmax router (top-1 switch
//! routing), and rewrites the feature map as a scaled/shifted version of its
//! instance-normalized form plus a residual. Training combines a cosine
//! contrastive pair loss, a teacher-student identity loss on the source
//! modality, and a load-balance term over the routers.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`tape`] — dense tensors and reverse-mode differentiation
//! * [`backbone`] — the small convolutional embedding network and its
//!   checkpoint format ([`checkpoint`])
//! * [`ssmb`] — the switch style modulation block
//! * [`losses`] — contrastive, teacher-student, and load-balance losses
//! * [`synth`] — deterministic multi-modality benchmark generator
//! * [`eval`] — verification/identification metrics (AUC, EER, Rank-1, VR@FAR)
//! * [`optim`] / [`train`] — Adam and the teacher/student training loops
//!
//! All numerics are generic over the element type via [`Scalar`]; training
//! runs in `f32`, gradient verification in `f64`.

pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod optim;
pub mod ssmb;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Element type of every tensor in the crate.
///
/// `f32` is the training precision, `f64` the verification precision used by
/// the finite-difference gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, used when seeding values from RNGs and
    /// configuration constants.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every Scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Training-precision tape.
pub type Tape32 = Tape<f32>;
/// Verification-precision tape.
pub type Tape64 = Tape<f64>;
