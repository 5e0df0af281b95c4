//! Few-shot class-incremental classification with learnable prototypes.
//!
//! The crate is `no_std` (it needs `alloc`). It covers the session protocol
//! and samplers, the embedding backbone, prototype construction, the dynamic
//! relation projection that refines prototypes between sessions, the relation
//! module used as a learnable metric, random episodic base training, the
//! finetune baseline, and incremental evaluation with its metrics.
//!
//! Everything runs in `f64` on a small reverse-mode tape ([`autodiff`]).

#![no_std]
extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod autodiff;
pub mod backbone;
pub mod digest;
pub mod drpm;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod layers;
pub mod model;
pub mod optim;
pub mod protocol;
pub mod prototype;
pub mod relation;
pub mod tensor;
pub mod training;

pub use error::Error;
pub use model::{ModelBundle, ModelConfig};
pub use tensor::Tensor;

use rand::SeedableRng;

/// The generator used for every seeded draw in the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}
