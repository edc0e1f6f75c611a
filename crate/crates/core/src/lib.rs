//! Cross-modal prompt tuning for person re-identification.
//!
//! A frozen-then-tuned dual encoder learns per-identity text prompts whose
//! leading tokens are gated by the image's own global feature, optionally
//! regularized so that perturbed views of an image yield the same text
//! embedding. Retrieval uses only the image encoder.
//!
//! Start from [`config::Config`], render data with
//! [`data::generate_dataset`], train with [`trainer::run_pipeline`] and
//! score with [`eval::evaluate`].

pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod perturb;
pub mod plot;
pub mod prompts;
pub mod seed;
pub mod svip;
pub mod tensor;
pub mod trainer;
