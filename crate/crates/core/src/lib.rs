//! Desk-scale multi-plane-image GAN with few-shot latent attribute editing.
//!
//! The crate trains a small StyleGAN-style generator whose output is a
//! multi-plane image (a shared RGB image plus per-plane alpha maps at fixed
//! depths), renders it from arbitrary cameras via plane-induced homographies
//! and front-to-back alpha compositing, inverts images into the generator's
//! `W+` latent space with a learned encoder, and estimates one latent edit
//! direction per attribute from up to ten cut-and-paste image pairs via SVD
//! of the latent differences. Everything runs on CPU in `f64` with
//! hand-written forward/backward passes so gradients can be verified against
//! finite differences.
//!
//! Start with [`latent`] for the edit algebra, [`renderer`] for the camera
//! model, and the `book/` guide for a narrative walk-through.

pub mod camera;
pub mod container;
pub mod data;
pub mod editdir;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod imgmath;
pub mod inversion;
pub mod latent;
pub mod linalg;
pub mod nn;
pub mod oracle;
pub mod renderer;

mod doctests;

pub use error::{Error, Result};
