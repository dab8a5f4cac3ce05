//! Closed-form analysis and training tools for Bernoulli variational autoencoders.
//!
//! The crate provides:
//!
//! * an analytic lower bound for the Bernoulli-VAE training objective together
//!   with the closed-form optimal decoder parameters and encoder moments
//!   ([`closedform`]),
//! * an eigenvalue-based selector for the latent dimension,
//! * a synthetic sparse-loading binary data generator ([`datagen`]),
//! * a small fp64 feed-forward engine with exact reverse-mode gradients and
//!   Adam ([`nn`]),
//! * the two VAE variants — plain and "preinit", whose last layers start at
//!   the closed-form optimum with a frozen log-variance head ([`vae`]),
//! * an experiment harness that compares trained losses against the bound
//!   ([`harness`]).
//!
//! All randomness is seeded ChaCha12 (see [`rng`]); repeated runs with the
//! same seeds produce identical results.

pub mod closedform;
pub mod datagen;
pub mod elbo;
pub mod harness;
pub mod nn;
pub mod numerics;
pub mod rng;
pub mod vae;
