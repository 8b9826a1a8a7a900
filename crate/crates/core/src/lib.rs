//! Categorical diffusion for single-step retrosynthesis.
//!
//! The crate is organised bottom-up: [`tensor`] holds the numerical core,
//! [`smiles`] the molecule text pipeline, [`diffusion`] the multinomial
//! noising and denoising maths, [`net`] the encoder-decoder with its length
//! head, [`train`] losses and the training loop, and [`ensemble`] the
//! multi-model sampling and ranking used at inference.

pub mod diffusion;
pub mod ensemble;
pub mod net;
pub mod parallel;
pub mod smiles;
pub mod tensor;
pub mod train;
