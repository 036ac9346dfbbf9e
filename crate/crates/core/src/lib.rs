//! Identity-preserving thermal-to-visible face translation.
//!
//! The crate trains a U-Net generator against a shared-trunk discriminator
//! that both scores realness and classifies training identities, alongside
//! Pix2Pix, patch-based and identity-mapping baselines. A rank-k
//! identification harness measures how much identity survives translation.

pub mod dataio;
pub mod error;
pub mod losses;
pub mod nets;
pub mod recog;
pub mod report;
pub mod train;

pub use error::{Error, Result};
