//! Teacher–coach–student cross-modal knowledge distillation for
//! bird's-eye-view semantic map construction, at desk scale.
//!
//! A full-modality teacher (camera, LiDAR, SD and HD map priors) and a
//! camera-only coach with a pseudo-LiDAR branch supervise a lightweight
//! camera-only student through two losses: token-guided patch distillation
//! on BEV features ([`tgpd`]) and foreground-masked response distillation on
//! semantic logits ([`msrd`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
mod container;
pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod msrd;
pub mod nets;
pub mod scenegen;
pub mod tgpd;
pub mod trainer;

pub use config::RunConfig;
pub use container::file_crc;

pub use error::{Error, Result};
