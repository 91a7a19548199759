//! Text-conditioned tri-plane generation trained by distribution-level
//! score distillation, at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tape-based reverse-mode differentiation.
//! - [`render`]: tri-planes, orbit cameras and volume rendering.
//! - [`text`]: toy text encoder and the semantics mapping network.
//! - [`adapter`]: 3D-aware gated cross-attention adapters.
//! - [`generator`]: style-modulated synthesis of tri-planes.
//! - [`distill`]: noise schedules, teachers and (distribution) SDS.
//! - [`adversarial`]: discriminator, GAN losses and the two-stage schedule.
//! - [`corpus`] and [`metrics`]: synthetic captioned scenes and evaluation.
//! - [`train`]: experiment setup and the evaluation suite.
//! - [`config`], [`checkpoint`], [`commands`]: the command-line harness.

pub mod adapter;
pub mod adversarial;
pub mod autodiff;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod distill;
pub mod generator;
pub mod image_io;
pub mod metrics;
pub mod render;
pub mod rng;
pub mod text;
pub mod train;
