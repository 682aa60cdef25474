//! Multimodal sleep-apnea event detection.
//!
//! The crate covers the whole pipeline, from synthetic polysomnography to
//! evaluation:
//!
//! ```text
//! synth::generate ──► dsp (resample → bandpass → z-score → segment)
//!                         │
//!                         ▼
//!            net::Net (U-Net + Transformer) ◄── train (targets, loss, Adam)
//!                         │
//!                         ▼
//!       events (decode → stitch → NMS) ──► eval (F1/IoU, AHI, severity)
//! ```
//!
//! `synth::oracle_score` is an independent rule-based scorer used as ground
//! truth for closed-loop tests.

pub mod cli;
pub mod domain;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod events;
pub mod net;
pub mod synth;
pub mod tensor;
pub mod train;

pub use domain::{
    interval_iou, ChannelKind, EventInterval, EventLabel, ModalityMask, Recording, SampleSeries,
};
pub use error::{Error, Result};
