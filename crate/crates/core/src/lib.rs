//! Task-driven design of parallel-jaw gripper fingers.
//!
//! Finger pairs are parameterized as chained cubic Bézier height profiles
//! ([`geometry`]). A deterministic quasi-static contact model ([`simulator`])
//! produces ground-truth object motion for one open-close action. A learned
//! surrogate of that motion ([`dynamics`], built on [`nn`]) supplies gradients
//! of task objectives ([`objectives`]) with respect to the finger parameters,
//! which steer a DDIM sampler over finger shapes ([`diffusion`]). Baseline
//! optimizers live in [`search`] and ground-truth evaluation in [`eval`].
// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diffusion;
pub mod dynamics;
mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod search;
pub mod simulator;
pub mod util;

pub use config::Config;
pub use diffusion::{Denoiser, NoiseSchedule};
pub use dynamics::{DynamicsModel, InteractionDataset, InteractionProfile};
pub use error::{Error, Result};
pub use geometry::{ControlVector, DeltaPose, FingerGeometry, ObjectShape, Pose, PoseGrid, ShapePreset};
pub use objectives::TaskSpec;
pub use simulator::{Jaw, SimConfig, SimResult};
