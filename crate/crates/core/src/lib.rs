//! Differentiable set-level key-frame selection with CoT-style task queries,
//! a Gumbel-TopK relaxation, a relevance/coverage/redundancy set objective and
//! student/teacher mutual learning, trained on synthetic oracle episodes.

pub mod checkpoint;
pub mod config;
pub mod diffmath;
pub mod error;
pub mod formats;
pub mod gradcheck;
pub mod model;
pub mod mutual;
pub mod nn;
pub mod querygen;
pub mod rng;
pub mod selector;
pub mod setobj;
pub mod synthdata;
pub mod trainer;

pub use config::{SetObjectiveConfig, TemperatureSchedule, TrainConfig};
pub use error::{Error, ErrorKind, Result};
