//! Finite-difference check of every training loss term on a toy model.
//!
//! Gumbel noise is drawn once and frozen, and the teacher gate is the soft
//! mask itself, so each term is a smooth function of the parameters away
//! from ReLU kinks and top-k ties.

use serde::Serialize;

use crate::config::TrainConfig;
use crate::diffmath::{finite_diff_check, Graph};
use crate::error::Result;
use crate::model::{ForwardOptions, GateMode, HfsModel};
use crate::rng::stream;
use crate::selector::sample_gumbel;
use crate::synthdata::{generate_episode, EpisodeSpec, Task};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const EPSILON: f64 = 1e-5;

pub const TERMS: [&str; 8] = ["ce", "kl", "sep", "rel", "cov", "red", "f_set", "total"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TermCheck {
    pub term: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub terms: Vec<TermCheck>,
    pub passed: bool,
}

/// Small model with every component enabled and non-negligible loss weights.
pub fn gradcheck_config(seed: u64) -> TrainConfig {
    TrainConfig {
        n_frames: 12,
        k_sel: 3,
        dim: 6,
        scorer_hidden: 8,
        teacher_hidden: 6,
        teacher_mlp_hidden: 5,
        encoder_mlp_hidden: 7,
        vocab_size: 9,
        prompt_len: 4,
        lambda_set: 0.1,
        lambda_sep: 0.1,
        seed,
        ..TrainConfig::default()
    }
}

pub fn run_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let cfg = gradcheck_config(seed);
    let model = HfsModel::init(&cfg)?;
    let spec = EpisodeSpec {
        n: cfg.n_frames,
        d: cfg.dim,
        c: 3,
        k_star: 2,
        n_dup: 2,
        duplicate_window: 3,
        seed,
        ..EpisodeSpec::default()
    };
    let episode = generate_episode(&spec, &Task::new(&spec)?, 0)?;
    let noise = sample_gumbel(&mut stream(seed, "noise", &[0]), cfg.n_frames);
    let opts = ForwardOptions {
        noise: Some(&noise),
        tau: 1.0,
        weights: model.loss_weights(0.55),
        gate: GateMode::Soft,
    };

    let mut terms = Vec::with_capacity(TERMS.len());
    for (which, name) in TERMS.iter().enumerate() {
        let report = finite_diff_check(&model.store, EPSILON, |g: &mut Graph| {
            let out = model.forward(g, &episode, &opts).map_err(|e| match e {
                crate::Error::Diff(d) => d,
                other => crate::diffmath::DiffError::InvalidArgument(other.to_string()),
            })?;
            Ok([out.ce, out.kl, out.sep, out.rel, out.cov, out.red, out.f_set, out.total][which])
        })?;
        terms.push(TermCheck {
            term: name.to_string(),
            max_rel_error: report.max_rel_error,
            entries: report.entries_checked,
        });
    }
    let passed = terms.iter().all(|t| t.max_rel_error < GRADCHECK_TOLERANCE);
    Ok(GradcheckReport {
        seed,
        tolerance: GRADCHECK_TOLERANCE,
        terms,
        passed,
    })
}
