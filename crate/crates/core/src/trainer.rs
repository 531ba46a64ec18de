//! Optimization loop: schedules, AdamW, batching, metrics and evaluation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::diffmath::{DiffError, GradientMap, Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, GateMode, HfsModel};
use crate::mutual::LossBreakdown;
use crate::rng::stream;
use crate::selector::{anneal_temperature, sample_gumbel};
use crate::setobj::{mean_pairwise_kernel, set_objective, SetTerms};
use crate::synthdata::{evidence_recall, oracle_answer, uniform_grid, Episode};

/// AdamW moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One decoupled-decay Adam update:
/// `p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p`.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &GradientMap,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::invalid(format!(
            "optimizer has {} moments and {} gradients for {} parameters",
            state.m.len(),
            grads.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (i, &id) in ids.iter().enumerate() {
        let shape = store.get(id).shape();
        if grads.get(id).shape() != shape || state.m[i].shape() != shape || state.v[i].shape() != shape {
            return Err(Error::invalid(format!(
                "shape mismatch for parameter {}",
                store.name(id)
            )));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for (i, &id) in ids.iter().enumerate() {
        let g = grads.get(id).data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = store.get_mut(id).data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] = p[j] - cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps) - cfg.lr * cfg.weight_decay * p[j];
        }
    }
    Ok(())
}

/// `(τ, λ_KL)` at a step; `λ_KL` ramps linearly over the first `epoch_len` steps.
pub fn schedule(step: u64, epoch_len: u64, cfg: &TrainConfig) -> Result<(f64, f64)> {
    if epoch_len == 0 {
        return Err(Error::invalid("epoch length must be positive"));
    }
    let tau = anneal_temperature(step, &cfg.temperature);
    let frac = (step as f64 / epoch_len as f64).min(1.0);
    let lambda_kl = cfg.lambda_kl_start + (cfg.lambda_kl_end - cfg.lambda_kl_start) * frac;
    Ok((tau, lambda_kl))
}

/// One metrics line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub tau: f64,
    /// Batch mean of each loss term.
    pub loss: LossBreakdown,
}

/// Training state over a fixed dataset.
pub struct Trainer<'a> {
    pub model: HfsModel,
    pub optimizer: OptimizerState,
    episodes: &'a [Episode],
}

impl<'a> Trainer<'a> {
    pub fn new(config: &TrainConfig, episodes: &'a [Episode]) -> Result<Self> {
        let model = HfsModel::init(config)?;
        Self::resume(model, None, episodes)
    }

    /// Continues from existing parameters and optimizer state.
    pub fn resume(model: HfsModel, optimizer: Option<OptimizerState>, episodes: &'a [Episode]) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::invalid("training needs at least one episode"));
        }
        let optimizer = optimizer.unwrap_or_else(|| OptimizerState::new(&model.store));
        if optimizer.m.len() != model.store.len() {
            return Err(Error::invalid("optimizer state does not match the model"));
        }
        Ok(Self {
            model,
            optimizer,
            episodes,
        })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.episodes.len().div_ceil(self.model.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.model.config.epochs as u64
    }

    /// Dataset positions in the batch at `step`; each epoch is a fresh
    /// seeded permutation.
    pub fn batch_positions(&self, step: u64) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let mut order: Vec<usize> = (0..self.episodes.len()).collect();
        order.shuffle(&mut stream(self.model.config.seed, "shuffle", &[epoch]));
        let b = self.model.config.batch_size;
        let start = (step % spe) as usize * b;
        order[start..(start + b).min(order.len())].to_vec()
    }

    /// Forward and backward over one batch, gradients summed in batch order,
    /// then one optimizer step.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.optimizer.step;
        let spe = self.steps_per_epoch();
        let (tau, lambda_kl) = schedule(step, spe, &self.model.config)?;
        let weights = self.model.loss_weights(lambda_kl);
        let n = self.model.config.n_frames;
        let mut sum = LossBreakdown::default();
        let mut grads: Option<GradientMap> = None;
        let positions = self.batch_positions(step);
        for &pos in &positions {
            let ep = &self.episodes[pos];
            let noise = sample_gumbel(&mut stream(self.model.config.seed, "noise", &[step, ep.index]), n);
            let mut g = Graph::new(&self.model.store);
            let opts = ForwardOptions {
                noise: Some(&noise),
                tau,
                weights,
                gate: GateMode::StraightThrough,
            };
            let out = match self.model.forward(&mut g, ep, &opts) {
                Err(Error::Diff(e @ DiffError::NonFinite { .. })) => {
                    return Err(Error::NonFiniteLoss {
                        step,
                        breakdown: format!("episode {}: {e}; batch loss sums so far {}", ep.index, serde_json::to_string(&sum)?),
                    })
                }
                r => r?,
            };
            if !out.breakdown.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    breakdown: serde_json::to_string(&out.breakdown)?,
                });
            }
            sum.accumulate(&out.breakdown);
            let eg = g.backward(out.total)?;
            match grads.as_mut() {
                Some(acc) => acc.accumulate(&eg),
                None => grads = Some(eg),
            }
        }
        let grads = grads.expect("batch is non-empty");
        if !grads.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                breakdown: format!("non-finite gradient; batch loss sums {}", serde_json::to_string(&sum)?),
            });
        }
        adamw_step(&mut self.model.store, &grads, &mut self.optimizer, &self.model.config)?;
        if let Some((_, name, _)) = self.model.store.iter().find(|(_, _, t)| !t.is_finite()) {
            return Err(Error::NonFiniteParam {
                step,
                name: name.to_string(),
            });
        }
        Ok(StepRecord {
            step,
            epoch: step / spe,
            tau,
            loss: sum.scaled(1.0 / positions.len() as f64),
        })
    }

    /// Trains until `until` steps have been taken (default: all epochs),
    /// writing a metrics line every `metrics_every` steps and on the last one.
    pub fn run(&mut self, until: Option<u64>, mut metrics: Option<&mut dyn Write>) -> Result<Vec<StepRecord>> {
        let end = until.unwrap_or_else(|| self.total_steps()).min(self.total_steps());
        let every = self.model.config.metrics_every.max(1);
        let mut records = Vec::new();
        while self.optimizer.step < end {
            let rec = self.train_step()?;
            if let Some(w) = metrics.as_deref_mut() {
                if rec.step % every == 0 || rec.step + 1 == self.total_steps() {
                    writeln!(w, "{}", serde_json::to_string(&rec)?)?;
                }
            }
            log::debug!("step {} total {:.6}", rec.step, rec.loss.total);
            records.push(rec);
        }
        Ok(records)
    }
}

/// Dataset-level metrics of noiseless hard selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    /// Oracle reasoner accuracy on the selected frames.
    pub oracle_accuracy: f64,
    /// Accuracy of the learned teacher on the selected frames.
    pub teacher_accuracy: f64,
    pub evidence_recall: f64,
    /// Fraction of selected frames that are near-copies of the anchor.
    pub duplicate_fraction: f64,
    pub mean_pairwise_kernel_similarity: f64,
    pub mean_f: f64,
    pub mean_rel: f64,
    pub mean_cov: f64,
    pub mean_red: f64,
    pub uniform_evidence_recall: f64,
    pub uniform_oracle_accuracy: f64,
    pub uniform_kernel_similarity: f64,
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Evaluates hard noiseless top-k selection on every episode.
pub fn evaluate(model: &HfsModel, episodes: &[Episode]) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(Error::invalid("evaluation needs at least one episode"));
    }
    let cfg = &model.config;
    let gamma = cfg.set_objective.gamma;
    let mut acc = EvalSums::default();
    for ep in episodes {
        let pred = model.predict(ep)?;
        let t = &ep.frames.timestamps;
        let mut mask = vec![0.0; ep.frames.n];
        for &i in &pred.selected {
            mask[i] = 1.0;
        }
        let terms = set_objective(&pred.scores, &mask, t, &cfg.set_objective)?;
        acc.oracle += f64::from(u8::from(oracle_answer(ep, &pred.selected)? == ep.answer));
        acc.teacher += f64::from(u8::from(argmax(&pred.logits) == ep.answer));
        acc.recall += evidence_recall(&pred.selected, &ep.evidence);
        acc.dup += pred.selected.iter().filter(|i| ep.duplicates.contains(i)).count() as f64 / cfg.k_sel as f64;
        acc.kernel += mean_pairwise_kernel(&pred.selected, t, gamma);
        acc.terms.add(&terms);

        let grid = uniform_grid(ep.frames.n, cfg.k_sel);
        acc.u_recall += evidence_recall(&grid, &ep.evidence);
        acc.u_oracle += f64::from(u8::from(oracle_answer(ep, &grid)? == ep.answer));
        acc.u_kernel += mean_pairwise_kernel(&grid, t, gamma);
    }
    let n = episodes.len() as f64;
    Ok(EvalReport {
        episodes: episodes.len(),
        oracle_accuracy: acc.oracle / n,
        teacher_accuracy: acc.teacher / n,
        evidence_recall: acc.recall / n,
        duplicate_fraction: acc.dup / n,
        mean_pairwise_kernel_similarity: acc.kernel / n,
        mean_f: acc.terms.f / n,
        mean_rel: acc.terms.rel / n,
        mean_cov: acc.terms.cov / n,
        mean_red: acc.terms.red / n,
        uniform_evidence_recall: acc.u_recall / n,
        uniform_oracle_accuracy: acc.u_oracle / n,
        uniform_kernel_similarity: acc.u_kernel / n,
    })
}

#[derive(Default)]
struct EvalSums {
    oracle: f64,
    teacher: f64,
    recall: f64,
    dup: f64,
    kernel: f64,
    terms: TermSums,
    u_recall: f64,
    u_oracle: f64,
    u_kernel: f64,
}

#[derive(Default)]
struct TermSums {
    f: f64,
    rel: f64,
    cov: f64,
    red: f64,
}

impl TermSums {
    fn add(&mut self, t: &SetTerms<f64>) {
        self.f += t.f;
        self.rel += t.rel;
        self.cov += t.cov;
        self.red += t.red;
    }
}
