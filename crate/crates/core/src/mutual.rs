//! Stand-in teacher reasoner, the two importance distributions, the
//! cross-entropy and KL losses, and assembly of the total loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Dense};

/// Additive guard inside the KL logarithms.
pub const KL_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct TeacherParams {
    pub hidden: usize,
    /// Frame projection `d -> d_h`, producing `H_Mt`.
    pub frame_proj: Dense,
    /// Question context head `d -> d_h`, producing `h_con` (tanh).
    pub context: Dense,
    /// `MLP_t`: `[h_i ; h_con] -> ReLU -> scalar`.
    pub mlp_hidden: Dense,
    pub mlp_out: Dense,
    /// Answer head `[pooled ; h_con] (2·d_h) -> option space (d)`.
    pub answer_w: ParamId,
    pub answer_b: ParamId,
}

impl TeacherParams {
    /// The frame projection starts as the identity and the answer head as
    /// `readout_gain` times the identity on its pooled block, so the
    /// untrained teacher already reads the pooled features in option space.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        dim: usize,
        hidden: usize,
        mlp_hidden: usize,
        readout_gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut proj = normal_tensor(rng, &[dim, hidden], 0.1 / (dim as f64).sqrt());
        let mut answer = normal_tensor(rng, &[2 * hidden, dim], 0.1 / (hidden as f64).sqrt());
        for i in 0..dim.min(hidden) {
            proj.data_mut()[i * hidden + i] = 1.0;
            answer.data_mut()[i * dim + i] += readout_gain;
        }
        let frame_proj = Dense {
            w: store.insert("teacher.frame_proj.w", proj),
            b: store.insert("teacher.frame_proj.b", Tensor::zeros(&[hidden])),
        };
        let context = Dense::init(store, "teacher.context", dim, hidden, 1.0, rng);
        let mlp_hidden = Dense::init(store, "teacher.mlp_hidden", 2 * hidden, mlp_hidden, 1.0, rng);
        let mlp_out = Dense::init(store, "teacher.mlp_out", mlp_hidden_width(&mlp_hidden, store), 1, 1.0, rng);
        let answer_w = store.insert("teacher.answer.w", answer);
        let answer_b = store.insert("teacher.answer.b", Tensor::zeros(&[dim]));
        Self {
            hidden,
            frame_proj,
            context,
            mlp_hidden,
            mlp_out,
            answer_w,
            answer_b,
        }
    }
}

fn mlp_hidden_width(layer: &Dense, store: &ParamStore) -> usize {
    store.get(layer.w).cols()
}

/// Teacher outputs for one episode.
#[derive(Clone, Debug)]
pub struct TeacherOutput {
    /// Answer logits `z`, `[C]`.
    pub logits: Var,
    /// Per-frame hiddens `H_Mt`, `[k, d_h]`.
    pub hiddens: Var,
    /// Question context `h_con`, `[d_h]`.
    pub context: Var,
    /// Teacher importance `p_Mt`, `[k]`.
    pub importance: Var,
}

/// `softmax(MLP_t([h_i ; h_con]))` over the selected frames.
pub fn teacher_distribution(g: &mut Graph, hiddens: Var, context: Var, params: &TeacherParams) -> Result<Var> {
    let k = g.value(hiddens).rows();
    let ctx = g.repeat_rows(context, k)?;
    let x = g.concat_cols(hiddens, ctx)?;
    let h = params.mlp_hidden.forward(g, x)?;
    let h = g.relu(h)?;
    let logits = params.mlp_out.forward(g, h)?;
    let logits = g.reshape(logits, vec![k])?;
    Ok(g.softmax(logits, 1.0)?)
}

/// Runs the teacher over the (gated) selected frame features `[k, d]`.
/// The selected hiddens are pooled with the teacher's own importance
/// weights, concatenated with `h_con`, mapped to option space and scored
/// against each option vector.
pub fn teacher_forward(
    g: &mut Graph,
    features: Var,
    question: Var,
    options: Var,
    params: &TeacherParams,
) -> Result<TeacherOutput> {
    let c = g.value(options).rows();
    if g.value(options).rank() != 2 || c < 2 {
        return Err(Error::invalid(format!(
            "teacher needs at least 2 options, got shape {:?}",
            g.value(options).shape()
        )));
    }
    if g.value(features).rank() != 2 || g.value(features).rows() == 0 {
        return Err(Error::invalid("teacher needs a non-empty [k, d] frame matrix"));
    }
    let hiddens = params.frame_proj.forward(g, features)?;
    let context = params.context.forward(g, question)?;
    let context = g.tanh(context)?;
    let importance = teacher_distribution(g, hiddens, context, params)?;
    let pooled = g.matmul(importance, hiddens)?;
    let joint = g.concat_cols(pooled, context)?;
    let w = g.param(params.answer_w)?;
    let b = g.param(params.answer_b)?;
    let u = g.matmul(joint, w)?;
    let u = g.add(u, b)?;
    let logits = g.matmul_t(u, options)?;
    Ok(TeacherOutput {
        logits,
        hiddens,
        context,
        importance,
    })
}

/// `Σ_i p_t,i · (ln(p_t,i + ε) − ln(p_s,i + ε))`; gradients reach both sides.
pub fn kl_loss(g: &mut Graph, p_teacher: Var, p_student: Var) -> Result<Var> {
    let (a, b) = (g.value(p_teacher).shape(), g.value(p_student).shape());
    if a != b {
        return Err(Error::invalid(format!("KL over mismatched lengths {a:?} and {b:?}")));
    }
    let lt = g.ln(p_teacher, KL_EPS)?;
    let ls = g.ln(p_student, KL_EPS)?;
    let diff = g.sub(lt, ls)?;
    Ok(g.dot(p_teacher, diff)?)
}

pub fn kl_value(p_teacher: &[f64], p_student: &[f64]) -> f64 {
    p_teacher
        .iter()
        .zip(p_student)
        .map(|(t, s)| t * ((t + KL_EPS).ln() - (s + KL_EPS).ln()))
        .sum()
}

/// Index of the single 1 in a one-hot label vector.
pub fn one_hot_label(y: &[f64]) -> Result<usize> {
    let ones: Vec<usize> = y.iter().enumerate().filter(|(_, v)| **v == 1.0).map(|(i, _)| i).collect();
    if ones.len() != 1 || y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::invalid(format!("label is not one-hot: {y:?}")));
    }
    Ok(ones[0])
}

/// `−ln softmax(z)_y = logsumexp(z) − z_y`.
pub fn ce_loss(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    let c = g.value(logits).numel();
    if g.value(logits).rank() != 1 || label >= c {
        return Err(Error::invalid(format!("label {label} outside {c} classes")));
    }
    let lse = g.logsumexp(logits)?;
    let zy = g.element(logits, label)?;
    Ok(g.sub(lse, zy)?)
}

/// Weights applied to the auxiliary losses at one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_kl: f64,
    pub lambda_set: f64,
    pub lambda_sep: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kl: f64,
    pub f_set: f64,
    pub rel: f64,
    pub cov: f64,
    pub red: f64,
    pub sep: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// `ce + λ_KL·kl − λ_set·f_set + λ_sep·sep`, evaluated in the same order
    /// as [`total_loss`].
    pub fn reconstructed_total(&self) -> f64 {
        let w = &self.weights;
        self.ce + w.lambda_kl * self.kl - w.lambda_set * self.f_set + w.lambda_sep * self.sep
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.kl, self.f_set, self.rel, self.cov, self.red, self.sep, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Element-wise sum, used for batch totals.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.ce += other.ce;
        self.kl += other.kl;
        self.f_set += other.f_set;
        self.rel += other.rel;
        self.cov += other.cov;
        self.red += other.red;
        self.sep += other.sep;
        self.total += other.total;
        self.weights = other.weights;
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.ce *= c;
        self.kl *= c;
        self.f_set *= c;
        self.rel *= c;
        self.cov *= c;
        self.red *= c;
        self.sep *= c;
        self.total *= c;
        self
    }
}

/// `ce + λ_KL·kl − λ_set·f_set + λ_sep·sep` as a graph node.
pub fn total_loss(g: &mut Graph, ce: Var, kl: Var, f_set: Var, sep: Var, w: &LossWeights) -> Result<Var> {
    let a = g.scale(kl, w.lambda_kl)?;
    let t = g.add(ce, a)?;
    let b = g.scale(f_set, w.lambda_set)?;
    let t = g.sub(t, b)?;
    let c = g.scale(sep, w.lambda_sep)?;
    Ok(g.add(t, c)?)
}
