//! Per-frame relevance scoring and the Gumbel-TopK selection relaxation.

use rand::Rng;

use crate::config::TemperatureSchedule;
use crate::diffmath::{softmax, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::Dense;

/// Additive guard inside the logarithms of the relaxation.
pub const LOG_EPS: f64 = 1e-8;

/// `MLP_s`: `[e_i ; q̂] -> ReLU hidden -> scalar`.
#[derive(Clone, Debug)]
pub struct ScorerParams {
    pub hidden: Dense,
    pub out: Dense,
}

impl ScorerParams {
    pub fn init<R: Rng>(store: &mut ParamStore, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            hidden: Dense::init(store, "scorer.hidden", 2 * dim, hidden, 1.0, rng),
            out: Dense::init(store, "scorer.out", hidden, 1, 1.0, rng),
        }
    }
}

/// Relevance scores `s_i = sigmoid(MLP_s([e_i ; q̂]))`, shape `[N]`.
pub fn score_frames(g: &mut Graph, e_v: Var, q_hat: Var, params: &ScorerParams) -> Result<Var> {
    let ev = g.value(e_v);
    if ev.rank() != 2 || ev.rows() == 0 {
        return Err(Error::invalid(format!(
            "frame features must be a non-empty [N, d] matrix, got {:?}",
            ev.shape()
        )));
    }
    let n = ev.rows();
    let q = g.repeat_rows(q_hat, n)?;
    let x = g.concat_cols(e_v, q)?;
    let h = params.hidden.forward(g, x)?;
    let h = g.relu(h)?;
    let logits = params.out.forward(g, h)?;
    let logits = g.reshape(logits, vec![n])?;
    Ok(g.sigmoid(logits)?)
}

/// `g = −ln(−ln u)` with `u` uniform on the open interval (0, 1).
pub fn sample_gumbel<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mut u: f64 = rng.random();
            while u <= 0.0 {
                u = rng.random();
            }
            -(-u.ln()).ln()
        })
        .collect()
}

/// Indices of the `k` largest values (ties to the smaller index), returned ascending.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut sel: Vec<usize> = order.into_iter().take(k).collect();
    sel.sort_unstable();
    sel
}

fn check_selection_args(n: usize, tau: f64, k: usize, noise_len: Option<usize>) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k_sel must be in 1..={n}, got {k}")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    if let Some(len) = noise_len {
        if len != n {
            return Err(Error::invalid(format!("noise has length {len}, scores {n}")));
        }
    }
    Ok(())
}

/// Output of the relaxation inside a graph.
#[derive(Clone, Debug)]
pub struct Selection {
    /// Soft mask `m ∈ [0,1]^N`.
    pub mask: Var,
    /// Hard index set, ascending.
    pub hard_set: Vec<usize>,
    /// Perturbed keys `ln(s+1e-8) + g`.
    pub keys: Vec<f64>,
    /// `Σ_i m_i` before clamping.
    pub unclamped_sum: f64,
}

/// Relaxed top-k without replacement. `noise` is the frozen Gumbel draw
/// (`None` for the noiseless ranking).
///
/// `p^(r) = softmax((κ + Σ_{r'<r} ln(1 − p^(r') + 1e-8)) / τ)`, `m = clamp(Σ_r p^(r), 0, 1)`,
/// and the hard set is the top-k of the same keys `κ`.
pub fn gumbel_topk(
    g: &mut Graph,
    s: Var,
    noise: Option<&[f64]>,
    tau: f64,
    k: usize,
) -> Result<Selection> {
    let sv = g.value(s);
    if sv.rank() != 1 {
        return Err(Error::invalid(format!("scores must be a vector, got {:?}", sv.shape())));
    }
    let n = sv.cols();
    check_selection_args(n, tau, k, noise.map(<[f64]>::len))?;
    let log_s = g.ln(s, LOG_EPS)?;
    let keys = match noise {
        Some(z) => {
            let z = g.input(crate::diffmath::Tensor::vector(z.to_vec()))?;
            g.add(log_s, z)?
        }
        None => log_s,
    };
    let key_values = g.value(keys).data().to_vec();
    let mut logits = keys;
    let mut total: Option<Var> = None;
    for r in 0..k {
        let p = g.softmax(logits, tau)?;
        total = Some(match total {
            Some(t) => g.add(t, p)?,
            None => p,
        });
        if r + 1 < k {
            let clipped = g.clamp(p, 0.0, 1.0 - LOG_EPS)?;
            let rest = g.affine(clipped, -1.0, 1.0)?;
            let log_rest = g.ln(rest, LOG_EPS)?;
            logits = g.add(logits, log_rest)?;
        }
    }
    let total = total.expect("k >= 1");
    let unclamped_sum = g.value(total).data().iter().sum();
    let mask = g.clamp01(total)?;
    Ok(Selection {
        mask,
        hard_set: top_k(&key_values, k),
        keys: key_values,
        unclamped_sum,
    })
}

/// Plain-value snapshot of one selection.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionState {
    pub scores: Vec<f64>,
    pub soft_mask: Vec<f64>,
    pub hard_set: Vec<usize>,
    pub tau: f64,
    pub gumbel_noise: Vec<f64>,
}

/// Same relaxation as [`gumbel_topk`] on plain values.
pub fn gumbel_topk_values(
    s: &[f64],
    noise: Option<&[f64]>,
    tau: f64,
    k: usize,
) -> Result<SelectionState> {
    let n = s.len();
    check_selection_args(n, tau, k, noise.map(<[f64]>::len))?;
    let keys: Vec<f64> = match noise {
        Some(z) => s.iter().zip(z).map(|(v, g)| (v + LOG_EPS).ln() + g).collect(),
        None => s.iter().map(|v| (v + LOG_EPS).ln()).collect(),
    };
    let mut logits = keys.clone();
    let mut total = vec![0.0; n];
    for r in 0..k {
        let p = softmax(&logits, tau);
        for (t, v) in total.iter_mut().zip(&p) {
            *t += v;
        }
        if r + 1 < k {
            for (l, v) in logits.iter_mut().zip(&p) {
                *l += (1.0 - v.min(1.0 - LOG_EPS) + LOG_EPS).ln();
            }
        }
    }
    Ok(SelectionState {
        scores: s.to_vec(),
        soft_mask: total.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        hard_set: top_k(&keys, k),
        tau,
        gumbel_noise: noise.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]),
    })
}

/// `τ = max(min, init · decay^step)`.
pub fn anneal_temperature(step: u64, schedule: &TemperatureSchedule) -> f64 {
    (schedule.init * schedule.decay.powf(step as f64)).max(schedule.min)
}

/// Softmax of the selected scores over `τ_d`, in ascending frame order.
pub fn student_distribution(g: &mut Graph, s: Var, hard_set: &[usize], tau_d: f64) -> Result<Var> {
    if !(tau_d > 0.0 && tau_d.is_finite()) {
        return Err(Error::invalid(format!("distillation temperature must be > 0, got {tau_d}")));
    }
    if hard_set.is_empty() || hard_set.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("selected set must be non-empty, strictly ascending"));
    }
    let picked = g.select(s, hard_set)?;
    Ok(g.softmax(picked, tau_d)?)
}
