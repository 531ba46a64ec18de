//! Task-query generation: a token embedding table, two small full-attention
//! encoders (trace encoder and context aggregator), interpolated query
//! positions and the query separation loss.

use rand::Rng;

use crate::diffmath::{DiffError, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Dense};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    CotPrompt,
    QuestionOptions,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub token_ids: Vec<usize>,
    pub role: TokenRole,
}

impl TokenSequence {
    /// The fixed synthetic reasoning prompt of length `len`.
    pub fn cot_prompt(len: usize, vocab: usize) -> Self {
        let token_ids = (0..len).map(|i| (7 * i + 3) % vocab.max(1)).collect();
        Self {
            token_ids,
            role: TokenRole::CotPrompt,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub mlp_in: Dense,
    pub mlp_out: Dense,
}

/// Single-head, full-attention residual encoder without normalization:
/// `x ← x + softmax(QKᵀ/√d)V`, then `x ← x + tanh(xW₁+b₁)W₂+b₂` per layer.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub dim: usize,
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        n_layers: usize,
        mlp_hidden: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let layers = (0..n_layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                EncoderLayer {
                    wq: store.insert(format!("{p}.wq"), normal_tensor(rng, &[dim, dim], std)),
                    wk: store.insert(format!("{p}.wk"), normal_tensor(rng, &[dim, dim], std)),
                    wv: store.insert(format!("{p}.wv"), normal_tensor(rng, &[dim, dim], std)),
                    mlp_in: Dense::init(store, &format!("{p}.mlp_in"), dim, mlp_hidden, 1.0, rng),
                    mlp_out: Dense::init(store, &format!("{p}.mlp_out"), mlp_hidden, dim, 0.5, rng),
                }
            })
            .collect();
        Self { dim, layers }
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let shape = g.value(x).shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::invalid(format!(
                "encoder expects [len, {}] input, got {shape:?}",
                self.dim
            )));
        }
        if shape[0] == 0 {
            return Err(Error::invalid("encoder input is empty"));
        }
        Ok(())
    }

    /// One layer, producing outputs only for the rows listed in `rows`
    /// (all rows when `None`). Keys and values always cover the whole input.
    fn layer(
        &self,
        g: &mut Graph,
        layer: &EncoderLayer,
        x: Var,
        rows: Option<&[usize]>,
    ) -> Result<Var, DiffError> {
        let xq = match rows {
            Some(r) => g.select(x, r)?,
            None => x,
        };
        let wq = g.param(layer.wq)?;
        let wk = g.param(layer.wk)?;
        let wv = g.param(layer.wv)?;
        let q = g.matmul(xq, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let scores = g.matmul_t(q, k)?;
        let scores = g.scale(scores, 1.0 / (self.dim as f64).sqrt())?;
        let attn = g.softmax(scores, 1.0)?;
        let ctx = g.matmul(attn, v)?;
        let h = g.add(xq, ctx)?;
        let hid = layer.mlp_in.forward(g, h)?;
        let hid = g.tanh(hid)?;
        let out = layer.mlp_out.forward(g, hid)?;
        g.add(h, out)
    }

    /// Full hidden-state sequence `H`, same length as the input.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let mut h = x;
        for layer in &self.layers {
            h = self.layer(g, layer, h, None)?;
        }
        Ok(h)
    }

    /// Final hidden states at `rows` only (`[rows.len(), d]`). Equal to the
    /// matching rows of [`Encoder::encode`], without computing the rest of
    /// the last layer.
    pub fn encode_rows(&self, g: &mut Graph, x: Var, rows: &[usize]) -> Result<Var> {
        self.check_input(g, x)?;
        let len = g.value(x).rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= len) {
            return Err(Error::invalid(format!("row {bad} outside sequence of length {len}")));
        }
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (l, layer) in self.layers.iter().enumerate() {
            let sel = (l == last).then_some(rows);
            h = self.layer(g, layer, h, sel)?;
        }
        if self.layers.is_empty() {
            h = g.select(h, rows)?;
        }
        Ok(h)
    }
}

/// Trainable state of the query generator.
#[derive(Clone, Debug)]
pub struct QueryGenParams {
    pub dim: usize,
    pub vocab: usize,
    pub embedding: ParamId,
    pub theta1: Encoder,
    pub theta2: Encoder,
    /// Learnable aggregator token appended last to the fused sequence.
    pub q_agg: ParamId,
    /// Learnable query used in place of the task queries when CoT queries are disabled.
    pub static_query: ParamId,
}

impl QueryGenParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        dim: usize,
        vocab: usize,
        n_layers: usize,
        mlp_hidden: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let embedding = store.insert("querygen.embedding", normal_tensor(rng, &[vocab, dim], std));
        let theta1 = Encoder::init(store, "querygen.theta1", dim, n_layers, mlp_hidden, rng);
        let theta2 = Encoder::init(store, "querygen.theta2", dim, n_layers, mlp_hidden, rng);
        let q_agg = store.insert("querygen.q_agg", normal_tensor(rng, &[dim], std));
        let static_query = store.insert("querygen.static_query", normal_tensor(rng, &[dim], std));
        Self {
            dim,
            vocab,
            embedding,
            theta1,
            theta2,
            q_agg,
            static_query,
        }
    }
}

/// Looks up one embedding row per token (`[len, d]`; `[0, d]` when empty).
pub fn embed_tokens(g: &mut Graph, seq: &TokenSequence, params: &QueryGenParams) -> Result<Var> {
    if let Some(&bad) = seq.token_ids.iter().find(|&&t| t >= params.vocab) {
        return Err(Error::invalid(format!(
            "token id {bad} outside vocabulary of size {}",
            params.vocab
        )));
    }
    let table = g.param(params.embedding)?;
    Ok(g.select(table, &seq.token_ids)?)
}

/// `j_k = floor((k−1)/(K−1)·(total_len−1))` for `k = 1..K`; `K = 1` picks the
/// last position.
pub fn sample_query_positions(k: usize, total_len: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("at least one query position is required"));
    }
    if total_len < k {
        return Err(Error::invalid(format!(
            "sequence length {total_len} is shorter than the number of queries {k}"
        )));
    }
    if k == 1 {
        return Ok(vec![total_len - 1]);
    }
    Ok((0..k).map(|i| i * (total_len - 1) / (k - 1)).collect())
}

/// Mean squared pairwise cosine of the queries, `2/(K(K−1)) Σ_{i<j} cos²`.
/// Fewer than two queries give 0.
pub fn separation_loss(g: &mut Graph, queries: &[Var]) -> Result<Var> {
    let k = queries.len();
    if k < 2 {
        log::debug!("separation loss with {k} queries is defined as 0");
        return Ok(g.constant_scalar(0.0)?);
    }
    let mut terms = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            let c = g.cosine(queries[i], queries[j])?;
            terms.push(g.mul(c, c)?);
        }
    }
    let rows = reshape_scalars(g, &terms)?;
    let stacked = g.concat_rows(&rows)?;
    let total = g.sum(stacked)?;
    Ok(g.scale(total, 2.0 / (k * (k - 1)) as f64)?)
}

fn reshape_scalars(g: &mut Graph, xs: &[Var]) -> Result<Vec<Var>, DiffError> {
    xs.iter().map(|&x| g.reshape(x, vec![1])).collect()
}

/// Separation loss on plain vectors.
pub fn separation_loss_value(queries: &[Vec<f64>]) -> f64 {
    let k = queries.len();
    if k < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let c = crate::diffmath::cosine(&queries[i], &queries[j]);
            acc += c * c;
        }
    }
    acc * 2.0 / (k * (k - 1)) as f64
}

/// Hidden states of the trace encoder over `[E_CoT ; E_qa]`, sampled at the
/// interpolated query positions.
pub struct TaskQueries {
    pub queries: Vec<Var>,
    pub positions: Vec<usize>,
}

pub fn task_queries(
    g: &mut Graph,
    params: &QueryGenParams,
    prompt: &TokenSequence,
    e_qa: Var,
    k: usize,
) -> Result<TaskQueries> {
    let e_cot = embed_tokens(g, prompt, params)?;
    let input = if prompt.is_empty() {
        e_qa
    } else {
        g.concat_rows(&[e_cot, e_qa])?
    };
    let total_len = g.value(input).rows();
    let positions = sample_query_positions(k, total_len)?;
    let h = params.theta1.encode_rows(g, input, &positions)?;
    let queries = (0..k).map(|i| g.row(h, i)).collect::<Result<Vec<_>, _>>()?;
    Ok(TaskQueries { queries, positions })
}

/// Last hidden state of the aggregator over `[E_v ; E_qa ; queries ; q_agg]`.
pub fn aggregate_context(
    g: &mut Graph,
    e_v: Var,
    e_qa: Var,
    queries: &[Var],
    q_agg: Var,
    theta2: &Encoder,
) -> Result<Var> {
    let ev = g.value(e_v);
    if ev.rank() != 2 || ev.rows() == 0 {
        return Err(Error::invalid(format!(
            "frame features must be a non-empty [N, d] matrix, got {:?}",
            ev.shape()
        )));
    }
    let mut parts = Vec::with_capacity(queries.len() + 3);
    parts.push(e_v);
    parts.push(e_qa);
    parts.extend_from_slice(queries);
    parts.push(q_agg);
    let fused = g.concat_rows(&parts)?;
    let last = g.value(fused).rows() - 1;
    let h = theta2.encode_rows(g, fused, &[last])?;
    Ok(g.reshape(h, vec![theta2.dim])?)
}
