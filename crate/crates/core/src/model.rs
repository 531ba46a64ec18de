//! The full trainable model and its per-episode forward pass.

use crate::config::TrainConfig;
use crate::diffmath::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::formats::FeatureMatrix;
use crate::mutual::{ce_loss, kl_loss, teacher_forward, total_loss, LossBreakdown, LossWeights, TeacherParams};
use crate::querygen::{aggregate_context, separation_loss, task_queries, QueryGenParams, TokenSequence};
use crate::rng::stream;
use crate::selector::{gumbel_topk, score_frames, student_distribution, top_k, ScorerParams};
use crate::setobj::{kernel_matrix, set_objective_graph};
use crate::synthdata::Episode;

/// How the selected features are gated on their way into the teacher.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Forward value 1, gradient of the soft mask.
    StraightThrough,
    /// Forward value and gradient of the soft mask.
    Soft,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions<'a> {
    /// Frozen Gumbel draw, `None` for the noiseless ranking.
    pub noise: Option<&'a [f64]>,
    pub tau: f64,
    pub weights: LossWeights,
    pub gate: GateMode,
}

/// Graph handles and values from one training forward pass.
#[derive(Clone, Debug)]
pub struct EpisodeForward {
    pub total: Var,
    pub ce: Var,
    pub kl: Var,
    pub sep: Var,
    pub f_set: Var,
    pub rel: Var,
    pub cov: Var,
    pub red: Var,
    pub breakdown: LossBreakdown,
    pub hard_set: Vec<usize>,
}

/// Noiseless inference result for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub scores: Vec<f64>,
    /// Hard top-k of the scores, ascending.
    pub selected: Vec<usize>,
    /// Teacher answer logits over the selected frames.
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct HfsModel {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub querygen: QueryGenParams,
    pub scorer: ScorerParams,
    pub teacher: TeacherParams,
    pub prompt: TokenSequence,
}

fn matrix(rows: &[Vec<f64>], d: usize, what: &str) -> Result<Tensor> {
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid(format!("{what} rows must have length {d}")));
    }
    Ok(Tensor::from_rows(rows, d)?)
}

fn to_row(g: &mut Graph, v: Var, d: usize) -> Result<Var> {
    Ok(g.reshape(v, vec![1, d])?)
}

impl HfsModel {
    /// Fresh parameters drawn from the `init` stream of `config.seed`.
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, "init", &[]);
        let mut store = ParamStore::new();
        let d = config.dim;
        let querygen = QueryGenParams::init(
            &mut store,
            d,
            config.vocab_size,
            config.encoder_layers,
            config.encoder_mlp_hidden,
            &mut rng,
        );
        let scorer = ScorerParams::init(&mut store, d, config.scorer_hidden, &mut rng);
        let teacher = TeacherParams::init(
            &mut store,
            d,
            config.teacher_hidden,
            config.teacher_mlp_hidden,
            config.teacher_readout_gain,
            &mut rng,
        );
        Ok(Self {
            config: config.clone(),
            store,
            querygen,
            scorer,
            teacher,
            prompt: TokenSequence::cot_prompt(config.prompt_len, config.vocab_size),
        })
    }

    /// Same architecture as [`HfsModel::init`], with the parameter values of `store`.
    pub fn with_params(config: &TrainConfig, store: ParamStore) -> Result<Self> {
        let mut model = Self::init(config)?;
        if store.len() != model.store.len() {
            return Err(Error::Malformed {
                location: "parameters".into(),
                detail: format!("expected {} tensors, found {}", model.store.len(), store.len()),
            });
        }
        for (id, name, t) in model.store.iter() {
            let (other_name, other) = (store.name(id), store.get(id));
            if other_name != name || other.shape() != t.shape() {
                return Err(Error::Malformed {
                    location: format!("parameter {name}"),
                    detail: format!("found {other_name} with shape {:?}", other.shape()),
                });
            }
        }
        model.store = store;
        Ok(model)
    }

    fn check_frames(&self, frames: &FeatureMatrix) -> Result<()> {
        if frames.d != self.config.dim {
            return Err(Error::invalid(format!(
                "features have dimension {}, model expects {}",
                frames.d, self.config.dim
            )));
        }
        if frames.n < self.config.k_sel {
            return Err(Error::invalid(format!(
                "cannot select {} of {} frames",
                self.config.k_sel, frames.n
            )));
        }
        Ok(())
    }

    /// Aggregated query and frame scores. `context` holds the question/option
    /// rows (`E_qa`).
    fn score_graph(&self, g: &mut Graph, frames: &FeatureMatrix, context: &[Vec<f64>]) -> Result<(Var, Var, Var)> {
        let d = self.config.dim;
        if context.is_empty() {
            return Err(Error::invalid("at least one context row is required"));
        }
        let e_v = g.input(Tensor::matrix(frames.n, d, frames.features.clone())?)?;
        let e_qa = g.input(matrix(context, d, "context")?)?;
        let (queries, sep) = if self.config.disable_cot_query {
            let q = g.param(self.querygen.static_query)?;
            (vec![to_row(g, q, d)?], None)
        } else {
            let tq = task_queries(g, &self.querygen, &self.prompt, e_qa, self.config.num_queries)?;
            let sep = if self.config.disable_sep {
                None
            } else {
                Some(separation_loss(g, &tq.queries)?)
            };
            let rows = tq
                .queries
                .iter()
                .map(|&q| to_row(g, q, d))
                .collect::<Result<Vec<_>>>()?;
            (rows, sep)
        };
        let q_agg = g.param(self.querygen.q_agg)?;
        let q_agg = to_row(g, q_agg, d)?;
        let q_hat = aggregate_context(g, e_v, e_qa, &queries, q_agg, &self.querygen.theta2)?;
        let s = score_frames(g, e_v, q_hat, &self.scorer)?;
        let sep = match sep {
            Some(v) => v,
            None => g.constant_scalar(0.0)?,
        };
        Ok((e_v, s, sep))
    }

    /// Frame scores for arbitrary features and context rows.
    pub fn scores(&self, frames: &FeatureMatrix, context: &[Vec<f64>]) -> Result<Vec<f64>> {
        if frames.d != self.config.dim {
            return Err(Error::invalid(format!(
                "features have dimension {}, model expects {}",
                frames.d, self.config.dim
            )));
        }
        let mut g = Graph::new(&self.store);
        let (_, s, _) = self.score_graph(&mut g, frames, context)?;
        Ok(g.value(s).data().to_vec())
    }

    /// Noiseless hard top-k selection plus the teacher's logits on it.
    pub fn predict(&self, episode: &Episode) -> Result<Prediction> {
        self.check_frames(&episode.frames)?;
        let mut g = Graph::new(&self.store);
        let (e_v, s, _) = self.score_graph(&mut g, &episode.frames, &qa_rows(episode))?;
        let scores = g.value(s).data().to_vec();
        let selected = top_k(&scores, self.config.k_sel);
        let feats = g.select(e_v, &selected)?;
        let (q, o) = self.question_options(&mut g, episode)?;
        let out = teacher_forward(&mut g, feats, q, o, &self.teacher)?;
        Ok(Prediction {
            scores,
            selected,
            logits: g.value(out.logits).data().to_vec(),
        })
    }

    fn question_options(&self, g: &mut Graph, episode: &Episode) -> Result<(Var, Var)> {
        let d = self.config.dim;
        if episode.question.len() != d {
            return Err(Error::invalid(format!("question must have length {d}")));
        }
        let q = g.input(Tensor::vector(episode.question.clone()))?;
        let o = g.input(matrix(&episode.options, d, "option")?)?;
        Ok((q, o))
    }

    /// Training forward pass: queries, aggregation, scoring, relaxed top-k,
    /// set objective, gated teacher, and the loss terms.
    pub fn forward(&self, g: &mut Graph, episode: &Episode, opts: &ForwardOptions) -> Result<EpisodeForward> {
        self.check_frames(&episode.frames)?;
        if episode.answer >= episode.options.len() {
            return Err(Error::invalid(format!(
                "answer {} outside {} options",
                episode.answer,
                episode.options.len()
            )));
        }
        let cfg = &self.config;
        let (e_v, s, sep) = self.score_graph(g, &episode.frames, &qa_rows(episode))?;
        let sel = gumbel_topk(g, s, opts.noise, opts.tau, cfg.k_sel)?;
        let kernel = kernel_matrix(&episode.frames.timestamps, cfg.set_objective.gamma);
        let terms = set_objective_graph(g, s, sel.mask, &kernel, &cfg.set_objective)?;

        let m_sel = g.select(sel.mask, &sel.hard_set)?;
        let gate = match opts.gate {
            GateMode::Soft => m_sel,
            GateMode::StraightThrough => {
                let frozen = g.stop_grad(m_sel)?;
                let delta = g.sub(m_sel, frozen)?;
                g.affine(delta, 1.0, 1.0)?
            }
        };
        let feats = g.select(e_v, &sel.hard_set)?;
        let feats = g.scale_rows(feats, gate)?;
        let (q, o) = self.question_options(g, episode)?;
        let teacher = teacher_forward(g, feats, q, o, &self.teacher)?;
        let ce = ce_loss(g, teacher.logits, episode.answer)?;
        let kl = if cfg.disable_kl {
            g.constant_scalar(0.0)?
        } else {
            let p_s = student_distribution(g, s, &sel.hard_set, cfg.tau_d)?;
            kl_loss(g, teacher.importance, p_s)?
        };
        let total = total_loss(g, ce, kl, terms.f, sep, &opts.weights)?;
        let breakdown = LossBreakdown {
            ce: g.scalar(ce),
            kl: g.scalar(kl),
            f_set: g.scalar(terms.f),
            rel: g.scalar(terms.rel),
            cov: g.scalar(terms.cov),
            red: g.scalar(terms.red),
            sep: g.scalar(sep),
            total: g.scalar(total),
            weights: opts.weights,
        };
        Ok(EpisodeForward {
            total,
            ce,
            kl,
            sep,
            f_set: terms.f,
            rel: terms.rel,
            cov: terms.cov,
            red: terms.red,
            breakdown,
            hard_set: sel.hard_set,
        })
    }

    /// Loss weights at a given `λ_KL`, with disabled components zeroed.
    pub fn loss_weights(&self, lambda_kl: f64) -> LossWeights {
        let c = &self.config;
        LossWeights {
            lambda_kl: if c.disable_kl { 0.0 } else { lambda_kl },
            lambda_set: if c.disable_set_objective { 0.0 } else { c.lambda_set },
            lambda_sep: if c.disable_sep || c.disable_cot_query { 0.0 } else { c.lambda_sep },
        }
    }
}

/// `E_qa`: the question followed by the option vectors.
pub fn qa_rows(episode: &Episode) -> Vec<Vec<f64>> {
    let mut rows = Vec::with_capacity(episode.options.len() + 1);
    rows.push(episode.question.clone());
    rows.extend(episode.options.iter().cloned());
    rows
}
