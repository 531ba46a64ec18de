//! Set-quality objective `F(m) = λ_rel·Rel + λ_cov·Cov − λ_red·Red` over a
//! soft selection mask, plus an exhaustive maximizer and a relaxed
//! gradient-ascent maximizer used to cross-check each other.

use rand::Rng;
use serde::Serialize;

use crate::config::SetObjectiveConfig;
use crate::diffmath::{logsumexp, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::selector::{gumbel_topk, top_k};

/// Upper bound on the number of subsets [`brute_force_best_set`] enumerates.
pub const ENUMERATION_BUDGET: u128 = 1_000_000;

/// `exp(−(t_i − t_j)² / (2γ²))`.
pub fn temporal_kernel(ti: f64, tj: f64, gamma: f64) -> f64 {
    let d = ti - tj;
    (-d * d / (2.0 * gamma * gamma)).exp()
}

/// Pairwise kernel matrix with a zero diagonal, `[N, N]`.
pub fn kernel_matrix(t: &[f64], gamma: f64) -> Tensor {
    let n = t.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                data[i * n + j] = temporal_kernel(t[i], t[j], gamma);
            }
        }
    }
    Tensor::matrix(n, n, data).expect("square")
}

fn check_lengths(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{what}: lengths {a} and {b} differ")));
    }
    Ok(())
}

fn check_tau(tau_c: f64) -> Result<()> {
    if !(tau_c > 0.0 && tau_c.is_finite()) {
        return Err(Error::invalid(format!("coverage temperature must be > 0, got {tau_c}")));
    }
    Ok(())
}

/// The three raw terms and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SetTerms<T> {
    pub f: T,
    pub rel: T,
    pub cov: T,
    pub red: T,
}

pub fn relevance(s: &[f64], m: &[f64]) -> Result<f64> {
    check_lengths("relevance", s.len(), m.len())?;
    Ok(s.iter().zip(m).map(|(a, b)| a * b).sum())
}

pub fn coverage(s: &[f64], m: &[f64], tau_c: f64) -> Result<f64> {
    check_lengths("coverage", s.len(), m.len())?;
    check_tau(tau_c)?;
    if s.is_empty() {
        return Err(Error::invalid("coverage of an empty frame set"));
    }
    let z: Vec<f64> = s.iter().zip(m).map(|(a, b)| a * b / tau_c).collect();
    Ok(tau_c * logsumexp(&z))
}

/// `Σ_i Σ_{j≠i} m_i m_j K(t_i, t_j)`; each unordered pair counts twice.
pub fn redundancy(m: &[f64], t: &[f64], gamma: f64) -> Result<f64> {
    check_lengths("redundancy", m.len(), t.len())?;
    let mut acc = 0.0;
    for i in 0..m.len() {
        if m[i] == 0.0 {
            continue;
        }
        for j in 0..m.len() {
            if j != i {
                acc += m[i] * m[j] * temporal_kernel(t[i], t[j], gamma);
            }
        }
    }
    Ok(acc)
}

pub fn set_objective(s: &[f64], m: &[f64], t: &[f64], cfg: &SetObjectiveConfig) -> Result<SetTerms<f64>> {
    let rel = relevance(s, m)?;
    let cov = coverage(s, m, cfg.tau_c)?;
    let red = redundancy(m, t, cfg.gamma)?;
    Ok(SetTerms {
        f: cfg.lambda_rel * rel + cfg.lambda_cov * cov - cfg.lambda_red * red,
        rel,
        cov,
        red,
    })
}

/// Graph form of [`set_objective`]; `s` and `m` are `[N]` nodes, `kernel` is
/// [`kernel_matrix`] of the timestamps.
pub fn set_objective_graph(
    g: &mut Graph,
    s: Var,
    m: Var,
    kernel: &Tensor,
    cfg: &SetObjectiveConfig,
) -> Result<SetTerms<Var>> {
    check_tau(cfg.tau_c)?;
    let n = g.value(m).numel();
    check_lengths("set objective", g.value(s).numel(), n)?;
    if kernel.shape() != [n, n] {
        return Err(Error::invalid(format!(
            "kernel shape {:?} does not match {n} frames",
            kernel.shape()
        )));
    }
    let sm = g.mul(s, m)?;
    let rel = g.sum(sm)?;
    let z = g.scale(sm, 1.0 / cfg.tau_c)?;
    let lse = g.logsumexp(z)?;
    let cov = g.scale(lse, cfg.tau_c)?;
    let k = g.input(kernel.clone())?;
    let km = g.matmul(m, k)?;
    let red = g.dot(km, m)?;
    let a = g.scale(rel, cfg.lambda_rel)?;
    let b = g.scale(cov, cfg.lambda_cov)?;
    let c = g.scale(red, cfg.lambda_red)?;
    let ab = g.add(a, b)?;
    let f = g.sub(ab, c)?;
    Ok(SetTerms { f, rel, cov, red })
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Exhaustive maximizer of `F` over hard masks with exactly `k` ones. Ties go
/// to the lexicographically smallest index set.
pub fn brute_force_best_set(
    s: &[f64],
    t: &[f64],
    cfg: &SetObjectiveConfig,
    k: usize,
) -> Result<(Vec<usize>, f64)> {
    let n = s.len();
    check_lengths("brute force", n, t.len())?;
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k_sel must be in 1..={n}, got {k}")));
    }
    let count = binomial(n, k);
    if count > ENUMERATION_BUDGET {
        return Err(Error::Budget {
            count,
            limit: ENUMERATION_BUDGET,
        });
    }
    let mut idx: Vec<usize> = (0..k).collect();
    let mut mask = vec![0.0; n];
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        mask.iter_mut().for_each(|v| *v = 0.0);
        for &i in &idx {
            mask[i] = 1.0;
        }
        let f = set_objective(s, &mask, t, cfg)?.f;
        if best.as_ref().is_none_or(|(_, bf)| f > *bf) {
            best = Some((idx.clone(), f));
        }
        // Next combination in lexicographic order.
        let mut i = k;
        loop {
            if i == 0 {
                return Ok(best.expect("at least one subset"));
            }
            i -= 1;
            if idx[i] < n - k + i {
                break;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Settings of [`ascend_set_objective`].
#[derive(Clone, Copy, Debug)]
pub struct AscentOptions {
    pub steps: usize,
    pub lr: f64,
    pub tau_start: f64,
    pub tau_end: f64,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.2,
            tau_start: 1.0,
            tau_end: 0.05,
        }
    }
}

/// Gradient ascent on `F(m)` where `m` is the noiseless top-k relaxation of
/// free logits (initialized at `ln s`), with the relaxation temperature
/// annealed geometrically; the result is the hard top-k of the final logits.
pub fn ascend_set_objective(
    s: &[f64],
    t: &[f64],
    cfg: &SetObjectiveConfig,
    k: usize,
    opts: &AscentOptions,
) -> Result<Vec<usize>> {
    let n = s.len();
    check_lengths("ascent", n, t.len())?;
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k_sel must be in 1..={n}, got {k}")));
    }
    let kernel = kernel_matrix(t, cfg.gamma);
    let mut store = ParamStore::new();
    let init: Vec<f64> = s.iter().map(|v| (v + crate::selector::LOG_EPS).ln()).collect();
    let theta = store.insert("logits", Tensor::vector(init));
    let s_t = Tensor::vector(s.to_vec());
    let steps = opts.steps.max(1);
    for step in 0..steps {
        let frac = step as f64 / (steps - 1).max(1) as f64;
        let tau = opts.tau_start * (opts.tau_end / opts.tau_start).powf(frac);
        let grads = {
            let mut g = Graph::new(&store);
            let th = g.param(theta)?;
            let w = g.exp(th)?;
            let sel = gumbel_topk(&mut g, w, None, tau, k)?;
            let sv = g.input(s_t.clone())?;
            let terms = set_objective_graph(&mut g, sv, sel.mask, &kernel, cfg)?;
            g.backward(terms.f)?
        };
        let gr = grads.get(theta).data().to_vec();
        let scale = gr.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for (p, d) in store.get_mut(theta).data_mut().iter_mut().zip(gr) {
            *p += opts.lr * d / scale;
        }
    }
    Ok(top_k(store.get(theta).data(), k))
}

/// Random oracle-check instance: scores uniform on [0, 1), timestamps sorted
/// uniform on [0, 5γ).
pub fn random_instance(seed: u64, trial: u64, n: usize, gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = crate::rng::stream(seed, "oracle", &[trial]);
    let s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let mut t: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 5.0 * gamma).collect();
    t.sort_by(f64::total_cmp);
    (s, t)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleCheckReport {
    pub trials: usize,
    /// Instances whose rounded ascent solution reaches F within 5% of the optimum.
    pub within_5pct: usize,
    /// Instances where the rounded ascent solution is exactly the optimal set.
    pub exact: usize,
    pub fraction_within_5pct: f64,
    /// Mean of `(F* − F) / |F*|`.
    pub mean_relative_gap: f64,
}

/// Compares [`ascend_set_objective`] against [`brute_force_best_set`] on
/// `trials` seeded instances.
pub fn oracle_check(
    n: usize,
    k: usize,
    trials: usize,
    seed: u64,
    cfg: &SetObjectiveConfig,
    opts: &AscentOptions,
) -> Result<OracleCheckReport> {
    cfg.validate()?;
    let mut within = 0;
    let mut exact = 0;
    let mut gap_sum = 0.0;
    for trial in 0..trials {
        let (s, t) = random_instance(seed, trial as u64, n, cfg.gamma);
        let (best, f_star) = brute_force_best_set(&s, &t, cfg, k)?;
        let got = ascend_set_objective(&s, &t, cfg, k, opts)?;
        let mut m = vec![0.0; n];
        for &i in &got {
            m[i] = 1.0;
        }
        let f = set_objective(&s, &m, &t, cfg)?.f;
        let gap = (f_star - f) / f_star.abs().max(1e-12);
        gap_sum += gap;
        if gap <= 0.05 {
            within += 1;
        }
        if got == best {
            exact += 1;
        }
    }
    Ok(OracleCheckReport {
        trials,
        within_5pct: within,
        exact,
        fraction_within_5pct: if trials == 0 { 1.0 } else { within as f64 / trials as f64 },
        mean_relative_gap: if trials == 0 { 0.0 } else { gap_sum / trials as f64 },
    })
}

/// Mean over ordered pairs `i ≠ j` of the temporal kernel within a hard set;
/// 0 for fewer than two frames.
pub fn mean_pairwise_kernel(set: &[usize], t: &[f64], gamma: f64) -> f64 {
    let k = set.len();
    if k < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for &i in set {
        for &j in set {
            if i != j {
                acc += temporal_kernel(t[i], t[j], gamma);
            }
        }
    }
    acc / (k * (k - 1)) as f64
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffmath::finite_diff_check;

    fn cfg() -> SetObjectiveConfig {
        SetObjectiveConfig::default()
    }

    #[test]
    fn relevance_examples() {
        assert_eq!(relevance(&[0.5, 0.25], &[1.0, 0.5]).unwrap(), 0.625);
        assert_eq!(relevance(&[0.5, 0.25], &[1.0, 1.0]).unwrap(), 0.75);
        assert_eq!(relevance(&[0.5, 0.25], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(relevance(&[0.5], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn coverage_examples() {
        let c = coverage(&[0.3, 0.9, 0.1, 0.5], &[0.0; 4], 2.0).unwrap();
        assert!((c - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((coverage(&[0.7], &[0.4], 2.0).unwrap() - 0.28).abs() < 1e-15);
        let s = [0.3, 0.9, 0.1, 0.5];
        let c = coverage(&s, &[1.0; 4], 0.01).unwrap();
        assert!((c - 0.9).abs() < 1e-3);
        assert!(coverage(&s, &[1.0; 4], 0.0).is_err());
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(temporal_kernel(3.0, 3.0, 10.0), 1.0);
        assert!((temporal_kernel(0.0, 10.0, 10.0) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((temporal_kernel(30.0, 0.0, 10.0) - 0.011_108_996_538_242_3).abs() < 1e-12);
    }

    #[test]
    fn redundancy_examples() {
        assert_eq!(redundancy(&[1.0, 1.0], &[4.0, 4.0], 10.0).unwrap(), 2.0);
        assert_eq!(redundancy(&[0.0, 1.0, 0.0], &[0.0, 1.0, 2.0], 10.0).unwrap(), 0.0);
        let r = redundancy(&[1.0; 3], &[0.0, 10.0, 20.0], 10.0).unwrap();
        let want = 2.0 * (2.0 * (-0.5f64).exp() + (-2.0f64).exp());
        assert!((r - want).abs() < 1e-12);
        assert!((r - 2.6968).abs() < 1e-4);
    }

    #[test]
    fn objective_composition() {
        let s = [0.2, 0.7, 0.4];
        let t = [0.0, 10.0, 20.0];
        let m = [1.0; 3];
        let terms = set_objective(&s, &m, &t, &cfg()).unwrap();
        let rel = 1.3;
        let cov = 2.0 * logsumexp(&[0.1, 0.35, 0.2]);
        let red = 2.0 * (2.0 * (-0.5f64).exp() + (-2.0f64).exp());
        assert!((terms.f - (0.5 * rel + 0.3 * cov - 0.2 * red)).abs() < 1e-12);

        let no_red = SetObjectiveConfig { lambda_red: 0.0, ..cfg() };
        let one_hot = [0.0, 1.0, 0.0];
        let f = set_objective(&s, &one_hot, &t, &no_red).unwrap();
        assert!((f.f - (0.5 * 0.7 + 0.3 * f.cov)).abs() < 1e-15);

        let scaled = SetObjectiveConfig {
            lambda_rel: 1.5,
            lambda_cov: 0.9,
            lambda_red: 0.6,
            ..cfg()
        };
        let f3 = set_objective(&s, &m, &t, &scaled).unwrap();
        assert!((f3.f - 3.0 * terms.f).abs() < 1e-12);
    }

    #[test]
    fn graph_objective_matches_values_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 6;
        let s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let t: Vec<f64> = (0..n).map(|i| i as f64 * 4.0).collect();
        let m0: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let kernel = kernel_matrix(&t, 10.0);
        let mut store = ParamStore::new();
        let mid = store.insert("m", Tensor::vector(m0.clone()));
        let sid = store.insert("s", Tensor::vector(s.clone()));
        {
            let mut g = Graph::new(&store);
            let sv = g.param(sid).unwrap();
            let mv = g.param(mid).unwrap();
            let terms = set_objective_graph(&mut g, sv, mv, &kernel, &cfg()).unwrap();
            let want = set_objective(&s, &m0, &t, &cfg()).unwrap();
            assert!((g.scalar(terms.f) - want.f).abs() < 1e-12);
            assert!((g.scalar(terms.red) - want.red).abs() < 1e-12);
        }
        let report = finite_diff_check(&store, 1e-5, |g| {
            let sv = g.param(sid)?;
            let mv = g.param(mid)?;
            let terms = set_objective_graph(g, sv, mv, &kernel, &cfg()).map_err(|e| match e {
                Error::Diff(d) => d,
                other => panic!("{other}"),
            })?;
            Ok(terms.f)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn brute_force_relevance_only_is_top_k() {
        let rel_only = SetObjectiveConfig {
            lambda_cov: 0.0,
            lambda_red: 0.0,
            ..cfg()
        };
        let s = [0.1, 0.8, 0.3, 0.95, 0.5, 0.6];
        let t: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let (set, _) = brute_force_best_set(&s, &t, &rel_only, 3).unwrap();
        assert_eq!(set, vec![1, 3, 5]);
    }

    #[test]
    fn brute_force_redundancy_only_spreads_in_time() {
        let red_only = SetObjectiveConfig {
            lambda_rel: 0.0,
            lambda_cov: 0.0,
            ..cfg()
        };
        let s = [0.5; 8];
        let t = [0.0, 1.0, 2.0, 20.0, 21.0, 22.0, 40.0, 41.0];
        let (set, f) = brute_force_best_set(&s, &t, &red_only, 3).unwrap();
        let min_red = {
            let mut best = f64::INFINITY;
            for a in 0..8 {
                for b in a + 1..8 {
                    for c in b + 1..8 {
                        let mut m = [0.0; 8];
                        m[a] = 1.0;
                        m[b] = 1.0;
                        m[c] = 1.0;
                        best = best.min(redundancy(&m, &t, 10.0).unwrap());
                    }
                }
            }
            best
        };
        assert!((-f / 0.2 - min_red).abs() < 1e-12);
        let clusters: Vec<usize> = set.iter().map(|&i| (t[i] / 20.0) as usize).collect();
        assert_eq!(clusters, vec![0, 1, 2]);
    }

    #[test]
    fn brute_force_is_self_consistent_and_budgeted() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s: Vec<f64> = (0..10).map(|_| rng.random()).collect();
        let mut t: Vec<f64> = (0..10).map(|_| rng.random::<f64>() * 50.0).collect();
        t.sort_by(f64::total_cmp);
        let (set, f) = brute_force_best_set(&s, &t, &cfg(), 3).unwrap();
        let mut m = vec![0.0; 10];
        for &i in &set {
            m[i] = 1.0;
        }
        assert_eq!(set_objective(&s, &m, &t, &cfg()).unwrap().f, f);
        let big = vec![0.5; 40];
        match brute_force_best_set(&big, &big, &cfg(), 20) {
            Err(Error::Budget { count, .. }) => assert_eq!(count, 137_846_528_820),
            other => panic!("expected budget error, got {other:?}"),
        }
        assert!(brute_force_best_set(&s, &t, &cfg(), 11).is_err());
    }

    #[test]
    fn ascent_relevance_only_matches_top_k() {
        let rel_only = SetObjectiveConfig {
            lambda_cov: 0.0,
            lambda_red: 0.0,
            ..cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let s: Vec<f64> = (0..10).map(|_| rng.random()).collect();
            let t: Vec<f64> = (0..10).map(|i| i as f64 * 5.0).collect();
            let got = ascend_set_objective(&s, &t, &rel_only, 3, &AscentOptions::default()).unwrap();
            assert_eq!(got, top_k(&s, 3));
        }
    }

    #[test]
    fn oracle_check_with_no_trials_is_vacuous() {
        let r = oracle_check(10, 3, 0, 0, &cfg(), &AscentOptions::default()).unwrap();
        assert_eq!(r.fraction_within_5pct, 1.0);
        assert_eq!(r.trials, 0);
    }

    #[test]
    fn mean_pairwise_kernel_values() {
        let t = [0.0, 10.0, 20.0];
        assert_eq!(mean_pairwise_kernel(&[1], &t, 10.0), 0.0);
        let want = (2.0 * (-0.5f64).exp() + (-2.0f64).exp()) / 3.0;
        assert!((mean_pairwise_kernel(&[0, 1, 2], &t, 10.0) - want).abs() < 1e-15);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (2usize..9).prop_flat_map(|n| {
            (
                prop::collection::vec(0.0f64..1.0, n),
                prop::collection::vec(0.0f64..1.0, n),
                prop::collection::vec(0.0f64..60.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn coverage_lies_between_max_and_max_plus_log_n((s, m, _t) in instance()) {
            let cov = coverage(&s, &m, 2.0).unwrap();
            let mx = s.iter().zip(&m).map(|(a, b)| a * b).fold(f64::MIN, f64::max);
            prop_assert!(cov >= mx - 1e-12);
            prop_assert!(cov <= mx + 2.0 * (s.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn terms_are_monotone_in_each_mask_entry((s, m, t) in instance(), i in 0usize..8, bump in 0.01f64..0.5) {
            let i = i % s.len();
            let mut up = m.clone();
            up[i] += bump;
            let a = set_objective(&s, &m, &t, &cfg()).unwrap();
            let b = set_objective(&s, &up, &t, &cfg()).unwrap();
            prop_assert!(b.cov >= a.cov - 1e-12);
            prop_assert!(b.red >= a.red - 1e-12);
            prop_assert!(b.rel >= a.rel - 1e-12);
        }

        #[test]
        fn redundancy_is_permutation_invariant((_s, m, t) in instance(), seed in any::<u64>()) {
            let n = m.len();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let mp: Vec<f64> = perm.iter().map(|&p| m[p]).collect();
            let tp: Vec<f64> = perm.iter().map(|&p| t[p]).collect();
            let a = redundancy(&m, &t, 10.0).unwrap();
            let b = redundancy(&mp, &tp, 10.0).unwrap();
            prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn nearby_additions_gain_less_than_distant_ones(
            s in prop::collection::vec(0.0f64..1.0, 8),
            picks in prop::collection::btree_set(0usize..7, 1..4),
            offset in 0.0f64..5.0,
        ) {
            // Frames 0..7 sit on a 1.0-spaced grid; frame 7 is the candidate.
            let gamma = 10.0;
            let c = SetObjectiveConfig { gamma, ..cfg() };
            let mut t: Vec<f64> = (0..8).map(|i| i as f64).collect();
            let anchor = *picks.iter().next().unwrap();
            let mut base = vec![0.0; 8];
            for &p in &picks {
                base[p] = 1.0;
            }
            let mut with = base.clone();
            with[7] = 1.0;
            let f0 = set_objective(&s, &base, &t, &c).unwrap().f;
            t[7] = t[anchor] + offset;
            let near = set_objective(&s, &with, &t, &c).unwrap().f - f0;
            t[7] = 7.0 + 4.0 * gamma + 1.0;
            let far = set_objective(&s, &with, &t, &c).unwrap().f - f0;
            prop_assert!(near < far, "near {near} far {far}");
        }
    }
}
