//! Synthetic question-answering episodes with planted evidence frames.
//!
//! A task (one dataset seed) fixes the question probe and a `C`-dimensional
//! option subspace orthogonal to it; every episode draws its own orthonormal
//! options as a random rotation of that subspace. The `k*` evidence frames are
//! `o_answer + p_j`, where each perturbation pushes toward a wrong option
//! strongly enough that a single evidence frame on its own points to a wrong
//! answer, while the perturbations cancel exactly over the whole evidence
//! set. Each perturbation also carries a component outside the option span
//! so no two evidence frames look alike. One evidence frame (the anchor) is
//! repeated `n_dup` times nearby in time, so a selection that spends its
//! budget on the anchor cluster is both redundant and misleading. All other
//! frames are unit-norm noise orthogonal to the episode's options.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffmath::dot;
use crate::error::{Error, Result};
use crate::formats::{to_f32_precision, FeatureMatrix};
use crate::rng::stream;

/// Minimum oracle margin of the evidence mean over the best wrong option.
pub const EVIDENCE_MARGIN: f64 = 0.1;
pub const MAX_ATTEMPTS: u32 = 100;

pub const DATASET_FORMAT: &str = "hfs-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FEATURES_FILE: &str = "features.hfsf";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSpec {
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub k_star: usize,
    pub n_dup: usize,
    /// Maximum timestamp distance of a duplicate from its anchor frame.
    pub duplicate_window: usize,
    /// Expected norm of the Gaussian noise added to each evidence frame.
    pub noise_sigma: f64,
    /// Length of the perturbation pushing each evidence frame toward a wrong option.
    pub evidence_spread: f64,
    /// Norm of the per-frame evidence component outside the option span.
    pub evidence_signature: f64,
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            n: 128,
            d: 64,
            c: 4,
            k_star: 4,
            n_dup: 6,
            duplicate_window: 8,
            noise_sigma: 0.1,
            evidence_spread: 2.6,
            evidence_signature: 0.5,
            seed: 0,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.c < 2 {
            return Err(Error::invalid(format!("need at least 2 options, got {}", self.c)));
        }
        if self.d < self.c + 1 {
            return Err(Error::invalid(format!(
                "dimension {} too small for {} orthogonal options plus noise",
                self.d, self.c
            )));
        }
        if self.k_star == 0 || self.k_star + self.n_dup > self.n {
            return Err(Error::invalid(format!(
                "{} evidence + {} duplicate frames do not fit in {} frames",
                self.k_star, self.n_dup, self.n
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        for (name, v) in [
            ("evidence_spread", self.evidence_spread),
            ("evidence_signature", self.evidence_signature),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub index: u64,
    pub frames: FeatureMatrix,
    pub question: Vec<f64>,
    pub options: Vec<Vec<f64>>,
    pub answer: usize,
    /// Evidence frame indices, ascending.
    pub evidence: Vec<usize>,
    /// The evidence frame that is duplicated.
    pub anchor: usize,
    /// Indices of the near-copies of the anchor, ascending.
    pub duplicates: Vec<usize>,
}

fn gaussian<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let c = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
    }
}

/// Per-task constants shared by every episode of a dataset seed: the
/// question probe and an orthonormal basis of the option subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub question: Vec<f64>,
    pub option_basis: Vec<Vec<f64>>,
}

impl Task {
    pub fn new(spec: &EpisodeSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream(spec.seed, "task", &[]);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.c + 1);
        for _ in 0..=spec.c {
            let mut v = gaussian(&mut rng, spec.d);
            project_out(&mut v, &basis);
            project_out(&mut v, &basis);
            normalize(&mut v);
            basis.push(v);
        }
        let question = basis.remove(0).into_iter().map(to_f32_precision).collect();
        Ok(Self {
            question,
            option_basis: basis,
        })
    }
}

/// The task basis under a random rotation: `C` orthonormal options, all
/// orthogonal to the question.
fn random_options<R: Rng>(rng: &mut R, task: &Task) -> Vec<Vec<f64>> {
    let c = task.option_basis.len();
    let d = task.option_basis[0].len();
    let mut rot: Vec<Vec<f64>> = Vec::with_capacity(c);
    for _ in 0..c {
        let mut v = gaussian(rng, c);
        project_out(&mut v, &rot);
        project_out(&mut v, &rot);
        normalize(&mut v);
        rot.push(v);
    }
    rot.iter()
        .map(|r| {
            let mut o = vec![0.0; d];
            for (w, b) in r.iter().zip(&task.option_basis) {
                o.iter_mut().zip(b).for_each(|(x, y)| *x += w * y);
            }
            o
        })
        .collect()
}

/// Option scores `⟨mean over S, o_c⟩`.
pub fn option_scores(frames: &FeatureMatrix, options: &[Vec<f64>], set: &[usize]) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::invalid("oracle needs a non-empty frame set"));
    }
    let mut mean = vec![0.0; frames.d];
    for &i in set {
        if i >= frames.n {
            return Err(Error::invalid(format!("frame {i} out of range {}", frames.n)));
        }
        mean.iter_mut().zip(frames.row(i)).for_each(|(m, v)| *m += v);
    }
    let inv = 1.0 / set.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(options.iter().map(|o| dot(&mean, o)).collect())
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `argmax_c ⟨mean of features over S, o_c⟩`, ties to the smallest `c`.
pub fn oracle_answer(episode: &Episode, set: &[usize]) -> Result<usize> {
    Ok(argmax_first(&option_scores(&episode.frames, &episode.options, set)?))
}

/// `|S ∩ evidence| / |evidence|`.
pub fn evidence_recall(set: &[usize], evidence: &[usize]) -> f64 {
    if evidence.is_empty() {
        return 0.0;
    }
    let hit = evidence.iter().filter(|e| set.contains(e)).count();
    hit as f64 / evidence.len() as f64
}

/// `k` frames on an evenly spaced grid over `0..n`.
pub fn uniform_grid(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| i * n / k.max(1)).collect()
}

pub fn generate_episode(spec: &EpisodeSpec, task: &Task, index: u64) -> Result<Episode> {
    spec.validate()?;
    let mut rng = stream(spec.seed, "episode", &[index]);
    for _ in 0..MAX_ATTEMPTS {
        if let Some(ep) = try_episode(spec, task, index, &mut rng) {
            return Ok(ep);
        }
    }
    Err(Error::Generation {
        seed: spec.seed,
        index,
        attempts: MAX_ATTEMPTS,
    })
}

fn try_episode<R: Rng>(spec: &EpisodeSpec, task: &Task, index: u64, rng: &mut R) -> Option<Episode> {
    let (n, d, c) = (spec.n, spec.d, spec.c);
    let options = random_options(rng, task);
    let answer = rng.random_range(0..c);
    let slots: Vec<usize> = rand::seq::index::sample(rng, n, spec.k_star).into_vec();
    let anchor = slots[0];
    let lo = anchor.saturating_sub(spec.duplicate_window);
    let hi = (anchor + spec.duplicate_window).min(n - 1);
    let free: Vec<usize> = (lo..=hi).filter(|s| !slots.contains(s)).collect();
    if free.len() < spec.n_dup {
        return None;
    }
    let mut duplicates: Vec<usize> = free.choose_multiple(rng, spec.n_dup).copied().collect();
    duplicates.sort_unstable();

    let mut wrong: Vec<usize> = (0..c).filter(|&o| o != answer).collect();
    wrong.shuffle(rng);
    let targets: Vec<usize> = (0..spec.k_star).map(|j| wrong[j % wrong.len()]).collect();
    let mut mean_target = vec![0.0; d];
    for &w in &targets {
        mean_target.iter_mut().zip(&options[w]).for_each(|(m, o)| *m += o);
    }
    mean_target.iter_mut().for_each(|m| *m /= spec.k_star as f64);
    let signatures = signatures(rng, spec, &options);

    let mut features = vec![0.0; n * d];
    let mut placed = vec![false; n];
    let noise_std = spec.noise_sigma / (d as f64).sqrt();
    let mut anchor_row = Vec::new();
    for (j, &slot) in slots.iter().enumerate() {
        let mut v: Vec<f64> = options[answer].clone();
        for (((x, o), m), r) in v.iter_mut().zip(&options[targets[j]]).zip(&mean_target).zip(&signatures[j]) {
            *x += spec.evidence_spread * (o - m) + r;
        }
        if noise_std > 0.0 {
            for x in v.iter_mut() {
                let eps: f64 = StandardNormal.sample(rng);
                *x += noise_std * eps;
            }
        }
        if j == 0 {
            anchor_row = v.clone();
        }
        features[slot * d..(slot + 1) * d].copy_from_slice(&v);
        placed[slot] = true;
    }
    for &slot in &duplicates {
        let row = &mut features[slot * d..(slot + 1) * d];
        for (x, a) in row.iter_mut().zip(&anchor_row) {
            let eps: f64 = StandardNormal.sample(rng);
            *x = a + 0.25 * noise_std * eps;
        }
        placed[slot] = true;
    }
    for slot in 0..n {
        if placed[slot] {
            continue;
        }
        let mut v = gaussian(rng, d);
        project_out(&mut v, &options);
        project_out(&mut v, &options);
        normalize(&mut v);
        features[slot * d..(slot + 1) * d].copy_from_slice(&v);
    }
    features.iter_mut().for_each(|x| *x = to_f32_precision(*x));
    let timestamps = (0..n).map(|i| i as f64).collect();
    let frames = FeatureMatrix::new(n, d, features, timestamps).ok()?;

    let mut evidence = slots.clone();
    evidence.sort_unstable();
    let options: Vec<Vec<f64>> = options
        .into_iter()
        .map(|o| o.into_iter().map(to_f32_precision).collect())
        .collect();
    let scores = option_scores(&frames, &options, &evidence).ok()?;
    let best_wrong = (0..c)
        .filter(|&o| o != answer)
        .map(|o| scores[o])
        .fold(f64::NEG_INFINITY, f64::max);
    if scores[answer] - best_wrong < EVIDENCE_MARGIN {
        return None;
    }
    Some(Episode {
        index,
        frames,
        question: task.question.clone(),
        options,
        answer,
        evidence,
        anchor,
        duplicates,
    })
}

/// Mean-centered components outside the option span, one per evidence
/// frame, each of norm about `evidence_signature`.
fn signatures<R: Rng>(rng: &mut R, spec: &EpisodeSpec, options: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = spec.k_star;
    let mut sig: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let mut v = gaussian(rng, spec.d);
            project_out(&mut v, options);
            project_out(&mut v, options);
            normalize(&mut v);
            v.iter_mut().for_each(|x| *x *= spec.evidence_signature);
            v
        })
        .collect();
    if k > 1 {
        let mean: Vec<f64> = (0..spec.d).map(|i| sig.iter().map(|v| v[i]).sum::<f64>() / k as f64).collect();
        for v in &mut sig {
            v.iter_mut().zip(&mean).for_each(|(x, m)| *x -= m);
        }
    } else {
        sig[0].iter_mut().for_each(|x| *x = 0.0);
    }
    sig
}

pub fn generate_dataset(spec: &EpisodeSpec, count: usize) -> Result<Vec<Episode>> {
    let task = Task::new(spec)?;
    (0..count as u64).map(|i| generate_episode(spec, &task, i)).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    format: String,
    version: u32,
    count: usize,
    spec: EpisodeSpec,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    index: u64,
    /// Byte offset of this episode's record in the feature blob.
    offset: u64,
    question: Vec<f64>,
    options: Vec<Vec<f64>>,
    answer: usize,
    evidence: Vec<usize>,
    anchor: usize,
    duplicates: Vec<usize>,
}

/// A dataset directory: JSONL manifest (header line, then one line per
/// episode) plus one blob of concatenated `HFSF` records.
pub fn write_dataset(dir: &Path, spec: &EpisodeSpec, episodes: &[Episode]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    let mut blob = BufWriter::new(File::create(dir.join(FEATURES_FILE))?);
    let header = ManifestHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        count: episodes.len(),
        spec: spec.clone(),
    };
    writeln!(manifest, "{}", serde_json::to_string(&header)?)?;
    let mut offset = 0u64;
    for ep in episodes {
        let bytes = ep.frames.encode();
        blob.write_all(&bytes)?;
        let rec = EpisodeRecord {
            index: ep.index,
            offset,
            question: ep.question.clone(),
            options: ep.options.clone(),
            answer: ep.answer,
            evidence: ep.evidence.clone(),
            anchor: ep.anchor,
            duplicates: ep.duplicates.clone(),
        };
        writeln!(manifest, "{}", serde_json::to_string(&rec)?)?;
        offset += bytes.len() as u64;
    }
    manifest.flush()?;
    blob.flush()?;
    Ok(())
}

pub struct Dataset {
    pub spec: EpisodeSpec,
    pub episodes: Vec<Episode>,
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let blob = fs::read(dir.join(FEATURES_FILE))?;
    let reader = BufReader::new(File::open(&manifest_path)?);
    let mut lines = reader.lines();
    let malformed = |line: usize, detail: String| Error::Malformed {
        location: format!("{} line {line}", manifest_path.display()),
        detail,
    };
    let header_line = lines
        .next()
        .ok_or_else(|| malformed(1, "empty manifest".into()))??;
    let header: ManifestHeader =
        serde_json::from_str(&header_line).map_err(|e| malformed(1, e.to_string()))?;
    if header.format != DATASET_FORMAT {
        return Err(malformed(1, format!("unknown format {:?}", header.format)));
    }
    if header.version != DATASET_VERSION {
        return Err(Error::BadVersion {
            found: header.version,
            expected: DATASET_VERSION,
        });
    }
    let mut episodes = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeRecord =
            serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
        let start = rec.offset as usize;
        if start > blob.len() {
            return Err(Error::Truncated {
                offset: blob.len() as u64,
                detail: format!("episode {} starts at byte {start}", rec.index),
            });
        }
        let (frames, _) = FeatureMatrix::decode(&blob[start..], rec.offset)?;
        let ep = Episode {
            index: rec.index,
            frames,
            question: rec.question,
            options: rec.options,
            answer: rec.answer,
            evidence: rec.evidence,
            anchor: rec.anchor,
            duplicates: rec.duplicates,
        };
        check_episode(&ep).map_err(|e| malformed(line_no, e))?;
        episodes.push(ep);
    }
    if episodes.len() != header.count {
        return Err(malformed(
            episodes.len() + 2,
            format!("header declares {} episodes, found {}", header.count, episodes.len()),
        ));
    }
    Ok(Dataset {
        spec: header.spec,
        episodes,
    })
}

fn check_episode(ep: &Episode) -> std::result::Result<(), String> {
    let (n, d) = (ep.frames.n, ep.frames.d);
    if ep.question.len() != d || ep.options.iter().any(|o| o.len() != d) {
        return Err(format!("question/option width differs from feature width {d}"));
    }
    if ep.options.len() < 2 || ep.answer >= ep.options.len() {
        return Err(format!("answer {} with {} options", ep.answer, ep.options.len()));
    }
    if ep.evidence.iter().chain(&ep.duplicates).chain([&ep.anchor]).any(|&i| i >= n) {
        return Err(format!("frame index out of range {n}"));
    }
    Ok(())
}
