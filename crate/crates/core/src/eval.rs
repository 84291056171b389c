//! Pair-wise verification metrics and the experiment drivers built on them.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{inject_label_noise, make_synthetic_split, SyntheticDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::loss::{AblationFlags, OneVsAll};
use crate::par::Exec;
use crate::sphere::{dot, l2_normalize, ClassifierBank, Hyperparams};
use crate::train::{train, BiasInit, EncoderModel, LossChoice, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl PairSet {
    pub fn same_flags(&self) -> Vec<bool> {
        self.pairs.iter().map(|p| p.same).collect()
    }
}

/// Maps a flat index to the `k`-th unordered pair `(i, j)`, `i < j`, of `0..n`.
fn unrank_pair(mut k: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    while k >= n - 1 - i {
        k -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + k)
}

/// Samples `n_pos` same-identity and `n_neg` different-identity pairs
/// without replacement, using the true labels.
pub fn build_pairs(ds: &SyntheticDataset, n_pos: usize, n_neg: usize, seed: u64) -> Result<PairSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = (0..ds.classes).map(|c| ds.members(c)).collect();
    let pos_counts: Vec<usize> = groups.iter().map(|g| g.len() * g.len().saturating_sub(1) / 2).collect();
    let pos_total: usize = pos_counts.iter().sum();
    let n = ds.len();
    let neg_total = n * n.saturating_sub(1) / 2 - pos_total;
    if n_pos > pos_total {
        return Err(Error::InsufficientData(format!("{n_pos} positive pairs requested, {pos_total} available")));
    }
    if n_neg > neg_total {
        return Err(Error::InsufficientData(format!("{n_neg} negative pairs requested, {neg_total} available")));
    }
    let mut pairs = Vec::with_capacity(n_pos + n_neg);
    let mut picked = index::sample(&mut rng, pos_total, n_pos).into_vec();
    picked.sort_unstable();
    for k in picked {
        let (mut k, mut c) = (k, 0);
        while k >= pos_counts[c] {
            k -= pos_counts[c];
            c += 1;
        }
        let (i, j) = unrank_pair(k, groups[c].len());
        pairs.push(Pair { a: groups[c][i], b: groups[c][j], same: true });
    }
    if neg_total <= 4 * n_neg || neg_total <= 1 << 16 {
        let all: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| ds.true_labels[i] != ds.true_labels[j])
            .collect();
        let mut picked = index::sample(&mut rng, all.len(), n_neg).into_vec();
        picked.sort_unstable();
        pairs.extend(picked.into_iter().map(|k| Pair { a: all[k].0, b: all[k].1, same: false }));
    } else {
        let mut seen = HashSet::with_capacity(n_neg);
        while seen.len() < n_neg {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            let (i, j) = (i.min(j), i.max(j));
            if i != j && ds.true_labels[i] != ds.true_labels[j] && seen.insert((i, j)) {
                pairs.push(Pair { a: i, b: j, same: false });
            }
        }
    }
    Ok(PairSet { pairs, n_pos, n_neg })
}

/// Unit embeddings of every sample.
pub fn embed(model: &EncoderModel, ds: &SyntheticDataset, exec: Exec) -> Result<Vec<Vec<f64>>> {
    exec.map_slice(&ds.inputs, |x| l2_normalize(&model.forward(x)?))
        .into_iter()
        .collect()
}

/// Cosine similarity of each pair of (not necessarily unit) embeddings.
pub fn score_embeddings(embeddings: &[Vec<f64>], pairs: &PairSet) -> Result<Vec<f64>> {
    let units = embeddings.iter().map(|e| l2_normalize(e)).collect::<Result<Vec<_>>>()?;
    Ok(pairs
        .pairs
        .iter()
        .map(|p| dot(&units[p.a], &units[p.b]).clamp(-1.0, 1.0))
        .collect())
}

pub fn pair_scores(model: &EncoderModel, ds: &SyntheticDataset, pairs: &PairSet, exec: Exec) -> Result<Vec<f64>> {
    score_embeddings(&embed(model, ds, exec)?, pairs)
}

/// Accept-if-above threshold maximizing accuracy over the midpoints of the
/// sorted unique scores (plus one candidate below and one above every
/// score). Ties go to the smallest threshold.
pub fn best_threshold_accuracy(scores: &[f64], same: &[bool]) -> (f64, f64) {
    let n = scores.len();
    if n == 0 {
        return (0.0, f64::NAN);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = same.iter().filter(|&&s| s).count();
    let mut correct = n_pos as i64;
    let mut best = (scores[idx[0]] - 1.0, correct);
    let mut k = 0;
    while k < n {
        let v = scores[idx[k]];
        while k < n && scores[idx[k]] == v {
            correct += if same[idx[k]] { -1 } else { 1 };
            k += 1;
        }
        let th = if k < n { 0.5 * (v + scores[idx[k]]) } else { v + 1.0 };
        if correct > best.1 {
            best = (th, correct);
        }
    }
    (best.0, best.1 as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TarPoint {
    pub far_level: f64,
    pub threshold: f64,
    pub far: f64,
    pub tar: f64,
}

/// TAR at each FAR level. The threshold is the smallest observed score whose
/// empirical FAR (negatives strictly above it) does not exceed the level.
pub fn tar_at_far(scores: &[f64], same: &[bool], far_levels: &[f64]) -> Result<Vec<TarPoint>> {
    let mut pos: Vec<f64> = scores.iter().zip(same).filter(|(_, &s)| s).map(|(&v, _)| v).collect();
    let mut neg: Vec<f64> = scores.iter().zip(same).filter(|(_, &s)| !s).map(|(&v, _)| v).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InsufficientData("TAR@FAR needs positive and negative pairs".into()));
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut cands: Vec<f64> = scores.to_vec();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let above = |sorted: &[f64], th: f64| sorted.len() - sorted.partition_point(|&v| v <= th);
    let n_neg = neg.len() as f64;
    far_levels
        .iter()
        .map(|&level| {
            if !(level > 0.0 && level <= 1.0) {
                return Err(Error::InvalidArgument(format!("FAR level must lie in (0,1], got {level}")));
            }
            if level < 1.0 / n_neg {
                return Err(Error::InsufficientData(format!(
                    "FAR level {level} below resolution 1/{n_neg}"
                )));
            }
            let k = cands.partition_point(|&th| above(&neg, th) as f64 / n_neg > level);
            let threshold = cands[k];
            Ok(TarPoint {
                far_level: level,
                threshold,
                far: above(&neg, threshold) as f64 / n_neg,
                tar: above(&pos, threshold) as f64 / pos.len() as f64,
            })
        })
        .collect()
}

pub const DEFAULT_BINS: usize = 100;

/// Histogram intersection of two score samples over `[-1, 1]`.
pub fn distribution_overlap(pos: &[f64], neg: &[f64], bins: usize) -> f64 {
    let hist = |v: &[f64]| {
        let mut h = vec![0.0; bins];
        for &s in v {
            let k = (((s.clamp(-1.0, 1.0) + 1.0) / 2.0) * bins as f64) as usize;
            h[k.min(bins - 1)] += 1.0 / v.len() as f64;
        }
        h
    };
    let (a, b) = (hist(pos), hist(neg));
    a.iter().zip(&b).map(|(x, y)| x.min(*y)).sum::<f64>().clamp(0.0, 1.0)
}

pub fn split_scores(scores: &[f64], same: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let pos = scores.iter().zip(same).filter(|(_, &s)| s).map(|(&v, _)| v).collect();
    let neg = scores.iter().zip(same).filter(|(_, &s)| !s).map(|(&v, _)| v).collect();
    (pos, neg)
}

/// Training set, held-out set and held-out pairs drawn from one seed.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub train: SyntheticDataset,
    pub test: SyntheticDataset,
    pub pairs: PairSet,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchmarkSpec {
    pub data: SyntheticSpec,
    pub test_per_class: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    /// 50 classes in 32 dimensions, noisy enough that the design principles
    /// separate, with the 3000/3000 pair protocol on the held-out samples.
    fn default() -> Self {
        Self {
            data: SyntheticSpec { classes: 50, dim: 32, per_class: 30, concentration: 4.0 },
            test_per_class: 20,
            n_pos: 3000,
            n_neg: 3000,
            seed: 0,
        }
    }
}

impl Benchmark {
    pub fn new(spec: &BenchmarkSpec) -> Result<Self> {
        let (train, test) = make_synthetic_split(&spec.data, spec.test_per_class, spec.seed)?;
        let pairs = build_pairs(&test, spec.n_pos, spec.n_neg, spec.seed.wrapping_add(1))?;
        Ok(Self { train, test, pairs })
    }
}

/// Initial proxies shared by every run with the same seed.
pub fn initial_bank(classes: usize, feat_dim: usize, seed: u64) -> Result<ClassifierBank> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba4c);
    ClassifierBank::random(classes, feat_dim, &mut rng)
}

/// Outcome of one training run scored on the held-out pairs.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub accuracy: f64,
    pub threshold: f64,
    pub final_loss: f64,
    pub diverged: bool,
    pub scores: Vec<f64>,
}

pub fn train_and_score(config: &TrainConfig, train_set: &SyntheticDataset, bench: &Benchmark) -> Result<RunResult> {
    let bank = initial_bank(train_set.classes, config.feat_dim, config.seed)?;
    match train(config, train_set, bank, None) {
        Ok(out) => {
            let final_loss = out.history.last().map_or(f64::NAN, |r| r.train_loss);
            let scores = pair_scores(&out.model, &bench.test, &bench.pairs, config.exec);
            match scores {
                Ok(scores) if out.model.is_finite() && final_loss.is_finite() => {
                    let (threshold, accuracy) = best_threshold_accuracy(&scores, &bench.pairs.same_flags());
                    Ok(RunResult { accuracy, threshold, final_loss, diverged: false, scores })
                }
                Ok(_) | Err(Error::DegenerateVector { .. }) => Ok(diverged()),
                Err(e) => Err(e),
            }
        }
        Err(Error::InvalidArgument(msg)) if msg.contains("diverged") => Ok(diverged()),
        Err(Error::DegenerateVector { .. }) => Ok(diverged()),
        Err(e) => Err(e),
    }
}

fn diverged() -> RunResult {
    RunResult { accuracy: f64::NAN, threshold: f64::NAN, final_loss: f64::NAN, diverged: true, scores: Vec::new() }
}

/// Where training samples end up relative to their own classifier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GeometryStats {
    /// Mean cosine between a sample's feature and its labelled classifier.
    pub mean_target_cos: f64,
    /// Fraction of samples whose positive logit `u` is non-negative.
    pub positive_logit_frac: f64,
    pub bias: f64,
}

pub fn geometry_stats(model: &EncoderModel, bank: &ClassifierBank, ds: &SyntheticDataset, head: &OneVsAll) -> Result<GeometryStats> {
    let feats = embed(model, ds, Exec::Sequential)?;
    let (mut cos_sum, mut positive) = (0.0, 0usize);
    for (f, &y) in feats.iter().zip(&ds.labels) {
        let c = dot(f, &bank.direction(y)).clamp(-1.0, 1.0);
        cos_sum += c;
        let u = head.logit(c, true, bank.bias, head.positive_shift(c)?)?;
        positive += usize::from(u >= 0.0);
    }
    Ok(GeometryStats {
        mean_target_cos: cos_sum / ds.len() as f64,
        positive_logit_frac: positive as f64 / ds.len() as f64,
        bias: bank.bias,
    })
}

/// Bias placing the decision boundary halfway between a perfect positive
/// and the nearest neighbour of `classes` evenly spaced planar classifiers.
///
/// The closed-form initialization assumes every cosine starts near zero,
/// which only holds in high dimension. In the plane the classifiers of
/// neighbouring classes are necessarily correlated and training from that
/// bias collapses all features onto a line orthogonal to the classifiers.
pub fn planar_bias(r: f64, classes: usize) -> f64 {
    -r * (1.0 + (std::f64::consts::TAU / classes as f64).cos()) / 2.0
}

/// The six-class planar feature experiment: data spec and trainer for margin `m`.
pub fn planar_setup(m: f64, seed: u64) -> Result<(SyntheticSpec, TrainConfig)> {
    let hp = Hyperparams::new(0.7, 30.0, m, 1.0)?;
    let data = SyntheticSpec { classes: 6, dim: 8, per_class: 50, concentration: 10.0 };
    let config = TrainConfig {
        lr: 0.05,
        epochs: 60,
        seed,
        hp,
        hidden: vec![32],
        feat_dim: 2,
        bias_init: BiasInit::Fixed(planar_bias(hp.r, data.classes)),
        ..TrainConfig::default()
    };
    Ok((data, config))
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub flags: AblationFlags,
    pub accuracy: f64,
    pub final_loss: f64,
    pub diverged: bool,
}

/// Trains one model per row on identical data, seed and initial proxies.
pub fn run_ablation(bench: &Benchmark, rows: &[AblationFlags], base: &TrainConfig) -> Result<Vec<AblationRow>> {
    rows.iter()
        .map(|&flags| {
            let config = TrainConfig { loss: LossChoice::OneVsAll(flags), ..base.clone() };
            let r = train_and_score(&config, &bench.train, bench)?;
            Ok(AblationRow { flags, accuracy: r.accuracy, final_loss: r.final_loss, diverged: r.diverged })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct NoiseRow {
    pub loss: String,
    pub rate: f64,
    pub accuracy: f64,
    pub diverged: bool,
}

pub const NOISE_RATES: [f64; 5] = [0.0, 0.2, 0.4, 0.6, 0.8];

/// Trains every loss at every noise rate and scores on the clean held-out pairs.
/// All losses see the same corrupted labels for a given rate.
pub fn run_noise_sweep(
    bench: &Benchmark,
    rates: &[f64],
    losses: &[(String, LossChoice)],
    base: &TrainConfig,
) -> Result<Vec<NoiseRow>> {
    let mut rows = Vec::with_capacity(rates.len() * losses.len());
    for &rate in rates {
        let mut rng = ChaCha8Rng::seed_from_u64(base.seed ^ rate.to_bits());
        let noisy = inject_label_noise(&bench.train, rate, &mut rng)?;
        for (name, loss) in losses {
            let config = TrainConfig { loss: *loss, ..base.clone() };
            let r = train_and_score(&config, &noisy, bench)?;
            rows.push(NoiseRow { loss: name.clone(), rate, accuracy: r.accuracy, diverged: r.diverged });
        }
    }
    Ok(rows)
}

pub fn write_scores<W: Write>(pairs: &PairSet, scores: &[f64], mut w: W) -> Result<()> {
    writeln!(w, "# same,score")?;
    for (p, s) in pairs.pairs.iter().zip(scores) {
        writeln!(w, "{},{s}", u8::from(p.same))?;
    }
    Ok(())
}

pub fn write_metrics<W: Write>(rows: &[(String, String, f64)], mut w: W) -> Result<()> {
    writeln!(w, "# metric,param,value")?;
    for (metric, param, value) in rows {
        writeln!(w, "{metric},{param},{value}")?;
    }
    Ok(())
}
