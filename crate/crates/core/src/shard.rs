//! Classifier layer partitioned across shards.
//!
//! Each shard owns a contiguous range of proxies. For the one-vs-all loss a
//! shard needs only the broadcast feature (and the label) to produce its
//! partial loss, its local proxy gradients and a partial feature gradient.
//! The softmax baseline additionally has to agree on a global max and
//! exp-sum before any gradient can be formed. [`CommStats`] counts the
//! scalars each protocol moves, and every weight read goes through
//! [`WeightAccess`], which records reads of classes a shard does not own.
//!
//! Partial sums are kept as exact accumulators and merged in shard order,
//! so the merged one-vs-all result is bitwise identical to the unsharded
//! [`LossHead::forward_backward`](crate::loss::LossHead::forward_backward).

use std::cell::Cell;
use std::ops::{Add, AddAssign, Range};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exact::{ExactSum, ExactVec};
use crate::loss::{class_backward, LossGradients, OneVsAll, Softmax};
use crate::par::{self, Exec};
use crate::sphere::{proxy_cosine, sample_sphere_uniform, ClassifierBank, UnitFeature};

/// Contiguous, disjoint, nonempty class ranges covering `0..classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardPlan {
    classes: usize,
    ranges: Vec<Range<usize>>,
}

impl ShardPlan {
    /// Splits `classes` into `shards` near-equal ranges, larger ones first.
    pub fn contiguous(classes: usize, shards: usize) -> Result<Self> {
        if shards == 0 || shards > classes {
            return Err(Error::InvalidPlan(format!("cannot split {classes} classes into {shards} shards")));
        }
        let base = classes / shards;
        let extra = classes % shards;
        let mut start = 0;
        let ranges = (0..shards)
            .map(|s| {
                let len = base + usize::from(s < extra);
                let r = start..start + len;
                start += len;
                r
            })
            .collect();
        Self::new(classes, ranges)
    }

    pub fn new(classes: usize, ranges: Vec<Range<usize>>) -> Result<Self> {
        let mut next = 0;
        for r in &ranges {
            if r.start != next || r.end <= r.start {
                return Err(Error::InvalidPlan(format!("range {r:?} breaks contiguity at {next}")));
            }
            next = r.end;
        }
        if next != classes || ranges.is_empty() {
            return Err(Error::InvalidPlan(format!("ranges cover 0..{next}, expected 0..{classes}")));
        }
        Ok(Self { classes, ranges })
    }

    pub fn shards(&self) -> usize {
        self.ranges.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn range(&self, shard: usize) -> Range<usize> {
        self.ranges[shard].clone()
    }

    pub fn owner(&self, class: usize) -> Option<usize> {
        self.ranges.iter().position(|r| r.contains(&class))
    }
}

/// Scalars moved by one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CommStats {
    pub feature_broadcast_scalars: u64,
    pub remote_weight_scalars_read: u64,
    pub normalizer_exchange_scalars: u64,
    pub reduction_scalars: u64,
}

impl Add for CommStats {
    type Output = CommStats;
    fn add(self, o: CommStats) -> CommStats {
        CommStats {
            feature_broadcast_scalars: self.feature_broadcast_scalars + o.feature_broadcast_scalars,
            remote_weight_scalars_read: self.remote_weight_scalars_read + o.remote_weight_scalars_read,
            normalizer_exchange_scalars: self.normalizer_exchange_scalars + o.normalizer_exchange_scalars,
            reduction_scalars: self.reduction_scalars + o.reduction_scalars,
        }
    }
}

impl AddAssign for CommStats {
    fn add_assign(&mut self, o: CommStats) {
        *self = *self + o;
    }
}

/// Per-shard proxy storage.
#[derive(Clone, Debug)]
pub struct ShardedBank {
    plan: ShardPlan,
    shards: Vec<ClassifierBank>,
    pub bias: f64,
}

impl ShardedBank {
    pub fn from_bank(bank: &ClassifierBank, plan: ShardPlan) -> Result<Self> {
        if plan.classes() != bank.classes() {
            return Err(Error::InvalidPlan(format!(
                "plan covers {} classes, bank has {}",
                plan.classes(),
                bank.classes()
            )));
        }
        let shards = (0..plan.shards())
            .map(|s| bank.slice(plan.range(s)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { plan, shards, bias: bank.bias })
    }

    pub fn plan(&self) -> &ShardPlan {
        &self.plan
    }

    pub fn dim(&self) -> usize {
        self.shards[0].dim()
    }

    pub fn classes(&self) -> usize {
        self.plan.classes()
    }

    pub fn shard(&self, s: usize) -> &ClassifierBank {
        &self.shards[s]
    }

    /// Instrumented view used by shard `owner`.
    pub fn access(&self, owner: usize) -> WeightAccess<'_> {
        WeightAccess {
            bank: self,
            owner,
            remote: Cell::new(0),
        }
    }
}

/// Weight reader that counts scalars read from other shards.
pub struct WeightAccess<'a> {
    bank: &'a ShardedBank,
    owner: usize,
    remote: Cell<u64>,
}

impl<'a> WeightAccess<'a> {
    pub fn weight(&self, class: usize) -> &'a [f64] {
        let holder = self.bank.plan.owner(class).expect("class inside plan");
        let local = class - self.bank.plan.range(holder).start;
        let w = self.bank.shards[holder].weight(local);
        if holder != self.owner {
            self.remote.set(self.remote.get() + w.len() as u64);
        }
        w
    }

    pub fn remote_scalars(&self) -> u64 {
        self.remote.get()
    }
}

/// What one shard sends back for a batch.
struct ShardOutput {
    values: Vec<ExactSum>,
    d_bias: Vec<ExactSum>,
    d_feature: Vec<ExactVec>,
    /// Local classes × dim, summed over the batch in sample order.
    d_weights: Vec<f64>,
    /// Local classes × batch, only for single-sample steps.
    d_cos: Vec<f64>,
    stats: CommStats,
}

fn check_inputs(feats: &[UnitFeature], ys: &[usize], bank: &ShardedBank) -> Result<()> {
    if feats.len() != ys.len() || feats.is_empty() {
        return Err(Error::InvalidArgument("batch features and labels must be nonempty and equal length".into()));
    }
    for f in feats {
        if f.unit.len() != bank.dim() {
            return Err(Error::DimensionMismatch { expected: bank.dim(), got: f.unit.len() });
        }
    }
    for &y in ys {
        if y >= bank.classes() {
            return Err(Error::LabelOutOfRange { label: y, classes: bank.classes() });
        }
    }
    Ok(())
}

fn one_vs_all_shard(
    shard: usize,
    bank: &ShardedBank,
    head: &OneVsAll,
    feats: &[UnitFeature],
    ys: &[usize],
    keep_d_cos: bool,
) -> Result<ShardOutput> {
    let dim = bank.dim();
    let range = bank.plan.range(shard);
    let access = bank.access(shard);
    let n = feats.len();
    let mut values = vec![ExactSum::new(); n];
    let mut d_bias = vec![ExactSum::new(); n];
    let mut d_feature = vec![ExactVec::zeros(dim); n];
    let mut d_weights = vec![0.0; range.len() * dim];
    let mut d_cos = if keep_d_cos { vec![0.0; range.len() * n] } else { Vec::new() };
    let mut scratch = vec![0.0; dim];
    for (local, class) in range.clone().enumerate() {
        let w = access.weight(class);
        let dw = &mut d_weights[local * dim..(local + 1) * dim];
        for (b, (feat, &y)) in feats.iter().zip(ys).enumerate() {
            let (c, wn) = proxy_cosine(&feat.unit, w);
            let is_target = class == y;
            let shift = if is_target { head.positive_shift(c)? } else { 0.0 };
            let (term, dc, db) = head.class_term(c, is_target, bank.bias, shift)?;
            values[b].add(term);
            d_bias[b].add(db);
            if keep_d_cos {
                d_cos[local * n + b] = dc;
            }
            if b == 0 {
                class_backward(feat, w, wn, c, dc, dw, &mut d_feature[b]);
            } else {
                class_backward(feat, w, wn, c, dc, &mut scratch, &mut d_feature[b]);
                dw.iter_mut().zip(&scratch).for_each(|(a, s)| *a += s);
            }
        }
    }
    let stats = CommStats {
        feature_broadcast_scalars: (dim * n) as u64,
        remote_weight_scalars_read: access.remote_scalars(),
        normalizer_exchange_scalars: 0,
        // partial loss, partial bias gradient and partial feature gradient
        reduction_scalars: ((2 + dim) * n) as u64,
    };
    Ok(ShardOutput { values, d_bias, d_feature, d_weights, d_cos, stats })
}

/// Merged result of a sharded batch step.
#[derive(Clone, Debug)]
pub struct BatchStep {
    pub values: Vec<f64>,
    pub d_bias: Vec<f64>,
    pub d_features: Vec<Vec<f64>>,
    /// Global `K × D`, summed over the batch.
    pub d_weights: Vec<f64>,
    pub stats: CommStats,
    pub per_shard: Vec<CommStats>,
}

fn merge(outputs: Vec<ShardOutput>, classes: usize, dim: usize, n: usize) -> (BatchStep, Vec<Vec<f64>>) {
    let mut values = vec![ExactSum::new(); n];
    let mut bias = vec![ExactSum::new(); n];
    let mut feats = vec![ExactVec::zeros(dim); n];
    let mut d_weights = Vec::with_capacity(classes * dim);
    let mut d_cos = vec![Vec::with_capacity(classes); n];
    let mut stats = CommStats::default();
    let mut per_shard = Vec::with_capacity(outputs.len());
    for out in outputs {
        for b in 0..n {
            values[b].merge(&out.values[b]);
            bias[b].merge(&out.d_bias[b]);
            feats[b].merge(&out.d_feature[b]);
        }
        if !out.d_cos.is_empty() {
            for chunk in out.d_cos.chunks(n) {
                for (b, &v) in chunk.iter().enumerate() {
                    d_cos[b].push(v);
                }
            }
        }
        d_weights.extend_from_slice(&out.d_weights);
        stats += out.stats;
        per_shard.push(out.stats);
    }
    (
        BatchStep {
            values: values.iter().map(ExactSum::value).collect(),
            d_bias: bias.iter().map(ExactSum::value).collect(),
            d_features: feats.iter().map(ExactVec::values).collect(),
            d_weights,
            stats,
            per_shard,
        },
        d_cos,
    )
}

/// One-vs-all forward/backward over a batch with every shard working locally.
pub fn sharded_batch_one_vs_all(
    xs: &[Vec<f64>],
    ys: &[usize],
    bank: &ShardedBank,
    head: &OneVsAll,
    exec: Exec,
) -> Result<BatchStep> {
    let feats = xs.iter().map(|x| UnitFeature::new(x)).collect::<Result<Vec<_>>>()?;
    check_inputs(&feats, ys, bank)?;
    let outputs = exec
        .map_range(bank.plan.shards(), |s| one_vs_all_shard(s, bank, head, &feats, ys, false))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(merge(outputs, bank.classes(), bank.dim(), xs.len()).0)
}

/// Single-sample one-vs-all step; bitwise equal to the unsharded loss.
pub fn sharded_step_sphereface2(
    x: &[f64],
    y: usize,
    bank: &ShardedBank,
    head: &OneVsAll,
    exec: Exec,
) -> Result<(LossGradients, CommStats)> {
    let feats = vec![UnitFeature::new(x)?];
    check_inputs(&feats, &[y], bank)?;
    let outputs = exec
        .map_range(bank.plan.shards(), |s| one_vs_all_shard(s, bank, head, &feats, &[y], true))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (step, mut d_cos) = merge(outputs, bank.classes(), bank.dim(), 1);
    let stats = step.stats;
    Ok((
        LossGradients {
            value: step.values[0],
            d_cos: d_cos.swap_remove(0),
            d_weights: step.d_weights,
            d_feature: step.d_features.into_iter().next().unwrap_or_default(),
            d_bias: step.d_bias[0],
        },
        stats,
    ))
}

struct SoftmaxLocal {
    cos: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
    max: Vec<f64>,
}

fn softmax_local_logits(
    shard: usize,
    bank: &ShardedBank,
    head: &Softmax,
    feats: &[UnitFeature],
    ys: &[usize],
) -> Result<(SoftmaxLocal, u64)> {
    let access = bank.access(shard);
    let range = bank.plan.range(shard);
    let n = feats.len();
    let mut cos = vec![Vec::with_capacity(range.len()); n];
    let mut logits = vec![Vec::with_capacity(range.len()); n];
    for class in range {
        let w = access.weight(class);
        for (b, feat) in feats.iter().enumerate() {
            let (c, _) = proxy_cosine(&feat.unit, w);
            let m = if class == ys[b] { head.margin } else { 0.0 };
            let t = crate::simadjust::AdjustExponent::new(head.t)?;
            cos[b].push(c);
            logits[b].push(head.scale * (crate::simadjust::g(c, t)? - m));
        }
    }
    let max = logits
        .iter()
        .map(|z| z.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok((SoftmaxLocal { cos, logits, max }, access.remote_scalars()))
}

/// Softmax step with the two-phase normalizer exchange (global max, then
/// global exp-sum) before shards can form gradients.
pub fn sharded_batch_softmax(
    xs: &[Vec<f64>],
    ys: &[usize],
    bank: &ShardedBank,
    head: &Softmax,
    exec: Exec,
) -> Result<(BatchStep, Vec<Vec<f64>>)> {
    let feats = xs.iter().map(|x| UnitFeature::new(x)).collect::<Result<Vec<_>>>()?;
    check_inputs(&feats, ys, bank)?;
    let shards = bank.plan.shards();
    let n = feats.len();
    let dim = bank.dim();
    let exchange_per_phase = if shards > 1 { n as u64 } else { 0 };

    let locals = exec
        .map_range(shards, |s| softmax_local_logits(s, bank, head, &feats, ys))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    // Phase 1: global max.
    let global_max: Vec<f64> = (0..n)
        .map(|b| locals.iter().map(|(l, _)| l.max[b]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    // Phase 2: each shard contributes one exp-sum scalar per sample.
    let partial_sums: Vec<Vec<f64>> = exec.map_slice(&locals, |(l, _)| {
        (0..n)
            .map(|b| {
                let mut acc = ExactSum::new();
                l.logits[b].iter().for_each(|&z| acc.add((z - global_max[b]).exp()));
                acc.value()
            })
            .collect()
    });
    let global_sum: Vec<f64> = (0..n).map(|b| partial_sums.iter().map(|p| p[b]).sum()).collect();

    // Phase 3: local gradients.
    let outputs = exec
        .map_range(shards, |s| -> Result<ShardOutput> {
            let (local, remote) = &locals[s];
            let access = bank.access(s);
            let range = bank.plan.range(s);
            let mut values = vec![ExactSum::new(); n];
            let mut d_feature = vec![ExactVec::zeros(dim); n];
            let mut d_weights = vec![0.0; range.len() * dim];
            let mut d_cos = vec![0.0; range.len() * n];
            let mut scratch = vec![0.0; dim];
            for (li, class) in range.clone().enumerate() {
                let w = access.weight(class);
                let wn = crate::sphere::norm(w);
                let dw = &mut d_weights[li * dim..(li + 1) * dim];
                for b in 0..n {
                    let c = local.cos[b][li];
                    let z = local.logits[b][li];
                    let is_target = class == ys[b];
                    if is_target {
                        values[b].add(global_sum[b].ln() + global_max[b] - z);
                    }
                    let dc = head.class_grad(c, z, is_target, global_max[b], global_sum[b])?;
                    d_cos[li * n + b] = dc;
                    if b == 0 {
                        class_backward(&feats[b], w, wn, c, dc, dw, &mut d_feature[b]);
                    } else {
                        class_backward(&feats[b], w, wn, c, dc, &mut scratch, &mut d_feature[b]);
                        dw.iter_mut().zip(&scratch).for_each(|(a, s)| *a += s);
                    }
                }
            }
            let stats = CommStats {
                feature_broadcast_scalars: (dim * n) as u64,
                remote_weight_scalars_read: remote + access.remote_scalars(),
                normalizer_exchange_scalars: 2 * exchange_per_phase,
                reduction_scalars: ((1 + dim) * n) as u64,
            };
            Ok(ShardOutput {
                values,
                d_bias: vec![ExactSum::new(); n],
                d_feature,
                d_weights,
                d_cos,
                stats,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(merge(outputs, bank.classes(), dim, n))
}

pub fn sharded_step_softmax(
    x: &[f64],
    y: usize,
    bank: &ShardedBank,
    head: &Softmax,
    exec: Exec,
) -> Result<(LossGradients, CommStats)> {
    let (step, mut d_cos) = sharded_batch_softmax(&[x.to_vec()], &[y], bank, head, exec)?;
    let stats = step.stats;
    Ok((
        LossGradients {
            value: step.values[0],
            d_cos: d_cos.swap_remove(0),
            d_weights: step.d_weights,
            d_feature: step.d_features.into_iter().next().unwrap_or_default(),
            d_bias: 0.0,
        },
        stats,
    ))
}

/// One row of the throughput table.
#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub loss: &'static str,
    pub shards: usize,
    pub classes: usize,
    pub dim: usize,
    pub batch: usize,
    pub steps_per_sec: f64,
    pub stats: CommStats,
}

impl BenchRow {
    pub const HEADER: &'static str =
        "# loss,S,K,D,batch,steps_per_sec,remote_weight_scalars,normalizer_scalars";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.4},{},{}",
            self.loss,
            self.shards,
            self.classes,
            self.dim,
            self.batch,
            self.steps_per_sec,
            self.stats.remote_weight_scalars_read,
            self.stats.normalizer_exchange_scalars
        )
    }
}

#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub classes: usize,
    pub dim: usize,
    pub shard_counts: Vec<usize>,
    pub batch: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub include_softmax: bool,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            classes: 1 << 17,
            dim: 128,
            shard_counts: vec![1, 2, 4],
            batch: 4,
            repetitions: 3,
            seed: 0,
            include_softmax: true,
        }
    }
}

/// Classifier-layer steps per second for each shard count, running `S`
/// shards on `S` worker threads. Numerics are deterministic, timing is not.
pub fn throughput_bench(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bank = ClassifierBank::random(spec.classes, spec.dim, &mut rng)?;
    let xs = (0..spec.batch)
        .map(|_| sample_sphere_uniform(spec.dim, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let ys: Vec<usize> = (0..spec.batch).map(|b| (b * 7919) % spec.classes).collect();
    let sf2 = OneVsAll::sphereface2(&crate::sphere::Hyperparams::ablation_default())?;
    let softmax = Softmax::new(30.0, 0.0, 1.0)?;
    let reps = spec.repetitions.max(1);
    let mut rows = Vec::new();
    for &s in &spec.shard_counts {
        let sharded = ShardedBank::from_bank(&bank, ShardPlan::contiguous(spec.classes, s)?)?;
        let run = |softmax_loss: bool| -> Result<(f64, CommStats)> {
            par::with_threads(s, || {
                let exec = Exec::Parallel;
                let mut stats = CommStats::default();
                let start = Instant::now();
                for _ in 0..reps {
                    stats = if softmax_loss {
                        sharded_batch_softmax(&xs, &ys, &sharded, &softmax, exec)?.0.stats
                    } else {
                        sharded_batch_one_vs_all(&xs, &ys, &sharded, &sf2, exec)?.stats
                    };
                }
                Ok((reps as f64 / start.elapsed().as_secs_f64(), stats))
            })
        };
        let (sps, stats) = run(false)?;
        rows.push(BenchRow {
            loss: "sphereface2",
            shards: s,
            classes: spec.classes,
            dim: spec.dim,
            batch: spec.batch,
            steps_per_sec: sps,
            stats,
        });
        if spec.include_softmax {
            let (sps, stats) = run(true)?;
            rows.push(BenchRow {
                loss: "softmax",
                shards: s,
                classes: spec.classes,
                dim: spec.dim,
                batch: spec.batch,
                steps_per_sec: sps,
                stats,
            });
        }
    }
    Ok(rows)
}
