//! Small feed-forward encoder, momentum SGD and the training loop.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{parse_header_fields, SyntheticDataset};
use crate::error::{Error, Result};
use crate::eval::{best_threshold_accuracy, pair_scores, PairSet};
use crate::loss::{AblationFlags, LossHead, OneVsAll, Softmax};
use crate::par::Exec;
use crate::sphere::{l2_normalize, ClassifierBank, Hyperparams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

/// Rectifier MLP with an identity output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub layers: Vec<Layer>,
}

/// Activations kept for the backward pass. `acts[0]` is the input.
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has an input")
    }
}

/// Parameter gradients laid out like the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ModelGrads {
    pub fn zeros_like(model: &EncoderModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    fn add_assign(&mut self, o: &ModelGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&o.layers) {
            w.iter_mut().zip(ow).for_each(|(a, v)| *a += v);
            b.iter_mut().zip(ob).for_each(|(a, v)| *a += v);
        }
    }

    fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= s);
        }
    }
}

impl EncoderModel {
    /// He-initialized weights, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let std = (2.0 / w[0] as f64).sqrt();
                Layer {
                    inputs: w[0],
                    outputs: w[1],
                    weights: (0..w[0] * w[1])
                        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        (0..dim).for_each(|i| weights[i * dim + i] = 1.0);
        Self {
            layers: vec![Layer { inputs: dim, outputs: dim, weights, bias: vec![0.0; dim] }],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut h = layer.apply(&acts[k]);
            if k < last {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(h);
        }
        Ok(Trace { acts })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.acts.pop().unwrap_or_default())
    }

    pub fn backward(&self, trace: &Trace, d_out: &[f64]) -> Result<ModelGrads> {
        if d_out.len() != self.output_dim() {
            return Err(Error::DimensionMismatch { expected: self.output_dim(), got: d_out.len() });
        }
        let mut grads = ModelGrads::zeros_like(self);
        let mut delta = d_out.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &trace.acts[k];
            let (gw, gb) = &mut grads.layers[k];
            for o in 0..layer.outputs {
                gb[o] = delta[o];
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                row.iter_mut().zip(input).for_each(|(g, v)| *g = delta[o] * v);
            }
            if k > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for o in 0..layer.outputs {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    prev.iter_mut().zip(row).for_each(|(p, w)| *p += delta[o] * w);
                }
                // rectifier mask of the previous layer's output
                prev.iter_mut().zip(input).for_each(|(p, a)| {
                    if *a <= 0.0 {
                        *p = 0.0
                    }
                });
                delta = prev;
            }
        }
        Ok(grads)
    }
}

/// Classic momentum: `v ← μ·v + g`, `p ← p − lr·v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub enum BiasInit {
    #[default]
    ClosedForm,
    Zero,
    Fixed(f64),
}

impl std::str::FromStr for BiasInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed_form" | "closed-form" => Ok(Self::ClosedForm),
            "zero" => Ok(Self::Zero),
            _ if s.parse::<f64>().is_ok() => Ok(Self::Fixed(s.parse().unwrap_or(0.0))),
            _ => Err(Error::InvalidArgument(format!("unknown bias init '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LossChoice {
    /// One-vs-all loss with the given design principles switched on.
    OneVsAll(AblationFlags),
    Softmax { scale: f64, margin: f64, t: f64 },
}

impl Default for LossChoice {
    fn default() -> Self {
        LossChoice::OneVsAll(AblationFlags::ALL)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub loss: LossChoice,
    pub hp: Hyperparams,
    pub bias_init: BiasInit,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub hidden: Vec<usize>,
    pub feat_dim: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            epochs: 15,
            batch: 32,
            seed: 0,
            loss: LossChoice::default(),
            hp: Hyperparams::ablation_default(),
            bias_init: BiasInit::ClosedForm,
            weight_decay: 0.0,
            lr_milestones: Vec::new(),
            lr_gamma: 0.1,
            hidden: vec![64, 64],
            feat_dim: 64,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum must lie in [0,1), got {}", self.momentum)));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if self.feat_dim < 2 {
            return Err(Error::InvalidArgument("feature dimension must be >= 2".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("weight decay must be >= 0".into()));
        }
        self.hp.validate()
    }

    /// The loss for `classes` classes. With no design principle switched on
    /// the naive loss does not train, so it is weighted with λ = (K−1)/K.
    pub fn head(&self, classes: usize) -> Result<LossHead> {
        Ok(match self.loss {
            LossChoice::OneVsAll(flags) => {
                let mut h = OneVsAll::from_flags(flags, &self.hp)?;
                if flags == AblationFlags::NONE && classes >= 2 {
                    h.pos_weight = (classes - 1) as f64 / classes as f64;
                    h.neg_weight = 1.0 / classes as f64;
                }
                LossHead::OneVsAll(h)
            }
            LossChoice::Softmax { scale, margin, t } => LossHead::Softmax(Softmax::new(scale, margin, t)?),
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_gamma.powi(drops as i32)
    }

    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.feat_dim);
        sizes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Held-out pair accuracy; NaN without a validation set.
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: EncoderModel,
    pub bank: ClassifierBank,
    pub history: Vec<EpochRecord>,
    /// `∂L/∂b` averaged over the first batch, before any update.
    pub first_bias_grad: f64,
}

/// Held-out data used for the per-epoch pair accuracy.
pub struct Validation<'a> {
    pub dataset: &'a SyntheticDataset,
    pub pairs: &'a PairSet,
}

/// Initial bias for the chosen head and mode.
pub fn initial_bias(head: &LossHead, mode: BiasInit, classes: usize) -> Result<f64> {
    match (head, mode) {
        (LossHead::OneVsAll(h), BiasInit::ClosedForm)
            if h.uses_bias && classes >= 2 && h.pos_weight > 0.0 && h.neg_weight > 0.0 =>
        {
            h.initial_bias(classes)
        }
        (_, BiasInit::Fixed(b)) => Ok(b),
        _ => Ok(0.0),
    }
}

struct SampleGrad {
    loss: f64,
    model: ModelGrads,
    bank: Vec<f64>,
    bias: f64,
}

fn sample_grad(model: &EncoderModel, head: &LossHead, bank: &ClassifierBank, x: &[f64], y: usize) -> Result<SampleGrad> {
    let trace = model.forward_trace(x)?;
    let lg = head.forward_backward(trace.output(), bank, y)?;
    let mg = model.backward(&trace, &lg.d_feature)?;
    Ok(SampleGrad { loss: lg.value, model: mg, bank: lg.d_weights, bias: lg.d_bias })
}

/// Trains encoder, proxies and (when the head uses it) the shared bias.
pub fn train(
    config: &TrainConfig,
    dataset: &SyntheticDataset,
    bank: ClassifierBank,
    val: Option<Validation<'_>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    if bank.classes() != dataset.classes || bank.dim() != config.feat_dim {
        return Err(Error::DimensionMismatch { expected: dataset.classes, got: bank.classes() });
    }
    let head = config.head(dataset.classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = EncoderModel::new(&config.layer_sizes(dataset.dim), &mut rng)?;
    let mut bank = bank;
    bank.bias = initial_bias(&head, config.bias_init, bank.classes())?;

    let mut vel_model = ModelGrads::zeros_like(&model);
    let mut vel_bank = vec![0.0; bank.weights().len()];
    let mut vel_bias = 0.0;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut first_bias_grad = f64::NAN;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch) {
            let grads = config
                .exec
                .map_slice(batch, |&i| sample_grad(&model, &head, &bank, &dataset.inputs[i], dataset.labels[i]))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let mut g_model = ModelGrads::zeros_like(&model);
            let mut g_bank = vec![0.0; vel_bank.len()];
            let mut g_bias = 0.0;
            for g in &grads {
                loss_sum += g.loss;
                g_model.add_assign(&g.model);
                g_bank.iter_mut().zip(&g.bank).for_each(|(a, v)| *a += v);
                g_bias += g.bias;
            }
            let inv = 1.0 / batch.len() as f64;
            g_model.scale(inv);
            g_bank.iter_mut().for_each(|v| *v *= inv);
            g_bias *= inv;
            if first_bias_grad.is_nan() {
                first_bias_grad = g_bias;
            }
            if !g_bias.is_finite() || g_bank.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("training diverged at epoch {epoch}")));
            }

            let wd = config.weight_decay;
            for (layer, ((gw, gb), (vw, vb))) in model.layers.iter_mut().zip(g_model.layers.iter_mut().zip(&mut vel_model.layers)) {
                if wd > 0.0 {
                    gw.iter_mut().zip(&layer.weights).for_each(|(g, p)| *g += wd * p);
                }
                sgd_step(&mut layer.weights, gw, vw, lr, config.momentum);
                sgd_step(&mut layer.bias, gb, vb, lr, config.momentum);
            }
            if wd > 0.0 {
                g_bank.iter_mut().zip(bank.weights()).for_each(|(g, p)| *g += wd * p);
            }
            sgd_step(bank.weights_mut(), &g_bank, &mut vel_bank, lr, config.momentum);
            if head.uses_bias() {
                let mut b = [bank.bias];
                sgd_step(&mut b, &[g_bias], std::slice::from_mut(&mut vel_bias), lr, config.momentum);
                bank.bias = b[0];
            }
        }
        let val_accuracy = match &val {
            Some(v) => {
                let scores = pair_scores(&model, v.dataset, v.pairs, config.exec)?;
                best_threshold_accuracy(&scores, &v.pairs.same_flags()).1
            }
            None => f64::NAN,
        };
        history.push(EpochRecord { epoch, train_loss: loss_sum / dataset.len() as f64, val_accuracy });
    }
    Ok(TrainOutcome { model, bank, history, first_bias_grad })
}

/// Hyperparameters recorded in a feature export header.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExportMeta {
    pub r: f64,
    pub m: f64,
    pub lambda: f64,
    pub t: f64,
    pub b: f64,
}

/// Writes normalized features with labels, then the classifier directions.
pub fn export_features<W: Write>(
    model: &EncoderModel,
    dataset: &SyntheticDataset,
    bank: &ClassifierBank,
    meta: &ExportMeta,
    mut w: W,
) -> Result<()> {
    writeln!(
        w,
        "# K={} D_feat={} r={} m={} lambda={} t={} b={}",
        bank.classes(),
        bank.dim(),
        meta.r,
        meta.m,
        meta.lambda,
        meta.t,
        meta.b
    )?;
    let cols: Vec<String> = (0..bank.dim()).map(|k| format!("f{k}")).collect();
    writeln!(w, "# label,{}", cols.join(","))?;
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    for (x, &l) in dataset.inputs.iter().zip(&dataset.labels) {
        let f = l2_normalize(&model.forward(x)?)?;
        writeln!(w, "{l},{}", join(&f))?;
    }
    for i in 0..bank.classes() {
        writeln!(w, "W,{i},{}", join(&bank.direction(i)))?;
    }
    Ok(())
}

/// Parsed feature export.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub header: HashMap<String, String>,
    pub labels: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    pub classifiers: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn header_f64(&self, key: &str) -> Option<f64> {
        self.header.get(key).and_then(|v| v.parse().ok())
    }
}

pub fn read_features<R: BufRead>(r: R) -> Result<FeatureTable> {
    let mut table = FeatureTable {
        header: HashMap::new(),
        labels: Vec::new(),
        features: Vec::new(),
        classifiers: Vec::new(),
    };
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let err = |msg: String| Error::Parse { line: lineno, msg };
        if idx == 0 {
            if !line.starts_with('#') {
                return Err(err("missing '#' header".into()));
            }
            for (k, v) in parse_header_fields(&line) {
                table.header.insert(k.to_string(), v.to_string());
            }
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let nums = |s: &[&str]| -> Result<Vec<f64>> {
            s.iter().map(|v| v.trim().parse::<f64>().map_err(|e| err(e.to_string()))).collect()
        };
        if fields[0] == "W" {
            let class: usize = fields
                .get(1)
                .ok_or_else(|| err("missing class index".into()))?
                .parse()
                .map_err(|e: std::num::ParseIntError| err(e.to_string()))?;
            if class != table.classifiers.len() {
                return Err(err(format!("classifier rows out of order at class {class}")));
            }
            table.classifiers.push(nums(&fields[2..])?);
        } else {
            table.labels.push(fields[0].parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?);
            table.features.push(nums(&fields[1..])?);
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, make_synthetic_split, SyntheticSpec};

    #[test]
    fn identity_encoder_is_identity() {
        let m = EncoderModel::identity(3);
        assert_eq!(m.forward(&[0.5, -2.0, 1.0]).unwrap(), vec![0.5, -2.0, 1.0]);
        assert!(m.forward(&[1.0]).is_err());
    }

    #[test]
    fn zero_input_surfaces_degenerate_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = EncoderModel::new(&[3, 4, 2], &mut rng).unwrap();
        let f = m.forward(&[0.0; 3]).unwrap();
        assert_eq!(f, vec![0.0, 0.0]);
        let head = LossHead::OneVsAll(OneVsAll::sphereface2(&Hyperparams::ablation_default()).unwrap());
        let bank = ClassifierBank::random(3, 2, &mut rng).unwrap();
        assert!(matches!(head.forward_backward(&f, &bank, 0), Err(Error::DegenerateVector { .. })));
    }

    #[test]
    fn sgd_recursions() {
        let mut p = [1.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[2.0], &mut v, 0.1, 0.0);
        assert!((p[0] - 0.8).abs() < 1e-15);

        let (mut p, mut v) = ([0.0], [0.0]);
        sgd_step(&mut p, &[1.0], &mut v, 0.5, 0.9);
        sgd_step(&mut p, &[1.0], &mut v, 0.5, 0.9);
        assert!((p[0] + 0.5 * (2.0 + 0.9)).abs() < 1e-15);

        let (mut p, mut v) = ([3.0], [1.0]);
        for _ in 0..400 {
            sgd_step(&mut p, &[0.0], &mut v, 0.1, 0.9);
        }
        let rest = 3.0 - 0.1 * 0.9 / (1.0 - 0.9);
        assert!((p[0] - rest).abs() < 1e-12 && v[0].abs() < 1e-15);
    }

    fn flat(model: &EncoderModel) -> Vec<f64> {
        model.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
    }

    fn set_flat(model: &mut EncoderModel, k: usize, v: f64) {
        let mut k = k;
        for l in &mut model.layers {
            if k < l.weights.len() {
                l.weights[k] = v;
                return;
            }
            k -= l.weights.len();
            if k < l.bias.len() {
                l.bias[k] = v;
                return;
            }
            k -= l.bias.len();
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = EncoderModel::new(&[5, 7, 3], &mut rng).unwrap();
        let bank = ClassifierBank::random(4, 3, &mut rng).unwrap();
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let heads = [
            LossHead::OneVsAll(OneVsAll::sphereface2(&Hyperparams::new(0.7, 4.0, 0.2, 2.0).unwrap()).unwrap()),
            LossHead::Softmax(Softmax::new(5.0, 0.1, 1.0).unwrap()),
        ];
        for head in heads {
            let g = sample_grad(&model, &head, &bank, &x, 2).unwrap();
            let analytic: Vec<f64> = g.model.layers.iter().flat_map(|(w, b)| w.iter().chain(b).copied()).collect();
            let base = flat(&model);
            let h = 1e-6;
            for (k, &a) in analytic.iter().enumerate() {
                let mut plus = model.clone();
                set_flat(&mut plus, k, base[k] + h);
                let mut minus = model.clone();
                set_flat(&mut minus, k, base[k] - h);
                let f = |m: &EncoderModel| head.forward_backward(&m.forward(&x).unwrap(), &bank, 2).unwrap().value;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let rel = (a - fd).abs() / a.abs().max(fd.abs());
                assert!(rel <= 1e-5 || (a - fd).abs() <= 1e-8, "param {k}: {a} vs {fd}");
            }
        }
    }

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch: 8,
            seed,
            hidden: vec![16],
            feat_dim: 4,
            lr: 0.05,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn deterministic_across_strategies() {
        let (train_set, _) = make_synthetic_split(
            &SyntheticSpec { classes: 4, dim: 6, per_class: 10, concentration: 4.0 },
            2,
            1,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = ClassifierBank::random(4, 4, &mut rng).unwrap();
        let mut a_cfg = tiny_config(5);
        a_cfg.exec = Exec::Sequential;
        let a = train(&a_cfg, &train_set, bank.clone(), None).unwrap();
        let b = train(&tiny_config(5), &train_set, bank, None).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.bank, b.bank);
        let bits = |h: &[EpochRecord]| h.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.history), bits(&b.history));
        assert!(a.history.windows(2).all(|w| w[1].epoch == w[0].epoch + 1));
    }

    #[test]
    fn single_class_trains_on_positive_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = make_synthetic(&SyntheticSpec { classes: 1, dim: 4, per_class: 12, concentration: 3.0 }, &mut rng).unwrap();
        let bank = ClassifierBank::random(1, 4, &mut rng).unwrap();
        let out = train(&tiny_config(1), &ds, bank, None).unwrap();
        assert_eq!(out.bank.bias, out.bank.bias);
        assert!(out.history.iter().all(|r| r.train_loss.is_finite()));
        // untouched bias init with one class
        assert_eq!(initial_bias(&tiny_config(1).head(1).unwrap(), BiasInit::ClosedForm, 1).unwrap(), 0.0);
    }

    #[test]
    fn export_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = make_synthetic(&SyntheticSpec { classes: 3, dim: 5, per_class: 4, concentration: 2.0 }, &mut rng).unwrap();
        let model = EncoderModel::new(&[5, 8, 2], &mut rng).unwrap();
        let mut bank = ClassifierBank::random(3, 2, &mut rng).unwrap();
        bank.bias = -1.25;
        let meta = ExportMeta { r: 30.0, m: 0.2, lambda: 0.7, t: 3.0, b: bank.bias };
        let mut buf = Vec::new();
        export_features(&model, &ds, &bank, &meta, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().nth(1).unwrap() == "# label,f0,f1");
        let table = read_features(&buf[..]).unwrap();
        assert_eq!(table.labels, ds.labels);
        assert_eq!(table.header_f64("b"), Some(-1.25));
        assert_eq!(table.header_f64("D_feat"), Some(2.0));
        for (x, f) in ds.inputs.iter().zip(&table.features) {
            let expect = l2_normalize(&model.forward(x).unwrap()).unwrap();
            for (a, b) in expect.iter().zip(f) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        assert_eq!(table.classifiers[2], bank.direction(2));
    }

    #[test]
    fn unprincipled_row_falls_back_to_class_weighting() {
        let c = TrainConfig { loss: LossChoice::OneVsAll(AblationFlags::NONE), ..TrainConfig::default() };
        match c.head(10).unwrap() {
            LossHead::OneVsAll(h) => {
                assert!((h.pos_weight - 0.9).abs() < 1e-15 && (h.neg_weight - 0.1).abs() < 1e-15);
                assert_eq!(h.scale, 1.0);
                assert!(!h.uses_bias);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn config_validation_and_schedule() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        let c = TrainConfig { lr_milestones: vec![2, 4], lr: 1.0, lr_gamma: 0.5, ..TrainConfig::default() };
        assert_eq!(c.lr_at(1), 1.0);
        assert_eq!(c.lr_at(2), 0.5);
        assert_eq!(c.lr_at(7), 0.25);
    }
}
