//! Flat `key = value` run configuration with a fixed key registry.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Clone, Copy, Debug)]
pub enum Kind {
    Int,
    Float,
    IntList,
    FloatList,
    Text,
    Choice(&'static [&'static str]),
}

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub kind: Kind,
    pub help: &'static str,
}

const LOSSES: &[&str] = &["naive", "balanced", "curvature", "margin", "final", "arc", "mult", "softmax", "all"];

pub const KEYS: &[Key] = &[
    Key { name: "seed", default: "0", kind: Kind::Int, help: "random seed for data, pairs and initialization" },
    Key { name: "out", default: "out", kind: Kind::Text, help: "output directory" },
    // data
    Key { name: "K", default: "50", kind: Kind::Int, help: "number of classes" },
    Key { name: "d_in", default: "32", kind: Kind::Int, help: "input dimension of the synthetic data" },
    Key { name: "per_class", default: "30", kind: Kind::Int, help: "training samples per class" },
    Key { name: "test_per_class", default: "20", kind: Kind::Int, help: "held-out samples per class" },
    Key { name: "concentration", default: "4", kind: Kind::Float, help: "inverse noise scale around class centres" },
    Key { name: "noise", default: "0", kind: Kind::Float, help: "fraction of training labels corrupted (train)" },
    Key { name: "data_dir", default: "", kind: Kind::Text, help: "read train.csv and test.csv from here instead of generating" },
    // loss
    Key {
        name: "loss",
        default: "final",
        kind: Kind::Choice(LOSSES),
        help: "naive|balanced|curvature|margin|final|arc|mult|softmax; gradcheck also takes all",
    },
    Key { name: "lambda", default: "0.7", kind: Kind::Float, help: "positive/negative balance" },
    Key { name: "r", default: "30", kind: Kind::Float, help: "logit scale" },
    Key { name: "m", default: "0.4", kind: Kind::Float, help: "margin (arc/mult in training use it too)" },
    Key { name: "t", default: "3", kind: Kind::Float, help: "similarity adjustment exponent" },
    Key { name: "softmax_s", default: "30", kind: Kind::Float, help: "softmax baseline scale" },
    Key { name: "softmax_m", default: "0", kind: Kind::Float, help: "softmax baseline additive cosine margin" },
    // training
    Key { name: "lr", default: "0.1", kind: Kind::Float, help: "learning rate" },
    Key { name: "momentum", default: "0.9", kind: Kind::Float, help: "SGD momentum" },
    Key { name: "epochs", default: "15", kind: Kind::Int, help: "training epochs" },
    Key { name: "batch", default: "32", kind: Kind::Int, help: "batch size" },
    Key { name: "weight_decay", default: "0", kind: Kind::Float, help: "L2 weight decay" },
    Key { name: "lr_milestones", default: "", kind: Kind::IntList, help: "epochs at which lr is multiplied by lr_gamma" },
    Key { name: "lr_gamma", default: "0.1", kind: Kind::Float, help: "lr decay factor" },
    Key { name: "hidden", default: "64,64", kind: Kind::IntList, help: "hidden layer widths" },
    Key { name: "feat_dim", default: "64", kind: Kind::Int, help: "feature dimension" },
    Key { name: "bias_init", default: "closed_form", kind: Kind::Text, help: "closed_form, zero or a number" },
    Key { name: "exec", default: "parallel", kind: Kind::Choice(&["parallel", "sequential"]), help: "per-sample execution" },
    // evaluation
    Key { name: "n_pos", default: "3000", kind: Kind::Int, help: "positive verification pairs" },
    Key { name: "n_neg", default: "3000", kind: Kind::Int, help: "negative verification pairs" },
    Key { name: "far", default: "0.001,0.01,0.1", kind: Kind::FloatList, help: "FAR levels for TAR" },
    Key { name: "bins", default: "100", kind: Kind::Int, help: "histogram bins on [-1,1]" },
    Key { name: "model", default: "", kind: Kind::Text, help: "model file for eval (default <out>/model.json)" },
    // gradcheck
    Key { name: "trials", default: "50", kind: Kind::Int, help: "random instances per loss" },
    Key { name: "step", default: "1e-6", kind: Kind::Float, help: "central difference step" },
    // bench-shard
    Key { name: "bench_K", default: "131072", kind: Kind::Int, help: "classes in the shard bench" },
    Key { name: "bench_D", default: "128", kind: Kind::Int, help: "feature dimension in the shard bench" },
    Key { name: "shards", default: "1,2,4", kind: Kind::IntList, help: "shard counts" },
    Key { name: "bench_batch", default: "4", kind: Kind::Int, help: "samples per bench step" },
    Key { name: "reps", default: "3", kind: Kind::Int, help: "timed steps per shard count" },
    // noise
    Key { name: "rates", default: "0,0.2,0.4,0.6,0.8", kind: Kind::FloatList, help: "label noise rates" },
    // plot-data
    Key {
        name: "curve",
        default: "easyhard",
        kind: Kind::Choice(&["easyhard", "curvature", "simadjust", "margin", "histogram"]),
        help: "curve to tabulate",
    },
    Key { name: "s", default: "4,8,16", kind: Kind::FloatList, help: "scales for the easyhard and curvature curves" },
    Key { name: "cos_i", default: "0.2", kind: Kind::Float, help: "non-target cosine in the easyhard curve" },
    Key { name: "classes_plot", default: "4", kind: Kind::Int, help: "classes in the easyhard curve" },
    Key { name: "points", default: "201", kind: Kind::Int, help: "samples along the curve" },
    Key { name: "ts", default: "1,2,3,5", kind: Kind::FloatList, help: "exponents for the simadjust curve" },
    Key { name: "scores", default: "", kind: Kind::Text, help: "scores file for histogram (default <out>/scores.csv)" },
];

pub fn key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

fn check(k: &Key, value: &str) -> Result<(), CliError> {
    let bad = |what: &str| CliError::Config(format!("key '{}': expected {what}, got '{value}'", k.name));
    let list_ok = |f: &dyn Fn(&str) -> bool| value.split(',').map(str::trim).filter(|s| !s.is_empty()).all(f);
    match k.kind {
        Kind::Int if value.parse::<u64>().is_err() => Err(bad("a non-negative integer")),
        Kind::Float if value.parse::<f64>().map_or(true, |v| !v.is_finite()) => Err(bad("a finite number")),
        Kind::IntList if !list_ok(&|s| s.parse::<u64>().is_ok()) => Err(bad("comma-separated integers")),
        Kind::FloatList if !list_ok(&|s| s.parse::<f64>().is_ok()) => Err(bad("comma-separated numbers")),
        Kind::Choice(opts) if !opts.contains(&value) => Err(bad(&format!("one of {}", opts.join("|")))),
        _ => Ok(()),
    }
}

/// Resolved values for every registry key.
#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn set(&mut self, name: &str, value: &str) -> Result<(), CliError> {
        let k = key(name).ok_or_else(|| CliError::Config(format!("unknown key '{name}'")))?;
        let value = value.trim();
        check(k, value)?;
        self.values.insert(k.name, value.to_string());
        Ok(())
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn load_str(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                CliError::Config(msg) => CliError::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.load_str(&text)
    }

    pub fn text(&self, name: &str) -> &str {
        self.values.get(name).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {name}"))
    }

    pub fn get<T: FromStr>(&self, name: &str) -> Result<T, CliError> {
        self.text(name)
            .parse()
            .map_err(|_| CliError::Config(format!("key '{name}': cannot parse '{}'", self.text(name))))
    }

    pub fn list<T: FromStr>(&self, name: &str) -> Result<Vec<T>, CliError> {
        self.text(name)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| CliError::Config(format!("key '{name}': cannot parse '{s}'"))))
            .collect()
    }

    /// The resolved configuration in file form, for provenance next to outputs.
    pub fn dump(&self) -> String {
        KEYS.iter().map(|k| format!("{} = {}\n", k.name, self.text(k.name))).collect()
    }
}
