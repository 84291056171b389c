//! Tabulated curves for external plotting.

use std::f64::consts::PI;

use sf2_core::loss::{softplus, OneVsAll};
use sf2_core::simadjust::{g, AdjustExponent};
use sf2_core::sphere::{Hyperparams, MarginVariant};

use crate::CliError;

pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn csv(&self) -> String {
        let mut s = format!("# {}\n", self.header.join(","));
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let n = points.max(2);
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Normalized softmax loss against the target cosine, every other cosine fixed.
pub fn easy_hard(scales: &[f64], cos_i: f64, classes: usize, points: usize) -> Result<Table, CliError> {
    if classes < 2 {
        return Err(CliError::Config("classes_plot must be >= 2".into()));
    }
    let others = ((classes - 1) as f64).ln();
    let mut header = vec!["cos_y".to_string()];
    header.extend(scales.iter().map(|s| format!("s_{s}")));
    let rows = grid(-1.0, 1.0, points)
        .into_iter()
        .map(|c| {
            let mut row = vec![c];
            row.extend(scales.iter().map(|s| softplus(others + s * (cos_i - c))));
            row
        })
        .collect();
    Ok(Table { header, rows })
}

/// `(1/r)·log(1 + exp(−r·cos θ_y))` for each scale.
pub fn curvature(scales: &[f64], points: usize) -> Table {
    let mut header = vec!["cos_y".to_string()];
    header.extend(scales.iter().map(|r| format!("r_{r}")));
    let rows = grid(-1.0, 1.0, points)
        .into_iter()
        .map(|c| {
            let mut row = vec![c];
            row.extend(scales.iter().map(|r| softplus(-r * c) / r));
            row
        })
        .collect();
    Table { header, rows }
}

pub fn sim_adjust(ts: &[f64], points: usize) -> Result<Table, CliError> {
    let exps = ts.iter().map(|&t| AdjustExponent::new(t)).collect::<Result<Vec<_>, _>>()?;
    let mut header = vec!["z".to_string()];
    header.extend(ts.iter().map(|t| format!("t_{t}")));
    let mut rows = Vec::new();
    for z in grid(-1.0, 1.0, points) {
        let mut row = vec![z];
        for &e in &exps {
            row.push(g(z, e)?);
        }
        rows.push(row);
    }
    Ok(Table { header, rows })
}

/// Positive-pair similarity after the margin, `g(cos θ) + shift`, for each variant.
pub fn margin(hp: &Hyperparams, points: usize) -> Result<Table, CliError> {
    let heads = [
        OneVsAll::sphereface2(&hp.with_variant(MarginVariant::CosineAdditive, hp.m_p)?)?,
        OneVsAll::sphereface2(&hp.with_variant(MarginVariant::ArcAdditive, Hyperparams::arc_default().m_p)?)?,
        OneVsAll::sphereface2(
            &hp.with_variant(MarginVariant::Multiplicative, Hyperparams::multiplicative_default().m_p)?,
        )?,
    ];
    let t = hp.exponent();
    let mut rows = Vec::new();
    for theta in grid(0.0, PI, points) {
        let c = theta.cos();
        let mut row = vec![theta, g(c, t)?];
        for h in &heads {
            row.push(g(c, t)? + h.positive_shift(c)?);
        }
        rows.push(row);
    }
    let header = ["theta", "none", "sf2_c", "sf2_a", "sf2_m"].map(String::from).to_vec();
    Ok(Table { header, rows })
}

/// Normalized histograms of positive and negative pair scores on [-1, 1].
pub fn histogram(text: &str, bins: usize) -> Result<Table, CliError> {
    if bins == 0 {
        return Err(CliError::Config("bins must be >= 1".into()));
    }
    let (mut pos, mut neg) = (vec![0usize; bins], vec![0usize; bins]);
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let parse_err = || CliError::Io(format!("scores line {}: expected same,score", n + 1));
        let (same, score) = line.split_once(',').ok_or_else(parse_err)?;
        let score: f64 = score.trim().parse().map_err(|_| parse_err())?;
        let bin = (((score + 1.0) / 2.0 * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        match same.trim() {
            "1" => pos[bin] += 1,
            "0" => neg[bin] += 1,
            _ => return Err(parse_err()),
        }
    }
    let total = |v: &[usize]| v.iter().sum::<usize>().max(1) as f64;
    let (np, nn) = (total(&pos), total(&neg));
    let rows = (0..bins)
        .map(|b| {
            let lo = -1.0 + 2.0 * b as f64 / bins as f64;
            vec![lo, lo + 2.0 / bins as f64, pos[b] as f64 / np, neg[b] as f64 / nn]
        })
        .collect();
    let header = ["bin_lo", "bin_hi", "pos_frac", "neg_frac"].map(String::from).to_vec();
    Ok(Table { header, rows })
}
