//! Labeled synthetic clusters on the unit sphere, label noise, and the
//! dataset text format.

use std::io::{BufRead, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::sphere::{dot, l2_normalize, sample_sphere_uniform};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub classes: usize,
    pub dim: usize,
    pub inputs: Vec<Vec<f64>>,
    /// Training labels, possibly corrupted.
    pub labels: Vec<usize>,
    pub true_labels: Vec<usize>,
    /// Unit class centres. Empty when the dataset was read from a file.
    pub class_means: Vec<Vec<f64>>,
    pub noise_rate: f64,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn flipped(&self) -> usize {
        self.labels.iter().zip(&self.true_labels).filter(|(a, b)| a != b).count()
    }

    /// Indices of samples whose true label is `class`.
    pub fn members(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.true_labels[i] == class).collect()
    }
}

/// Parameters of [`make_synthetic`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Inverse standard deviation of the isotropic perturbation.
    pub concentration: f64,
}

fn validate(spec: &SyntheticSpec) -> Result<()> {
    if spec.classes < 1 {
        return Err(Error::InvalidArgument("need at least one class".into()));
    }
    if spec.per_class < 1 {
        return Err(Error::InvalidArgument("need at least one sample per class".into()));
    }
    if !(spec.concentration > 0.0) {
        return Err(Error::InvalidArgument(format!("concentration must be > 0, got {}", spec.concentration)));
    }
    Ok(())
}

fn draw_means<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    while means.len() < spec.classes {
        let m = sample_sphere_uniform(spec.dim, rng)?;
        // Redraw exact duplicates so every pair has a positive angle.
        if means.iter().all(|o| dot(o, &m) < 1.0 - 1e-12) {
            means.push(m);
        }
    }
    Ok(means)
}

fn draw_samples<R: Rng + ?Sized>(
    means: &[Vec<f64>],
    per_class: usize,
    concentration: f64,
    seed: u64,
    rng: &mut R,
) -> Result<SyntheticDataset> {
    let dim = means[0].len();
    let mut inputs = Vec::with_capacity(means.len() * per_class);
    let mut labels = Vec::with_capacity(inputs.capacity());
    for (k, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let v: Vec<f64> = mean
                .iter()
                .map(|&mu| {
                    let z: f64 = rng.sample(StandardNormal);
                    mu + z / concentration
                })
                .collect();
            inputs.push(l2_normalize(&v)?);
            labels.push(k);
        }
    }
    Ok(SyntheticDataset {
        classes: means.len(),
        dim,
        inputs,
        true_labels: labels.clone(),
        labels,
        class_means: means.to_vec(),
        noise_rate: 0.0,
        seed,
    })
}

/// Draws `classes` uniform centres and `per_class` perturbed samples around each.
pub fn make_synthetic<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<SyntheticDataset> {
    validate(spec)?;
    let means = draw_means(spec, rng)?;
    draw_samples(&means, spec.per_class, spec.concentration, 0, rng)
}

/// Training and held-out sets drawn around the same class centres from one seed.
pub fn make_synthetic_split(
    spec: &SyntheticSpec,
    test_per_class: usize,
    seed: u64,
) -> Result<(SyntheticDataset, SyntheticDataset)> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = draw_means(spec, &mut rng)?;
    let train = draw_samples(&means, spec.per_class, spec.concentration, seed, &mut rng)?;
    let test = draw_samples(&means, test_per_class.max(1), spec.concentration, seed, &mut rng)?;
    Ok((train, test))
}

/// Relabels exactly `round(rate·N)` uniformly chosen samples with a uniformly
/// chosen wrong class. Noise is applied relative to the true labels.
pub fn inject_label_noise<R: Rng + ?Sized>(
    ds: &SyntheticDataset,
    rate: f64,
    rng: &mut R,
) -> Result<SyntheticDataset> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("noise rate must lie in [0,1), got {rate}")));
    }
    let n = ds.len();
    let count = (rate * n as f64).round() as usize;
    let mut out = ds.clone();
    out.labels = ds.true_labels.clone();
    out.noise_rate = rate;
    if count == 0 {
        return Ok(out);
    }
    if ds.classes < 2 {
        return Err(Error::InvalidArgument("label noise needs at least 2 classes".into()));
    }
    let mut picked = index::sample(rng, n, count).into_vec();
    picked.sort_unstable();
    for i in picked {
        let truth = ds.true_labels[i];
        let shift = rng.random_range(1..ds.classes);
        out.labels[i] = (truth + shift) % ds.classes;
    }
    Ok(out)
}

/// Writes `# K=.. D=.. noise=.. seed=..` then `label,true_label,x_0,...` rows.
pub fn write_dataset<W: Write>(ds: &SyntheticDataset, mut w: W) -> Result<()> {
    writeln!(w, "# K={} D={} noise={} seed={}", ds.classes, ds.dim, ds.noise_rate, ds.seed)?;
    let mut line = String::new();
    for ((x, l), t) in ds.inputs.iter().zip(&ds.labels).zip(&ds.true_labels) {
        line.clear();
        line.push_str(&format!("{l},{t}"));
        for v in x {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub(crate) fn parse_header_fields(line: &str) -> Vec<(&str, &str)> {
    line.trim_start_matches('#')
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .collect()
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<SyntheticDataset> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty dataset file".into() })??;
    if !header.starts_with('#') {
        return Err(Error::Parse { line: 1, msg: "missing '#' header".into() });
    }
    let (mut classes, mut dim, mut noise, mut seed) = (None, None, 0.0, 0);
    for (k, v) in parse_header_fields(&header) {
        let bad = |_| Error::Parse { line: 1, msg: format!("bad value for {k}: {v}") };
        match k {
            "K" => classes = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "D" => dim = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "noise" => noise = v.parse::<f64>().map_err(|e| bad(e.to_string()))?,
            "seed" => seed = v.parse::<u64>().map_err(|e| bad(e.to_string()))?,
            _ => {}
        }
    }
    let classes = classes.ok_or_else(|| Error::Parse { line: 1, msg: "header lacks K".into() })?;
    let dim = dim.ok_or_else(|| Error::Parse { line: 1, msg: "header lacks D".into() })?;
    let mut ds = SyntheticDataset {
        classes,
        dim,
        inputs: Vec::new(),
        labels: Vec::new(),
        true_labels: Vec::new(),
        class_means: Vec::new(),
        noise_rate: noise,
        seed,
    };
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let lineno = idx + 2;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { line: lineno, msg };
        let mut fields = line.split(',');
        let mut label = || -> Result<usize> {
            let v = fields.next().ok_or_else(|| err("missing label".into()))?;
            let l = v.trim().parse::<usize>().map_err(|e| err(e.to_string()))?;
            if l >= classes {
                return Err(err(format!("label {l} >= K={classes}")));
            }
            Ok(l)
        };
        let l = label()?;
        let t = label()?;
        let x = fields
            .map(|v| v.trim().parse::<f64>().map_err(|e| err(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if x.len() != dim {
            return Err(err(format!("expected {dim} coordinates, got {}", x.len())));
        }
        ds.labels.push(l);
        ds.true_labels.push(t);
        ds.inputs.push(x);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::norm;

    fn spec(classes: usize, dim: usize, per_class: usize, concentration: f64) -> SyntheticSpec {
        SyntheticSpec { classes, dim, per_class, concentration }
    }

    fn mean_cos(ds: &SyntheticDataset, same: bool) -> f64 {
        let (mut s, mut n) = (0.0, 0);
        for i in 0..ds.len() {
            for j in i + 1..ds.len() {
                if (ds.labels[i] == ds.labels[j]) == same {
                    s += dot(&ds.inputs[i], &ds.inputs[j]);
                    n += 1;
                }
            }
        }
        s / n as f64
    }

    #[test]
    fn within_class_tighter_than_between() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = make_synthetic(&spec(2, 8, 30, 10.0), &mut rng).unwrap();
        assert_eq!(ds.len(), 60);
        assert!(ds.inputs.iter().all(|x| (norm(x) - 1.0).abs() < 1e-12));
        assert!(mean_cos(&ds, true) > mean_cos(&ds, false));
    }

    #[test]
    fn infinite_concentration_collapses_to_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = make_synthetic(&spec(3, 4, 5, f64::INFINITY), &mut rng).unwrap();
        for (x, &l) in ds.inputs.iter().zip(&ds.labels) {
            for (a, b) in x.iter().zip(&ds.class_means[l]) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn six_class_planar_set() {
        let (train, test) = make_synthetic_split(&spec(6, 2, 20, 8.0), 10, 9).unwrap();
        assert_eq!(train.classes, 6);
        assert_eq!(train.len(), 120);
        assert_eq!(test.len(), 60);
        assert_eq!(train.class_means, test.class_means);
        for i in 0..6 {
            for j in i + 1..6 {
                assert!(dot(&train.class_means[i], &train.class_means[j]) < 1.0);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_synthetic(&spec(0, 4, 5, 1.0), &mut rng).is_err());
        assert_eq!(make_synthetic(&spec(1, 4, 5, 1.0), &mut rng).unwrap().classes, 1);
        assert!(make_synthetic(&spec(2, 4, 0, 1.0), &mut rng).is_err());
        assert!(make_synthetic(&spec(2, 1, 5, 1.0), &mut rng).is_err());
    }

    #[test]
    fn noise_flips_exact_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = make_synthetic(&spec(5, 4, 20, 4.0), &mut rng).unwrap();
        let clean = inject_label_noise(&ds, 0.0, &mut rng).unwrap();
        assert_eq!(clean.labels, ds.labels);
        let noisy = inject_label_noise(&ds, 0.4, &mut rng).unwrap();
        assert_eq!(noisy.flipped(), 40);
        assert_eq!(noisy.true_labels, ds.true_labels);
        assert_eq!(noisy.inputs, ds.inputs);
        assert_eq!(noisy.noise_rate, 0.4);
        let worst = inject_label_noise(&ds, 0.8, &mut rng).unwrap();
        assert_eq!(worst.flipped(), 80);
        assert!(inject_label_noise(&ds, 1.0, &mut rng).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ds = make_synthetic(&spec(3, 5, 4, 2.0), &mut rng).unwrap();
        ds = inject_label_noise(&ds, 0.25, &mut rng).unwrap();
        ds.seed = 6;
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# K=3 D=5 noise=0.25 seed=6\n"));
        let back = read_dataset(&buf[..]).unwrap();
        assert_eq!(back.inputs, ds.inputs);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.true_labels, ds.true_labels);
        assert_eq!(back.noise_rate, 0.25);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "# K=2 D=2 noise=0 seed=0\n0,0,1.0,0.0\n3,0,1.0,0.0\n";
        match read_dataset(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(read_dataset("0,0,1\n".as_bytes()).is_err());
    }
}
