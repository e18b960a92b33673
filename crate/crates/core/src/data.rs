//! Synthetic datasets, label corruption, the A/B split and batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
    pub noise_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, provenance: Provenance) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::dim("dataset", inputs.shape(), &[labels.len()]));
        }
        if labels.len() < 2 {
            return Err(Error::Config("a dataset needs at least 2 samples".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Index(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Loads `label,x0,x1,...` rows with a header line.
    pub fn from_csv(path: &Path, num_classes: Option<usize>) -> Result<Self> {
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
        let headers = reader.headers().map_err(|e| parse_err(e.to_string()))?.clone();
        if headers.get(0) != Some("label") || headers.len() < 2 {
            return Err(parse_err("header must be `label,x0,x1,...`".into()));
        }
        let dim = headers.len() - 1;
        let (mut labels, mut data) = (Vec::new(), Vec::new());
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| parse_err(e.to_string()))?;
            let at = |m: String| parse_err(format!("row {}: {m}", line + 2));
            let label = rec[0]
                .trim()
                .parse::<usize>()
                .map_err(|e| at(format!("label: {e}")))?;
            labels.push(label);
            for field in rec.iter().skip(1) {
                data.push(field.trim().parse::<f64>().map_err(|e| at(e.to_string()))?);
            }
        }
        let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        let inputs = Tensor::new(vec![labels.len(), dim], data)?;
        Dataset::new(
            inputs,
            labels,
            k,
            Provenance {
                generator: format!("csv:{}", path.display()),
                seed: 0,
                noise_rate: 0.0,
            },
        )
    }

    /// Rows `idx` as a new dataset (same classes and provenance).
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Dataset::new(
            self.inputs.select_rows(idx)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
            self.provenance.clone(),
        )
    }
}

/// `K` unit-variance isotropic clusters whose means lie on a sphere of
/// radius `sep`; classes balanced, inputs standardized per dimension.
pub fn gen_gaussian_clusters(k: usize, d: usize, n: usize, sep: f64, seed: u64) -> Result<Dataset> {
    if k < 2 || n < k || d == 0 {
        return Err(Error::Config(format!(
            "gaussian clusters need K >= 2, d >= 1 and n >= K (got K={k}, d={d}, n={n})"
        )));
    }
    let mut r = rng(seed);
    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.iter().map(|x| x / norm * sep).collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut r);
    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        for mu in &means[y] {
            data.push(mu + r.sample::<f64, _>(StandardNormal));
        }
    }
    standardize(&mut data, n, d);
    Dataset::new(
        Tensor::new(vec![n, d], data)?,
        labels,
        k,
        Provenance {
            generator: "gaussian".into(),
            seed,
            noise_rate: 0.0,
        },
    )
}

fn standardize(data: &mut [f64], n: usize, d: usize) {
    for j in 0..d {
        let mean = (0..n).map(|i| data[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (data[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            data[i * d + j] = (data[i * d + j] - mean) / sd;
        }
    }
}

pub const PATTERN_NOISE: f64 = 0.3;

/// `[n, 1, hw, hw]` images: each class is a fixed square-wave grating with
/// its own orientation and frequency, plus Gaussian pixel noise.
pub fn gen_pattern_images(k: usize, hw: usize, n: usize, seed: u64) -> Result<Dataset> {
    gen_pattern_images_with_noise(k, hw, n, PATTERN_NOISE, seed)
}

pub fn gen_pattern_images_with_noise(
    k: usize,
    hw: usize,
    n: usize,
    sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if hw < 8 || k < 2 || n < k {
        return Err(Error::Config(format!(
            "pattern images need hw >= 8, K >= 2, n >= K (got hw={hw}, K={k}, n={n})"
        )));
    }
    let templates: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let angle = std::f64::consts::PI * c as f64 / k as f64;
            let freq = 1.0 + (c % 3) as f64;
            let (ca, sa) = (angle.cos(), angle.sin());
            (0..hw * hw)
                .map(|p| {
                    let (y, x) = ((p / hw) as f64, (p % hw) as f64);
                    let phase = 2.0 * std::f64::consts::PI * freq * (x * ca + y * sa) / hw as f64;
                    if phase.sin() >= 0.0 {
                        1.0
                    } else {
                        -1.0
                    }
                })
                .collect()
        })
        .collect();
    let mut r = rng(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut r);
    let mut data = Vec::with_capacity(n * hw * hw);
    for &y in &labels {
        for &t in &templates[y] {
            let noise: f64 = r.sample(StandardNormal);
            data.push(t + sigma * noise);
        }
    }
    Dataset::new(
        Tensor::new(vec![n, 1, hw, hw], data)?,
        labels,
        k,
        Provenance {
            generator: "patterns".into(),
            seed,
            noise_rate: 0.0,
        },
    )
}

/// Replaces every label with an independent uniform draw over `[0, K)`.
pub fn randomize_labels(ds: &Dataset, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut out = ds.clone();
    for y in &mut out.labels {
        *y = r.random_range(0..ds.num_classes);
    }
    out.provenance.generator = format!("{}+random_labels", ds.provenance.generator);
    out.provenance.noise_rate = 1.0;
    out
}

/// Gives exactly `round(rate·n)` uniformly chosen samples a uniformly drawn
/// wrong label.
pub fn inject_label_noise(ds: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("noise rate {rate} outside [0,1]")));
    }
    let n = ds.len();
    let flips = (rate * n as f64).round() as usize;
    let mut r = rng(seed);
    let chosen = rand::seq::index::sample(&mut r, n, flips);
    let mut out = ds.clone();
    for i in chosen {
        let y = out.labels[i];
        let mut z = r.random_range(0..ds.num_classes - 1);
        if z >= y {
            z += 1;
        }
        out.labels[i] = z;
    }
    out.provenance.noise_rate = rate;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    sides: Vec<Side>,
    p: f64,
}

impl SplitAssignment {
    pub fn side(&self, i: usize) -> Side {
        self.sides[i]
    }

    pub fn sides(&self) -> &[Side] {
        &self.sides
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn count(&self, side: Side) -> usize {
        self.sides.iter().filter(|&&s| s == side).count()
    }

    pub fn len(&self) -> usize {
        self.sides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sides.is_empty()
    }
}

/// Uniformly random subset of size `round(p·n)` goes to side A, the rest to B.
pub fn split_ab(n: usize, p: f64, split_seed: u64) -> Result<SplitAssignment> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("split fraction p={p} must lie in (0,1)")));
    }
    let size_a = (p * n as f64).round() as usize;
    if size_a == 0 || size_a >= n {
        return Err(Error::Config(format!(
            "split p={p} of n={n} leaves one side empty"
        )));
    }
    let mut sides = vec![Side::B; n];
    for i in rand::seq::index::sample(&mut rng(split_seed), n, size_a) {
        sides[i] = Side::A;
    }
    Ok(SplitAssignment { sides, p })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
}

impl BatchPlan {
    /// Sample order for `epoch`; a pure function of `(seed, epoch)`.
    pub fn permutation(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut r = rng(self.seed);
        r.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        order
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Per-row split side; all `A` when no split is attached.
    pub sides: Vec<Side>,
}

impl Batch {
    /// Row positions (within the batch) belonging to `side`.
    pub fn rows(&self, side: Side) -> Vec<usize> {
        (0..self.sides.len()).filter(|&r| self.sides[r] == side).collect()
    }
}

/// One epoch of shuffled mini-batches; the final partial batch is kept.
pub fn batches(
    ds: &Dataset,
    plan: &BatchPlan,
    epoch: usize,
    split: Option<&SplitAssignment>,
) -> Result<Vec<Batch>> {
    if plan.batch_size == 0 || plan.batch_size > ds.len() {
        return Err(Error::Config(format!(
            "batch size {} must be in [1, {}]",
            plan.batch_size,
            ds.len()
        )));
    }
    if let Some(s) = split {
        if s.len() != ds.len() {
            return Err(Error::Contract("split does not match dataset size".into()));
        }
    }
    plan.permutation(ds.len(), epoch)
        .chunks(plan.batch_size)
        .map(|idx| {
            Ok(Batch {
                indices: idx.to_vec(),
                inputs: ds.inputs.select_rows(idx)?,
                labels: idx.iter().map(|&i| ds.labels[i]).collect(),
                sides: idx
                    .iter()
                    .map(|&i| split.map_or(Side::A, |s| s.side(i)))
                    .collect(),
            })
        })
        .collect()
}
