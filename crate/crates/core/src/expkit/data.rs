//! Synthetic datasets with an in-distribution / shifted (OOD) split.
//!
//! The OOD split comes from the same generator as the ID splits, then is
//! rotated, translated and optionally jittered. This is a toy analogue of a
//! source dataset and a naturally shifted evaluation set.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::LabeledBatch;
use crate::error::{Error, Result};
use crate::rng;

/// Geometric shift applied to the OOD split.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ShiftParams {
    /// Radians, applied in the plane of the first two features.
    pub rotation: f64,
    /// Added after rotation; missing trailing components are zero.
    pub translation: Vec<f64>,
    /// Standard deviation of extra Gaussian jitter on OOD features.
    pub noise_sigma: f64,
}

impl ShiftParams {
    pub fn none() -> Self {
        Self::default()
    }

    fn is_valid(&self) -> bool {
        self.rotation.is_finite()
            && self.noise_sigma.is_finite()
            && self.noise_sigma >= 0.0
            && self.translation.iter().all(|t| t.is_finite())
    }

    /// Rotate about `pivot` (first two coordinates), translate, jitter.
    fn apply(&self, features: &mut Array2<f64>, pivot: [f64; 2], rng: &mut ChaCha8Rng) {
        let (s, c) = self.rotation.sin_cos();
        for mut row in features.outer_iter_mut() {
            if row.len() >= 2 {
                let (x, y) = (row[0] - pivot[0], row[1] - pivot[1]);
                row[0] = pivot[0] + c * x - s * y;
                row[1] = pivot[1] + s * x + c * y;
            }
            for (v, t) in row.iter_mut().zip(&self.translation) {
                *v += t;
            }
            if self.noise_sigma > 0.0 {
                for v in row.iter_mut() {
                    let g: f64 = StandardNormal.sample(rng);
                    *v += self.noise_sigma * g;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train_id: LabeledBatch,
    pub test_id: LabeledBatch,
    pub test_ood: LabeledBatch,
    pub tag: String,
    pub shift: ShiftParams,
}

fn moons_split(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<LabeledBatch> {
    let jitter = Normal::new(0.0, noise).map_err(|e| Error::invalid("noise", e.to_string()))?;
    let mut x = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let t = rng.random_range(0.0..PI);
        let (px, py) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        x[[i, 0]] = px + jitter.sample(rng);
        x[[i, 1]] = py + jitter.sample(rng);
        labels.push(label);
    }
    LabeledBatch::new(x, labels)
}

/// Two interleaving half circles, `n` points per split, classes alternating.
pub fn gen_two_moons(n: usize, noise: f64, shift: &ShiftParams, seed: u64) -> Result<DatasetBundle> {
    if n == 0 {
        return Err(Error::invalid("n", "must be >= 1"));
    }
    if !(noise >= 0.0) || !shift.is_valid() {
        return Err(Error::invalid("shift", "noise levels must be finite and >= 0"));
    }
    let train_id = moons_split(n, noise, &mut rng::substream(seed, "moons", 0))?;
    let test_id = moons_split(n, noise, &mut rng::substream(seed, "moons", 1))?;
    let mut ood_rng = rng::substream(seed, "moons", 2);
    let ood = moons_split(n, noise, &mut ood_rng)?;
    let (mut features, labels) = (ood.features().to_owned(), ood.labels().to_vec());
    shift.apply(&mut features, [0.5, 0.25], &mut ood_rng);
    Ok(DatasetBundle {
        train_id,
        test_id,
        test_ood: LabeledBatch::new(features, labels)?,
        tag: format!("moons(n={n},noise={noise},seed={seed})"),
        shift: shift.clone(),
    })
}

fn blob_centers(k: usize, dims: usize, separation: f64) -> Array2<f64> {
    let mut centers = Array2::zeros((k, dims));
    for c in 0..k {
        if dims == 1 {
            centers[[c, 0]] = separation * c as f64;
        } else {
            let angle = 2.0 * PI * c as f64 / k as f64;
            // radius chosen so neighbouring centers sit `separation` apart
            let radius = separation / (2.0 * (PI / k as f64).sin());
            centers[[c, 0]] = radius * angle.cos();
            centers[[c, 1]] = radius * angle.sin();
        }
    }
    centers
}

fn blobs_split(n: usize, centers: &Array2<f64>, rng: &mut ChaCha8Rng) -> Result<LabeledBatch> {
    let (k, dims) = centers.dim();
    let mut x = Array2::zeros((n, dims));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        for j in 0..dims {
            let g: f64 = StandardNormal.sample(rng);
            x[[i, j]] = centers[[label, j]] + g;
        }
        labels.push(label);
    }
    LabeledBatch::new(x, labels)
}

/// Unit-variance Gaussian clusters with neighbouring centers `separation` apart.
pub fn gen_blobs(
    k: usize,
    dims: usize,
    separation: f64,
    n: usize,
    shift: &ShiftParams,
    seed: u64,
) -> Result<DatasetBundle> {
    if k < 2 {
        return Err(Error::invalid("k", "need at least 2 classes"));
    }
    if dims == 0 || n == 0 {
        return Err(Error::invalid("dims", "dims and n must be >= 1"));
    }
    if !separation.is_finite() || !shift.is_valid() {
        return Err(Error::invalid("shift", "parameters must be finite"));
    }
    let centers = blob_centers(k, dims, separation);
    let train_id = blobs_split(n, &centers, &mut rng::substream(seed, "blobs", 0))?;
    let test_id = blobs_split(n, &centers, &mut rng::substream(seed, "blobs", 1))?;
    let mut ood_rng = rng::substream(seed, "blobs", 2);
    let ood = blobs_split(n, &centers, &mut ood_rng)?;
    let (mut features, labels) = (ood.features().to_owned(), ood.labels().to_vec());
    shift.apply(&mut features, [0.0, 0.0], &mut ood_rng);
    Ok(DatasetBundle {
        train_id,
        test_id,
        test_ood: LabeledBatch::new(features, labels)?,
        tag: format!("blobs(k={k},dims={dims},sep={separation},n={n},seed={seed})"),
        shift: shift.clone(),
    })
}

/// Replace each label, with probability `frac`, by a different class drawn uniformly.
pub fn with_label_noise(batch: &LabeledBatch, frac: f64, num_classes: usize, seed: u64) -> Result<LabeledBatch> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::invalid("frac", format!("{frac} is outside [0, 1]")));
    }
    if num_classes < 2 {
        return Err(Error::invalid("num_classes", "need at least 2 classes"));
    }
    let mut rng = rng::substream(seed, "label-noise", 0);
    let labels = batch
        .labels()
        .iter()
        .map(|&y| {
            if rng.random_bool(frac) {
                (y + rng.random_range(1..num_classes)) % num_classes
            } else {
                y
            }
        })
        .collect();
    LabeledBatch::new(batch.features().to_owned(), labels)
}

/// CSV text with header `f0,…,f{d-1},label`.
pub fn to_csv(batch: &LabeledBatch) -> String {
    let mut out = String::new();
    for j in 0..batch.dim() {
        out.push_str(&format!("f{j},"));
    }
    out.push_str("label\n");
    for (row, label) in batch.features().outer_iter().zip(batch.labels()) {
        for v in row {
            out.push_str(&format!("{v:?},"));
        }
        out.push_str(&format!("{label}\n"));
    }
    out
}

pub fn write_csv(batch: &LabeledBatch, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv(batch)).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<LabeledBatch> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}

pub fn parse_csv(text: &str, origin: &Path) -> Result<LabeledBatch> {
    let bad = |detail: String| Error::Csv {
        path: origin.to_path_buf(),
        detail,
    };
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let cols = headers.len();
    if cols < 2 || headers.get(cols - 1) != Some("label") {
        return Err(bad("header must be f0,…,label".into()));
    }
    for (j, h) in headers.iter().take(cols - 1).enumerate() {
        if h != format!("f{j}") {
            return Err(bad(format!("column {j} is `{h}`, expected `f{j}`")));
        }
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(format!("row {}: {e}", line + 1)))?;
        for j in 0..cols - 1 {
            let v: f64 = record[j]
                .trim()
                .parse()
                .map_err(|_| bad(format!("row {}: bad feature `{}`", line + 1, &record[j])))?;
            values.push(v);
        }
        let label: usize = record[cols - 1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("row {}: bad label `{}`", line + 1, &record[cols - 1])))?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(bad("no data rows".into()));
    }
    let features = Array2::from_shape_vec((labels.len(), cols - 1), values)
        .map_err(|e| bad(e.to_string()))?;
    LabeledBatch::new(features, labels).map_err(|e| bad(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_are_deterministic_and_balanced() {
        let shift = ShiftParams {
            rotation: 0.3,
            translation: vec![0.2, -0.1],
            noise_sigma: 0.05,
        };
        let a = gen_two_moons(101, 0.1, &shift, 9).unwrap();
        let b = gen_two_moons(101, 0.1, &shift, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(to_csv(&a.test_ood), to_csv(&b.test_ood));
        assert_ne!(a.train_id, a.test_id);
        let ones = a.train_id.labels().iter().filter(|&&l| l == 1).count();
        assert_eq!(ones, 50);
        assert_ne!(a, gen_two_moons(101, 0.1, &shift, 10).unwrap());
    }

    #[test]
    fn zero_shift_keeps_ood_in_family() {
        let a = gen_two_moons(2000, 0.1, &ShiftParams::none(), 3).unwrap();
        let mean = |b: &LabeledBatch| b.features().mean_axis(ndarray::Axis(0)).unwrap();
        let (m_id, m_ood) = (mean(&a.test_id), mean(&a.test_ood));
        // per-coordinate sd is below 0.9, so the mean difference has sd below 0.03
        for j in 0..2 {
            assert!((m_id[j] - m_ood[j]).abs() < 0.12);
        }
        assert_ne!(a.test_id, a.test_ood);
    }

    #[test]
    fn rotation_by_pi_maps_moons_onto_each_other() {
        let shift = ShiftParams {
            rotation: PI,
            ..ShiftParams::default()
        };
        let a = gen_two_moons(500, 0.0, &shift, 4).unwrap();
        // noiseless class 0 rotated by π about (0.5, 0.25) lands on the class-1 arc
        for (row, &y) in a.test_ood.features().outer_iter().zip(a.test_ood.labels()) {
            if y == 0 {
                let (x, yv) = (1.0 - row[0], 0.5 - row[1]);
                assert!(((x * x + yv * yv).sqrt() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn blobs_shape_and_translation() {
        let shift = ShiftParams {
            translation: vec![3.0, 0.0, 0.0],
            ..ShiftParams::default()
        };
        let a = gen_blobs(3, 3, 4.0, 300, &shift, 1).unwrap();
        assert_eq!(a.train_id.dim(), 3);
        let mean_x = |b: &LabeledBatch| b.features().column(0).mean().unwrap();
        assert!((mean_x(&a.test_ood) - mean_x(&a.test_id) - 3.0).abs() < 0.3);
        assert_eq!(a, gen_blobs(3, 3, 4.0, 300, &shift, 1).unwrap());
        assert!(gen_blobs(1, 2, 1.0, 10, &shift, 1).is_err());
    }

    #[test]
    fn label_noise_flips_expected_fraction() {
        let a = gen_two_moons(4000, 0.1, &ShiftParams::none(), 2).unwrap();
        let noisy = with_label_noise(&a.train_id, 0.25, 2, 5).unwrap();
        let flipped = noisy
            .labels()
            .iter()
            .zip(a.train_id.labels())
            .filter(|(x, y)| x != y)
            .count() as f64
            / 4000.0;
        assert!((flipped - 0.25).abs() < 0.03);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let a = gen_blobs(3, 2, 2.0, 20, &ShiftParams::none(), 8).unwrap();
        let text = to_csv(&a.train_id);
        assert!(text.starts_with("f0,f1,label\n"));
        let back = parse_csv(&text, Path::new("x.csv")).unwrap();
        assert_eq!(back, a.train_id);
        assert!(parse_csv("x,label\n1,0\n", Path::new("x.csv")).is_err());
        assert!(parse_csv("f0,label\nabc,0\n", Path::new("x.csv")).is_err());
        assert!(parse_csv("f0,label\n", Path::new("x.csv")).is_err());
        let err = parse_csv("f0,label\n1.0,-1\n", Path::new("bad.csv")).unwrap_err();
        assert!(err.to_string().contains("bad.csv"));
    }
}
