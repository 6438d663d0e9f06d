//! Synthetic paired "image"/"text" features drawn from a shared latent
//! concept model, plus the line-delimited dataset format.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub latent_dim: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub n_concepts: usize,
    pub samples_per_concept: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            image_dim: 32,
            text_dim: 24,
            n_concepts: 200,
            samples_per_concept: 50,
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("latent_dim", self.latent_dim),
            ("image_dim", self.image_dim),
            ("text_dim", self.text_dim),
            ("n_concepts", self.n_concepts),
            ("samples_per_concept", self.samples_per_concept),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise_sigma = {} must be finite and ≥ 0",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub image_features: Tensor,
    pub text_features: Tensor,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `out = map · z + σ·ε` for a `rows × latent` map.
fn project_noisy(rng: &mut impl Rng, map: &[f64], z: &[f64], sigma: f64, out: &mut Vec<f64>) {
    let latent = z.len();
    for row in map.chunks(latent) {
        let clean: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
        let noise: f64 = rng.sample(StandardNormal);
        out.push(clean + sigma * noise);
    }
}

/// Draws the dataset. Rows are grouped by concept, in concept order.
pub fn generate(spec: &SyntheticSpec) -> Result<PairedDataset> {
    spec.validate()?;
    let mut rng = seed::stream(spec.seed, 10);
    // Entries scaled so each clean coordinate has unit variance.
    let scale = 1.0 / (spec.latent_dim as f64).sqrt();
    let image_map = normal_matrix(&mut rng, spec.image_dim, spec.latent_dim, scale);
    let text_map = normal_matrix(&mut rng, spec.text_dim, spec.latent_dim, scale);

    let n = spec.n_concepts * spec.samples_per_concept;
    let mut img = Vec::with_capacity(n * spec.image_dim);
    let mut txt = Vec::with_capacity(n * spec.text_dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.n_concepts {
        let z = normal_matrix(&mut rng, 1, spec.latent_dim, 1.0);
        for _ in 0..spec.samples_per_concept {
            project_noisy(&mut rng, &image_map, &z, spec.noise_sigma, &mut img);
            project_noisy(&mut rng, &text_map, &z, spec.noise_sigma, &mut txt);
            labels.push(c);
        }
    }
    Ok(PairedDataset {
        image_features: Tensor::matrix(n, spec.image_dim, img)?,
        text_features: Tensor::matrix(n, spec.text_dim, txt)?,
        labels,
        splits: vec![Split::Unassigned; n],
    })
}

/// The three partitions of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: PairedDataset,
    pub val: PairedDataset,
    pub test: PairedDataset,
}

impl PairedDataset {
    pub fn empty() -> Self {
        Self {
            image_features: Tensor::zeros(&[0, 0]),
            text_features: Tensor::zeros(&[0, 0]),
            labels: Vec::new(),
            splits: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dim(&self) -> usize {
        self.image_features.cols()
    }

    pub fn text_dim(&self) -> usize {
        self.text_features.cols()
    }

    /// One more than the largest label.
    pub fn n_concepts(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Rows `idx` in the given order, tags preserved.
    pub fn select(&self, idx: &[usize]) -> PairedDataset {
        PairedDataset {
            image_features: gather(&self.image_features, idx),
            text_features: gather(&self.text_features, idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            splits: idx.iter().map(|&i| self.splits[i]).collect(),
        }
    }

    /// Image and text feature rows for a batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        (
            gather(&self.image_features, idx),
            gather(&self.text_features, idx),
        )
    }

    pub fn partition(&self) -> Result<Splits> {
        let pick =
            |s: Split| -> Vec<usize> { (0..self.len()).filter(|&i| self.splits[i] == s).collect() };
        let (train, val, test) = (pick(Split::Train), pick(Split::Val), pick(Split::Test));
        for (name, rows) in [("train", &train), ("val", &val), ("test", &test)] {
            if rows.is_empty() {
                return Err(Error::Config(format!("{name} split has no rows")));
            }
        }
        Ok(Splits {
            train: self.select(&train),
            val: self.select(&val),
            test: self.select(&test),
        })
    }
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), c, data).expect("sized by construction")
}

/// Tags every row train/val/test, stratified by concept: each concept's rows
/// are shuffled and the first `round(n·val)` go to val, the next
/// `round(n·test)` to test, the rest to train. Row order is unchanged.
pub fn assign_splits(
    dataset: &PairedDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<PairedDataset> {
    let (ftrain, fval, ftest) = fractions;
    let sum = ftrain + fval + ftest;
    if !(ftrain > 0.0 && fval > 0.0 && ftest > 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions ({ftrain}, {fval}, {ftest}) must be positive and sum to 1"
        )));
    }
    let mut by_concept: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_concepts()];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_concept[l].push(i);
    }
    let mut rng = seed::stream(seed, 11);
    let mut out = dataset.clone();
    for rows in &mut by_concept {
        rows.shuffle(&mut rng);
        let n = rows.len() as f64;
        let n_val = (n * fval).round() as usize;
        let n_test = ((n * ftest).round() as usize).min(rows.len() - n_val.min(rows.len()));
        for (k, &i) in rows.iter().enumerate() {
            out.splits[i] = if k < n_val {
                Split::Val
            } else if k < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    Ok(out)
}

/// Concept-stratified random split into train/val/test.
pub fn split(dataset: &PairedDataset, fractions: (f64, f64, f64), seed: u64) -> Result<Splits> {
    assign_splits(dataset, fractions, seed)?.partition()
}

#[derive(Serialize, Deserialize)]
struct Record {
    img: Vec<f64>,
    txt: Vec<f64>,
    label: usize,
    split: Split,
}

pub fn save(dataset: &PairedDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for i in 0..dataset.len() {
        let rec = Record {
            img: dataset.image_features.row(i).to_vec(),
            txt: dataset.text_features.row(i).to_vec(),
            label: dataset.labels[i],
            split: dataset.splits[i],
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PairedDataset> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut img = Vec::new();
    let mut txt = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            detail: e.to_string(),
        })?;
        let d = (rec.img.len(), rec.txt.len());
        match dims {
            None => dims = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::Parse {
                    line: line_no,
                    detail: format!("feature widths {d:?} differ from earlier rows {prev:?}"),
                })
            }
            _ => {}
        }
        img.extend(rec.img);
        txt.extend(rec.txt);
        labels.push(rec.label);
        splits.push(rec.split);
    }
    let Some((di, dt)) = dims else {
        return Ok(PairedDataset::empty());
    };
    let n = labels.len();
    Ok(PairedDataset {
        image_features: Tensor::matrix(n, di, img)?,
        text_features: Tensor::matrix(n, dt, txt)?,
        labels,
        splits,
    })
}
