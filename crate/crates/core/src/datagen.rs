//! Synthetic multi-label worlds with a known co-occurrence structure, and
//! the partial-label protocol that hides a fixed number of labels per image.
//!
//! Every present category contributes one region (its prototype plus
//! Gaussian noise); images also carry a Poisson number of distractor
//! regions of pure noise (the same Gaussian, without a prototype).

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, Matrix};
use crate::rng::{self, streams};

/// Weight applied to the co-occurrence probability when propagating from
/// seed positives to the remaining categories.
pub const PROPAGATION_DAMPENING: f64 = 0.5;

pub const DEFAULT_DISTRACTOR_RATE: f64 = 2.0;

const HIGH_LINK: (f64, f64) = (0.6, 0.95);
const LOW_LINK: (f64, f64) = (0.0, 0.1);
const BASE_RATE: (f64, f64) = (0.05, 0.15);

/// Per-image labels over `{-1, 0, +1}`: negative, unknown, positive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<i8>", into = "Vec<i8>")]
pub struct PartialLabelVector(Vec<i8>);

/// Known labels merged with generated pseudo positives.
pub type PseudoLabelVector = PartialLabelVector;

impl PartialLabelVector {
    pub fn new(values: Vec<i8>) -> Result<Self> {
        if let Some((c, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !matches!(v, -1..=1))
        {
            return Err(Error::invalid(format!(
                "label {v} at category {c} is outside {{-1, 0, 1}}"
            )));
        }
        Ok(Self(values))
    }

    pub fn unknown(c: usize) -> Self {
        Self(vec![0; c])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    #[inline]
    pub fn get(&self, c: usize) -> i8 {
        self.0[c]
    }

    pub(crate) fn set_positive(&mut self, c: usize) {
        self.0[c] = 1;
    }

    pub fn is_known(&self, c: usize) -> bool {
        self.0[c] != 0
    }

    pub fn known_count(&self) -> usize {
        self.0.iter().filter(|&&v| v != 0).count()
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(c, _)| c)
    }

    pub fn positive_count(&self) -> usize {
        self.0.iter().filter(|&&v| v == 1).count()
    }
}

impl TryFrom<Vec<i8>> for PartialLabelVector {
    type Error = Error;

    fn try_from(v: Vec<i8>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PartialLabelVector> for Vec<i8> {
    fn from(v: PartialLabelVector) -> Self {
        v.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub seed: u64,
    pub categories: usize,
    pub d_raw: usize,
    /// One unit-norm row per category.
    pub prototypes: Matrix,
    /// Symmetric, unit diagonal, entries in `[0, 1]`.
    pub gt_cooccurrence: Matrix,
    pub base_rates: Vec<f64>,
    pub noise_sigma: f64,
    pub distractor_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// `R × D_raw`.
    pub regions: Matrix,
    pub full_labels: Vec<i8>,
    pub partial_labels: PartialLabelVector,
}

pub fn sample_world(
    seed: u64,
    categories: usize,
    d_raw: usize,
    link_density: f64,
    noise_sigma: f64,
) -> Result<World> {
    if categories < 2 || d_raw < 2 {
        return Err(Error::invalid(format!(
            "world needs C >= 2 and D_raw >= 2, got C={categories} D_raw={d_raw}"
        )));
    }
    if !(0.0..=1.0).contains(&link_density) {
        return Err(Error::invalid(format!(
            "link_density must lie in [0, 1], got {link_density}"
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid("noise_sigma must be finite and >= 0"));
    }

    let mut rng = rng::rng(rng::derive(seed, streams::WORLD, 0));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut prototypes = Matrix::zeros(categories, d_raw);
    for c in 0..categories {
        let row = prototypes.row_mut(c);
        loop {
            row.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
            let n = norm(row);
            if n > 1e-6 {
                row.iter_mut().for_each(|x| *x /= n);
                break;
            }
        }
    }

    let mut gt = Matrix::zeros(categories, categories);
    for i in 0..categories {
        gt.set(i, i, 1.0);
        for j in i + 1..categories {
            let (lo, hi) = if rng.random::<f64>() < link_density {
                HIGH_LINK
            } else {
                LOW_LINK
            };
            let v = rng.random_range(lo..=hi);
            gt.set(i, j, v);
            gt.set(j, i, v);
        }
    }

    let base_rates = (0..categories)
        .map(|_| rng.random_range(BASE_RATE.0..=BASE_RATE.1))
        .collect();

    Ok(World {
        seed,
        categories,
        d_raw,
        prototypes,
        gt_cooccurrence: gt,
        base_rates,
        noise_sigma,
        distractor_rate: DEFAULT_DISTRACTOR_RATE,
    })
}

impl World {
    /// Pairs `(i, j)`, `i < j`, whose ground-truth co-occurrence was drawn
    /// from the high band.
    pub fn high_link_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs_where(|p| p >= HIGH_LINK.0)
    }

    pub fn low_link_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs_where(|p| p <= LOW_LINK.1)
    }

    fn pairs_where(&self, keep: impl Fn(f64) -> bool) -> Vec<(usize, usize)> {
        let c = self.categories;
        (0..c)
            .flat_map(|i| (i + 1..c).map(move |j| (i, j)))
            .filter(|&(i, j)| keep(self.gt_cooccurrence.get(i, j)))
            .collect()
    }

    fn sample_labels(&self, rng: &mut rng::Rng) -> Vec<i8> {
        let c = self.categories;
        loop {
            let seeds: Vec<usize> = (0..c)
                .filter(|&k| rng.random::<f64>() < self.base_rates[k])
                .collect();
            let mut labels = vec![-1i8; c];
            for &s in &seeds {
                labels[s] = 1;
            }
            for j in 0..c {
                if labels[j] == 1 {
                    continue;
                }
                let p = seeds
                    .iter()
                    .map(|&i| self.gt_cooccurrence.get(i, j))
                    .fold(0.0, f64::max)
                    * PROPAGATION_DAMPENING;
                if rng.random::<f64>() < p {
                    labels[j] = 1;
                }
            }
            if labels.contains(&1) {
                return labels;
            }
        }
    }
}

/// Draws one image with all labels known.
pub fn sample_image(world: &World, id: u64, seed: u64) -> Sample {
    let mut rng = rng::rng(seed);
    let labels = world.sample_labels(&mut rng);

    let noise = Normal::new(0.0, world.noise_sigma.max(0.0)).expect("valid sigma");
    let distractor = Normal::new(0.0, world.noise_sigma.max(0.0)).expect("valid sigma");
    let n_distractors = if world.distractor_rate > 0.0 {
        Poisson::new(world.distractor_rate)
            .expect("positive rate")
            .sample(&mut rng) as usize
    } else {
        0
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (c, &l) in labels.iter().enumerate() {
        if l == 1 {
            let proto = world.prototypes.row(c);
            let row = if world.noise_sigma == 0.0 {
                proto.to_vec()
            } else {
                proto.iter().map(|&p| p + noise.sample(&mut rng)).collect()
            };
            rows.push(row);
        }
    }
    for _ in 0..n_distractors {
        rows.push((0..world.d_raw).map(|_| distractor.sample(&mut rng)).collect());
    }
    rows.shuffle(&mut rng);

    let regions = Matrix::from_rows(&rows).expect("uniform region width");
    let partial_labels = PartialLabelVector(labels.clone());
    Sample {
        id,
        regions,
        full_labels: labels,
        partial_labels,
    }
}

/// Number of labels kept per image at a given proportion.
pub fn known_count(known_proportion: f64, categories: usize) -> usize {
    ((known_proportion * categories as f64).round() as usize).clamp(1, categories)
}

/// Keeps exactly `max(1, round(q·C))` labels, chosen uniformly without
/// replacement; everything else becomes unknown.
pub fn drop_labels(full_labels: &[i8], known_proportion: f64, seed: u64) -> Result<PartialLabelVector> {
    if !(known_proportion > 0.0 && known_proportion <= 1.0) {
        return Err(Error::invalid(format!(
            "known proportion must lie in (0, 1], got {known_proportion}"
        )));
    }
    let c = full_labels.len();
    let k = known_count(known_proportion, c);
    let mut rng = rng::rng(seed);
    let mut out = vec![0i8; c];
    for i in index::sample(&mut rng, c, k) {
        out[i] = full_labels[i];
    }
    PartialLabelVector::new(out)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn categories(&self) -> usize {
        self.samples.first().map_or(0, |s| s.full_labels.len())
    }

    pub fn d_raw(&self) -> usize {
        self.samples.first().map_or(0, |s| s.regions.cols())
    }

    /// Draws `n` fully labelled images. `stream` separates train and test
    /// draws under the same seed.
    pub fn generate(world: &World, n: usize, seed: u64, stream: u64) -> Self {
        let samples = (0..n as u64)
            .map(|i| sample_image(world, i, rng::derive(seed, stream, i)))
            .collect();
        Self { samples }
    }

    pub fn generate_train(world: &World, n: usize, seed: u64) -> Self {
        Self::generate(world, n, seed, streams::IMAGE)
    }

    pub fn generate_test(world: &World, n: usize, seed: u64) -> Self {
        Self::generate(world, n, seed, streams::TEST_IMAGE)
    }

    /// Re-derives every partial label vector from the full labels.
    pub fn with_known_proportion(&self, known_proportion: f64, seed: u64) -> Result<Self> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let partial =
                    drop_labels(&s.full_labels, known_proportion, rng::derive(seed, streams::DROP, s.id))?;
                Ok(Sample {
                    partial_labels: partial,
                    ..s.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    /// Fraction of positive entries among the full labels.
    pub fn positive_rate(&self) -> f64 {
        let (pos, total) = self.samples.iter().fold((0usize, 0usize), |(p, t), s| {
            (
                p + s.full_labels.iter().filter(|&&l| l == 1).count(),
                t + s.full_labels.len(),
            )
        });
        if total == 0 {
            0.0
        } else {
            pos as f64 / total as f64
        }
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for s in &self.samples {
            let rec = SampleRecord::from(s);
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut samples = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message,
            };
            let rec: SampleRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let sample = rec.into_sample().map_err(|e| parse_err(e.to_string()))?;
            if let Some(first) = samples.first() {
                let first: &Sample = first;
                if first.full_labels.len() != sample.full_labels.len()
                    || first.regions.cols() != sample.regions.cols()
                {
                    return Err(parse_err("inconsistent dimensions across records".into()));
                }
            }
            samples.push(sample);
        }
        Ok(Self { samples })
    }
}

/// On-disk form of a [`Sample`]: one JSON object per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: u64,
    pub regions: Vec<Vec<f64>>,
    pub full_labels: Vec<i8>,
    pub partial_labels: Vec<i8>,
}

impl From<&Sample> for SampleRecord {
    fn from(s: &Sample) -> Self {
        Self {
            id: s.id,
            regions: s.regions.row_iter().map(<[f64]>::to_vec).collect(),
            full_labels: s.full_labels.clone(),
            partial_labels: s.partial_labels.as_slice().to_vec(),
        }
    }
}

impl SampleRecord {
    pub fn into_sample(self) -> Result<Sample> {
        if self.regions.is_empty() {
            return Err(Error::invalid("sample has no regions"));
        }
        if self.full_labels.iter().any(|&l| l != 1 && l != -1) {
            return Err(Error::invalid("full labels must be -1 or +1"));
        }
        if self.partial_labels.len() != self.full_labels.len() {
            return Err(Error::invalid("partial and full label lengths differ"));
        }
        let partial = PartialLabelVector::new(self.partial_labels)?;
        if partial
            .as_slice()
            .iter()
            .zip(&self.full_labels)
            .any(|(&p, &f)| p != 0 && p != f)
        {
            return Err(Error::invalid("partial label disagrees with full label"));
        }
        Ok(Sample {
            id: self.id,
            regions: Matrix::from_rows(&self.regions)?,
            full_labels: self.full_labels,
            partial_labels: partial,
        })
    }
}

/// Diagnostic sidecar describing the generating world.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldRecord {
    pub seed: u64,
    pub categories: usize,
    pub d_raw: usize,
    pub prototypes: Vec<Vec<f64>>,
    pub gt_cooccurrence: Vec<Vec<f64>>,
    pub base_rates: Vec<f64>,
    pub noise_sigma: f64,
    pub distractor_rate: f64,
}

impl From<&World> for WorldRecord {
    fn from(w: &World) -> Self {
        let rows = |m: &Matrix| m.row_iter().map(<[f64]>::to_vec).collect();
        Self {
            seed: w.seed,
            categories: w.categories,
            d_raw: w.d_raw,
            prototypes: rows(&w.prototypes),
            gt_cooccurrence: rows(&w.gt_cooccurrence),
            base_rates: w.base_rates.clone(),
            noise_sigma: w.noise_sigma,
            distractor_rate: w.distractor_rate,
        }
    }
}

impl WorldRecord {
    pub fn into_world(self) -> Result<World> {
        Ok(World {
            seed: self.seed,
            categories: self.categories,
            d_raw: self.d_raw,
            prototypes: Matrix::from_rows(&self.prototypes)?,
            gt_cooccurrence: Matrix::from_rows(&self.gt_cooccurrence)?,
            base_rates: self.base_rates,
            noise_sigma: self.noise_sigma,
            distractor_rate: self.distractor_rate,
        })
    }
}

pub fn write_world(world: &World, path: &Path) -> Result<()> {
    let s = serde_json::to_string_pretty(&WorldRecord::from(world))?;
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_world(path: &Path) -> Result<World> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str::<WorldRecord>(&s)?.into_world()
}
