//! Pseudo-label diagnostics on a frozen model: threshold sweeps for both
//! generation rules, per-image co-occurrence dumps and per-category
//! similarity histograms.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cst::{generate_cross_pseudo, ExemplarMemory};
use crate::datagen::{Dataset, PseudoLabelVector, Sample};
use crate::error::{Error, Result};
use crate::ist::{generate_intra_pseudo, generation_pairs, CooccurrenceMatrix};
use crate::metrics::{pseudo_quality, PseudoQuality};
use crate::trainer::SstModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoModule {
    Ist,
    Cst,
}

impl fmt::Display for PseudoModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ist => "ist",
            Self::Cst => "cst",
        })
    }
}

/// `0.50, 0.55, …, 0.95`, each equal to its decimal literal.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub theta: f64,
    pub pseudo_positives: usize,
    pub true_positives: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub base_rate: Option<f64>,
}

impl SweepPoint {
    fn new(theta: f64, q: &PseudoQuality) -> Self {
        Self {
            theta,
            pseudo_positives: q.pseudo_positives,
            true_positives: q.true_positives,
            precision: q.precision,
            recall: q.recall,
            base_rate: q.base_rate(),
        }
    }
}

/// Pseudo labels for every image at every threshold, thresholds ascending.
#[derive(Debug, Clone)]
pub struct ThresholdSweep {
    pub module: PseudoModule,
    pub points: Vec<SweepPoint>,
    pub labels: Vec<Vec<PseudoLabelVector>>,
}

impl ThresholdSweep {
    pub fn counts(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.pseudo_positives).collect()
    }

    /// Counts never grow as the threshold rises.
    pub fn is_monotone(&self) -> bool {
        self.counts().windows(2).all(|w| w[1] <= w[0])
    }

    /// Positions positive at a higher threshold but not at the next lower
    /// one, summed over images and adjacent threshold pairs. Zero means the
    /// pseudo-positive sets are nested per image.
    pub fn nesting_violations(&self) -> usize {
        self.labels
            .windows(2)
            .map(|w| {
                w[0].iter()
                    .zip(&w[1])
                    .map(|(lo, hi)| {
                        (0..hi.len())
                            .filter(|&c| hi.get(c) == 1 && lo.get(c) != 1)
                            .count()
                    })
                    .sum::<usize>()
            })
            .sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.points)
    }
}

fn check_thresholds(thetas: &[f64]) -> Result<Vec<f64>> {
    if thetas.is_empty() {
        return Err(Error::invalid("threshold sweep needs at least one threshold"));
    }
    if let Some(t) = thetas.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::invalid(format!("thresholds must be finite and > 0, got {t}")));
    }
    let mut sorted = thetas.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

/// Runs one generation rule over `dataset` (whose partial labels are the
/// known ones) at each threshold. The network is evaluated once per image;
/// only the thresholding is repeated.
pub fn threshold_sweep(
    model: &SstModel,
    dataset: &Dataset,
    module: PseudoModule,
    thetas: &[f64],
    memory: &ExemplarMemory,
) -> Result<ThresholdSweep> {
    let thetas = check_thresholds(thetas)?;
    let mut labels: Vec<Vec<PseudoLabelVector>> = vec![Vec::with_capacity(dataset.len()); thetas.len()];
    for s in &dataset.samples {
        let fwd = model.net.sarl.forward(&model.store, &s.regions)?;
        let y = &s.partial_labels;
        match module {
            PseudoModule::Ist => {
                let pass = model
                    .net
                    .ist
                    .evaluate_pairs(&model.store, &fwd.features, &generation_pairs(y))?;
                for (out, &t) in labels.iter_mut().zip(&thetas) {
                    out.push(generate_intra_pseudo(&pass.matrix, y, t));
                }
            }
            PseudoModule::Cst => {
                for (out, &t) in labels.iter_mut().zip(&thetas) {
                    out.push(generate_cross_pseudo(&fwd.features, y, memory, t));
                }
            }
        }
    }

    let full: Vec<Vec<i8>> = dataset.samples.iter().map(|s| s.full_labels.clone()).collect();
    let known: Vec<_> = dataset.samples.iter().map(|s| s.partial_labels.clone()).collect();
    let points = thetas
        .iter()
        .zip(&labels)
        .map(|(&t, l)| Ok(SweepPoint::new(t, &pseudo_quality(l, &full, &known)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ThresholdSweep {
        module,
        points,
        labels,
    })
}

/// The full predicted co-occurrence matrix for one image.
pub fn image_cooccurrence(model: &SstModel, sample: &Sample) -> Result<CooccurrenceMatrix> {
    let fwd = model.net.sarl.forward(&model.store, &sample.regions)?;
    model.net.ist.predict_cooccurrence(&model.store, &fwd.features)
}

/// One row per category `i`: `p(i, j)` for every `j` (blank on the
/// diagonal), then the row category's known and true label.
pub fn write_cooccurrence_csv(matrix: &CooccurrenceMatrix, sample: &Sample, path: &Path) -> Result<()> {
    let c = matrix.as_matrix().rows();
    let mut w = csv_writer(path)?;
    let mut header = vec!["category".to_string()];
    header.extend((0..c).map(|j| format!("c{j}")));
    header.extend(["known".to_string(), "truth".to_string()]);
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..c {
        let mut row = vec![format!("c{i}")];
        row.extend((0..c).map(|j| {
            if i == j {
                String::new()
            } else {
                matrix.as_matrix().get(i, j).to_string()
            }
        }));
        row.push(sample.partial_labels.get(i).to_string());
        row.push(sample.full_labels[i].to_string());
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramBin {
    pub category: usize,
    pub lo: f64,
    pub hi: f64,
    /// Hidden positions whose true label is positive.
    pub positives: usize,
    pub negatives: usize,
}

/// Per-category histograms of the mean exemplar similarity at hidden
/// positions, split by the withheld truth. Bins cover `[-1, 1]`.
pub fn similarity_histograms(
    model: &SstModel,
    dataset: &Dataset,
    memory: &ExemplarMemory,
    bins: usize,
) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let c = model.categories();
    let width = 2.0 / bins as f64;
    let mut out: Vec<HistogramBin> = (0..c)
        .flat_map(|cat| {
            (0..bins).map(move |b| HistogramBin {
                category: cat,
                lo: -1.0 + b as f64 * width,
                hi: if b + 1 == bins { 1.0 } else { -1.0 + (b + 1) as f64 * width },
                positives: 0,
                negatives: 0,
            })
        })
        .collect();
    for s in &dataset.samples {
        let fwd = model.net.sarl.forward(&model.store, &s.regions)?;
        for cat in 0..c {
            if s.partial_labels.is_known(cat) {
                continue;
            }
            let Some(sim) = memory.mean_similarity(cat, fwd.features.row(cat)) else {
                continue;
            };
            let b = (((sim + 1.0) / width).floor() as usize).min(bins - 1);
            let slot = &mut out[cat * bins + b];
            if s.full_labels[cat] == 1 {
                slot.positives += 1;
            } else {
                slot.negatives += 1;
            }
        }
    }
    Ok(out)
}

pub fn write_histogram_csv(rows: &[HistogramBin], path: &Path) -> Result<()> {
    write_rows(path, rows)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{}: {other:?}", path.display())),
    }
}

pub(crate) fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
