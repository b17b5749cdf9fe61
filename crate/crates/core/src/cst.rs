//! Cross-image semantic transfer.
//!
//! Category features of the same class should be close across images. An
//! unknown category is marked positive when its feature's mean cosine
//! similarity to stored exemplars of known positives clears a threshold.
//! A pairwise ranking loss pulls co-positive features together and pushes
//! every other fully-known pair apart.

use std::collections::VecDeque;

use crate::datagen::{PartialLabelVector, PseudoLabelVector};
use crate::model::CategoryFeatureSet;
use crate::numerics::{axpy, dot, norm, Matrix};

pub const DEFAULT_MEMORY_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Either input had zero norm; `value` is 0 in that case.
    pub degenerate: bool,
}

pub fn cosine_similarity(f: &[f64], g: &[f64]) -> Cosine {
    let nf = norm(f);
    let ng = norm(g);
    if nf == 0.0 || ng == 0.0 {
        return Cosine {
            value: 0.0,
            degenerate: true,
        };
    }
    Cosine {
        value: (dot(f, g) / (nf * ng)).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Adds `weight · ∂s/∂f` and `weight · ∂s/∂g` into the two buffers.
fn cosine_backward(f: &[f64], g: &[f64], weight: f64, df: &mut [f64], dg: &mut [f64]) {
    let nf = norm(f);
    let ng = norm(g);
    if nf == 0.0 || ng == 0.0 {
        return;
    }
    let s = dot(f, g) / (nf * ng);
    let inv = weight / (nf * ng);
    axpy(inv, g, df);
    axpy(-weight * s / (nf * nf), f, df);
    axpy(inv, f, dg);
    axpy(-weight * s / (ng * ng), g, dg);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub sample_id: u64,
    pub feature: Vec<f64>,
}

/// Per-category FIFO of detached features from samples whose label for
/// that category is a known positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarMemory {
    capacity: usize,
    buckets: Vec<VecDeque<Exemplar>>,
}

impl ExemplarMemory {
    pub fn new(categories: usize, capacity: usize) -> Self {
        Self {
            capacity,
            buckets: vec![VecDeque::with_capacity(capacity); categories],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn categories(&self) -> usize {
        self.buckets.len()
    }

    pub fn bucket(&self, c: usize) -> &VecDeque<Exemplar> {
        &self.buckets[c]
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.iter().all(VecDeque::is_empty)
    }

    /// Pushes `f_c` for every known-positive `c`, evicting the oldest entry
    /// beyond capacity.
    pub fn update(&mut self, features: &CategoryFeatureSet, labels: &PartialLabelVector, sample_id: u64) {
        if self.capacity == 0 {
            return;
        }
        for c in labels.positives() {
            let bucket = &mut self.buckets[c];
            if bucket.len() == self.capacity {
                bucket.pop_front();
            }
            bucket.push_back(Exemplar {
                sample_id,
                feature: features.row(c).to_vec(),
            });
        }
    }

    /// Mean cosine similarity between `f` and the exemplars of `c`.
    pub fn mean_similarity(&self, c: usize, f: &[f64]) -> Option<f64> {
        let bucket = &self.buckets[c];
        if bucket.is_empty() {
            return None;
        }
        let sum: f64 = bucket
            .iter()
            .map(|e| cosine_similarity(f, &e.feature).value)
            .sum();
        Some(sum / bucket.len() as f64)
    }
}

/// Marks unknown category `c` positive when the mean similarity of `f_c`
/// to the exemplars of `c` is at least `theta`. Empty buckets give no
/// evidence. Known labels pass through unchanged.
pub fn generate_cross_pseudo(
    features: &CategoryFeatureSet,
    labels: &PartialLabelVector,
    memory: &ExemplarMemory,
    theta: f64,
) -> PseudoLabelVector {
    let mut out = labels.clone();
    for c in 0..labels.len() {
        if labels.is_known(c) {
            continue;
        }
        if let Some(s) = memory.mean_similarity(c, features.row(c)) {
            if s >= theta {
                out.set_positive(c);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CstLoss {
    pub loss: f64,
    pub triples: usize,
}

/// Mean over sample pairs `n < m` and categories known in both of
/// `1 − s` (both positive) or `1 + s` (otherwise).
pub fn cst_loss(batch_features: &[&CategoryFeatureSet], batch_labels: &[&PartialLabelVector]) -> CstLoss {
    cst_loss_impl(batch_features, batch_labels, None)
}

/// As [`cst_loss`], also returning `∂L/∂F` for every sample.
pub fn cst_loss_with_grad(
    batch_features: &[&CategoryFeatureSet],
    batch_labels: &[&PartialLabelVector],
) -> (CstLoss, Vec<Matrix>) {
    let mut grads: Vec<Matrix> = batch_features
        .iter()
        .map(|f| Matrix::zeros(f.rows(), f.cols()))
        .collect();
    let out = cst_loss_impl(batch_features, batch_labels, Some(&mut grads));
    (out, grads)
}

fn contributing_triples(batch_labels: &[&PartialLabelVector]) -> Vec<(usize, usize, usize, bool)> {
    let n = batch_labels.len();
    let mut out = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let (ya, yb) = (batch_labels[a], batch_labels[b]);
            for c in 0..ya.len() {
                if ya.is_known(c) && yb.is_known(c) {
                    out.push((a, b, c, ya.get(c) == 1 && yb.get(c) == 1));
                }
            }
        }
    }
    out
}

fn cst_loss_impl(
    batch_features: &[&CategoryFeatureSet],
    batch_labels: &[&PartialLabelVector],
    mut grads: Option<&mut Vec<Matrix>>,
) -> CstLoss {
    debug_assert_eq!(batch_features.len(), batch_labels.len());
    let triples = contributing_triples(batch_labels);
    if triples.is_empty() {
        return CstLoss {
            loss: 0.0,
            triples: 0,
        };
    }
    let scale = 1.0 / triples.len() as f64;
    let mut total = 0.0;
    for &(a, b, c, both_positive) in &triples {
        let fa = batch_features[a].row(c);
        let fb = batch_features[b].row(c);
        let s = cosine_similarity(fa, fb).value;
        let sign = if both_positive { -1.0 } else { 1.0 };
        total += 1.0 + sign * s;
        if let Some(g) = grads.as_deref_mut() {
            let mut da = vec![0.0; fa.len()];
            let mut db = vec![0.0; fb.len()];
            cosine_backward(fa, fb, sign * scale, &mut da, &mut db);
            axpy(1.0, &da, g[a].row_mut(c));
            axpy(1.0, &db, g[b].row_mut(c));
        }
    }
    CstLoss {
        loss: total * scale,
        triples: triples.len(),
    }
}
