//! Category-specific representations over region features.
//!
//! A two-layer ReLU backbone embeds each region; every category attends
//! over the embedded regions with a bilinear score `e_c · (W h_r)`, and the
//! attention-weighted sum is that category's feature `f_c`. A per-category
//! linear classifier with a sigmoid reads `f_c`.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::PartialLabelVector;
use crate::error::{Error, Result};
use crate::numerics::{axpy, clamped_sigmoid, dot, Gradients, Matrix, ParamId, ParamStore, PROB_EPS};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SarlDims {
    pub categories: usize,
    pub d_raw: usize,
    pub hidden: usize,
    pub d: usize,
}

/// Per-category features, `C × D`.
pub type CategoryFeatureSet = Matrix;

/// Sigmoid scores in `[PROB_EPS, 1 − PROB_EPS]`.
pub type ScoreVector = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SarlParams {
    dims: SarlDims,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    embeddings: ParamId,
    attn: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct SarlForward {
    pub features: CategoryFeatureSet,
    pub scores: ScoreVector,
    /// `C × R` attention weights, rows sum to one.
    pub attention: Matrix,
    /// d score / d logit, zero where the clamp is active.
    score_slopes: Vec<f64>,
    hidden1: Matrix,
    hidden2: Matrix,
    projected: Matrix,
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let n = Normal::new(0.0, std).expect("valid std");
    let data = (0..rows * cols).map(|_| n.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

impl SarlParams {
    pub fn init(store: &mut ParamStore, dims: SarlDims, rng: &mut Rng) -> Result<Self> {
        let SarlDims {
            categories: c,
            d_raw,
            hidden: h,
            d,
        } = dims;
        if c == 0 || d_raw == 0 || h == 0 || d == 0 {
            return Err(Error::invalid(format!("degenerate SARL dims {dims:?}")));
        }
        Ok(Self {
            dims,
            w1: store.add("backbone.w1", gaussian(rng, h, d_raw, (2.0 / d_raw as f64).sqrt()))?,
            b1: store.add("backbone.b1", Matrix::from_vec(1, h, vec![0.01; h])?)?,
            w2: store.add("backbone.w2", gaussian(rng, d, h, (2.0 / h as f64).sqrt()))?,
            b2: store.add("backbone.b2", Matrix::from_vec(1, d, vec![0.01; d])?)?,
            embeddings: store.add("sarl.embeddings", gaussian(rng, c, d, (1.0 / d as f64).sqrt()))?,
            attn: store.add("sarl.attention", gaussian(rng, d, d, (1.0 / d as f64).sqrt()))?,
            cls_w: store.add("classifier.w", gaussian(rng, c, d, (1.0 / d as f64).sqrt()))?,
            cls_b: store.add("classifier.b", Matrix::zeros(1, c))?,
        })
    }

    /// Rebinds to tensors already present in `store` (e.g. after loading a
    /// checkpoint), checking every shape.
    pub fn bind(store: &ParamStore, dims: SarlDims) -> Result<Self> {
        let SarlDims {
            categories: c,
            d_raw,
            hidden: h,
            d,
        } = dims;
        let get = |name: &str, shape: (usize, usize)| -> Result<ParamId> {
            let id = store
                .find(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            if store.value(id).shape() != shape {
                return Err(Error::Shape {
                    context: name.to_string(),
                    expected: shape,
                    actual: store.value(id).shape(),
                });
            }
            Ok(id)
        };
        Ok(Self {
            dims,
            w1: get("backbone.w1", (h, d_raw))?,
            b1: get("backbone.b1", (1, h))?,
            w2: get("backbone.w2", (d, h))?,
            b2: get("backbone.b2", (1, d))?,
            embeddings: get("sarl.embeddings", (c, d))?,
            attn: get("sarl.attention", (d, d))?,
            cls_w: get("classifier.w", (c, d))?,
            cls_b: get("classifier.b", (1, c))?,
        })
    }

    pub fn dims(&self) -> SarlDims {
        self.dims
    }

    pub fn ids(&self) -> [ParamId; 8] {
        [
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.embeddings,
            self.attn,
            self.cls_w,
            self.cls_b,
        ]
    }

    pub fn forward(&self, store: &ParamStore, regions: &Matrix) -> Result<SarlForward> {
        let SarlDims {
            categories: c,
            d_raw,
            hidden: h,
            d,
        } = self.dims;
        let r = regions.rows();
        if r == 0 {
            return Err(Error::invalid("forward needs at least one region"));
        }
        if regions.cols() != d_raw {
            return Err(Error::Shape {
                context: "regions".into(),
                expected: (r, d_raw),
                actual: regions.shape(),
            });
        }

        let w1 = store.value(self.w1);
        let b1 = store.value(self.b1).as_slice();
        let w2 = store.value(self.w2);
        let b2 = store.value(self.b2).as_slice();
        let emb = store.value(self.embeddings);
        let attn = store.value(self.attn);

        let mut hidden1 = Matrix::zeros(r, h);
        let mut hidden2 = Matrix::zeros(r, d);
        let mut projected = Matrix::zeros(r, d);
        for k in 0..r {
            let a1 = hidden1.row_mut(k);
            w1.matvec_into(regions.row(k), a1);
            for (a, b) in a1.iter_mut().zip(b1) {
                *a = (*a + b).max(0.0);
            }
            let a1 = hidden1.row(k).to_vec();
            let a2 = hidden2.row_mut(k);
            w2.matvec_into(&a1, a2);
            for (a, b) in a2.iter_mut().zip(b2) {
                *a = (*a + b).max(0.0);
            }
            let a2 = hidden2.row(k).to_vec();
            attn.matvec_into(&a2, projected.row_mut(k));
        }

        let mut attention = Matrix::zeros(c, r);
        let mut features = Matrix::zeros(c, d);
        for ci in 0..c {
            let e = emb.row(ci);
            let row = attention.row_mut(ci);
            for (k, slot) in row.iter_mut().enumerate() {
                *slot = dot(e, projected.row(k));
            }
            softmax_in_place(row);
            let weights = attention.row(ci).to_vec();
            let f = features.row_mut(ci);
            for (k, &a) in weights.iter().enumerate() {
                axpy(a, hidden2.row(k), f);
            }
        }

        let cls_w = store.value(self.cls_w);
        let cls_b = store.value(self.cls_b).as_slice();
        let mut scores = Vec::with_capacity(c);
        let mut score_slopes = Vec::with_capacity(c);
        for ci in 0..c {
            let (p, slope) = clamped_sigmoid(dot(cls_w.row(ci), features.row(ci)) + cls_b[ci]);
            scores.push(p);
            score_slopes.push(slope);
        }

        Ok(SarlForward {
            features,
            scores,
            attention,
            score_slopes,
            hidden1,
            hidden2,
            projected,
        })
    }

    /// Scores only; the inference path.
    pub fn predict(&self, store: &ParamStore, regions: &Matrix) -> Result<ScoreVector> {
        Ok(self.forward(store, regions)?.scores)
    }

    /// Backpropagates `d_scores` (dL/dp per category) and `d_features`
    /// (dL/df, `C × D`) from one forward pass into `grads`.
    pub fn backward(
        &self,
        store: &ParamStore,
        regions: &Matrix,
        fwd: &SarlForward,
        d_scores: &[f64],
        d_features: &Matrix,
        grads: &mut Gradients,
    ) {
        let SarlDims {
            categories: c,
            hidden: h,
            d,
            ..
        } = self.dims;
        let r = regions.rows();

        let cls_w = store.value(self.cls_w);
        let mut d_feat = d_features.clone();
        for ci in 0..c {
            let dz = d_scores[ci] * fwd.score_slopes[ci];
            if dz == 0.0 {
                continue;
            }
            axpy(dz, fwd.features.row(ci), grads.get_mut(self.cls_w).row_mut(ci));
            grads.get_mut(self.cls_b).add_at(0, ci, dz);
            axpy(dz, cls_w.row(ci), d_feat.row_mut(ci));
        }

        let emb = store.value(self.embeddings);
        let mut d_hidden2 = Matrix::zeros(r, d);
        let mut d_projected = Matrix::zeros(r, d);
        let mut d_logits = vec![0.0; r];
        for ci in 0..c {
            let df = d_feat.row(ci);
            if df.iter().all(|&x| x == 0.0) {
                continue;
            }
            let a = fwd.attention.row(ci);
            let mut weighted = 0.0;
            for k in 0..r {
                axpy(a[k], df, d_hidden2.row_mut(k));
                d_logits[k] = dot(df, fwd.hidden2.row(k));
                weighted += a[k] * d_logits[k];
            }
            for k in 0..r {
                let dl = a[k] * (d_logits[k] - weighted);
                if dl == 0.0 {
                    continue;
                }
                axpy(dl, fwd.projected.row(k), grads.get_mut(self.embeddings).row_mut(ci));
                axpy(dl, emb.row(ci), d_projected.row_mut(k));
            }
        }

        let attn = store.value(self.attn);
        let w2 = store.value(self.w2);
        let mut dz2 = vec![0.0; d];
        let mut dz1 = vec![0.0; h];
        for k in 0..r {
            let h2 = fwd.hidden2.row(k);
            grads.get_mut(self.attn).add_outer(1.0, d_projected.row(k), h2);
            let mut dh2 = d_hidden2.row(k).to_vec();
            attn.matvec_t_acc(d_projected.row(k), &mut dh2);

            for j in 0..d {
                dz2[j] = if h2[j] > 0.0 { dh2[j] } else { 0.0 };
            }
            let h1 = fwd.hidden1.row(k);
            grads.get_mut(self.w2).add_outer(1.0, &dz2, h1);
            axpy(1.0, &dz2, grads.get_mut(self.b2).as_mut_slice());

            let mut dh1 = vec![0.0; h];
            w2.matvec_t_acc(&dz2, &mut dh1);
            for j in 0..h {
                dz1[j] = if h1[j] > 0.0 { dh1[j] } else { 0.0 };
            }
            grads.get_mut(self.w1).add_outer(1.0, &dz1, regions.row(k));
            axpy(1.0, &dz1, grads.get_mut(self.b1).as_mut_slice());
        }
    }
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Result of the partial binary cross entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartialBce {
    pub loss: f64,
    /// Set when no label is known; the loss is then 0.
    pub skipped: bool,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary cross entropy over the known entries, normalised by their count:
/// `−(1/Σ|y_c|) Σ [y_c=1]·log p_c + [y_c=−1]·log(1 − p_c)`.
pub fn partial_bce(scores: &[f64], labels: &PartialLabelVector) -> PartialBce {
    let known = labels.known_count();
    if known == 0 {
        return PartialBce {
            loss: 0.0,
            skipped: true,
        };
    }
    let sum: f64 = scores
        .iter()
        .zip(labels.as_slice())
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            match y {
                1 => p.ln(),
                -1 => (1.0 - p).ln(),
                _ => 0.0,
            }
        })
        .sum();
    PartialBce {
        loss: -sum / known as f64,
        skipped: false,
    }
}

/// Adds `weight · d partial_bce / d p` into `d_scores`.
pub fn partial_bce_grad(scores: &[f64], labels: &PartialLabelVector, weight: f64, d_scores: &mut [f64]) {
    let known = labels.known_count();
    if known == 0 {
        return;
    }
    let k = weight / known as f64;
    for ((&p, &y), g) in scores.iter().zip(labels.as_slice()).zip(d_scores) {
        let p = clamp_prob(p);
        match y {
            1 => *g -= k / p,
            -1 => *g += k / (1.0 - p),
            _ => {}
        }
    }
}
