//! Intra-image semantic transfer.
//!
//! A small MLP scores every ordered category pair `(i, j)` of one image
//! from the concatenation `[f_i, f_j]`. Known positives vote for unknown
//! categories through those scores, and the predictor is trained with an
//! asymmetric focal loss on pairs whose labels are both known.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::{PartialLabelVector, PseudoLabelVector};
use crate::error::{Error, Result};
use crate::model::CategoryFeatureSet;
use crate::numerics::{axpy, clamped_sigmoid, dot, Gradients, Matrix, ParamId, ParamStore, PROB_EPS};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IstDims {
    /// Category feature width; the predictor input is `2·d`.
    pub d: usize,
    pub mid: usize,
    pub mid2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IstLossConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
}

impl Default for IstLossConfig {
    fn default() -> Self {
        Self {
            gamma_pos: 1.0,
            gamma_neg: 2.0,
            margin: 0.05,
        }
    }
}

impl IstLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_pos >= 0.0 && self.gamma_neg >= 0.0) {
            return Err(Error::invalid("focusing exponents must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::invalid("margin must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Per-image `C × C` co-occurrence probabilities; entry `(i, j)` is the
/// predicted probability that `i` is present given `j`. The diagonal is
/// unused and held at zero. Not symmetric in general.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceMatrix(Matrix);

impl CooccurrenceMatrix {
    pub fn zeros(c: usize) -> Self {
        Self(Matrix::zeros(c, c))
    }

    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::Shape {
                context: "co-occurrence matrix".into(),
                expected: (m.rows(), m.rows()),
                actual: m.shape(),
            });
        }
        Ok(Self(m))
    }

    pub fn categories(&self) -> usize {
        self.0.rows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.0.set(i, j, v);
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IstPredictor {
    dims: IstDims,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

#[derive(Debug, Clone)]
struct PairCache {
    i: usize,
    j: usize,
    a1: Vec<f64>,
    a2: Vec<f64>,
    slope: f64,
}

/// Pair scores for one image plus the activations needed to backpropagate
/// through them.
#[derive(Debug, Clone)]
pub struct IstPass {
    pub matrix: CooccurrenceMatrix,
    pairs: Vec<PairCache>,
}

impl IstPass {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().map(|p| (p.i, p.j))
    }
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let n = Normal::new(0.0, std).expect("valid std");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect()).expect("sized")
}

impl IstPredictor {
    pub fn init(store: &mut ParamStore, dims: IstDims, rng: &mut Rng) -> Result<Self> {
        let IstDims { d, mid, mid2 } = dims;
        if d == 0 || mid == 0 || mid2 == 0 {
            return Err(Error::invalid(format!("degenerate predictor dims {dims:?}")));
        }
        Ok(Self {
            dims,
            w1: store.add("ist.w1", gaussian(rng, mid, 2 * d, (1.0 / (2 * d) as f64).sqrt()))?,
            b1: store.add("ist.b1", Matrix::zeros(1, mid))?,
            w2: store.add("ist.w2", gaussian(rng, mid2, mid, (2.0 / mid as f64).sqrt()))?,
            b2: store.add("ist.b2", Matrix::zeros(1, mid2))?,
            // small output layer so a fresh predictor sits near σ(0)
            w3: store.add("ist.w3", gaussian(rng, 1, mid2, 0.01 / (mid2 as f64).sqrt()))?,
            b3: store.add("ist.b3", Matrix::zeros(1, 1))?,
        })
    }

    pub fn bind(store: &ParamStore, dims: IstDims) -> Result<Self> {
        let IstDims { d, mid, mid2 } = dims;
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
            w1: get("ist.w1", (mid, 2 * d))?,
            b1: get("ist.b1", (1, mid))?,
            w2: get("ist.w2", (mid2, mid))?,
            b2: get("ist.b2", (1, mid2))?,
            w3: get("ist.w3", (1, mid2))?,
            b3: get("ist.b3", (1, 1))?,
        })
    }

    pub fn dims(&self) -> IstDims {
        self.dims
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }

    /// First-layer halves applied to every category: `(W_left f_c, W_right f_c)`.
    fn project(&self, store: &ParamStore, features: &CategoryFeatureSet) -> (Matrix, Matrix) {
        let d = self.dims.d;
        let mid = self.dims.mid;
        let w1 = store.value(self.w1);
        let c = features.rows();
        let mut left = Matrix::zeros(c, mid);
        let mut right = Matrix::zeros(c, mid);
        for ci in 0..c {
            let f = features.row(ci);
            for k in 0..mid {
                let row = w1.row(k);
                left.set(ci, k, dot(&row[..d], f));
                right.set(ci, k, dot(&row[d..], f));
            }
        }
        (left, right)
    }

    fn check_features(&self, features: &CategoryFeatureSet) -> Result<()> {
        if features.cols() != self.dims.d || features.rows() < 2 {
            return Err(Error::Shape {
                context: "co-occurrence predictor features".into(),
                expected: (features.rows().max(2), self.dims.d),
                actual: features.shape(),
            });
        }
        Ok(())
    }

    /// Scores the listed ordered pairs; unlisted entries stay zero.
    pub fn evaluate_pairs(
        &self,
        store: &ParamStore,
        features: &CategoryFeatureSet,
        pairs: &[(usize, usize)],
    ) -> Result<IstPass> {
        self.check_features(features)?;
        let c = features.rows();
        let (left, right) = self.project(store, features);
        let b1 = store.value(self.b1).as_slice();
        let w2 = store.value(self.w2);
        let b2 = store.value(self.b2).as_slice();
        let w3 = store.value(self.w3).as_slice();
        let b3 = store.value(self.b3).get(0, 0);

        let mut matrix = CooccurrenceMatrix::zeros(c);
        let mut caches = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs {
            if i == j || i >= c || j >= c {
                return Err(Error::invalid(format!("invalid category pair ({i}, {j})")));
            }
            let a1: Vec<f64> = left
                .row(i)
                .iter()
                .zip(right.row(j))
                .zip(b1)
                .map(|((u, v), b)| (u + v + b).max(0.0))
                .collect();
            let mut a2 = w2.matvec(&a1);
            for (a, b) in a2.iter_mut().zip(b2) {
                *a = (*a + b).max(0.0);
            }
            let (p, slope) = clamped_sigmoid(dot(w3, &a2) + b3);
            matrix.set(i, j, p);
            caches.push(PairCache { i, j, a1, a2, slope });
        }
        Ok(IstPass {
            matrix,
            pairs: caches,
        })
    }

    /// Full matrix over all ordered pairs `i ≠ j`.
    pub fn predict_cooccurrence(
        &self,
        store: &ParamStore,
        features: &CategoryFeatureSet,
    ) -> Result<CooccurrenceMatrix> {
        let c = features.rows();
        let pairs: Vec<_> = (0..c)
            .flat_map(|i| (0..c).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        Ok(self.evaluate_pairs(store, features, &pairs)?.matrix)
    }

    /// Backpropagates `d_probs` (one per pair of `pass`, in order) into the
    /// predictor weights and `d_features`.
    pub fn backward(
        &self,
        store: &ParamStore,
        features: &CategoryFeatureSet,
        pass: &IstPass,
        d_probs: &[f64],
        d_features: &mut Matrix,
        grads: &mut Gradients,
    ) {
        let IstDims { d, mid, mid2 } = self.dims;
        let c = features.rows();
        let w2 = store.value(self.w2);
        let w3 = store.value(self.w3).as_slice();
        let mut d_left = Matrix::zeros(c, mid);
        let mut d_right = Matrix::zeros(c, mid);
        let mut dz2 = vec![0.0; mid2];
        let mut touched = false;

        for (cache, &dp) in pass.pairs.iter().zip(d_probs) {
            let dz3 = dp * cache.slope;
            if dz3 == 0.0 {
                continue;
            }
            touched = true;
            axpy(dz3, &cache.a2, grads.get_mut(self.w3).as_mut_slice());
            grads.get_mut(self.b3).add_at(0, 0, dz3);
            for k in 0..mid2 {
                dz2[k] = if cache.a2[k] > 0.0 { dz3 * w3[k] } else { 0.0 };
            }
            grads.get_mut(self.w2).add_outer(1.0, &dz2, &cache.a1);
            axpy(1.0, &dz2, grads.get_mut(self.b2).as_mut_slice());
            let mut da1 = vec![0.0; mid];
            w2.matvec_t_acc(&dz2, &mut da1);
            for (k, g) in da1.iter_mut().enumerate() {
                if cache.a1[k] <= 0.0 {
                    *g = 0.0;
                }
            }
            axpy(1.0, &da1, grads.get_mut(self.b1).as_mut_slice());
            axpy(1.0, &da1, d_left.row_mut(cache.i));
            axpy(1.0, &da1, d_right.row_mut(cache.j));
        }
        if !touched {
            return;
        }

        let w1 = store.value(self.w1);
        let gw1 = grads.get_mut(self.w1);
        for ci in 0..c {
            let f = features.row(ci);
            let dl = d_left.row(ci);
            let dr = d_right.row(ci);
            for k in 0..mid {
                let row = gw1.row_mut(k);
                if dl[k] != 0.0 {
                    axpy(dl[k], f, &mut row[..d]);
                }
                if dr[k] != 0.0 {
                    axpy(dr[k], f, &mut row[d..]);
                }
            }
            let df = d_features.row_mut(ci);
            for k in 0..mid {
                let row = w1.row(k);
                if dl[k] != 0.0 {
                    axpy(dl[k], &row[..d], df);
                }
                if dr[k] != 0.0 {
                    axpy(dr[k], &row[d..], df);
                }
            }
        }
    }
}

/// For each unknown category `i`, marks it positive when
/// `Σ_{j known positive} p(i, j) ≥ θ`. The sum is not normalised. Known
/// labels pass through unchanged.
pub fn generate_intra_pseudo(
    matrix: &CooccurrenceMatrix,
    labels: &PartialLabelVector,
    theta: f64,
) -> PseudoLabelVector {
    let positives: Vec<usize> = labels.positives().collect();
    let mut out = labels.clone();
    if positives.is_empty() {
        return out;
    }
    for i in 0..labels.len() {
        if labels.is_known(i) {
            continue;
        }
        let vote: f64 = positives.iter().map(|&j| matrix.get(i, j)).sum();
        if vote >= theta {
            out.set_positive(i);
        }
    }
    out
}

/// Pairs `(i, j)` the generator reads: `i` unknown, `j` a known positive.
pub fn generation_pairs(labels: &PartialLabelVector) -> Vec<(usize, usize)> {
    let positives: Vec<usize> = labels.positives().collect();
    (0..labels.len())
        .filter(|&i| !labels.is_known(i))
        .flat_map(|i| positives.iter().map(move |&j| (i, j)))
        .collect()
}

/// Ordered pairs `i ≠ j` with both labels known; the supervised set.
pub fn supervised_pairs(labels: &PartialLabelVector) -> Vec<(usize, usize)> {
    let known: Vec<usize> = (0..labels.len()).filter(|&c| labels.is_known(c)).collect();
    known
        .iter()
        .flat_map(|&i| known.iter().filter(move |&&j| j != i).map(move |&j| (i, j)))
        .collect()
}

/// Loss and `d/dp` of one pair term. `co_occur` means both labels are
/// positive.
pub fn pair_term(p: f64, co_occur: bool, cfg: &IstLossConfig) -> (f64, f64) {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if co_occur {
        let g = cfg.gamma_pos;
        let w = (1.0 - p).powf(g);
        let loss = -w * p.ln();
        let dw = if g == 0.0 { 0.0 } else { -g * (1.0 - p).powf(g - 1.0) };
        (loss, -dw * p.ln() - w / p)
    } else {
        let q = p - cfg.margin;
        if q <= 0.0 {
            return (0.0, 0.0);
        }
        let g = cfg.gamma_neg;
        let w = q.powf(g);
        let loss = -w * (1.0 - q).ln();
        let dw = if g == 0.0 { 0.0 } else { g * q.powf(g - 1.0) };
        (loss, -dw * (1.0 - q).ln() + w / (1.0 - q))
    }
}

/// Asymmetric loss summed over ordered pairs with both labels known.
pub fn ist_loss(matrix: &CooccurrenceMatrix, labels: &PartialLabelVector, cfg: &IstLossConfig) -> f64 {
    supervised_pairs(labels)
        .into_iter()
        .map(|(i, j)| {
            let co = labels.get(i) == 1 && labels.get(j) == 1;
            pair_term(matrix.get(i, j), co, cfg).0
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use crate::rng;

    fn labels(v: &[i8]) -> PartialLabelVector {
        PartialLabelVector::new(v.to_vec()).unwrap()
    }

    fn setup(d: usize) -> (ParamStore, IstPredictor) {
        let mut store = ParamStore::new();
        let dims = IstDims { d, mid: 6, mid2: 9 };
        let p = IstPredictor::init(&mut store, dims, &mut rng::rng(5)).unwrap();
        (store, p)
    }

    #[test]
    fn worked_loss_terms() {
        let cfg = IstLossConfig::default();
        let (pos, _) = pair_term(0.5, true, &cfg);
        assert!((pos - (-0.5 * 0.5f64.ln())).abs() < 1e-12);
        assert!((pos - 0.346574).abs() < 1e-6);
        assert_eq!(pair_term(0.05, false, &cfg).0, 0.0);
        let (neg, _) = pair_term(0.5, false, &cfg);
        assert!((neg - (-(0.45f64.powi(2)) * 0.55f64.ln())).abs() < 1e-12);
        assert!((neg - 0.1210622).abs() < 1e-6);
    }

    #[test]
    fn pair_term_derivative_matches_differences() {
        for cfg in [
            IstLossConfig::default(),
            IstLossConfig {
                gamma_pos: 0.0,
                gamma_neg: 0.0,
                margin: 0.0,
            },
            IstLossConfig {
                gamma_pos: 2.5,
                gamma_neg: 1.5,
                margin: 0.2,
            },
        ] {
            for &p in &[0.1, 0.3, 0.62, 0.9] {
                for co in [true, false] {
                    let h = 1e-6;
                    let num = (pair_term(p + h, co, &cfg).0 - pair_term(p - h, co, &cfg).0) / (2.0 * h);
                    let (_, an) = pair_term(p, co, &cfg);
                    assert!((num - an).abs() < 1e-6 * (1.0 + an.abs()), "{p} {co} {cfg:?}");
                }
            }
        }
    }

    #[test]
    fn pseudo_rule_examples() {
        let mut m = CooccurrenceMatrix::zeros(4);
        m.set(0, 1, 0.8);
        let y = labels(&[0, 1, -1, 0]);
        assert_eq!(generate_intra_pseudo(&m, &y, 0.75).as_slice(), &[1, 1, -1, 0]);

        let mut m = CooccurrenceMatrix::zeros(3);
        m.set(0, 1, 0.4);
        m.set(0, 2, 0.4);
        let y = labels(&[0, 1, 1]);
        assert_eq!(generate_intra_pseudo(&m, &y, 0.75).get(0), 1);
        assert_eq!(generate_intra_pseudo(&m, &y, 0.85).get(0), 0);

        let mut m = CooccurrenceMatrix::zeros(3);
        m.set(0, 1, 0.99);
        let y = labels(&[0, -1, 0]);
        assert_eq!(generate_intra_pseudo(&m, &y, 0.1), y);
    }

    #[test]
    fn predictor_counts_and_symmetry_of_equal_features() {
        let (store, p) = setup(5);
        let mut feats = Matrix::zeros(4, 5);
        for c in 0..4 {
            feats.row_mut(c).copy_from_slice(&[0.3, -0.2, 1.0, 0.5, 0.1]);
        }
        let m = p.predict_cooccurrence(&store, &feats).unwrap();
        let mut count = 0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    count += 1;
                    assert_eq!(m.get(i, j), m.get(0, 1));
                    assert!((m.get(i, j) - 0.5).abs() < 0.05);
                } else {
                    assert_eq!(m.get(i, j), 0.0);
                }
            }
        }
        assert_eq!(count, 12);
    }

    #[test]
    fn predictor_rejects_bad_features() {
        let (store, p) = setup(5);
        assert!(p.predict_cooccurrence(&store, &Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn reduces_to_plain_bce_without_focusing() {
        let cfg = IstLossConfig {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            margin: 0.0,
        };
        let y = labels(&[1, -1, 1, 0]);
        let mut m = CooccurrenceMatrix::zeros(4);
        let vals = [0.1, 0.35, 0.6, 0.8, 0.45, 0.2, 0.9, 0.72, 0.05, 0.5, 0.66, 0.3];
        let mut k = 0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    m.set(i, j, vals[k]);
                    k += 1;
                }
            }
        }
        let mut bce = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i == j || y.get(i) == 0 || y.get(j) == 0 {
                    continue;
                }
                let target = if y.get(i) == 1 && y.get(j) == 1 { 1.0 } else { 0.0 };
                let p = m.get(i, j);
                bce -= target * p.ln() + (1.0 - target) * (1.0 - p).ln();
            }
        }
        assert!((ist_loss(&m, &y, &cfg) - bce).abs() < 1e-12);
    }

    #[test]
    fn no_known_pairs_means_zero_loss() {
        let m = CooccurrenceMatrix::zeros(3);
        assert_eq!(ist_loss(&m, &labels(&[1, 0, 0]), &IstLossConfig::default()), 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (store, p) = setup(6);
        let feats = gaussian(&mut rng::rng(1), 5, 6, 1.0);
        let y = labels(&[1, -1, 1, 0, 1]);
        let cfg = IstLossConfig {
            margin: 0.0,
            ..IstLossConfig::default()
        };
        let pairs = supervised_pairs(&y);
        let err = finite_diff_check(&store, 1e-5, |s, g| {
            let pass = p.evaluate_pairs(s, &feats, &pairs)?;
            let d: Vec<f64> = pairs
                .iter()
                .map(|&(i, j)| pair_term(pass.matrix.get(i, j), y.get(i) == 1 && y.get(j) == 1, &cfg).1)
                .collect();
            let mut df = Matrix::zeros(5, 6);
            p.backward(s, &feats, &pass, &d, &mut df, g);
            Ok(ist_loss(&pass.matrix, &y, &cfg))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let (store, p) = setup(4);
        let feats = gaussian(&mut rng::rng(2), 3, 4, 1.0);
        let y = labels(&[1, 1, -1]);
        let cfg = IstLossConfig::default();
        let pairs = supervised_pairs(&y);
        let loss_at = |f: &Matrix| {
            let pass = p.evaluate_pairs(&store, f, &pairs).unwrap();
            ist_loss(&pass.matrix, &y, &cfg)
        };
        let pass = p.evaluate_pairs(&store, &feats, &pairs).unwrap();
        let d: Vec<f64> = pairs
            .iter()
            .map(|&(i, j)| pair_term(pass.matrix.get(i, j), y.get(i) == 1 && y.get(j) == 1, &cfg).1)
            .collect();
        let mut df = Matrix::zeros(3, 4);
        let mut g = store.zeros_like();
        p.backward(&store, &feats, &pass, &d, &mut df, &mut g);
        for k in 0..12 {
            let mut plus = feats.clone();
            plus.as_mut_slice()[k] += 1e-5;
            let mut minus = feats.clone();
            minus.as_mut_slice()[k] -= 1e-5;
            let num = (loss_at(&plus) - loss_at(&minus)) / 2e-5;
            let an = df.as_slice()[k];
            assert!((num - an).abs() <= 1e-4 * (num.abs() + an.abs()).max(1e-8), "{k}: {num} vs {an}");
        }
    }

    #[test]
    fn generation_and_supervision_pair_sets() {
        let y = labels(&[1, 0, -1, 0, 1]);
        assert_eq!(generation_pairs(&y), vec![(1, 0), (1, 4), (3, 0), (3, 4)]);
        assert_eq!(supervised_pairs(&y).len(), 6);
    }
}
