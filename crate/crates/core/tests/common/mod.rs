//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

/// Average precision by direct rank counting: an item's rank is one plus
/// the number of items strictly ahead of it (higher score, or equal score
/// and earlier index). No sorting involved.
pub fn brute_ap(scores: &[f64], gt: &[i8]) -> Option<f64> {
    let n = scores.len();
    let ahead = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let rank = |i: usize| 1 + (0..n).filter(|&j| j != i && ahead(j, i)).count();
    let positives: Vec<usize> = (0..n).filter(|&i| gt[i] == 1).collect();
    if positives.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &i in &positives {
        let r = rank(i);
        let hits = positives.iter().filter(|&&j| rank(j) <= r).count();
        total += hits as f64 / r as f64;
    }
    Some(total / positives.len() as f64)
}

/// `[mAP, OP, OR, OF1, CP, CR, CF1]` with zero-denominator terms dropped
/// from class means and empty ratios reported as zero.
pub fn brute_metrics(scores: &[Vec<f64>], gt: &[Vec<i8>], tau: f64) -> [f64; 7] {
    let n = scores.len();
    let c = gt[0].len();
    let col = |k: usize| -> (Vec<f64>, Vec<i8>) { (0..n).map(|i| (scores[i][k], gt[i][k])).unzip() };

    let aps: Vec<f64> = (0..c)
        .filter_map(|k| {
            let (s, g) = col(k);
            brute_ap(&s, &g)
        })
        .collect();
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };

    let mut correct = vec![0.0; c];
    let mut predicted = vec![0.0; c];
    let mut truth = vec![0.0; c];
    for i in 0..n {
        for k in 0..c {
            let p = scores[i][k] >= tau;
            let t = gt[i][k] == 1;
            if p {
                predicted[k] += 1.0;
            }
            if t {
                truth[k] += 1.0;
            }
            if p && t {
                correct[k] += 1.0;
            }
        }
    }
    let safe = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let sum = |v: &[f64]| v.iter().sum::<f64>();
    let op = safe(sum(&correct), sum(&predicted));
    let or = safe(sum(&correct), sum(&truth));
    let class_mean = |den: &[f64]| {
        let terms: Vec<f64> = (0..c).filter(|&k| den[k] > 0.0).map(|k| correct[k] / den[k]).collect();
        safe(sum(&terms), terms.len() as f64)
    };
    let cp = class_mean(&predicted);
    let cr = class_mean(&truth);
    let f1 = |p: f64, r: f64| safe(2.0 * p * r, p + r);
    [map, op, or, f1(op, or), cp, cr, f1(cp, cr)]
}

pub const SCORE_GRID: [f64; 3] = [0.25, 0.5, 0.75];

/// Decodes `code` as a base-`radix` digit string of length `len`.
pub fn digits(mut code: u64, radix: u64, len: usize) -> Vec<u64> {
    (0..len)
        .map(|_| {
            let d = code % radix;
            code /= radix;
            d
        })
        .collect()
}

/// Every `N × C` instance with `N ≤ 5`, `C ≤ 3`: all label matrices, each
/// paired with every score matrix over [`SCORE_GRID`] when `N·C ≤ 6` and
/// with four deterministic score matrices otherwise. Returns the number
/// of instances and the worst absolute deviation seen.
pub fn sweep_metrics_oracle<F>(mut check: F) -> (usize, f64)
where
    F: FnMut(&[Vec<f64>], &[Vec<i8>]) -> f64,
{
    let mut count = 0;
    let mut worst = 0.0f64;
    for n in 1..=5usize {
        for c in 1..=3usize {
            let cells = n * c;
            let label_codes = 1u64 << cells;
            let score_codes: Vec<u64> = if cells <= 6 {
                (0..3u64.pow(cells as u32)).collect()
            } else {
                Vec::new()
            };
            for lc in 0..label_codes {
                let bits = digits(lc, 2, cells);
                let gt: Vec<Vec<i8>> = bits
                    .chunks(c)
                    .map(|r| r.iter().map(|&b| if b == 1 { 1 } else { -1 }).collect())
                    .collect();
                let codes: Vec<u64> = if score_codes.is_empty() {
                    (0..4u64)
                        .map(|k| (lc.wrapping_mul(2654435761).wrapping_add(k * 40503)) % 3u64.pow(cells as u32))
                        .collect()
                } else {
                    score_codes.clone()
                };
                for sc in codes {
                    let s = digits(sc, 3, cells);
                    let scores: Vec<Vec<f64>> = s
                        .chunks(c)
                        .map(|r| r.iter().map(|&d| SCORE_GRID[d as usize]).collect())
                        .collect();
                    worst = worst.max(check(&scores, &gt));
                    count += 1;
                }
            }
        }
    }
    (count, worst)
}
