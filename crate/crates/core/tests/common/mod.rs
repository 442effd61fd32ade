//! Reference implementations shared by the integration suites.
#![allow(dead_code)]

use everest::embedding::TokenGrid;
use everest::rero::MetricKind;

/// Exact inclusion probability of every index under sequential weighted
/// draws without replacement, by walking every draw ordering.
pub fn inclusion_by_enumeration(weights: &[f64], draws: usize) -> Vec<f64> {
    fn walk(w: &[f64], taken: &mut Vec<bool>, left: usize, p: f64, out: &mut [f64]) {
        if left == 0 {
            return;
        }
        let total: f64 = w.iter().zip(taken.iter()).filter(|(_, &t)| !t).map(|(x, _)| x).sum();
        for i in 0..w.len() {
            if taken[i] || w[i] <= 0.0 {
                continue;
            }
            let q = p * w[i] / total;
            out[i] += q;
            taken[i] = true;
            walk(w, taken, left - 1, q, out);
            taken[i] = false;
        }
    }
    let mut out = vec![0.0; weights.len()];
    walk(weights, &mut vec![false; weights.len()], draws, 1.0, &mut out);
    out
}

/// Importance by explicit loops over pairs, slots and channels.
pub fn importance_by_loops(grid: &TokenGrid<f64>, metric: MetricKind) -> Vec<f64> {
    let mut out = vec![0.0; grid.tau * grid.j];
    for i in 0..grid.tau {
        let (cur, prev) = if i == 0 { (1, 0) } else { (i, i - 1) };
        for j in 0..grid.j {
            let (a, b) = (grid.token(cur, j), grid.token(prev, j));
            let mut acc = 0.0;
            for c in 0..grid.dim {
                let d = a[c] - b[c];
                acc += match metric {
                    MetricKind::L1 => d.abs(),
                    _ => d * d,
                };
            }
            out[i * grid.j + j] = if metric == MetricKind::L1 { acc } else { acc.sqrt() };
        }
    }
    out
}

/// Top `k` flat indices by a full sort, ties to the lower index, returned
/// ascending.
pub fn top_k_by_sort(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}
