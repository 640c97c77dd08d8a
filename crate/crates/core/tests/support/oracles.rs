//! Brute-force reference implementations of the evaluation metrics.
//!
//! Written independently of the library: confusion matrices instead of
//! running counts, rank counting instead of sorting, full sorts instead of
//! partial selection.

#![allow(dead_code)]

use kep_core::numerics::{dot, Tensor2};
use rand::Rng;

pub fn first_max(xs: &[f64]) -> usize {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    xs.iter().position(|&x| x == m).unwrap()
}

pub fn confusion(preds: &[usize], labels: &[usize]) -> Vec<Vec<usize>> {
    let c = preds.iter().chain(labels).max().unwrap() + 1;
    let mut m = vec![vec![0; c]; c];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    m
}

pub fn weighted_f1(preds: &[usize], labels: &[usize]) -> f64 {
    let m = confusion(preds, labels);
    let mut acc = 0.0;
    for (i, row) in m.iter().enumerate() {
        let tp = row[i] as f64;
        let fn_: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v as f64)
            .sum();
        let fp: f64 = m
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, r)| r[i] as f64)
            .sum();
        let f1 = if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        };
        acc += f1 * (tp + fn_);
    }
    acc / labels.len() as f64
}

pub fn balanced_accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let m = confusion(preds, labels);
    let recalls: Vec<f64> = m
        .iter()
        .enumerate()
        .filter(|(_, row)| row.iter().sum::<usize>() > 0)
        .map(|(i, row)| row[i] as f64 / row.iter().sum::<usize>() as f64)
        .collect();
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

pub fn zero_shot(images: &Tensor2, prompts: &Tensor2) -> Vec<usize> {
    (0..images.rows())
        .map(|i| {
            let s: Vec<f64> = (0..prompts.rows())
                .map(|c| dot(images.row(i), prompts.row(c)))
                .collect();
            first_max(&s)
        })
        .collect()
}

/// A gallery item outranks `j` if it scores higher, or equal with a lower index.
pub fn recall_at_k(query: &Tensor2, gallery: &Tensor2, positives: &[Vec<usize>], k: usize) -> f64 {
    let mut hits = 0;
    for (qi, pos) in positives.iter().enumerate() {
        let s: Vec<f64> = (0..gallery.rows())
            .map(|g| dot(query.row(qi), gallery.row(g)))
            .collect();
        let best_rank = pos
            .iter()
            .map(|&j| {
                (0..s.len())
                    .filter(|&o| s[o] > s[j] || (s[o] == s[j] && o < j))
                    .count()
            })
            .min()
            .unwrap();
        if best_rank < k {
            hits += 1;
        }
    }
    hits as f64 / positives.len() as f64
}

pub fn topk_mean_pool(scores: &Tensor2, k: usize) -> usize {
    let k = k.min(scores.rows()).max(1);
    let pooled: Vec<f64> = (0..scores.cols())
        .map(|c| {
            let mut col: Vec<f64> = (0..scores.rows()).map(|r| scores.get(r, c)).collect();
            col.sort_by(|a, b| b.partial_cmp(a).unwrap());
            col[..k].iter().sum::<f64>() / k as f64
        })
        .collect();
    first_max(&pooled)
}

/// Values on a coarse grid so ties occur often.
pub fn coarse<R: Rng>(rng: &mut R) -> f64 {
    rng.random_range(-4i32..=4) as f64 / 4.0
}

pub fn coarse_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |_, _| coarse(rng))
}

pub fn random_labels<R: Rng>(rng: &mut R, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}
