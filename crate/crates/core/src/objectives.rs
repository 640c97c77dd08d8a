//! Loss functions and their gradients with respect to embeddings.
//!
//! Every loss here is a function of similarity matrices built from row
//! embeddings. Each returns the loss together with its gradient, obtained by
//! back-propagating through the smoothed extrema by hand; encoders then carry
//! that gradient into their parameters through [`crate::numerics::Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    finite_diff_check, l2_normalize_rows, logsumexp_unchecked, norm, sigmoid, soft_weights, softplus,
    SoftSign, Tensor2, DEFAULT_EPS,
};

/// `n` entities with `k` attribute texts each, grouped by entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBatch {
    pub n: usize,
    pub k: usize,
    pub entity_ids: Vec<usize>,
    pub texts: Vec<String>,
}

impl KnowledgeBatch {
    pub fn new(n: usize, k: usize, entity_ids: Vec<usize>, texts: Vec<String>) -> Result<Self> {
        if n < 2 || k < 2 {
            return Err(Error::Config(format!(
                "knowledge batch needs n ≥ 2 and k ≥ 2, got n={n}, k={k}"
            )));
        }
        if entity_ids.len() != n || texts.len() != n * k {
            return Err(Error::Dimension(format!(
                "{} entities and {} texts for n={n}, k={k}",
                entity_ids.len(),
                texts.len()
            )));
        }
        Ok(KnowledgeBatch {
            n,
            k,
            entity_ids,
            texts,
        })
    }

    /// Texts of the `i`-th entity in the batch.
    pub fn group(&self, i: usize) -> &[String] {
        &self.texts[i * self.k..(i + 1) * self.k]
    }
}

/// `n·k` embeddings; rows `i·k .. (i+1)·k` belong to entity `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    n: usize,
    k: usize,
    embeddings: Tensor2,
}

/// Allowed deviation from unit norm for embeddings handed to the losses.
const UNIT_TOL: f64 = 1e-9;

fn check_unit_rows(t: &Tensor2) -> Result<()> {
    for (i, r) in t.iter_rows().enumerate() {
        let n = norm(r);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Dimension(format!("row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

impl EmbeddingBatch {
    pub fn new(n: usize, k: usize, embeddings: Tensor2) -> Result<Self> {
        let batch = Self::new_raw(n, k, embeddings)?;
        check_unit_rows(&batch.embeddings)?;
        Ok(batch)
    }

    /// Skips the unit-norm check. The losses remain well defined off the
    /// sphere, which is what finite-difference checks need.
    pub fn new_raw(n: usize, k: usize, embeddings: Tensor2) -> Result<Self> {
        if n < 2 || k < 2 {
            return Err(Error::Config(format!(
                "metric losses need n ≥ 2 and k ≥ 2, got n={n}, k={k}"
            )));
        }
        if embeddings.rows() != n * k {
            return Err(Error::Dimension(format!(
                "{} embeddings for n={n}, k={k}",
                embeddings.rows()
            )));
        }
        Ok(EmbeddingBatch { n, k, embeddings })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn embeddings(&self) -> &Tensor2 {
        &self.embeddings
    }

    fn entity_of(&self, row: usize) -> usize {
        row / self.k
    }
}

/// Image, text and frozen-knowledge embeddings, index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedTriple {
    pub image: Tensor2,
    pub text: Tensor2,
    pub knowledge: Tensor2,
}

impl AlignedTriple {
    pub fn new(image: Tensor2, text: Tensor2, knowledge: Tensor2) -> Result<Self> {
        if image.shape() != text.shape() || text.shape() != knowledge.shape() {
            return Err(Error::Dimension(format!(
                "triple shapes {:?} / {:?} / {:?}",
                image.shape(),
                text.shape(),
                knowledge.shape()
            )));
        }
        check_unit_rows(&image)?;
        check_unit_rows(&text)?;
        check_unit_rows(&knowledge)?;
        Ok(AlignedTriple {
            image,
            text,
            knowledge,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub alpha: f64,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.04,
            alpha: 0.3,
            margin: 0.3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::Config(format!("τ must be positive, got {}", self.tau)));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(Error::Config(format!("α must be ≥ 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// Gradient with respect to the embedding rows.
    pub grad: Tensor2,
}

/// Smoothed `max_p min_q S[p,q]` over a square intra-entity block.
///
/// Self-pairs `q = p` are part of the inner sum.
pub fn soft_maxmin_positive(block: &Tensor2, tau: f64) -> f64 {
    let mins: Vec<f64> = block
        .iter_rows()
        .map(|r| logsumexp_unchecked(r.iter().copied(), SoftSign::Min, tau))
        .collect();
    logsumexp_unchecked(mins.iter().copied(), SoftSign::Max, tau)
}

/// Smoothed maximum over all cross-entity similarities of one entity.
pub fn soft_max_negative(values: &[f64], tau: f64) -> f64 {
    logsumexp_unchecked(values.iter().copied(), SoftSign::Max, tau)
}

/// `(S⁺_i, S⁻_i)` for every entity of the batch.
pub fn entity_similarities(emb: &EmbeddingBatch, tau: f64) -> Vec<(f64, f64)> {
    let z = emb.embeddings();
    let s = z.matmul_nt(z);
    (0..emb.n())
        .map(|i| {
            let (lo, hi) = (i * emb.k(), (i + 1) * emb.k());
            let block = Tensor2::from_fn(emb.k(), emb.k(), |p, q| s.get(lo + p, lo + q));
            let neg: Vec<f64> = (lo..hi)
                .flat_map(|p| {
                    let s = &s;
                    (0..s.cols())
                        .filter(move |c| *c < lo || *c >= hi)
                        .map(move |c| s.get(p, c))
                })
                .collect();
            (soft_maxmin_positive(&block, tau), soft_max_negative(&neg, tau))
        })
        .collect()
}

/// Symmetrize a similarity gradient and pull it back through `S = Z Zᵀ`.
fn gram_backward(g: &Tensor2, z: &Tensor2) -> Tensor2 {
    let mut sym = g.clone();
    sym.add_assign(&g.transpose());
    sym.matmul(z)
}

/// `(1/n) Σ_i ln(1 + e^{(S⁻_i − S⁺_i)/τ})`.
pub fn adasp_loss(emb: &EmbeddingBatch, tau: f64) -> LossGrad {
    let (n, k) = (emb.n(), emb.k());
    let z = emb.embeddings();
    let s = z.matmul_nt(z);
    let total = s.rows();
    let mut g = Tensor2::zeros(total, total);
    let mut loss = 0.0;

    for i in 0..n {
        let (lo, hi) = (i * k, (i + 1) * k);

        // positive: soft max over p of soft min over q
        let rows: Vec<&[f64]> = (lo..hi).map(|p| &s.row(p)[lo..hi]).collect();
        let mins: Vec<f64> = rows
            .iter()
            .map(|r| logsumexp_unchecked(r.iter().copied(), SoftSign::Min, tau))
            .collect();
        let s_pos = logsumexp_unchecked(mins.iter().copied(), SoftSign::Max, tau);
        let outer = soft_weights(&mins, SoftSign::Max, tau);

        // negative: soft max over every cross-entity pair
        let neg: Vec<f64> = (lo..hi)
            .flat_map(|p| {
                let row = s.row(p);
                row[..lo].iter().chain(&row[hi..]).copied()
            })
            .collect();
        let s_neg = logsumexp_unchecked(neg.iter().copied(), SoftSign::Max, tau);
        let neg_w = soft_weights(&neg, SoftSign::Max, tau);

        let x = (s_neg - s_pos) / tau;
        loss += softplus(x);
        let dx = sigmoid(x) / (n as f64 * tau);

        for (pi, row) in rows.iter().enumerate() {
            let inner = soft_weights(row, SoftSign::Min, tau);
            for (qi, w) in inner.iter().enumerate() {
                let v = g.get(lo + pi, lo + qi) - dx * outer[pi] * w;
                g.set(lo + pi, lo + qi, v);
            }
        }
        let mut w = neg_w.iter();
        for p in lo..hi {
            for c in (0..lo).chain(hi..total) {
                let v = g.get(p, c) + dx * w.next().expect("weight per negative");
                g.set(p, c, v);
            }
        }
    }

    LossGrad {
        loss: loss / n as f64,
        grad: gram_backward(&g, z),
    }
}

/// Batch-hard triplet loss in similarity form:
/// mean over anchors of `max(0, margin − min_pos ⟨a,p⟩ + max_neg ⟨a,n⟩)`.
///
/// Ties pick the lowest index, so the gradient is that of the selected
/// pair; it is only meaningful away from ties and the hinge kink.
pub fn triplet_batchhard_loss(emb: &EmbeddingBatch, margin: f64) -> LossGrad {
    let z = emb.embeddings();
    let s = z.matmul_nt(z);
    let total = s.rows();
    let inv = 1.0 / total as f64;
    let mut g = Tensor2::zeros(total, total);
    let mut loss = 0.0;

    for a in 0..total {
        let ea = emb.entity_of(a);
        let mut hard_pos: Option<(usize, f64)> = None;
        let mut hard_neg: Option<(usize, f64)> = None;
        for (c, &v) in s.row(a).iter().enumerate() {
            if c == a {
                continue;
            }
            if emb.entity_of(c) == ea {
                if hard_pos.is_none_or(|(_, best)| v < best) {
                    hard_pos = Some((c, v));
                }
            } else if hard_neg.is_none_or(|(_, best)| v > best) {
                hard_neg = Some((c, v));
            }
        }
        let ((p, sp), (q, sn)) = (
            hard_pos.expect("k ≥ 2 gives a positive"),
            hard_neg.expect("n ≥ 2 gives a negative"),
        );
        let h = margin - sp + sn;
        if h > 0.0 {
            loss += h;
            g.set(a, p, g.get(a, p) - inv);
            g.set(a, q, g.get(a, q) + inv);
        }
    }

    LossGrad {
        loss: loss * inv,
        grad: gram_backward(&g, z),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    pub grad_a: Tensor2,
    pub grad_b: Tensor2,
}

/// Bidirectional InfoNCE where row `i` of `a` pairs with row `i` of `b`,
/// averaged over the batch.
pub fn info_nce(a: &Tensor2, b: &Tensor2, tau: f64) -> Result<PairLoss> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "info_nce on {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::EmptyInput("info_nce on an empty batch"));
    }
    let logits = a.matmul_nt(b).scaled(1.0 / tau);
    let row_lse: Vec<f64> = logits
        .iter_rows()
        .map(|r| logsumexp_unchecked(r.iter().copied(), SoftSign::Max, 1.0))
        .collect();
    let col_lse: Vec<f64> = (0..n)
        .map(|j| logsumexp_unchecked((0..n).map(|i| logits.get(i, j)), SoftSign::Max, 1.0))
        .collect();

    let mut loss = 0.0;
    for i in 0..n {
        let d = logits.get(i, i);
        loss += (row_lse[i] - d) + (col_lse[i] - d);
    }
    let inv = 1.0 / n as f64;

    let g = Tensor2::from_fn(n, n, |i, j| {
        let l = logits.get(i, j);
        let p = (l - row_lse[i]).exp();
        let q = (l - col_lse[j]).exp();
        let delta = if i == j { 2.0 } else { 0.0 };
        (p + q - delta) * inv / tau
    });
    Ok(PairLoss {
        loss: loss * inv,
        grad_a: g.matmul(b),
        grad_b: g.matmul_tn(a),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KepLoss {
    pub total: f64,
    pub image_text: f64,
    pub text_knowledge: f64,
    pub alpha: f64,
    pub grad_image: Tensor2,
    pub grad_text: Tensor2,
}

/// `L = InfoNCE(V, T) + α · InfoNCE(K, T)`; the knowledge rows receive no
/// gradient.
pub fn kep_loss(triple: &AlignedTriple, cfg: &LossConfig) -> Result<KepLoss> {
    cfg.validate()?;
    let vt = info_nce(&triple.image, &triple.text, cfg.tau)?;
    let kt = info_nce(&triple.knowledge, &triple.text, cfg.tau)?;
    let mut grad_text = vt.grad_b;
    if cfg.alpha != 0.0 {
        grad_text.add_assign(&kt.grad_b.scaled(cfg.alpha));
    }
    Ok(KepLoss {
        total: vt.loss + cfg.alpha * kt.loss,
        image_text: vt.loss,
        text_knowledge: kt.loss,
        alpha: cfg.alpha,
        grad_image: vt.grad_a,
        grad_text,
    })
}

/// Result of checking one loss against central finite differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub loss: String,
    pub batches: usize,
    /// Largest `max |analytic − fd| / max(1, |fd|)` over the batches.
    pub max_error: f64,
}

fn random_unit_rows<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor2 {
    loop {
        let t = Tensor2::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        if let Ok(u) = l2_normalize_rows(&t) {
            return u;
        }
    }
}

/// Distance of a batch-hard selection from a tie or the hinge kink.
fn triplet_smoothness(emb: &EmbeddingBatch, margin: f64) -> f64 {
    let z = emb.embeddings();
    let s = z.matmul_nt(z);
    let mut gap = f64::INFINITY;
    for a in 0..s.rows() {
        let mut pos: Vec<f64> = Vec::new();
        let mut neg: Vec<f64> = Vec::new();
        for (c, &v) in s.row(a).iter().enumerate() {
            if c == a {
                continue;
            }
            if emb.entity_of(c) == emb.entity_of(a) {
                pos.push(v);
            } else {
                neg.push(v);
            }
        }
        pos.sort_by(f64::total_cmp);
        neg.sort_by(|x, y| y.total_cmp(x));
        if pos.len() > 1 {
            gap = gap.min(pos[1] - pos[0]);
        }
        if neg.len() > 1 {
            gap = gap.min(neg[0] - neg[1]);
        }
        gap = gap.min((margin - pos[0] + neg[0]).abs());
    }
    gap
}

/// Checks the analytic gradients of every loss on `batches` random batches.
///
/// Triplet batches are redrawn until every hardest pair and hinge sits at
/// least `1e-3` away from a tie or kink.
pub fn gradient_suite<R: Rng + ?Sized>(rng: &mut R, batches: usize) -> Vec<GradCheckRow> {
    let cfg = LossConfig::default();
    let (n, k, d) = (3, 3, 6);
    let mut rows = Vec::new();
    let mut row = |name: &str, errs: Vec<f64>| {
        rows.push(GradCheckRow {
            loss: name.into(),
            batches: errs.len(),
            max_error: errs.into_iter().fold(0.0, f64::max),
        })
    };

    let errs = (0..batches)
        .map(|_| {
            let z = random_unit_rows(rng, n * k, d);
            let analytic = adasp_loss(&EmbeddingBatch::new_raw(n, k, z.clone()).expect("shape"), cfg.tau);
            let f = |p: &[f64]| {
                let t = Tensor2::from_vec(n * k, d, p.to_vec()).expect("shape");
                adasp_loss(&EmbeddingBatch::new_raw(n, k, t).expect("shape"), cfg.tau).loss
            };
            finite_diff_check(f, analytic.grad.as_slice(), z.as_slice(), DEFAULT_EPS)
        })
        .collect();
    row("adasp", errs);

    let errs = (0..batches)
        .map(|_| {
            let emb = loop {
                let e = EmbeddingBatch::new_raw(n, k, random_unit_rows(rng, n * k, d)).expect("shape");
                if triplet_smoothness(&e, cfg.margin) > 1e-3 {
                    break e;
                }
            };
            let z = emb.embeddings().clone();
            let analytic = triplet_batchhard_loss(&emb, cfg.margin);
            let f = |p: &[f64]| {
                let t = Tensor2::from_vec(n * k, d, p.to_vec()).expect("shape");
                triplet_batchhard_loss(&EmbeddingBatch::new_raw(n, k, t).expect("shape"), cfg.margin).loss
            };
            finite_diff_check(f, analytic.grad.as_slice(), z.as_slice(), DEFAULT_EPS)
        })
        .collect();
    row("triplet", errs);

    let m = 6;
    let errs = (0..batches)
        .map(|_| {
            let (a, b) = (random_unit_rows(rng, m, d), random_unit_rows(rng, m, d));
            let out = info_nce(&a, &b, cfg.tau).expect("shape");
            let mut point = a.as_slice().to_vec();
            point.extend_from_slice(b.as_slice());
            let mut analytic = out.grad_a.into_vec();
            analytic.extend(out.grad_b.into_vec());
            let f = |p: &[f64]| {
                let (pa, pb) = p.split_at(m * d);
                let ta = Tensor2::from_vec(m, d, pa.to_vec()).expect("shape");
                let tb = Tensor2::from_vec(m, d, pb.to_vec()).expect("shape");
                info_nce(&ta, &tb, cfg.tau).expect("shape").loss
            };
            finite_diff_check(f, &analytic, &point, DEFAULT_EPS)
        })
        .collect();
    row("info_nce", errs);

    let errs = (0..batches)
        .map(|_| {
            let (v, t, kn) = (
                random_unit_rows(rng, m, d),
                random_unit_rows(rng, m, d),
                random_unit_rows(rng, m, d),
            );
            let out = kep_loss(
                &AlignedTriple::new(v.clone(), t.clone(), kn.clone()).expect("unit rows"),
                &cfg,
            )
            .expect("valid config");
            let mut point = v.as_slice().to_vec();
            point.extend_from_slice(t.as_slice());
            let mut analytic = out.grad_image.into_vec();
            analytic.extend(out.grad_text.into_vec());
            let f = |p: &[f64]| {
                let (pv, pt) = p.split_at(m * d);
                let tv = Tensor2::from_vec(m, d, pv.to_vec()).expect("shape");
                let tt = Tensor2::from_vec(m, d, pt.to_vec()).expect("shape");
                info_nce(&tv, &tt, cfg.tau).expect("shape").loss
                    + cfg.alpha * info_nce(&kn, &tt, cfg.tau).expect("shape").loss
            };
            finite_diff_check(f, &analytic, &point, DEFAULT_EPS)
        })
        .collect();
    row("kep", errs);
    rows
}
