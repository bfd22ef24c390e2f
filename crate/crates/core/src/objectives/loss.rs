//! Contrastive and cross-entropy objectives.

use crate::error::{Error, Result};
use crate::graph::{Ctx, PlainCtx};
use crate::linalg::{self, Matrix, Vector};
use crate::params::ParamStore;

/// One training minibatch. Labels are global class ids.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<Vector>,
    pub labels: Vec<usize>,
    pub task_id: usize,
}

impl Batch {
    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::Empty { what: "batch" });
        }
        if self.images.len() != self.labels.len() {
            return Err(Error::invalid_arg(format!(
                "batch has {} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        Ok(())
    }
}

/// In-graph cosine similarity: `a.b / (|a| |b|)`.
pub fn cosine_graph<'a, C: Ctx<'a>>(ctx: &mut C, a: &C::V, b: &C::V) -> C::S {
    let ab = ctx.dot(a, b);
    let aa = ctx.dot(a, a);
    let bb = ctx.dot(b, b);
    let prod = ctx.s_mul(aa, bb);
    let norm = ctx.s_sqrt(prod);
    let inv = ctx.s_recip(norm);
    ctx.s_mul(ab, inv)
}

/// Pairwise similarity matrix `l[i][j] = cos(v_i, w_j) / tau`.
///
/// `tau = 1` is the literal temperature-free similarity.
pub fn similarity_matrix(v: &[Vector], w: &[Vector], tau: f64) -> Result<Matrix> {
    if v.is_empty() || w.is_empty() {
        return Err(Error::Empty {
            what: "similarity_matrix",
        });
    }
    if v.len() != w.len() {
        return Err(Error::invalid_arg(format!(
            "similarity_matrix: {} visual vs {} text features",
            v.len(),
            w.len()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::invalid_arg(format!("non-positive tau {tau}")));
    }
    let n = v.len();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, linalg::cosine(&v[i], &w[j])? / tau);
        }
    }
    Ok(out)
}

/// Supervised contrastive loss over a precomputed similarity matrix:
/// the text-image direction (row softmax) plus the image-text direction
/// (column softmax), each averaged over the positive set `P(i)` of indices
/// sharing the anchor's label (the anchor itself included).
pub fn supcon_loss(l: &Matrix, labels: &[usize]) -> Result<f64> {
    if l.rows != l.cols {
        return Err(Error::ShapeMismatch {
            op: "supcon_loss",
            left: (l.rows, l.cols),
            right: (l.cols, l.rows),
        });
    }
    if labels.len() != l.rows {
        return Err(Error::invalid_arg(format!(
            "supcon_loss: {} labels for {}x{} matrix",
            labels.len(),
            l.rows,
            l.cols
        )));
    }
    let n = l.rows;
    let store = ParamStore::new();
    let mut ctx = PlainCtx::new(&store);
    let mut logits = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            logits.push(ctx.constant(l.get(i, j)));
        }
    }
    let root = supcon_from_logits(&mut ctx, &logits, n, labels);
    Ok(ctx.scalar_value(root))
}

/// Shared loss body over an `n x n` grid of similarity scalars (row-major).
fn supcon_from_logits<'a, C: Ctx<'a>>(
    ctx: &mut C,
    logits: &[C::S],
    n: usize,
    labels: &[usize],
) -> C::S {
    let mut terms: Vec<C::S> = Vec::new();
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| labels[j] == labels[i]).collect();
        let row: Vec<C::S> = (0..n).map(|k| logits[i * n + k]).collect();
        let col: Vec<C::S> = (0..n).map(|k| logits[k * n + i]).collect();
        let lse_row = ctx.logsumexp(&row);
        let lse_col = ctx.logsumexp(&col);
        let mut pos_terms: Vec<C::S> = Vec::with_capacity(2 * positives.len());
        for &j in &positives {
            // log(exp(l_ij)/sum_k exp(l_ik)) = l_ij - lse(row i)
            let neg_row = ctx.s_neg(lse_row);
            let ti = ctx.s_add(logits[i * n + j], neg_row);
            pos_terms.push(ti);
            // transposed direction: l_ji - lse(col i)
            let neg_col = ctx.s_neg(lse_col);
            let tj = ctx.s_add(logits[j * n + i], neg_col);
            pos_terms.push(tj);
        }
        let summed = ctx.s_sum(&pos_terms);
        terms.push(ctx.s_scale(summed, 1.0 / positives.len() as f64));
    }
    let total = ctx.s_sum(&terms);
    ctx.s_neg(total)
}

/// Builds the full contrastive loss in-graph from embedding nodes.
pub fn supcon_loss_graph<'a, C: Ctx<'a>>(
    ctx: &mut C,
    visual: &[C::V],
    text: &[C::V],
    labels: &[usize],
    tau: f64,
) -> C::S {
    let n = visual.len();
    debug_assert_eq!(n, text.len());
    debug_assert_eq!(n, labels.len());
    let mut logits = Vec::with_capacity(n * n);
    for vi in visual {
        for wj in text {
            let c = cosine_graph(ctx, vi, wj);
            logits.push(ctx.s_scale(c, 1.0 / tau));
        }
    }
    supcon_from_logits(ctx, &logits, n, labels)
}

/// Cross-entropy over cosine logits for one sample.
pub fn ce_class_loss(
    v: &Vector,
    text_feats: &[Vector],
    label: usize,
    tau_ce: f64,
) -> Result<f64> {
    if text_feats.is_empty() {
        return Err(Error::Empty { what: "text_feats" });
    }
    if label >= text_feats.len() {
        return Err(Error::invalid_arg(format!(
            "label {label} out of range for {} classes",
            text_feats.len()
        )));
    }
    if tau_ce <= 0.0 {
        return Err(Error::invalid_arg(format!("non-positive tau_ce {tau_ce}")));
    }
    let logits: Vec<f64> = text_feats
        .iter()
        .map(|w| linalg::cosine(v, w).map(|c| c / tau_ce))
        .collect::<Result<_>>()?;
    let store = ParamStore::new();
    let mut ctx = PlainCtx::new(&store);
    let nodes: Vec<f64> = logits.iter().map(|&x| ctx.constant(x)).collect();
    Ok(ce_from_logits(&mut ctx, &nodes, label))
}

fn ce_from_logits<'a, C: Ctx<'a>>(ctx: &mut C, logits: &[C::S], label: usize) -> C::S {
    let lse = ctx.logsumexp(logits);
    let neg = ctx.s_neg(logits[label]);
    ctx.s_add(lse, neg)
}

/// In-graph cross-entropy for one sample against candidate text features.
pub fn ce_loss_graph<'a, C: Ctx<'a>>(
    ctx: &mut C,
    v: &C::V,
    text_feats: &[C::V],
    label: usize,
    tau_ce: f64,
) -> C::S {
    let logits: Vec<C::S> = text_feats
        .iter()
        .map(|w| {
            let c = cosine_graph(ctx, v, w);
            ctx.s_scale(c, 1.0 / tau_ce)
        })
        .collect();
    ce_from_logits(ctx, &logits, label)
}
