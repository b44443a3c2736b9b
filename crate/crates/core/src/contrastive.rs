//! In-batch InfoNCE shared by the reciprocal and macro contrastive terms.

use ndarray::parallel::prelude::*;
use ndarray::{ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::sparse::Matrix;

#[derive(Clone, Debug)]
pub struct InfoNce {
    pub loss: f64,
    pub grad_anchor: Matrix,
    pub grad_positive: Matrix,
}

/// `Σ_a -ln softmax_b(anchor_a · positive_b / τ)[a]` with row `a` of
/// `positive` as the positive for row `a` of `anchor`.
pub fn info_nce(anchor: ArrayView2<'_, f64>, positive: ArrayView2<'_, f64>, tau: f64) -> Result<InfoNce> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if anchor.dim() != positive.dim() {
        return Err(Error::Dimension(format!("anchor {:?} vs positive {:?}", anchor.dim(), positive.dim())));
    }
    if anchor.nrows() == 0 {
        return Err(Error::InvalidArgument("contrastive batch is empty".into()));
    }
    let mut probs = anchor.dot(&positive.t()) / tau;
    let row_losses: Vec<f64> = probs
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .map(|(a, mut row)| {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let own = row[a];
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
            max + sum.ln() - own
        })
        .collect();
    let loss = row_losses.iter().sum();
    // dL/dlogits = P - I
    probs.diag_mut().map_inplace(|p| *p -= 1.0);
    probs /= tau;
    let grad_anchor = probs.dot(&positive);
    let grad_positive = probs.t().dot(&anchor);
    Ok(InfoNce { loss, grad_anchor, grad_positive })
}

/// Gathers rows into a dense block.
pub(crate) fn gather(m: &Matrix, rows: &[usize]) -> Matrix {
    m.select(Axis(0), rows)
}

/// Adds block rows into `target` at `rows`.
pub(crate) fn scatter_add(target: &mut Matrix, rows: &[usize], block: &Matrix) {
    for (&r, src) in rows.iter().zip(block.axis_iter(Axis(0))) {
        let mut dst = target.row_mut(r);
        dst += &src;
    }
}

pub(crate) fn scale_rows(block: &mut Matrix, by: f64) {
    if by != 1.0 {
        block.mapv_inplace(|v| v * by);
    }
}
