//! Impulsiveness operator and the feedback-reciprocal contrastive loss.
//!
//! The joint operator is `(Σ_{k≤2} Ã_IF^k)(Σ_{k≤2} Ã_IU^k)`, applied right to
//! left and never materialized. Both views' base tables pass through the
//! same operator; the loss then aligns each node's I&F impulsiveness
//! embedding with its own I&U one against in-batch negatives.

use ndarray::ArrayView2;

use crate::contrastive::{gather, info_nce, scatter_add};
use crate::error::{Error, Result};
use crate::sparse::{power_sum_apply, Matrix, NormalizedAdjacency};

/// Receptive field of each power sum in the joint operator.
pub const JOINT_KMAX: usize = 2;

#[derive(Clone, Copy, Debug)]
pub struct JointOperator<'a> {
    pub a_if: &'a NormalizedAdjacency,
    pub a_iu: &'a NormalizedAdjacency,
    pub kmax: usize,
}

impl<'a> JointOperator<'a> {
    pub fn new(a_if: &'a NormalizedAdjacency, a_iu: &'a NormalizedAdjacency) -> Result<Self> {
        if a_if.num_nodes() != a_iu.num_nodes() {
            return Err(Error::Dimension(format!(
                "I&F operator on {} nodes, I&U operator on {}",
                a_if.num_nodes(),
                a_iu.num_nodes()
            )));
        }
        Ok(Self { a_if, a_iu, kmax: JOINT_KMAX })
    }

    pub fn num_nodes(&self) -> usize {
        self.a_if.num_nodes()
    }

    /// `P_IF (P_IU X)`.
    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Matrix> {
        let inner = power_sum_apply(self.a_iu, x, self.kmax)?;
        power_sum_apply(self.a_if, inner.view(), self.kmax)
    }

    /// Transpose product `P_IU (P_IF G)`; both power sums are symmetric.
    pub fn adjoint_apply(&self, g: ArrayView2<'_, f64>) -> Result<Matrix> {
        let inner = power_sum_apply(self.a_if, g, self.kmax)?;
        power_sum_apply(self.a_iu, inner.view(), self.kmax)
    }
}

pub fn joint_apply(op: &JointOperator<'_>, e0: ArrayView2<'_, f64>) -> Result<Matrix> {
    op.apply(e0)
}

#[derive(Clone, Debug)]
pub struct ImpulsivenessEmbeddings {
    pub e_if_imp: Matrix,
    pub e_iu_imp: Matrix,
}

impl ImpulsivenessEmbeddings {
    pub fn compute(op: &JointOperator<'_>, e_if: &Matrix, e_iu: &Matrix) -> Result<Self> {
        Ok(Self { e_if_imp: op.apply(e_if.view())?, e_iu_imp: op.apply(e_iu.view())? })
    }
}

/// Reciprocal contrastive loss with gradients w.r.t. the two impulsiveness
/// tables.
#[derive(Clone, Debug)]
pub struct FrclLoss {
    pub value: f64,
    pub user_term: f64,
    pub item_term: f64,
    pub grad_if_imp: Matrix,
    pub grad_iu_imp: Matrix,
}

impl FrclLoss {
    /// Pulls the impulsiveness gradients back to the base tables.
    pub fn base_gradients(&self, op: &JointOperator<'_>) -> Result<(Matrix, Matrix)> {
        Ok((op.adjoint_apply(self.grad_if_imp.view())?, op.adjoint_apply(self.grad_iu_imp.view())?))
    }
}

/// `users` and `items` are dense ids without duplicates; item `i` lives at
/// row `num_users + i`. The I&F row is the anchor and every I&U row of the
/// same kind in the batch is a candidate.
pub fn frcl_loss(
    imp: &ImpulsivenessEmbeddings,
    num_users: usize,
    users: &[usize],
    items: &[usize],
    tau: f64,
) -> Result<FrclLoss> {
    if imp.e_if_imp.dim() != imp.e_iu_imp.dim() {
        return Err(Error::Dimension("impulsiveness tables differ in shape".into()));
    }
    if users.is_empty() || items.is_empty() {
        return Err(Error::InvalidArgument("reciprocal contrastive batches must be nonempty".into()));
    }
    let n = imp.e_if_imp.nrows();
    let item_rows: Vec<usize> = items.iter().map(|&i| num_users + i).collect();
    if users.iter().any(|&u| u >= num_users) || item_rows.iter().any(|&r| r >= n) {
        return Err(Error::OutOfRange("reciprocal contrastive batch index".into()));
    }
    let mut grad_if_imp = Matrix::zeros(imp.e_if_imp.raw_dim());
    let mut grad_iu_imp = Matrix::zeros(imp.e_iu_imp.raw_dim());
    let mut terms = [0.0; 2];
    for (term, rows) in terms.iter_mut().zip([users, item_rows.as_slice()]) {
        let anchor = gather(&imp.e_if_imp, rows);
        let positive = gather(&imp.e_iu_imp, rows);
        let out = info_nce(anchor.view(), positive.view(), tau)?;
        *term = out.loss;
        scatter_add(&mut grad_if_imp, rows, &out.grad_anchor);
        scatter_add(&mut grad_iu_imp, rows, &out.grad_positive);
    }
    Ok(FrclLoss {
        value: terms[0] + terms[1],
        user_term: terms[0],
        item_term: terms[1],
        grad_if_imp,
        grad_iu_imp,
    })
}
