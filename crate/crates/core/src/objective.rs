//! Training objective and its analytic gradient.
//!
//! ```text
//! L = bpr_IF + bpr_IU + λ1·frcl + λ2·(macro_IF + macro_IU) + λ3·dis
//! ```
//!
//! Every term is a smooth function of quantities that are linear in a
//! view's base table: the combined representation, `E^(K)`, the direction
//! `V = (E^(K) - E^(0))/K` and the impulsiveness embedding. The backward
//! pass collects gradients w.r.t. those intermediates and pulls them back
//! to `E^(0)` with one Horner sweep over `Ã` plus one adjoint joint
//! product per view. Centroids are constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frcl::{frcl_loss, ImpulsivenessEmbeddings, JointOperator};
use crate::macrofm::{macro_embed, macro_loss, macro_weights, row_normalize_backward, CentroidSet};
use crate::propagation::{propagate, LayerCombination, LayerStack, ViewEmbeddings};
use crate::sparse::{polynomial_apply, Matrix, NormalizedAdjacency};

/// Loss weights and model sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// λ1, reciprocal contrastive weight.
    pub lambda_frcl: f64,
    /// λ2, macro contrastive weight.
    pub lambda_macro: f64,
    /// λ3, distance regularizer weight.
    pub lambda_dis: f64,
    pub tau: f64,
    /// Item-side weight inside the macro term.
    pub mu: f64,
    /// Propagation depth K.
    pub layers: usize,
    pub dim: usize,
    /// Total centroid count Q.
    pub centroids: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda_frcl: 0.1,
            lambda_macro: 0.1,
            lambda_dis: 0.01,
            tau: 0.2,
            mu: 1.0,
            layers: 2,
            dim: 64,
            centroids: 100,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_frcl", self.lambda_frcl),
            ("lambda_macro", self.lambda_macro),
            ("lambda_dis", self.lambda_dis),
            ("mu", self.mu),
        ];
        for (name, v) in weights {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be >= 1".into()));
        }
        if self.lambda_macro > 0.0 && self.centroids < 2 {
            return Err(Error::Config("centroids must be >= 2 when lambda_macro > 0".into()));
        }
        Ok(())
    }

    /// Whether any term couples the two views.
    pub fn uses_ssl(&self) -> bool {
        self.lambda_frcl > 0.0 || self.lambda_macro > 0.0 || self.lambda_dis > 0.0
    }
}

/// Values of every term for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bpr_if: f64,
    pub bpr_iu: f64,
    pub frcl: f64,
    #[serde(rename = "macro")]
    pub macro_term: f64,
    pub dis: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted sum of the unweighted terms.
    pub fn weighted_total(&self, hp: &HyperParams) -> f64 {
        self.bpr_if + self.bpr_iu + hp.lambda_frcl * self.frcl + hp.lambda_macro * self.macro_term + hp.lambda_dis * self.dis
    }
}

/// `∂L/∂E^(0)` per view.
#[derive(Clone, Debug)]
pub struct GradientBuffer {
    pub g_if: Matrix,
    pub g_iu: Option<Matrix>,
}

impl GradientBuffer {
    pub fn zeros(nodes: usize, dim: usize, with_iu: bool) -> Self {
        Self { g_if: Matrix::zeros((nodes, dim)), g_iu: with_iu.then(|| Matrix::zeros((nodes, dim))) }
    }

    pub fn is_finite(&self) -> bool {
        self.g_if.iter().chain(self.g_iu.iter().flatten()).all(|v| v.is_finite())
    }
}

/// `(user, positive item, negative item)`.
pub type Triple = (usize, usize, usize);

/// BPR over a set of triples with the gradient w.r.t. the combined
/// representation.
#[derive(Clone, Debug)]
pub struct BprLoss {
    pub value: f64,
    pub grad_combined: Matrix,
}

impl BprLoss {
    pub fn base_gradient(&self, stack: &LayerStack, adj: &NormalizedAdjacency) -> Result<Matrix> {
        combination_adjoint(&self.grad_combined, stack.depth(), stack.combination, adj)
    }
}

/// `-ln σ(x)`, stable for large `|x|`.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// `Σ -ln σ(ŷ_ui - ŷ_uj)` over `triples`.
pub fn bpr_loss(stack: &LayerStack, triples: &[Triple]) -> Result<BprLoss> {
    let m = stack.num_users;
    let n = stack.num_items();
    let c = &stack.combined;
    let mut grad = Matrix::zeros(c.raw_dim());
    let mut value = 0.0;
    for &(u, i, j) in triples {
        if u >= m || i >= n || j >= n {
            return Err(Error::OutOfRange(format!("triple ({u}, {i}, {j}) with M={m}, N={n}")));
        }
        let (cu, ci, cj) = (c.row(u), c.row(m + i), c.row(m + j));
        let x = cu.dot(&ci) - cu.dot(&cj);
        value += neg_log_sigmoid(x);
        // d/dx of -ln σ(x) is -σ(-x).
        let g = -1.0 / (1.0 + x.exp());
        let diff = &ci - &cj;
        grad.row_mut(u).scaled_add(g, &diff);
        grad.row_mut(m + i).scaled_add(g, &cu);
        grad.row_mut(m + j).scaled_add(-g, &cu);
    }
    Ok(BprLoss { value, grad_combined: grad })
}

/// Distance regularizer `-mean_rows JSD(softmax(V_IF), softmax(V_IU))`.
#[derive(Clone, Debug)]
pub struct JsdLoss {
    pub value: f64,
    pub grad_if: Matrix,
    pub grad_iu: Matrix,
}

fn log_softmax(row: ndarray::ArrayView1<'_, f64>) -> Vec<f64> {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - lse).collect()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let hi = a.max(b);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}

/// Jensen-Shannon divergence of two distributions given as log-probs,
/// together with `∂JSD/∂p` and `∂JSD/∂q`.
fn jsd_from_logs(lp: &[f64], lq: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let ln2 = std::f64::consts::LN_2;
    let mut value = 0.0;
    let mut dp = Vec::with_capacity(lp.len());
    let mut dq = Vec::with_capacity(lp.len());
    for (&a, &b) in lp.iter().zip(lq) {
        let lm = log_add_exp(a, b) - ln2;
        let (p, q) = (a.exp(), b.exp());
        value += 0.5 * (p * (a - lm) + q * (b - lm));
        dp.push(0.5 * (a - lm));
        dq.push(0.5 * (b - lm));
    }
    (value, dp, dq)
}

/// Mean JSD over rows, in `[0, ln 2]`.
pub fn mean_jsd(v_if: &Matrix, v_iu: &Matrix) -> Result<f64> {
    Ok(-jsd_regularizer(v_if, v_iu)?.value)
}

pub fn jsd_regularizer(v_if: &Matrix, v_iu: &Matrix) -> Result<JsdLoss> {
    if v_if.dim() != v_iu.dim() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", v_if.dim(), v_iu.dim())));
    }
    let rows = v_if.nrows();
    let mut grad_if = Matrix::zeros(v_if.raw_dim());
    let mut grad_iu = Matrix::zeros(v_iu.raw_dim());
    if rows == 0 {
        return Ok(JsdLoss { value: 0.0, grad_if, grad_iu });
    }
    let scale = -1.0 / rows as f64;
    let mut total = 0.0;
    for r in 0..rows {
        let lp = log_softmax(v_if.row(r));
        let lq = log_softmax(v_iu.row(r));
        let (value, dp, dq) = jsd_from_logs(&lp, &lq);
        total += value;
        for (grad, logs, dprob) in [(&mut grad_if, &lp, &dp), (&mut grad_iu, &lq, &dq)] {
            // Softmax backward: p_k (g_k - Σ_j p_j g_j).
            let inner: f64 = logs.iter().zip(dprob).map(|(l, g)| l.exp() * g).sum();
            for (k, (l, g)) in logs.iter().zip(dprob).enumerate() {
                grad[[r, k]] = scale * l.exp() * (g - inner);
            }
        }
    }
    Ok(JsdLoss { value: scale * total, grad_if, grad_iu })
}

/// Pulls a gradient on the combined representation back to `E^(0)`.
pub fn combination_adjoint(
    grad: &Matrix,
    depth: usize,
    combination: LayerCombination,
    adj: &NormalizedAdjacency,
) -> Result<Matrix> {
    let terms: Vec<Matrix> = combination.weights(depth).into_iter().map(|w| grad * w).collect();
    polynomial_apply(adj, &terms)
}

/// Pulls a gradient on `V = (E^(K) - E^(0))/K` back to `E^(0)`.
pub fn direction_adjoint(grad: &Matrix, depth: usize, adj: &NormalizedAdjacency) -> Result<Matrix> {
    let mut terms = vec![Matrix::zeros(grad.raw_dim()); depth + 1];
    terms[0] = grad * (-1.0 / depth as f64);
    terms[depth] = grad * (1.0 / depth as f64);
    polynomial_apply(adj, &terms)
}

/// Gradients w.r.t. the linear images of one view's base table.
struct ViewGrads {
    combined: Matrix,
    last: Matrix,
    direction: Matrix,
    base: Matrix,
    imp: Option<Matrix>,
}

impl ViewGrads {
    fn zeros(nodes: usize, dim: usize) -> Self {
        let z = Matrix::zeros((nodes, dim));
        Self { combined: z.clone(), last: z.clone(), direction: z.clone(), base: z, imp: None }
    }

    fn pull_back(self, stack: &LayerStack, adj: &NormalizedAdjacency, joint: Option<&JointOperator<'_>>) -> Result<Matrix> {
        let depth = stack.depth();
        let inv_k = 1.0 / depth as f64;
        let mut terms: Vec<Matrix> =
            stack.combination.weights(depth).into_iter().map(|w| &self.combined * w).collect();
        terms[0] += &self.base;
        terms[0].scaled_add(-inv_k, &self.direction);
        terms[depth] += &self.last;
        terms[depth].scaled_add(inv_k, &self.direction);
        let mut out = polynomial_apply(adj, &terms)?;
        if let (Some(g), Some(op)) = (self.imp, joint) {
            out += &op.adjoint_apply(g.view())?;
        }
        Ok(out)
    }
}

/// Everything the objective reads for one step.
#[derive(Clone, Copy)]
pub struct ObjectiveInputs<'a> {
    pub if_emb: &'a ViewEmbeddings,
    pub a_if: &'a NormalizedAdjacency,
    /// Absent for single-view (LightGCN-style) models.
    pub iu: Option<(&'a ViewEmbeddings, &'a NormalizedAdjacency)>,
    /// Per-view centroids; required when λ2 > 0.
    pub centroids: Option<(&'a CentroidSet, &'a CentroidSet)>,
    pub combination: LayerCombination,
}

/// One mini-batch: BPR triples per view plus the node sets used by the
/// contrastive terms (unique, sorted user ids and item ids).
#[derive(Clone, Copy, Debug)]
pub struct StepBatch<'a> {
    pub if_triples: &'a [Triple],
    pub iu_triples: &'a [Triple],
    pub users: &'a [usize],
    pub items: &'a [usize],
}

fn finite(term: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term })
    }
}

fn add_macro_view(
    emb: &ViewEmbeddings,
    stack: &LayerStack,
    centroids: &CentroidSet,
    batch: &StepBatch<'_>,
    hp: &HyperParams,
    grads: &mut ViewGrads,
) -> Result<f64> {
    let c = &centroids.combined;
    let q = centroids.q();
    let state = macro_weights(stack.direction.view(), c.view())?;
    let e_macro = macro_embed(emb.base.view(), &state, c.view(), q)?;
    let out = macro_loss(stack.last(), &e_macro, emb.num_users, batch.users, batch.items, hp.mu, hp.tau)?;
    let lambda = hp.lambda_macro;
    grads.last.scaled_add(lambda, &out.grad_last);
    grads.base.scaled_add(lambda, &out.grad_macro);
    let mut grad_w = out.grad_macro.dot(&c.t());
    grad_w *= lambda / q as f64;
    let grad_h = row_normalize_backward(&state, &grad_w);
    grads.direction += &grad_h.dot(c);
    Ok(out.value)
}

/// Forward and backward pass of the full objective.
pub fn total_loss(inputs: &ObjectiveInputs<'_>, batch: &StepBatch<'_>, hp: &HyperParams) -> Result<(LossBreakdown, GradientBuffer)> {
    hp.validate()?;
    if hp.uses_ssl() && inputs.iu.is_none() {
        return Err(Error::Config("contrastive and distance terms need the I&U view".into()));
    }
    let depth = hp.layers;
    let nodes = inputs.if_emb.num_nodes();
    let dim = inputs.if_emb.dim();
    let mut out = LossBreakdown::default();

    let if_stack = propagate(inputs.if_emb, inputs.a_if, depth, inputs.combination)?;
    let mut if_grads = ViewGrads::zeros(nodes, dim);
    let bpr = bpr_loss(&if_stack, batch.if_triples)?;
    out.bpr_if = finite("bpr_if", bpr.value)?;
    if_grads.combined = bpr.grad_combined;

    let Some((iu_emb, a_iu)) = inputs.iu else {
        out.total = out.weighted_total(hp);
        let g_if = if_grads.pull_back(&if_stack, inputs.a_if, None)?;
        let buffer = GradientBuffer { g_if, g_iu: None };
        if !buffer.is_finite() {
            return Err(Error::NonFinite { term: "gradient" });
        }
        return Ok((out, buffer));
    };
    if iu_emb.base.dim() != inputs.if_emb.base.dim() {
        return Err(Error::Dimension("I&F and I&U tables differ in shape".into()));
    }

    let iu_stack = propagate(iu_emb, a_iu, depth, inputs.combination)?;
    let mut iu_grads = ViewGrads::zeros(nodes, dim);
    let bpr = bpr_loss(&iu_stack, batch.iu_triples)?;
    out.bpr_iu = finite("bpr_iu", bpr.value)?;
    iu_grads.combined = bpr.grad_combined;

    let joint = JointOperator::new(inputs.a_if, a_iu)?;
    if hp.lambda_frcl > 0.0 {
        let imp = ImpulsivenessEmbeddings::compute(&joint, &inputs.if_emb.base, &iu_emb.base)?;
        let fl = frcl_loss(&imp, inputs.if_emb.num_users, batch.users, batch.items, hp.tau)?;
        out.frcl = finite("frcl", fl.value)?;
        if_grads.imp = Some(fl.grad_if_imp * hp.lambda_frcl);
        iu_grads.imp = Some(fl.grad_iu_imp * hp.lambda_frcl);
    }

    if hp.lambda_macro > 0.0 {
        let (c_if, c_iu) = inputs
            .centroids
            .ok_or_else(|| Error::Config("macro term enabled but no centroids supplied".into()))?;
        let l_if = add_macro_view(inputs.if_emb, &if_stack, c_if, batch, hp, &mut if_grads)?;
        let l_iu = add_macro_view(iu_emb, &iu_stack, c_iu, batch, hp, &mut iu_grads)?;
        out.macro_term = finite("macro", l_if + l_iu)?;
    }

    if hp.lambda_dis > 0.0 {
        let jsd = jsd_regularizer(&if_stack.direction, &iu_stack.direction)?;
        out.dis = finite("dis", jsd.value)?;
        if_grads.direction.scaled_add(hp.lambda_dis, &jsd.grad_if);
        iu_grads.direction.scaled_add(hp.lambda_dis, &jsd.grad_iu);
    }

    out.total = finite("total", out.weighted_total(hp))?;
    let g_if = if_grads.pull_back(&if_stack, inputs.a_if, Some(&joint))?;
    let g_iu = iu_grads.pull_back(&iu_stack, a_iu, Some(&joint))?;
    let buffer = GradientBuffer { g_if, g_iu: Some(g_iu) };
    if !buffer.is_finite() {
        return Err(Error::NonFinite { term: "gradient" });
    }
    Ok((out, buffer))
}
