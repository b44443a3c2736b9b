//! Macro-level feedback modeling.
//!
//! Users and items of a view are clustered separately with k-means; the
//! stacked centroids `C` are aggregated into every node with weights
//! `W = rownorm(V Cᵀ)` derived from the node's propagation direction `V`,
//! giving `E_macro = E^(0) + W C / Q`. An InfoNCE term then aligns
//! `E^(K)` with `E_macro` node by node.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::contrastive::{gather, info_nce, scale_rows, scatter_add};
use crate::error::{Error, Result};
use crate::propagation::{read_values, write_values, View, ViewEmbeddings};
use crate::sparse::Matrix;

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centroids: Matrix,
    pub assignment: Vec<usize>,
    /// SSE after every assignment step.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y))
}

/// Within-cluster sum of squared distances.
pub fn sse(points: ArrayView2<'_, f64>, centroids: ArrayView2<'_, f64>, assignment: &[usize]) -> f64 {
    points
        .axis_iter(Axis(0))
        .zip(assignment)
        .map(|(p, &c)| sq_dist(p, centroids.row(c)))
        .sum()
}

/// Nearest centroid per point; ties go to the lowest index.
fn assign(points: ArrayView2<'_, f64>, centroids: &Matrix) -> Vec<usize> {
    (0..points.nrows())
        .into_par_iter()
        .map(|p| {
            let x = points.row(p);
            let mut best = (0, f64::INFINITY);
            for (c, row) in centroids.axis_iter(Axis(0)).enumerate() {
                let d = sq_dist(x, row);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect()
}

/// k-means++ seeding: each new centre is drawn with probability
/// proportional to its squared distance from the nearest chosen centre.
fn seed_centroids(points: ArrayView2<'_, f64>, q: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.nrows();
    let mut chosen = Vec::with_capacity(q);
    chosen.push(rng.random_range(0..n));
    let mut dist: Vec<f64> = points.axis_iter(Axis(0)).map(|p| sq_dist(p, points.row(chosen[0]))).collect();
    while chosen.len() < q {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            // Every point coincides with a centre; pick an unused index.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, p) in points.axis_iter(Axis(0)).enumerate() {
            dist[i] = dist[i].min(sq_dist(p, points.row(next)));
        }
    }
    points.select(Axis(0), &chosen)
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops after `max_iter` assignment steps or once the assignment repeats.
/// Empty clusters are re-seeded at the point farthest from its centroid.
pub fn kmeans_fit(points: ArrayView2<'_, f64>, q: usize, seed: u64, max_iter: usize) -> Result<KMeansFit> {
    let n = points.nrows();
    if q == 0 || n < q {
        return Err(Error::InvalidArgument(format!("k-means needs 1 <= Q <= n, got Q={q}, n={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(points, q, &mut rng);
    let mut assignment: Vec<usize> = Vec::new();
    let mut sse_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        let next = assign(points, &centroids);
        iterations += 1;
        sse_history.push(sse(points, centroids.view(), &next));
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;

        let mut counts = vec![0usize; q];
        let mut sums = Matrix::zeros((q, points.ncols()));
        for (p, &c) in points.axis_iter(Axis(0)).zip(&assignment) {
            counts[c] += 1;
            let mut row = sums.row_mut(c);
            row += &p;
        }
        let mut used = Vec::new();
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / count as f64));
            }
        }
        for c in (0..q).filter(|&c| counts[c] == 0) {
            let far = (0..n)
                .filter(|p| !used.contains(p))
                .map(|p| (p, sq_dist(points.row(p), centroids.row(assignment[p]))))
                .fold((usize::MAX, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
            if far.0 != usize::MAX {
                used.push(far.0);
                centroids.row_mut(c).assign(&points.row(far.0));
            }
        }
    }
    Ok(KMeansFit { centroids, assignment, sse_history, iterations, converged })
}

/// Stacked user and item centroids of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidSet {
    pub view: View,
    pub user_centroids: Matrix,
    pub item_centroids: Matrix,
    /// `[Z_u; Z_i]`, shape `Q×d`.
    pub combined: Matrix,
    pub user_assignment: Vec<usize>,
    pub item_assignment: Vec<usize>,
}

impl CentroidSet {
    /// Clusters `E^(0)` of a view into `q/2` user and `q - q/2` item
    /// centroids, each capped by the number of points available.
    pub fn fit(emb: &ViewEmbeddings, q: usize, seed: u64, max_iter: usize) -> Result<Self> {
        if q < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 centroids, got {q}")));
        }
        let (m, n) = (emb.num_users, emb.num_items);
        let want_u = q / 2;
        let want_i = q - want_u;
        let q_u = want_u.min(m);
        let q_i = want_i.min(n);
        if q_u < want_u || q_i < want_i {
            log::warn!("{} centroids capped to {q_u} users + {q_i} items", q);
        }
        let users = emb.base.slice(ndarray::s![..m, ..]);
        let items = emb.base.slice(ndarray::s![m.., ..]);
        let fu = kmeans_fit(users, q_u, seed, max_iter)?;
        let fi = kmeans_fit(items, q_i, seed.wrapping_add(1), max_iter)?;
        let combined = ndarray::concatenate(Axis(0), &[fu.centroids.view(), fi.centroids.view()]).expect("same width");
        Ok(Self {
            view: emb.view,
            user_centroids: fu.centroids,
            item_centroids: fi.centroids,
            combined,
            user_assignment: fu.assignment,
            item_assignment: fi.assignment,
        })
    }

    /// Total centroid count Q.
    pub fn q(&self) -> usize {
        self.combined.nrows()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_u8(match self.view {
            View::If => 0,
            View::Iu => 1,
        })?;
        w.write_u64::<LittleEndian>(self.user_centroids.nrows() as u64)?;
        w.write_u64::<LittleEndian>(self.item_centroids.nrows() as u64)?;
        w.write_u64::<LittleEndian>(self.combined.ncols() as u64)?;
        w.write_u64::<LittleEndian>(self.user_assignment.len() as u64)?;
        w.write_u64::<LittleEndian>(self.item_assignment.len() as u64)?;
        write_values(w, &self.combined)?;
        for &a in self.user_assignment.iter().chain(&self.item_assignment) {
            w.write_u32::<LittleEndian>(a as u32)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let view = match r.read_u8()? {
            0 => View::If,
            1 => View::Iu,
            t => return Err(Error::Format(format!("unknown view tag {t}"))),
        };
        let q_u = r.read_u64::<LittleEndian>()? as usize;
        let q_i = r.read_u64::<LittleEndian>()? as usize;
        let d = r.read_u64::<LittleEndian>()? as usize;
        let n_u = r.read_u64::<LittleEndian>()? as usize;
        let n_i = r.read_u64::<LittleEndian>()? as usize;
        let combined = read_values(r, q_u + q_i, d)?;
        let mut read_assign = |len: usize| -> Result<Vec<usize>> {
            (0..len).map(|_| Ok(r.read_u32::<LittleEndian>()? as usize)).collect()
        };
        let user_assignment = read_assign(n_u)?;
        let item_assignment = read_assign(n_i)?;
        Ok(Self {
            view,
            user_centroids: combined.slice(ndarray::s![..q_u, ..]).to_owned(),
            item_centroids: combined.slice(ndarray::s![q_u.., ..]).to_owned(),
            combined,
            user_assignment,
            item_assignment,
        })
    }
}

/// Rows of `H` shorter than this are treated as zero. Structurally zero
/// directions (e.g. a degree-one pair under an even K) otherwise come out
/// as rounding noise and normalize to an arbitrary unit vector.
pub const MIN_ROW_NORM: f64 = 1e-10;

/// `H = V Cᵀ` and its row-L2-normalized form `W`.
#[derive(Clone, Debug)]
pub struct MacroState {
    pub h: Matrix,
    pub w: Matrix,
}

pub fn macro_weights(v: ArrayView2<'_, f64>, c: ArrayView2<'_, f64>) -> Result<MacroState> {
    if v.ncols() != c.ncols() {
        return Err(Error::Dimension(format!("direction width {} vs centroid width {}", v.ncols(), c.ncols())));
    }
    let h = v.dot(&c.t());
    let mut w = h.clone();
    for mut row in w.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm >= MIN_ROW_NORM {
            row /= norm;
        } else {
            row.fill(0.0);
        }
    }
    Ok(MacroState { h, w })
}

/// `E^(0) + W C / Q`.
pub fn macro_embed(e0: ArrayView2<'_, f64>, state: &MacroState, c: ArrayView2<'_, f64>, q: usize) -> Result<Matrix> {
    if state.w.nrows() != e0.nrows() || state.w.ncols() != c.nrows() || c.ncols() != e0.ncols() || q == 0 {
        return Err(Error::Dimension("macro aggregation shapes".into()));
    }
    let mut out = state.w.dot(&c);
    out /= q as f64;
    out += &e0;
    Ok(out)
}

/// Backward of `W = rownorm(H)`; rows below [`MIN_ROW_NORM`] receive zero
/// gradient.
pub(crate) fn row_normalize_backward(state: &MacroState, grad_w: &Matrix) -> Matrix {
    let mut grad_h = Matrix::zeros(state.h.raw_dim());
    Zip::from(grad_h.rows_mut())
        .and(state.h.rows())
        .and(state.w.rows())
        .and(grad_w.rows())
        .for_each(|mut gh, h, w, gw| {
            let norm = h.dot(&h).sqrt();
            if norm >= MIN_ROW_NORM {
                let proj = w.dot(&gw);
                Zip::from(&mut gh).and(&w).and(&gw).for_each(|o, &wi, &gi| *o = (gi - wi * proj) / norm);
            }
        });
    grad_h
}

/// Macro InfoNCE of one view with gradients w.r.t. `E^(K)` and `E_macro`.
#[derive(Clone, Debug)]
pub struct MacroLoss {
    pub value: f64,
    pub user_term: f64,
    pub item_term: f64,
    pub grad_last: Matrix,
    pub grad_macro: Matrix,
}

/// `InfoNCE(E^(K)_users, E_macro_users) + μ · InfoNCE(E^(K)_items, E_macro_items)`.
pub fn macro_loss(
    last_layer: &Matrix,
    e_macro: &Matrix,
    num_users: usize,
    users: &[usize],
    items: &[usize],
    mu: f64,
    tau: f64,
) -> Result<MacroLoss> {
    if last_layer.dim() != e_macro.dim() {
        return Err(Error::Dimension("E^(K) and E_macro differ in shape".into()));
    }
    if users.is_empty() || items.is_empty() {
        return Err(Error::InvalidArgument("macro contrastive batches must be nonempty".into()));
    }
    let item_rows: Vec<usize> = items.iter().map(|&i| num_users + i).collect();
    if users.iter().any(|&u| u >= num_users) || item_rows.iter().any(|&r| r >= last_layer.nrows()) {
        return Err(Error::OutOfRange("macro contrastive batch index".into()));
    }
    let mut grad_last = Matrix::zeros(last_layer.raw_dim());
    let mut grad_macro = Matrix::zeros(e_macro.raw_dim());
    let mut terms = [0.0; 2];
    for ((term, rows), weight) in terms.iter_mut().zip([users, item_rows.as_slice()]).zip([1.0, mu]) {
        let out = info_nce(gather(last_layer, rows).view(), gather(e_macro, rows).view(), tau)?;
        *term = weight * out.loss;
        let (mut ga, mut gp) = (out.grad_anchor, out.grad_positive);
        scale_rows(&mut ga, weight);
        scale_rows(&mut gp, weight);
        scatter_add(&mut grad_last, rows, &ga);
        scatter_add(&mut grad_macro, rows, &gp);
    }
    Ok(MacroLoss { value: terms[0] + terms[1], user_term: terms[0], item_term: terms[1], grad_last, grad_macro })
}
