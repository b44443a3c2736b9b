//! Per-view embedding tables, K-layer propagation and scoring.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{apply, Matrix, NormalizedAdjacency};

/// Which partitioned graph a table or operator belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    /// Interacted & fascinated.
    If,
    /// Interacted & unfascinated.
    Iu,
}

impl View {
    pub(crate) fn tag(self) -> u8 {
        match self {
            View::If => 0,
            View::Iu => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(View::If),
            1 => Ok(View::Iu),
            t => Err(Error::Format(format!("unknown view tag {t}"))),
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::If => "if",
            View::Iu => "iu",
        })
    }
}

/// How the final representation is formed from `E^(0)..E^(K)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerCombination {
    /// Mean over all K+1 layers.
    #[default]
    Mean,
    /// `E^(K)` only.
    Last,
}

impl LayerCombination {
    pub(crate) fn tag(self) -> u8 {
        match self {
            LayerCombination::Mean => 0,
            LayerCombination::Last => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(LayerCombination::Mean),
            1 => Ok(LayerCombination::Last),
            t => Err(Error::Format(format!("unknown layer combination tag {t}"))),
        }
    }

    /// Weight of layer `k` in the combined representation.
    pub fn weights(self, depth: usize) -> Vec<f64> {
        match self {
            LayerCombination::Mean => vec![1.0 / (depth + 1) as f64; depth + 1],
            LayerCombination::Last => {
                let mut w = vec![0.0; depth + 1];
                w[depth] = 1.0;
                w
            }
        }
    }
}

impl FromStr for LayerCombination {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(LayerCombination::Mean),
            "last" => Ok(LayerCombination::Last),
            other => Err(Error::Config(format!("layer_combination must be mean|last, got {other:?}"))),
        }
    }
}

impl fmt::Display for LayerCombination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerCombination::Mean => "mean",
            LayerCombination::Last => "last",
        })
    }
}

/// Trainable `E^(0)` of one view; rows are users then items.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewEmbeddings {
    pub view: View,
    pub num_users: usize,
    pub num_items: usize,
    pub base: Matrix,
}

impl ViewEmbeddings {
    pub fn new(view: View, num_users: usize, num_items: usize, base: Matrix) -> Result<Self> {
        if base.nrows() != num_users + num_items || base.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "embedding table {}x{} for {} users + {} items",
                base.nrows(),
                base.ncols(),
                num_users,
                num_items
            )));
        }
        if base.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { term: "embedding table" });
        }
        Ok(Self { view, num_users, num_items, base })
    }

    /// Xavier-uniform init with fans `(M+N, d)`.
    pub fn xavier<R: Rng + ?Sized>(view: View, num_users: usize, num_items: usize, dim: usize, rng: &mut R) -> Self {
        let n = num_users + num_items;
        let bound = (6.0 / (n + dim) as f64).sqrt();
        let base = Array2::from_shape_simple_fn((n, dim), || rng.random_range(-bound..bound));
        Self { view, num_users, num_items, base }
    }

    pub fn dim(&self) -> usize {
        self.base.ncols()
    }

    pub fn num_nodes(&self) -> usize {
        self.base.nrows()
    }

    const MAGIC: &'static [u8; 8] = b"FRGEMB01";

    /// Header (magic, rows, cols, users, view tag, combination tag) followed
    /// by row-major little-endian `f64` values.
    pub fn write_to<W: Write>(&self, w: &mut W, combination: LayerCombination) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_u64::<LittleEndian>(self.base.nrows() as u64)?;
        w.write_u64::<LittleEndian>(self.base.ncols() as u64)?;
        w.write_u64::<LittleEndian>(self.num_users as u64)?;
        w.write_u8(self.view.tag())?;
        w.write_u8(combination.tag())?;
        write_values(w, &self.base)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<(Self, LayerCombination)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Format("not an embedding block".into()));
        }
        let rows = r.read_u64::<LittleEndian>()? as usize;
        let cols = r.read_u64::<LittleEndian>()? as usize;
        let num_users = r.read_u64::<LittleEndian>()? as usize;
        let view = View::from_tag(r.read_u8()?)?;
        let combination = LayerCombination::from_tag(r.read_u8()?)?;
        if num_users > rows {
            return Err(Error::Format(format!("{num_users} users in a {rows}-row table")));
        }
        let base = read_values(r, rows, cols)?;
        Ok((Self::new(view, num_users, rows - num_users, base)?, combination))
    }
}

pub(crate) fn write_values<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    for &v in m.iter() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub(crate) fn read_values<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Matrix> {
    let mut buf = vec![0.0; rows * cols];
    r.read_f64_into::<LittleEndian>(&mut buf)?;
    Ok(Matrix::from_shape_vec((rows, cols), buf).expect("shape"))
}

/// `E^(0)..E^(K)` of one view with the derived final representation and
/// direction `V = (E^(K) - E^(0)) / K`.
#[derive(Clone, Debug)]
pub struct LayerStack {
    pub num_users: usize,
    pub combination: LayerCombination,
    pub layers: Vec<Matrix>,
    pub combined: Matrix,
    pub direction: Matrix,
}

impl LayerStack {
    /// Number of propagation layers K.
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn last(&self) -> &Matrix {
        self.layers.last().expect("non-empty stack")
    }

    pub fn num_items(&self) -> usize {
        self.combined.nrows() - self.num_users
    }
}

pub fn propagate(
    emb: &ViewEmbeddings,
    adj: &NormalizedAdjacency,
    depth: usize,
    combination: LayerCombination,
) -> Result<LayerStack> {
    if depth == 0 {
        return Err(Error::InvalidArgument("propagation depth must be at least 1".into()));
    }
    if adj.num_nodes() != emb.num_nodes() {
        return Err(Error::Dimension(format!("{}-node operator for {} rows", adj.num_nodes(), emb.num_nodes())));
    }
    let mut layers = Vec::with_capacity(depth + 1);
    layers.push(emb.base.clone());
    for k in 0..depth {
        let next = apply(adj, layers[k].view())?;
        layers.push(next);
    }
    let combined = match combination {
        LayerCombination::Last => layers[depth].clone(),
        LayerCombination::Mean => {
            let mut acc = layers[0].clone();
            for layer in &layers[1..] {
                acc += layer;
            }
            acc / (depth + 1) as f64
        }
    };
    let direction = (&layers[depth] - &layers[0]) / depth as f64;
    Ok(LayerStack { num_users: emb.num_users, combination, layers, combined, direction })
}

/// `(1/K) Σ_i (E^(i+1) - E^(i))`, summed layer by layer.
pub fn direction_vector(stack: &LayerStack) -> Result<Matrix> {
    let layers = &stack.layers;
    if layers.len() < 2 {
        return Err(Error::InvalidArgument("direction needs at least two layers".into()));
    }
    let mut acc = Matrix::zeros(layers[0].raw_dim());
    for pair in layers.windows(2) {
        acc += &(&pair[1] - &pair[0]);
    }
    Ok(acc / (layers.len() - 1) as f64)
}

/// Dot products of combined user rows against combined item rows.
pub fn predict_scores(stack: &LayerStack, users: &[usize], items: &[usize]) -> Result<Matrix> {
    let m = stack.num_users;
    let n = stack.num_items();
    if let Some(&u) = users.iter().find(|&&u| u >= m) {
        return Err(Error::OutOfRange(format!("user {u} of {m}")));
    }
    if let Some(&i) = items.iter().find(|&&i| i >= n) {
        return Err(Error::OutOfRange(format!("item {i} of {n}")));
    }
    let u = stack.combined.select(Axis(0), users);
    let item_rows: Vec<usize> = items.iter().map(|&i| m + i).collect();
    let v = stack.combined.select(Axis(0), &item_rows);
    Ok(u.dot(&v.t()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_graph() -> NormalizedAdjacency {
        NormalizedAdjacency::from_edges(&[(0, 0)], 1, 1).unwrap()
    }

    #[test]
    fn zero_operator_layers_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emb = ViewEmbeddings::xavier(View::If, 2, 3, 4, &mut rng);
        let stack = propagate(&emb, &NormalizedAdjacency::empty(5), 3, LayerCombination::Mean).unwrap();
        for layer in &stack.layers[1..] {
            assert!(layer.iter().all(|&v| v == 0.0));
        }
        assert_abs_diff_eq!(stack.direction, -&emb.base / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn single_edge_swaps_rows() {
        let emb = ViewEmbeddings::new(View::If, 1, 1, array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let stack = propagate(&emb, &unit_graph(), 1, LayerCombination::Last).unwrap();
        assert_eq!(stack.layers[1], array![[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(stack.combined, stack.layers[1]);
    }

    #[test]
    fn mean_combination_averages_layers() {
        let emb = ViewEmbeddings::new(View::If, 1, 1, array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let stack = propagate(&emb, &unit_graph(), 1, LayerCombination::Mean).unwrap();
        assert_eq!(stack.combined, array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn direction_edge_cases() {
        let e0 = Matrix::zeros((2, 2));
        let stack = LayerStack {
            num_users: 1,
            combination: LayerCombination::Mean,
            layers: vec![e0.clone(), Matrix::from_elem((2, 2), 5.0), Matrix::from_elem((2, 2), 2.0)],
            combined: e0.clone(),
            direction: e0.clone(),
        };
        assert_abs_diff_eq!(direction_vector(&stack).unwrap(), Matrix::from_elem((2, 2), 1.0), epsilon = 1e-15);
        let fixed = LayerStack { layers: vec![e0.clone(), e0.clone()], ..stack };
        assert_eq!(direction_vector(&fixed).unwrap(), e0);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emb = ViewEmbeddings::xavier(View::If, 2, 2, 3, &mut rng);
        assert!(propagate(&emb, &unit_graph(), 1, LayerCombination::Mean).is_err());
        assert!(propagate(&emb, &NormalizedAdjacency::empty(4), 0, LayerCombination::Mean).is_err());
        assert!(ViewEmbeddings::new(View::If, 1, 1, Matrix::zeros((3, 2))).is_err());
    }

    #[test]
    fn scores_are_dot_products() {
        let emb = ViewEmbeddings::new(View::If, 2, 2, array![[1.0, 1.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        let stack = propagate(&emb, &NormalizedAdjacency::empty(4), 1, LayerCombination::Mean).unwrap();
        // Mean of E^(0) and a zero layer halves every row.
        let s = predict_scores(&stack, &[0, 1], &[0, 1]).unwrap();
        assert_abs_diff_eq!(s, array![[0.5, 0.25], [0.25, 0.0]], epsilon = 1e-15);
        assert!(predict_scores(&stack, &[2], &[0]).is_err());
        assert!(predict_scores(&stack, &[0], &[2]).is_err());
    }

    #[test]
    fn xavier_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let emb = ViewEmbeddings::xavier(View::Iu, 30, 70, 64, &mut rng);
        let bound = (6.0f64 / 164.0).sqrt();
        assert!(emb.base.iter().all(|v| v.abs() < bound));
        assert!(emb.base.iter().any(|v| v.abs() > 0.9 * bound));
    }

    #[test]
    fn embedding_block_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let emb = ViewEmbeddings::xavier(View::Iu, 3, 4, 5, &mut rng);
        let mut buf = Vec::new();
        emb.write_to(&mut buf, LayerCombination::Last).unwrap();
        let (back, mode) = ViewEmbeddings::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, emb);
        assert_eq!(mode, LayerCombination::Last);
    }
}
