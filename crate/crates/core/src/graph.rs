//! Region graph over the 3×3 feature grid, normalized graph convolution,
//! node aggregation and the fused softmax classifier.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Nodes in the region graph: a 3×3 grid in row-major order.
pub const GRID_NODES: usize = 9;
const GRID_SIDE: usize = 3;

/// Edge layout of the region graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum GraphVariant {
    /// Undirected 4-neighbourhood.
    #[default]
    V1,
    /// Directed left-to-right: each cell points at its right, up-right and
    /// down-right neighbours.
    V2,
    /// `V2` with every edge reversed.
    V3,
}

impl GraphVariant {
    pub const ALL: [GraphVariant; 3] = [GraphVariant::V1, GraphVariant::V2, GraphVariant::V3];

    pub fn as_str(self) -> &'static str {
        match self {
            GraphVariant::V1 => "V1",
            GraphVariant::V2 => "V2",
            GraphVariant::V3 => "V3",
        }
    }
}

impl fmt::Display for GraphVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GraphVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "v1" => Ok(GraphVariant::V1),
            "v2" => Ok(GraphVariant::V2),
            "v3" => Ok(GraphVariant::V3),
            other => Err(format!("unknown graph variant `{other}` (expected v1, v2 or v3)")),
        }
    }
}

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(TensorError::contract("matrix", "rows must form a square"));
        }
        Ok(SquareMatrix {
            n,
            data: rows.concat(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn nonzeros(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.n, self.n],
            self.data.iter().map(|v| T::lit(*v)).collect(),
        )
        .expect("square matrix has n*n entries")
    }
}

/// Region graph with its raw and normalized adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphTopology {
    variant: GraphVariant,
    adjacency: SquareMatrix,
    normalized: SquareMatrix,
}

impl GraphTopology {
    pub fn new(variant: GraphVariant) -> Self {
        let adjacency = adjacency_for(variant);
        let normalized =
            normalize_adjacency(&adjacency).expect("grid adjacency is binary with zero diagonal");
        GraphTopology {
            variant,
            adjacency,
            normalized,
        }
    }

    pub fn variant(&self) -> GraphVariant {
        self.variant
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.n()
    }

    pub fn adjacency(&self) -> &SquareMatrix {
        &self.adjacency
    }

    pub fn normalized(&self) -> &SquareMatrix {
        &self.normalized
    }
}

/// Builds the 9-node grid topology for `variant`.
pub fn build_adjacency(variant: GraphVariant) -> GraphTopology {
    GraphTopology::new(variant)
}

fn adjacency_for(variant: GraphVariant) -> SquareMatrix {
    let idx = |r: usize, c: usize| r * GRID_SIDE + c;
    let mut a = SquareMatrix::zeros(GRID_NODES);
    match variant {
        GraphVariant::V1 => {
            for r in 0..GRID_SIDE {
                for c in 0..GRID_SIDE {
                    if c + 1 < GRID_SIDE {
                        a.set(idx(r, c), idx(r, c + 1), 1.0);
                        a.set(idx(r, c + 1), idx(r, c), 1.0);
                    }
                    if r + 1 < GRID_SIDE {
                        a.set(idx(r, c), idx(r + 1, c), 1.0);
                        a.set(idx(r + 1, c), idx(r, c), 1.0);
                    }
                }
            }
        }
        GraphVariant::V2 | GraphVariant::V3 => {
            for r in 0..GRID_SIDE {
                for c in 0..GRID_SIDE - 1 {
                    a.set(idx(r, c), idx(r, c + 1), 1.0);
                    if r > 0 {
                        a.set(idx(r, c), idx(r - 1, c + 1), 1.0);
                    }
                    if r + 1 < GRID_SIDE {
                        a.set(idx(r, c), idx(r + 1, c + 1), 1.0);
                    }
                }
            }
            if variant == GraphVariant::V3 {
                a = a.transpose();
            }
        }
    }
    a
}

/// Self-loop renormalization `D_r^{-1/2} (A + I) D_c^{-1/2}`.
///
/// `D_r` holds the row sums and `D_c` the column sums of `A + I`; for a
/// symmetric `A` both coincide with the ordinary degree matrix.
pub fn normalize_adjacency(a: &SquareMatrix) -> Result<SquareMatrix, TensorError> {
    let n = a.n();
    for i in 0..n {
        if a.get(i, i) != 0.0 {
            return Err(TensorError::contract(
                "normalize_adjacency",
                format!("diagonal entry ({i},{i}) must be zero"),
            ));
        }
    }
    if let Some(v) = a.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(TensorError::contract(
            "normalize_adjacency",
            format!("entries must be finite and non-negative, found {v}"),
        ));
    }
    let mut tilde = a.clone();
    for i in 0..n {
        tilde.set(i, i, 1.0);
    }
    let row_deg: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| tilde.get(i, j)).sum())
        .collect();
    let col_deg: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| tilde.get(i, j)).sum())
        .collect();
    let mut out = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let v = tilde.get(i, j);
            if v != 0.0 {
                out.set(i, j, v / (row_deg[i].sqrt() * col_deg[j].sqrt()));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// How the nine node outputs become one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Aggregation {
    /// Row-major concatenation, region 1 first.
    #[default]
    Concat,
    Mean,
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "concat" => Ok(Aggregation::Concat),
            "mean" => Ok(Aggregation::Mean),
            other => Err(format!("unknown aggregation `{other}` (expected concat or mean)")),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Concat => "concat",
            Aggregation::Mean => "mean",
        })
    }
}

/// `σ(Â · H · W)` for node features `h[n×d_in]`, `a_hat[n×n]`, `w[d_in×d_out]`.
pub fn gcn_layer_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    h: Var,
    a_hat: Var,
    w: Var,
    activation: Activation,
) -> Result<Var, TensorError> {
    let mixed = tape.matmul(a_hat, h)?;
    let z = tape.matmul(mixed, w)?;
    match activation {
        Activation::Relu => tape.relu(z),
        Activation::Identity => Ok(z),
    }
}

/// Collapses `h_out[9×d]` to a single vector.
pub fn aggregate_nodes<T: Real>(
    tape: &mut Tape<'_, T>,
    h_out: Var,
    mode: Aggregation,
) -> Result<Var, TensorError> {
    let shape = tape.shape(h_out)?.to_vec();
    if shape.len() != 2 || shape[0] != GRID_NODES {
        return Err(TensorError::shape(
            "aggregate_nodes",
            &shape,
            &[GRID_NODES, shape.last().copied().unwrap_or(0)],
        ));
    }
    match mode {
        Aggregation::Concat => tape.flatten(h_out),
        Aggregation::Mean => {
            let weights = Tensor::full(vec![1, GRID_NODES], T::lit(1.0 / GRID_NODES as f64))?;
            let weights = tape.constant(weights);
            let pooled = tape.matmul(weights, h_out)?;
            tape.reshape(pooled, &[shape[1]])
        }
    }
}

/// `softmax(W_fc · features + b_fc)` with `w_fc[K×F]`, `b_fc[K]`.
pub fn classify<T: Real>(
    tape: &mut Tape<'_, T>,
    features: Var,
    w_fc: Var,
    b_fc: Var,
) -> Result<Var, TensorError> {
    let f = tape.value(features)?.len();
    let column = tape.reshape(features, &[f, 1])?;
    let logits = tape.matmul(w_fc, column)?;
    let k = tape.shape(logits)?[0];
    let logits = tape.reshape(logits, &[k])?;
    let logits = tape.add(logits, b_fc)?;
    tape.softmax(logits)
}

/// `[global, h_gcn]` followed by the softmax classifier.
pub fn fuse_and_classify<T: Real>(
    tape: &mut Tape<'_, T>,
    global: Var,
    h_gcn: Var,
    w_fc: Var,
    b_fc: Var,
) -> Result<Var, TensorError> {
    let fused = fuse(tape, global, h_gcn)?;
    classify(tape, fused, w_fc, b_fc)
}

pub fn fuse<T: Real>(tape: &mut Tape<'_, T>, global: Var, h_gcn: Var) -> Result<Var, TensorError> {
    for v in [global, h_gcn] {
        let s = tape.shape(v)?;
        if s.len() != 1 {
            return Err(TensorError::shape("fuse", s, &[s.iter().product()]));
        }
    }
    tape.concat(&[global, h_gcn], 0)
}
