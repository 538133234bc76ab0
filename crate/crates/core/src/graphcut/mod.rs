//! Normalized-cut foreground/background bipartition of a token grid.
//!
//! Tokens become nodes of a fully connected graph weighted by binarized cosine
//! similarity. The relaxed cut is the second-smallest eigenvector of
//! `(D - W) y = λ D y`, solved through the symmetric normalization
//! `D^-1/2 (D - W) D^-1/2` and a Jacobi eigen-decomposition.

pub mod jacobi;

use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity_guarded, EmbeddingVector, SimilarityMap};

pub use jacobi::{symmetric_eigen, SymmetricEigen};

pub const DEFAULT_TAU_M: f64 = 0.2;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Largest accepted `‖(D - W) y - λ D y‖ / ‖y‖`.
pub const EIGEN_RESIDUAL_TOL: f64 = 1e-8;

/// Eigenvalues closer than this (relative) are treated as one repeated value.
pub const DEGENERACY_TOL: f64 = 1e-9;

/// Dense `n x n` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::ShapeMismatch(format!(
                "{n}x{n} matrix needs {} values, got {}",
                n * n,
                data.len()
            )));
        }
        Ok(Self { n, data })
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        Self { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

/// Similarity, binarized and degree matrices over `n` tokens.
#[derive(Debug, Clone)]
pub struct TokenGraph {
    pub similarity: SquareMatrix,
    pub binarized: SquareMatrix,
    /// Diagonal of the degree matrix; off-diagonal entries are zero.
    pub degree: Vec<f64>,
}

impl TokenGraph {
    pub fn build(tokens: &[EmbeddingVector], tau_m: f64, epsilon: f64) -> Result<Self> {
        let similarity = build_similarity(tokens)?;
        let binarized = binarize(&similarity, tau_m, epsilon);
        let degree = degree_matrix(&binarized);
        Ok(Self {
            similarity,
            binarized,
            degree,
        })
    }

    pub fn n(&self) -> usize {
        self.degree.len()
    }
}

/// Pairwise cosine similarity with a unit diagonal.
pub fn build_similarity(tokens: &[EmbeddingVector]) -> Result<SquareMatrix> {
    let n = tokens.len();
    if n < 2 {
        return Err(Error::ShapeMismatch(format!("need at least 2 tokens, got {n}")));
    }
    let dim = tokens[0].dim();
    if let Some(bad) = tokens.iter().position(|t| t.dim() != dim) {
        return Err(Error::ShapeMismatch(format!(
            "token {bad} has dim {}, expected {dim}",
            tokens[bad].dim()
        )));
    }
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let s = cosine_similarity_guarded(tokens[i].as_slice(), tokens[j].as_slice());
            data[i * n + j] = s;
            data[j * n + i] = s;
        }
    }
    SquareMatrix::new(n, data)
}

/// 1 where `similarity >= tau_m`, `epsilon` elsewhere.
pub fn binarize(similarity: &SquareMatrix, tau_m: f64, epsilon: f64) -> SquareMatrix {
    SquareMatrix {
        n: similarity.n,
        data: similarity
            .data
            .iter()
            .map(|&s| if s >= tau_m { 1.0 } else { epsilon })
            .collect(),
    }
}

/// Row sums of the binarized matrix (the degree diagonal).
pub fn degree_matrix(binarized: &SquareMatrix) -> Vec<f64> {
    (0..binarized.n).map(|i| binarized.row(i).iter().sum()).collect()
}

#[derive(Debug, Clone)]
pub struct Eigenpair {
    pub value: f64,
    pub vector: Vec<f64>,
    /// `‖(D - W) y - λ D y‖₂ / ‖y‖₂`.
    pub residual: f64,
    /// Third-smallest eigenvalue, when the graph has one.
    pub next_value: Option<f64>,
}

impl Eigenpair {
    /// The eigenvalue is repeated, so the eigenvector (and the cut) is not unique.
    pub fn is_degenerate(&self) -> bool {
        self.next_value
            .is_some_and(|next| (next - self.value).abs() <= DEGENERACY_TOL * self.value.abs().max(1.0))
    }
}

/// Generalized residual of `(D - W) y = λ D y`, relative to `‖y‖₂`.
pub fn generalized_residual(binarized: &SquareMatrix, degree: &[f64], value: f64, y: &[f64]) -> f64 {
    let n = degree.len();
    let mut sq = 0.0;
    for i in 0..n {
        let wy: f64 = binarized.row(i).iter().zip(y).map(|(w, x)| w * x).sum();
        let r = degree[i] * y[i] - wy - value * degree[i] * y[i];
        sq += r * r;
    }
    let norm = y.iter().map(|x| x * x).sum::<f64>().sqrt();
    sq.sqrt() / norm
}

/// Second-smallest generalized eigenpair of `(D - W) y = λ D y`.
///
/// The sign is fixed so that the component of largest magnitude is positive.
pub fn second_eigenvector(binarized: &SquareMatrix, degree: &[f64]) -> Result<Eigenpair> {
    let n = binarized.n;
    if degree.len() != n || n < 2 {
        return Err(Error::ShapeMismatch(format!(
            "degree has {} entries for a {n}x{n} graph",
            degree.len()
        )));
    }
    if degree.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::InvalidConfig("degree matrix must be positive".into()));
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let laplacian = SquareMatrix::from_fn(n, |i, j| {
        let l = if i == j {
            degree[i] - binarized.get(i, j)
        } else {
            -binarized.get(i, j)
        };
        inv_sqrt[i] * l * inv_sqrt[j]
    });
    let eig = symmetric_eigen(&laplacian)?;
    let value = eig.values[1];
    let mut vector: Vec<f64> = eig.vectors[1].iter().zip(&inv_sqrt).map(|(z, s)| z * s).collect();

    let lead = argmax_abs(&vector);
    if vector[lead] < 0.0 {
        vector.iter_mut().for_each(|x| *x = -*x);
    }
    let residual = generalized_residual(binarized, degree, value, &vector);
    debug_assert!(
        residual <= EIGEN_RESIDUAL_TOL,
        "generalized eigen residual {residual:e} exceeds {EIGEN_RESIDUAL_TOL:e}"
    );
    Ok(Eigenpair {
        value,
        vector,
        residual,
        next_value: eig.values.get(2).copied(),
    })
}

/// Index of the largest `|x|`, lowest index on ties.
fn argmax_abs(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `y ≤ mean(y)`
    A,
    /// `y > mean(y)`
    B,
}

#[derive(Debug, Clone)]
pub struct Bipartition {
    pub eigenvector: Vec<f64>,
    pub assignment: Vec<Side>,
    pub foreground: Side,
    /// `h x w` binary mask, 1 on foreground tokens.
    pub mask: SimilarityMap,
}

impl Bipartition {
    pub fn foreground_count(&self) -> usize {
        self.assignment.iter().filter(|&&s| s == self.foreground).count()
    }
}

/// Splits tokens at the mean of `y`; the side holding the largest `|y|` is foreground.
pub fn partition_foreground(y: &[f64], height: usize, width: usize) -> Result<Bipartition> {
    if y.len() != height * width {
        return Err(Error::ShapeMismatch(format!(
            "eigenvector has {} entries for a {height}x{width} grid",
            y.len()
        )));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let assignment: Vec<Side> = y.iter().map(|&v| if v <= mean { Side::A } else { Side::B }).collect();
    let b_count = assignment.iter().filter(|&&s| s == Side::B).count();
    if b_count == 0 || b_count == y.len() {
        return Err(Error::EmptyPartition);
    }
    let foreground = assignment[argmax_abs(y)];
    let mask = assignment
        .iter()
        .map(|&s| if s == foreground { 1.0 } else { 0.0 })
        .collect();
    Ok(Bipartition {
        eigenvector: y.to_vec(),
        assignment,
        foreground,
        mask: SimilarityMap::from_raw(height, width, mask),
    })
}

/// `C(A,B)/C(A,Z) + C(A,B)/C(B,Z)` with `C` summing edge weights (self-loops included in `C(X,Z)`).
pub fn ncut_objective(binarized: &SquareMatrix, assignment: &[Side]) -> Result<f64> {
    let n = binarized.n;
    if assignment.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "assignment has {} entries for {n} nodes",
            assignment.len()
        )));
    }
    let (mut cut, mut assoc_a, mut assoc_b) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let w = binarized.get(i, j);
            match assignment[i] {
                Side::A => assoc_a += w,
                Side::B => assoc_b += w,
            }
            if assignment[i] == Side::A && assignment[j] == Side::B {
                cut += w;
            }
        }
    }
    if assoc_a == 0.0 || assoc_b == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(cut / assoc_a + cut / assoc_b)
}

/// Full graph, eigenpair and partition for one token grid.
#[derive(Debug, Clone)]
pub struct TokenCut {
    pub graph: TokenGraph,
    pub eigenpair: Eigenpair,
    pub partition: Bipartition,
}

pub fn token_cut(
    tokens: &[EmbeddingVector],
    height: usize,
    width: usize,
    tau_m: f64,
    epsilon: f64,
) -> Result<TokenCut> {
    if tokens.len() != height * width {
        return Err(Error::ShapeMismatch(format!(
            "{} tokens for a {height}x{width} grid",
            tokens.len()
        )));
    }
    let graph = TokenGraph::build(tokens, tau_m, epsilon)?;
    let eigenpair = second_eigenvector(&graph.binarized, &graph.degree)?;
    if eigenpair.is_degenerate() {
        return Err(Error::EmptyPartition);
    }
    let partition = partition_foreground(&eigenpair.vector, height, width)?;
    Ok(TokenCut {
        graph,
        eigenpair,
        partition,
    })
}
