//! Latent shift operators: the fixed block-cyclic permutation, the
//! learned orthogonal-initialized matrix, and the periodicity penalty.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ndmath::{matrix_power, orthogonalize, DenseMatrix, Tape, Var};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OperatorKind {
    None,
    Fixed,
    Learned,
}

impl OperatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OperatorKind::None => "none",
            OperatorKind::Fixed => "fixed",
            OperatorKind::Learned => "learned",
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(OperatorKind::None),
            "fixed" => Ok(OperatorKind::Fixed),
            "learned" => Ok(OperatorKind::Learned),
            _ => Err(Error::config(format!("unknown operator `{s}`"))),
        }
    }
}

/// Block-diagonal operator with `dim / order` copies of the cyclic
/// generator `M` (ones on the subdiagonal and in the top-right corner).
#[derive(Clone, Debug, PartialEq)]
pub struct FixedShiftOperator {
    order: usize,
    dim: usize,
    generator: DenseMatrix,
}

impl FixedShiftOperator {
    pub fn build(order: usize, dim: usize) -> Result<Self> {
        if order == 0 || dim == 0 || !dim.is_multiple_of(order) {
            return Err(Error::config(format!(
                "latent dimension {dim} is not a multiple of group order {order}"
            )));
        }
        let generator = DenseMatrix::from_fn(dim, dim, |i, j| {
            let (bi, bj) = (i / order, j / order);
            if bi == bj && i % order == (j % order + 1) % order {
                1.0
            } else {
                0.0
            }
        });
        Ok(FixedShiftOperator {
            order,
            dim,
            generator,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn generator(&self) -> &DenseMatrix {
        &self.generator
    }

    /// Source coordinate for each output coordinate of `M^k z`.
    pub fn permutation(&self, k: i64) -> Vec<usize> {
        let n = self.order;
        let e = k.rem_euclid(n as i64) as usize;
        (0..self.dim)
            .map(|i| {
                let base = i - i % n;
                base + (i % n + n - e) % n
            })
            .collect()
    }

    /// `M^k` as an explicit permutation matrix.
    pub fn power_matrix(&self, k: i64) -> DenseMatrix {
        let perm = self.permutation(k);
        DenseMatrix::from_fn(self.dim, self.dim, |i, j| if perm[i] == j { 1.0 } else { 0.0 })
    }
}

/// Trainable operator of declared order `order`, initialized as the Q
/// factor of a seeded Gaussian matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedOperator {
    order: usize,
    matrix: DenseMatrix,
}

impl LearnedOperator {
    /// Declared order equals the latent dimension.
    pub fn build(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("learned operator needs a positive dimension"));
        }
        let mut attempt = seed;
        loop {
            let mut rng = stream(attempt, &[]);
            let g = DenseMatrix::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
            match orthogonalize(&g) {
                Ok(q) => {
                    return Ok(LearnedOperator {
                        order: dim,
                        matrix: q,
                    })
                }
                Err(Error::Degenerate(_)) => attempt = attempt.wrapping_add(1),
                Err(e) => return Err(e),
            }
        }
    }

    pub fn from_matrix(matrix: DenseMatrix, order: usize) -> Result<Self> {
        if !matrix.is_square() || order == 0 {
            return Err(Error::contract("learned operator must be square with positive order"));
        }
        Ok(LearnedOperator { order, matrix })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut DenseMatrix {
        &mut self.matrix
    }
}

/// The latent operator attached to one transformation axis.
#[derive(Clone, Debug, PartialEq)]
pub enum LatentOperator {
    /// No operator: canonicalization is the identity.
    Identity { dim: usize },
    Fixed(FixedShiftOperator),
    Learned(LearnedOperator),
}

impl LatentOperator {
    pub fn build(kind: OperatorKind, group_order: usize, dim: usize, seed: u64) -> Result<Self> {
        Ok(match kind {
            OperatorKind::None => LatentOperator::Identity { dim },
            OperatorKind::Fixed => LatentOperator::Fixed(FixedShiftOperator::build(group_order, dim)?),
            OperatorKind::Learned => LatentOperator::Learned(LearnedOperator::build(dim, seed)?),
        })
    }

    pub fn kind(&self) -> OperatorKind {
        match self {
            LatentOperator::Identity { .. } => OperatorKind::None,
            LatentOperator::Fixed(_) => OperatorKind::Fixed,
            LatentOperator::Learned(_) => OperatorKind::Learned,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            LatentOperator::Identity { dim } => *dim,
            LatentOperator::Fixed(f) => f.dim(),
            LatentOperator::Learned(l) => l.dim(),
        }
    }

    /// Group order for fixed, declared order for learned, 1 for identity.
    pub fn order(&self) -> usize {
        match self {
            LatentOperator::Identity { .. } => 1,
            LatentOperator::Fixed(f) => f.order(),
            LatentOperator::Learned(l) => l.order(),
        }
    }

    /// Exponent of the generator realizing index `k`: `k mod N`.
    pub fn exponent(&self, k: i64) -> usize {
        k.rem_euclid(self.order() as i64) as usize
    }

    /// Exponent realizing the inverse of index `k`: `N - (k mod N)`, mod N.
    pub fn inverse_exponent(&self, k: i64) -> usize {
        self.exponent(-k)
    }

    /// `φ^(k mod N)` as a matrix.
    pub fn power_matrix(&self, k: i64) -> Result<DenseMatrix> {
        Ok(match self {
            LatentOperator::Identity { dim } => DenseMatrix::identity(*dim),
            LatentOperator::Fixed(f) => f.power_matrix(k),
            LatentOperator::Learned(l) => matrix_power(l.matrix(), self.exponent(k) as u64)?,
        })
    }

    fn check_len(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::contract(format!(
                "latent vector has length {}, operator acts on {}",
                z.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `φ^(k mod N) z`.
    pub fn apply_power(&self, k: i64, z: &[f64]) -> Result<Vec<f64>> {
        self.check_len(z)?;
        match self {
            LatentOperator::Identity { .. } => Ok(z.to_vec()),
            LatentOperator::Fixed(f) => Ok(f.permutation(k).into_iter().map(|j| z[j]).collect()),
            LatentOperator::Learned(_) => self.power_matrix(k)?.matvec(z),
        }
    }

    /// `φ^(-k) z`, realized as `φ^(N - k mod N) z`.
    pub fn apply_inverse(&self, k: i64, z: &[f64]) -> Result<Vec<f64>> {
        self.apply_power(-k, z)
    }

    pub fn learned_matrix(&self) -> Option<&DenseMatrix> {
        match self {
            LatentOperator::Learned(l) => Some(l.matrix()),
            _ => None,
        }
    }
}

/// `‖φ^N − I‖_F` for a learned operator.
pub fn periodicity_loss(op: &LatentOperator) -> Result<f64> {
    match op {
        LatentOperator::Learned(l) => periodicity_residual(l.matrix(), l.order()),
        _ => Err(Error::contract(
            "periodicity loss is defined for learned operators only",
        )),
    }
}

/// `‖φ^N − I‖_F` for any square matrix.
pub fn periodicity_residual(phi: &DenseMatrix, order: usize) -> Result<f64> {
    let p = matrix_power(phi, order as u64)?;
    Ok(p.sub(&DenseMatrix::identity(phi.rows()))?.frobenius_norm())
}

/// Powers of a tape variable by repeated squaring. Squares are shared
/// between requested exponents, so every multiplication is recorded once.
pub struct TapePowers {
    base: Var,
    dim: usize,
    squares: Vec<Var>,
    identity: Option<Var>,
}

impl TapePowers {
    pub fn new(tape: &Tape, base: Var) -> Self {
        TapePowers {
            base,
            dim: tape.value(base).rows(),
            squares: vec![base],
            identity: None,
        }
    }

    pub fn power(&mut self, tape: &mut Tape, e: usize) -> Result<Var> {
        if e == 0 {
            let dim = self.dim;
            return Ok(*self
                .identity
                .get_or_insert_with(|| tape.constant(DenseMatrix::identity(dim))));
        }
        let bits = usize::BITS - e.leading_zeros();
        while self.squares.len() < bits as usize {
            let last = *self.squares.last().expect("base present");
            let sq = tape.matmul(last, last)?;
            self.squares.push(sq);
        }
        let mut acc: Option<Var> = None;
        for (b, &sq) in self.squares.iter().enumerate().take(bits as usize) {
            if (e >> b) & 1 == 1 {
                acc = Some(match acc {
                    None => sq,
                    Some(a) => tape.matmul(a, sq)?,
                });
            }
        }
        Ok(acc.unwrap_or(self.base))
    }
}

/// Records `‖φ^N − I‖_F` on the tape.
pub fn periodicity_loss_on_tape(tape: &mut Tape, powers: &mut TapePowers, order: usize) -> Result<Var> {
    let p = powers.power(tape, order)?;
    let dim = tape.value(p).rows();
    let eye = tape.constant(DenseMatrix::identity(dim));
    let d = tape.sub(p, eye)?;
    tape.frobenius_norm(d)
}
