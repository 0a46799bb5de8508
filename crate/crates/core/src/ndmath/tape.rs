//! Reverse-mode differentiation over whole matrices.
//!
//! A [`Tape`] records matrix-valued primitives as they are evaluated.
//! Leaves are either parameters (which receive gradients) or constants.
//! [`Tape::backward`] walks the record in reverse from a `1 x 1` loss and
//! returns a gradient for every parameter, zero when the loss does not
//! depend on it.

use std::sync::atomic::{AtomicU64, Ordering};

use super::linalg::softmax;
use super::DenseMatrix;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Param,
    Constant,
    MatMul(usize, usize),
    /// `a * bᵀ`
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    /// Adds a `1 x n` row to every row.
    AddRow(usize, usize),
    Sigmoid(usize),
    SumSquares(usize),
    Frobenius(usize),
    /// Mean cross-entropy over rows; keeps the softmax probabilities.
    SoftmaxCe {
        logits: usize,
        labels: Vec<usize>,
        probs: DenseMatrix,
    },
    /// Row `i` of the output is `mats[assign[i]] * z_i`.
    RowTransform {
        input: usize,
        mats: Vec<usize>,
        assign: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients for every parameter leaf, in registration order.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    entries: Vec<(usize, DenseMatrix)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseMatrix> {
        if v.tape != self.tape {
            return None;
        }
        self.entries
            .iter()
            .find(|(i, _)| *i == v.index)
            .map(|(_, g)| g)
    }

    /// Consumes the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<DenseMatrix> {
        if v.tape != self.tape {
            return None;
        }
        let pos = self.entries.iter().position(|(i, _)| *i == v.index)?;
        Some(self.entries.swap_remove(pos).1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::contract("variable does not belong to this tape"));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: DenseMatrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn param(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Param, true)
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[self.idx(v).expect("foreign variable")].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(v, Op::MatMul(ia, ib), ng))
    }

    /// `a * bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.matmul_nt(&self.nodes[ib].value)?;
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(v, Op::MatMulNt(ia, ib), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(v, Op::Add(ia, ib), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.sub(&self.nodes[ib].value)?;
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(v, Op::Sub(ia, ib), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.scale(c);
        let ng = self.needs(ia);
        Ok(self.push(v, Op::Scale(ia, c), ng))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(row)?);
        let (m, r) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if r.rows() != 1 || r.cols() != m.cols() {
            return Err(Error::contract(format!(
                "add_row: row shape {}x{} does not fit {}x{}",
                r.rows(),
                r.cols(),
                m.rows(),
                m.cols()
            )));
        }
        let mut v = m.clone();
        for i in 0..v.rows() {
            v.row_mut(i).iter_mut().zip(r.as_slice()).for_each(|(x, b)| *x += b);
        }
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(v, Op::AddRow(ia, ib), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.map(sigmoid);
        let ng = self.needs(ia);
        Ok(self.push(v, Op::Sigmoid(ia), ng))
    }

    /// Sum of squared entries, as a `1 x 1` value.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = DenseMatrix::scalar(self.nodes[ia].value.sum_squares());
        let ng = self.needs(ia);
        Ok(self.push(v, Op::SumSquares(ia), ng))
    }

    pub fn frobenius_norm(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = DenseMatrix::scalar(self.nodes[ia].value.frobenius_norm());
        let ng = self.needs(ia);
        Ok(self.push(v, Op::Frobenius(ia), ng))
    }

    /// Mean over rows of `-log softmax(row)[label]`.
    pub fn softmax_cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let l = &self.nodes[il].value;
        if labels.len() != l.rows() || l.rows() == 0 {
            return Err(Error::contract(format!(
                "cross-entropy: {} labels for {} rows",
                labels.len(),
                l.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= l.cols()) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {} logits",
                l.cols()
            )));
        }
        let mut probs = DenseMatrix::zeros(l.rows(), l.cols());
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = l.row(i);
            total += super::linalg::log_sum_exp(row) - row[y];
            probs.row_mut(i).copy_from_slice(&softmax(row));
        }
        let v = DenseMatrix::scalar(total / labels.len() as f64);
        let ng = self.needs(il);
        Ok(self.push(
            v,
            Op::SoftmaxCe {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Applies a per-row linear map: row `i` becomes `mats[assign[i]] * z_i`.
    pub fn row_transform(&mut self, z: Var, mats: &[Var], assign: &[usize]) -> Result<Var> {
        let iz = self.idx(z)?;
        let im: Vec<usize> = mats.iter().map(|&m| self.idx(m)).collect::<Result<_>>()?;
        let zv = &self.nodes[iz].value;
        if assign.len() != zv.rows() {
            return Err(Error::contract(format!(
                "row_transform: {} assignments for {} rows",
                assign.len(),
                zv.rows()
            )));
        }
        for &m in &im {
            let mv = &self.nodes[m].value;
            if mv.shape() != (zv.cols(), zv.cols()) {
                return Err(Error::contract(format!(
                    "row_transform: operator {}x{} does not act on width {}",
                    mv.rows(),
                    mv.cols(),
                    zv.cols()
                )));
            }
        }
        if assign.iter().any(|&a| a >= im.len()) {
            return Err(Error::contract("row_transform: assignment out of range"));
        }
        let mut out = DenseMatrix::zeros(zv.rows(), zv.cols());
        for (g, &m) in im.iter().enumerate() {
            let rows: Vec<usize> = (0..assign.len()).filter(|&i| assign[i] == g).collect();
            if rows.is_empty() {
                continue;
            }
            let part = zv.gather_rows(&rows).matmul_nt(&self.nodes[m].value)?;
            for (k, &i) in rows.iter().enumerate() {
                out.row_mut(i).copy_from_slice(part.row(k));
            }
        }
        let ng = self.needs(iz) || im.iter().any(|&m| self.needs(m));
        Ok(self.push(
            out,
            Op::RowTransform {
                input: iz,
                mats: im,
                assign: assign.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse accumulation from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.shape() != (1, 1) {
            return Err(Error::contract("backward needs a 1x1 loss"));
        }
        let mut grads: Vec<Option<DenseMatrix>> = (0..=il).map(|_| None).collect();
        grads[il] = Some(DenseMatrix::scalar(1.0));

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Param => {
                    grads[i] = Some(g);
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let d = g.matmul_nt(&self.nodes[*b].value)?;
                        accumulate(&mut grads[*a], d)?;
                    }
                    if self.needs(*b) {
                        let d = self.nodes[*a].value.matmul_tn(&g)?;
                        accumulate(&mut grads[*b], d)?;
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.needs(*a) {
                        let d = g.matmul(&self.nodes[*b].value)?;
                        accumulate(&mut grads[*a], d)?;
                    }
                    if self.needs(*b) {
                        let d = g.matmul_tn(&self.nodes[*a].value)?;
                        accumulate(&mut grads[*b], d)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[*a], g.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[*b], g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads[*b], g.scale(-1.0))?;
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[*a], g)?;
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads[*a], g.scale(*c))?,
                Op::AddRow(a, r) => {
                    if self.needs(*r) {
                        accumulate(&mut grads[*r], g.column_sums())?;
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[*a], g)?;
                    }
                }
                Op::Sigmoid(a) => {
                    let s = &self.nodes[i].value;
                    let d = g.hadamard(&s.map(|x| x * (1.0 - x)))?;
                    accumulate(&mut grads[*a], d)?;
                }
                Op::SumSquares(a) => {
                    let d = self.nodes[*a].value.scale(2.0 * g.item());
                    accumulate(&mut grads[*a], d)?;
                }
                Op::Frobenius(a) => {
                    let n = self.nodes[i].value.item();
                    let av = &self.nodes[*a].value;
                    let d = if n > 0.0 {
                        av.scale(g.item() / n)
                    } else {
                        DenseMatrix::zeros(av.rows(), av.cols())
                    };
                    accumulate(&mut grads[*a], d)?;
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    probs,
                } => {
                    let c = g.item() / labels.len() as f64;
                    let mut d = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        let v = d.get(r, y) - 1.0;
                        d.set(r, y, v);
                    }
                    accumulate(&mut grads[*logits], d.scale(c))?;
                }
                Op::RowTransform {
                    input,
                    mats,
                    assign,
                } => {
                    let zv = &self.nodes[*input].value;
                    let mut dz = self
                        .needs(*input)
                        .then(|| DenseMatrix::zeros(zv.rows(), zv.cols()));
                    for (k, &m) in mats.iter().enumerate() {
                        let rows: Vec<usize> =
                            (0..assign.len()).filter(|&r| assign[r] == k).collect();
                        if rows.is_empty() {
                            continue;
                        }
                        let gk = g.gather_rows(&rows);
                        if let Some(dz) = dz.as_mut() {
                            let part = gk.matmul(&self.nodes[m].value)?;
                            for (j, &r) in rows.iter().enumerate() {
                                dz.row_mut(r).copy_from_slice(part.row(j));
                            }
                        }
                        if self.needs(m) {
                            let dm = gk.matmul_tn(&zv.gather_rows(&rows))?;
                            accumulate(&mut grads[m], dm)?;
                        }
                    }
                    if let Some(dz) = dz {
                        accumulate(&mut grads[*input], dz)?;
                    }
                }
            }
        }

        let entries = self
            .nodes
            .iter()
            .enumerate()
            .take(il + 1)
            .filter(|(_, n)| matches!(n.op, Op::Param))
            .map(|(i, n)| {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| DenseMatrix::zeros(n.value.rows(), n.value.cols()));
                (i, g)
            })
            .chain(
                self.nodes
                    .iter()
                    .enumerate()
                    .skip(il + 1)
                    .filter(|(_, n)| matches!(n.op, Op::Param))
                    .map(|(i, n)| (i, DenseMatrix::zeros(n.value.rows(), n.value.cols()))),
            )
            .collect();
        Ok(Gradients {
            tape: self.id,
            entries,
        })
    }
}

fn accumulate(slot: &mut Option<DenseMatrix>, d: DenseMatrix) -> Result<()> {
    match slot {
        Some(g) => g.add_assign(&d),
        None => {
            *slot = Some(d);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn half_squared_norm_gradient_is_x() {
        let x = DenseMatrix::row_vector(&[1.0, -2.0, 3.5]);
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let s = t.sum_squares(v).unwrap();
        let l = t.scale(s, 0.5).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(v).unwrap(), &x);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = [0.5, -1.0, 2.0, 0.0];
        let mut t = Tape::new();
        let v = t.param(DenseMatrix::row_vector(&logits));
        let l = t.softmax_cross_entropy_mean(v, &[2]).unwrap();
        let g = t.backward(l).unwrap();
        let mut expected = softmax(&logits);
        expected[2] -= 1.0;
        for (a, b) in g.get(v).unwrap().as_slice().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn untouched_leaves_get_zero() {
        let mut t = Tape::new();
        let a = t.param(DenseMatrix::scalar(3.0));
        let b = t.param(DenseMatrix::from_vec(2, 2, vec![1.0; 4]).unwrap());
        let l = t.sum_squares(a).unwrap();
        let late = t.param(DenseMatrix::zeros(1, 3));
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(b).unwrap(), &DenseMatrix::zeros(2, 2));
        assert_eq!(g.get(late).unwrap(), &DenseMatrix::zeros(1, 3));
        assert_eq!(g.get(a).unwrap().item(), 6.0);
        assert_eq!(g.len(), 3);
    }

    #[test]
    fn foreign_or_non_scalar_loss_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.param(DenseMatrix::scalar(1.0));
        let l = t1.sum_squares(a).unwrap();
        assert!(matches!(t2.backward(l), Err(Error::Contract(_))));
        let b = t2.param(DenseMatrix::zeros(2, 2));
        assert!(matches!(t2.backward(b), Err(Error::Contract(_))));
        assert!(t2.add(a, b).is_err());
    }

    /// Loss of a small two-layer network built on the tape.
    fn two_layer_loss(
        t: &mut Tape,
        x: &DenseMatrix,
        params: &[DenseMatrix],
        labels: &[usize],
        mats: &[DenseMatrix],
        assign: &[usize],
    ) -> (Var, Vec<Var>) {
        let vars: Vec<Var> = params.iter().map(|p| t.param(p.clone())).collect();
        let mvars: Vec<Var> = mats.iter().map(|m| t.param(m.clone())).collect();
        let xv = t.constant(x.clone());
        let h = t.matmul_nt(xv, vars[0]).unwrap();
        let h = t.add_row(h, vars[1]).unwrap();
        let h = t.row_transform(h, &mvars, assign).unwrap();
        let a = t.sigmoid(h).unwrap();
        let o = t.matmul_nt(a, vars[2]).unwrap();
        let o = t.add_row(o, vars[3]).unwrap();
        let ce = t.softmax_cross_entropy_mean(o, labels).unwrap();
        let fro = t.frobenius_norm(h).unwrap();
        let sq = t.sum_squares(a).unwrap();
        let d = t.sub(fro, sq).unwrap();
        let d = t.scale(d, 0.1).unwrap();
        let l = t.add(ce, d).unwrap();
        let mut all = vars;
        all.extend(mvars);
        (l, all)
    }

    #[test]
    fn two_layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..5 {
            let (n, d, h, c) = (4 + trial % 3, 5, 4, 3);
            let x = random(n, d, &mut rng);
            let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
            let assign: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let params = vec![
                random(h, d, &mut rng),
                random(1, h, &mut rng),
                random(c, h, &mut rng),
                random(1, c, &mut rng),
            ];
            let mats = vec![random(h, h, &mut rng), random(h, h, &mut rng)];
            let mut t = Tape::new();
            let (l, vars) = two_layer_loss(&mut t, &x, &params, &labels, &mats, &assign);
            let grads = t.backward(l).unwrap();

            let mut all: Vec<DenseMatrix> = params.clone();
            all.extend(mats.clone());
            let eval = |all: &[DenseMatrix]| {
                let mut t = Tape::new();
                let (l, _) = two_layer_loss(&mut t, &x, &all[..4], &labels, &all[4..], &assign);
                t.value(l).item()
            };
            let step = 1e-5;
            for (p, var) in vars.iter().enumerate() {
                let analytic = grads.get(*var).unwrap();
                let mut fd = DenseMatrix::zeros(all[p].rows(), all[p].cols());
                for e in 0..all[p].as_slice().len() {
                    let mut plus = all.clone();
                    plus[p].as_mut_slice()[e] += step;
                    let mut minus = all.clone();
                    minus[p].as_mut_slice()[e] -= step;
                    fd.as_mut_slice()[e] = (eval(&plus) - eval(&minus)) / (2.0 * step);
                }
                let rel = analytic.sub(&fd).unwrap().frobenius_norm()
                    / analytic.frobenius_norm().max(fd.frobenius_norm()).max(1e-12);
                assert!(rel < 1e-4, "param {p} relative error {rel}");
            }
        }
    }
}
