//! Two-view training losses, plain and on the tape.

use super::{argmax, Model, OperatorSet};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::ndmath::{softmax_cross_entropy, DenseMatrix, Tape, Var};
use crate::operators::{periodicity_loss, periodicity_loss_on_tape, LatentOperator, TapePowers};

/// Rows per tape when a batch is differentiated. Chunk results are
/// summed in a fixed order, so the split never changes the result.
pub const LOSS_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub reg: f64,
    /// Periodicity penalty; zero unless an operator is learned.
    pub op: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn combine(ce: f64, reg: f64, op: f64, lambda: f64, use_reg: bool) -> Self {
        let total = ce + if use_reg { lambda * reg } else { 0.0 } + op;
        LossBreakdown { ce, reg, op, total }
    }

    pub fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.reg.is_finite() && self.op.is_finite() && self.total.is_finite()
    }
}

/// Paired views with their poses. For compound training the first view
/// carries `(k1, 0)` and the second `(0, k2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub x1: DenseMatrix,
    pub x2: DenseMatrix,
    pub pose1: Vec<(i64, i64)>,
    pub pose2: Vec<(i64, i64)>,
    pub labels: Vec<usize>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.labels.len();
        if n == 0
            || self.x1.rows() != n
            || self.x2.rows() != n
            || self.pose1.len() != n
            || self.pose2.len() != n
        {
            return Err(Error::contract("training batch parts disagree in length"));
        }
        Ok(())
    }
}

fn op_penalty(ops: &OperatorSet) -> Result<f64> {
    ops.operators()
        .into_iter()
        .filter(|op| matches!(op, LatentOperator::Learned(_)))
        .map(periodicity_loss)
        .sum()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// An operator as seen from one tape.
enum TapeOp<'a> {
    Identity,
    Fixed(&'a LatentOperator),
    Learned(&'a LatentOperator, TapePowers),
}

impl TapeOp<'_> {
    fn canonicalize(&mut self, tape: &mut Tape, z: Var, ks: &[i64]) -> Result<Var> {
        let op = match self {
            TapeOp::Identity => return Ok(z),
            TapeOp::Fixed(op) | TapeOp::Learned(op, _) => *op,
        };
        let exps: Vec<usize> = ks.iter().map(|&k| op.inverse_exponent(k)).collect();
        let mut distinct = exps.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let assign: Vec<usize> = exps
            .iter()
            .map(|e| distinct.binary_search(e).expect("present"))
            .collect();
        let mut mats = Vec::with_capacity(distinct.len());
        for &e in &distinct {
            mats.push(match self {
                TapeOp::Learned(_, powers) => powers.power(tape, e)?,
                _ => tape.constant(op.power_matrix(e as i64)?),
            });
        }
        tape.row_transform(z, &mats, &assign)
    }
}

impl Model {
    fn linear_rows(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.matmul_nt(x, w)?;
        tape.add_row(y, b)
    }

    /// Single-view loss terms by plain evaluation.
    fn plain_terms(
        &self,
        ops: &OperatorSet,
        v1: &[f64],
        p1: (i64, i64),
        v2: &[f64],
        p2: (i64, i64),
        label: usize,
    ) -> Result<(f64, f64)> {
        let z1 = self.stack(ops, &self.encode(v1)?, p1)?;
        let z2 = self.stack(ops, &self.encode(v2)?, p2)?;
        let ce = softmax_cross_entropy(&self.classify(&z1)?, label)?;
        Ok((ce, squared_distance(&z1, &z2)))
    }

    /// Loss of one view pair under a single transformation.
    #[allow(clippy::too_many_arguments)]
    pub fn training_loss_single(
        &self,
        op: &LatentOperator,
        view1: &[f64],
        k1: i64,
        view2: &[f64],
        k2: i64,
        label: usize,
        lambda: f64,
    ) -> Result<LossBreakdown> {
        let ops = OperatorSet::Single(op.clone());
        let (ce, reg) = self.plain_terms(&ops, view1, (k1, 0), view2, (k2, 0), label)?;
        Ok(LossBreakdown::combine(ce, reg, op_penalty(&ops)?, lambda, true))
    }

    /// Loss of an x-shifted and a y-shifted view through the stack.
    #[allow(clippy::too_many_arguments)]
    pub fn training_loss_compound(
        &self,
        op_x: &LatentOperator,
        op_y: &LatentOperator,
        view_x: &[f64],
        k1: i64,
        view_y: &[f64],
        k2: i64,
        label: usize,
        lambda: f64,
    ) -> Result<LossBreakdown> {
        let ops = OperatorSet::Compound {
            x: op_x.clone(),
            y: op_y.clone(),
        };
        let (ce, reg) = self.plain_terms(&ops, view_x, (k1, 0), view_y, (0, k2), label)?;
        Ok(LossBreakdown::combine(ce, reg, op_penalty(&ops)?, lambda, true))
    }

    /// Mean loss over a batch by plain evaluation, without gradients.
    pub fn batch_loss_value(
        &self,
        ops: &OperatorSet,
        batch: &TrainBatch,
        lambda: f64,
        use_reg: bool,
    ) -> Result<LossBreakdown> {
        batch.check()?;
        let z1 = self.embed_rows(ops, &batch.x1, &batch.pose1)?;
        let z2 = self.embed_rows(ops, &batch.x2, &batch.pose2)?;
        let logits = self.classify_rows(&z1)?;
        let n = batch.len() as f64;
        let mut ce = 0.0;
        let mut reg = 0.0;
        for i in 0..batch.len() {
            ce += softmax_cross_entropy(logits.row(i), batch.labels[i])?;
            reg += squared_distance(z1.row(i), z2.row(i));
        }
        Ok(LossBreakdown::combine(ce / n, reg / n, op_penalty(ops)?, lambda, use_reg))
    }

    /// Fraction of first views classified correctly at their poses.
    pub fn batch_accuracy(&self, ops: &OperatorSet, batch: &TrainBatch) -> Result<f64> {
        batch.check()?;
        let logits = self.classify_rows(&self.embed_rows(ops, &batch.x1, &batch.pose1)?)?;
        let hits = (0..batch.len())
            .filter(|&i| argmax(logits.row(i)) == batch.labels[i])
            .count();
        Ok(hits as f64 / batch.len() as f64)
    }

    /// Mean batch loss and its gradient for every network tensor followed
    /// by every learned operator, in [`Model::param_names`] then
    /// [`OperatorSet::learned_names`] order.
    pub fn batch_loss_and_grad(
        &self,
        ops: &OperatorSet,
        batch: &TrainBatch,
        lambda: f64,
        use_reg: bool,
        exec: Exec,
    ) -> Result<(LossBreakdown, Vec<DenseMatrix>)> {
        batch.check()?;
        self.check_ops(ops)?;
        let n = batch.len();
        let starts: Vec<usize> = (0..n).step_by(LOSS_CHUNK).collect();
        let parts = exec.map(&starts, |&s| {
            let e = (s + LOSS_CHUNK).min(n);
            self.chunk_grad(ops, batch, s..e, n, lambda, use_reg)
        });

        let mut ce = 0.0;
        let mut reg = 0.0;
        let mut grads: Option<Vec<DenseMatrix>> = None;
        for part in parts {
            let (c, r, g) = part?;
            ce += c;
            reg += r;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.add_assign(b)?;
                    }
                }
            }
        }
        let mut grads = grads.expect("non-empty batch");

        let mut op_total = 0.0;
        let learned: Vec<&LatentOperator> = ops
            .operators()
            .into_iter()
            .filter(|op| matches!(op, LatentOperator::Learned(_)))
            .collect();
        let offset = self.params().len();
        for (i, op) in learned.into_iter().enumerate() {
            let mut tape = Tape::new();
            let phi = tape.param(op.learned_matrix().expect("learned").clone());
            let mut powers = TapePowers::new(&tape, phi);
            let l = periodicity_loss_on_tape(&mut tape, &mut powers, op.order())?;
            op_total += tape.value(l).item();
            let g = tape.backward(l)?;
            grads[offset + i].add_assign(g.get(phi).expect("param"))?;
        }

        Ok((LossBreakdown::combine(ce, reg, op_total, lambda, use_reg), grads))
    }

    /// Contribution of rows `range` to the batch mean: `(ce, reg, grads)`.
    fn chunk_grad(
        &self,
        ops: &OperatorSet,
        batch: &TrainBatch,
        range: std::ops::Range<usize>,
        batch_len: usize,
        lambda: f64,
        use_reg: bool,
    ) -> Result<(f64, f64, Vec<DenseMatrix>)> {
        let rows: Vec<usize> = range.clone().collect();
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params().into_iter().map(|p| tape.param(p.clone())).collect();

        let mut learned_vars = Vec::new();
        let mut tape_ops: Vec<TapeOp> = Vec::new();
        for op in ops.operators() {
            tape_ops.push(match op {
                LatentOperator::Identity { .. } => TapeOp::Identity,
                LatentOperator::Fixed(_) => TapeOp::Fixed(op),
                LatentOperator::Learned(l) => {
                    let v = tape.param(l.matrix().clone());
                    learned_vars.push(v);
                    TapeOp::Learned(op, TapePowers::new(&tape, v))
                }
            });
        }

        let compound = self.encoder2.is_some();
        let hid = if compound { 4 } else { 2 };
        let mut latent = |tape: &mut Tape, x: &DenseMatrix, poses: &[(i64, i64)]| -> Result<Var> {
            let xv = tape.constant(x.gather_rows(&rows));
            let h = Self::linear_rows(tape, xv, params[0], params[1])?;
            let kx: Vec<i64> = rows.iter().map(|&i| poses[i].0).collect();
            let a = tape_ops[0].canonicalize(tape, h, &kx)?;
            if !compound {
                return Ok(a);
            }
            let b = Self::linear_rows(tape, a, params[2], params[3])?;
            let ky: Vec<i64> = rows.iter().map(|&i| poses[i].1).collect();
            tape_ops[1].canonicalize(tape, b, &ky)
        };
        let z1 = latent(&mut tape, &batch.x1, &batch.pose1)?;
        let z2 = latent(&mut tape, &batch.x2, &batch.pose2)?;

        let pre = Self::linear_rows(&mut tape, z1, params[hid], params[hid + 1])?;
        let act = tape.sigmoid(pre)?;
        let logits = Self::linear_rows(&mut tape, act, params[hid + 2], params[hid + 3])?;
        let labels: Vec<usize> = range.map(|i| batch.labels[i]).collect();
        let ce_mean = tape.softmax_cross_entropy_mean(logits, &labels)?;
        let ce = tape.scale(ce_mean, labels.len() as f64 / batch_len as f64)?;
        let diff = tape.sub(z1, z2)?;
        let sq = tape.sum_squares(diff)?;
        let reg = tape.scale(sq, 1.0 / batch_len as f64)?;

        let loss = if use_reg && lambda != 0.0 {
            let weighted = tape.scale(reg, lambda)?;
            tape.add(ce, weighted)?
        } else {
            ce
        };
        let (ce_v, reg_v) = (tape.value(ce).item(), tape.value(reg).item());
        let mut g = tape.backward(loss)?;
        let grads = params
            .iter()
            .chain(&learned_vars)
            .map(|&v| g.take(v).expect("param gradient"))
            .collect();
        Ok((ce_v, reg_v, grads))
    }
}
