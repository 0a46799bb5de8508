//! Linear encoder, latent canonicalization and sigmoid MLP classifier.

mod loss;

pub use loss::{LossBreakdown, TrainBatch, LOSS_CHUNK};

use rand::Rng;

use crate::datagen::{TransformKind, FLAT_LEN, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::ndmath::DenseMatrix;
use crate::operators::{LatentOperator, OperatorKind};
use crate::rng::{derive_seed, stream, tag};

pub const DEFAULT_LATENT: usize = 70;
pub const DEFAULT_HIDDEN: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub input: usize,
    pub latent: usize,
    pub hidden: usize,
    pub classes: usize,
    /// Adds the 70x70 second encoder between the two canonicalizations.
    pub compound: bool,
}

impl ModelConfig {
    pub fn new(latent: usize, hidden: usize, compound: bool) -> Self {
        ModelConfig {
            input: FLAT_LEN,
            latent,
            hidden,
            classes: NUM_CLASSES,
            compound,
        }
    }

    /// Same network on inputs of another length.
    pub fn with_input(self, input: usize) -> Self {
        ModelConfig { input, ..self }
    }
}

/// Affine layer `y = W x + b`; batched as rows, `Y = X Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out x in`
    pub weight: DenseMatrix,
    /// `1 x out`
    pub bias: DenseMatrix,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: DenseMatrix::zeros(output, input),
            bias: DenseMatrix::zeros(1, output),
        }
    }

    /// Weights and bias uniform in `±1/sqrt(fan_in)`, the usual default
    /// for dense layers.
    pub fn init(input: usize, output: usize, seed: u64) -> Self {
        let mut rng = stream(seed, &[]);
        let bound = 1.0 / (input as f64).sqrt();
        let mut draw = |_, _| rng.random_range(-bound..bound);
        let weight = DenseMatrix::from_fn(output, input, &mut draw);
        let bias = DenseMatrix::from_fn(1, output, &mut draw);
        Linear { weight, bias }
    }

    pub fn input(&self) -> usize {
        self.weight.cols()
    }

    pub fn output(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weight.matvec(x)?;
        y.iter_mut().zip(self.bias.as_slice()).for_each(|(v, b)| *v += b);
        Ok(y)
    }

    pub fn apply_rows(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut y = x.matmul_nt(&self.weight)?;
        let b = self.bias.as_slice();
        for i in 0..y.rows() {
            y.row_mut(i).iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
        Ok(y)
    }
}

/// The latent operators of a run: one for a single transformation, one
/// per axis for compound translations.
#[derive(Clone, Debug, PartialEq)]
pub enum OperatorSet {
    Single(LatentOperator),
    Compound { x: LatentOperator, y: LatentOperator },
}

impl OperatorSet {
    pub fn build(kind: OperatorKind, transform: TransformKind, latent: usize, seed: u64) -> Result<Self> {
        let order = transform.spec().group_order;
        let op = |axis: u64| {
            LatentOperator::build(kind, order, latent, derive_seed(seed, &[tag::INIT, 100 + axis]))
        };
        Ok(if transform.is_compound() {
            OperatorSet::Compound { x: op(0)?, y: op(1)? }
        } else {
            OperatorSet::Single(op(0)?)
        })
    }

    pub fn kind(&self) -> OperatorKind {
        match self {
            OperatorSet::Single(op) | OperatorSet::Compound { x: op, .. } => op.kind(),
        }
    }

    pub fn is_compound(&self) -> bool {
        matches!(self, OperatorSet::Compound { .. })
    }

    pub fn operators(&self) -> Vec<&LatentOperator> {
        match self {
            OperatorSet::Single(op) => vec![op],
            OperatorSet::Compound { x, y } => vec![x, y],
        }
    }

    /// Parameter names of the trainable operator matrices.
    pub fn learned_names(&self) -> Vec<&'static str> {
        match self {
            OperatorSet::Single(LatentOperator::Learned(_)) => vec!["op.phi"],
            OperatorSet::Compound { x, y } => {
                let mut v = Vec::new();
                if matches!(x, LatentOperator::Learned(_)) {
                    v.push("op.x");
                }
                if matches!(y, LatentOperator::Learned(_)) {
                    v.push("op.y");
                }
                v
            }
            _ => Vec::new(),
        }
    }

    pub fn learned_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let ops: Vec<&mut LatentOperator> = match self {
            OperatorSet::Single(op) => vec![op],
            OperatorSet::Compound { x, y } => vec![x, y],
        };
        ops.into_iter()
            .filter_map(|op| match op {
                LatentOperator::Learned(l) => Some(l.matrix_mut()),
                _ => None,
            })
            .collect()
    }
}

/// Canonicalizes every row: row `i` becomes `φ^(-ks[i]) z_i`.
pub fn canonicalize_rows(op: &LatentOperator, z: &DenseMatrix, ks: &[i64]) -> Result<DenseMatrix> {
    if ks.len() != z.rows() || z.cols() != op.dim() {
        return Err(Error::contract(format!(
            "canonicalize: {} indices for a {}x{} latent batch, operator width {}",
            ks.len(),
            z.rows(),
            z.cols(),
            op.dim()
        )));
    }
    match op {
        LatentOperator::Identity { .. } => Ok(z.clone()),
        LatentOperator::Fixed(f) => {
            let mut out = z.clone();
            for (i, &k) in ks.iter().enumerate() {
                let perm = f.permutation(-k);
                let src = z.row(i);
                out.row_mut(i).iter_mut().zip(&perm).for_each(|(o, &j)| *o = src[j]);
            }
            Ok(out)
        }
        LatentOperator::Learned(_) => {
            let mut out = DenseMatrix::zeros(z.rows(), z.cols());
            let mut exps: Vec<usize> = ks.iter().map(|&k| op.inverse_exponent(k)).collect();
            let assign = exps.clone();
            exps.sort_unstable();
            exps.dedup();
            for e in exps {
                let rows: Vec<usize> = (0..ks.len()).filter(|&i| assign[i] == e).collect();
                let p = op.power_matrix(e as i64)?;
                let part = z.gather_rows(&rows).matmul_nt(&p)?;
                for (r, &i) in rows.iter().enumerate() {
                    out.row_mut(i).copy_from_slice(part.row(r));
                }
            }
            Ok(out)
        }
    }
}

/// Index of the largest entry; ties go to the smaller index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Linear,
    pub encoder2: Option<Linear>,
    pub hidden: Linear,
    pub output: Linear,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let s = |i: u64| derive_seed(seed, &[tag::INIT, i]);
        Model {
            config,
            encoder: Linear::init(config.input, config.latent, s(0)),
            encoder2: config
                .compound
                .then(|| Linear::init(config.latent, config.latent, s(1))),
            hidden: Linear::init(config.latent, config.hidden, s(2)),
            output: Linear::init(config.hidden, config.classes, s(3)),
        }
    }

    pub fn zeros(config: ModelConfig) -> Self {
        Model {
            config,
            encoder: Linear::zeros(config.input, config.latent),
            encoder2: config
                .compound
                .then(|| Linear::zeros(config.latent, config.latent)),
            hidden: Linear::zeros(config.latent, config.hidden),
            output: Linear::zeros(config.hidden, config.classes),
        }
    }

    /// Names of the network tensors in canonical order.
    pub fn param_names(&self) -> Vec<&'static str> {
        let mut v = vec!["enc.w", "enc.b"];
        if self.encoder2.is_some() {
            v.extend(["enc2.w", "enc2.b"]);
        }
        v.extend(["hid.w", "hid.b", "out.w", "out.b"]);
        v
    }

    pub fn params(&self) -> Vec<&DenseMatrix> {
        let mut v = vec![&self.encoder.weight, &self.encoder.bias];
        if let Some(e2) = &self.encoder2 {
            v.extend([&e2.weight, &e2.bias]);
        }
        v.extend([
            &self.hidden.weight,
            &self.hidden.bias,
            &self.output.weight,
            &self.output.bias,
        ]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut v = vec![&mut self.encoder.weight, &mut self.encoder.bias];
        if let Some(e2) = &mut self.encoder2 {
            v.extend([&mut e2.weight, &mut e2.bias]);
        }
        v.extend([
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.output.weight,
            &mut self.output.bias,
        ]);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    fn check_ops(&self, ops: &OperatorSet) -> Result<()> {
        if ops.is_compound() != self.encoder2.is_some() {
            return Err(Error::contract(
                "compound operators require a model with a second encoder",
            ));
        }
        if ops.operators().iter().any(|op| op.dim() != self.config.latent) {
            return Err(Error::contract("operator width differs from latent width"));
        }
        Ok(())
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.config.input {
            return Err(Error::contract(format!(
                "input has length {}, encoder expects {}",
                x.len(),
                self.config.input
            )));
        }
        self.encoder.apply(x)
    }

    pub fn encode_rows(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.config.input {
            return Err(Error::contract(format!(
                "input rows have length {}, encoder expects {}",
                x.cols(),
                self.config.input
            )));
        }
        self.encoder.apply_rows(x)
    }

    pub fn canonicalize(op: &LatentOperator, k: i64, z: &[f64]) -> Result<Vec<f64>> {
        op.apply_inverse(k, z)
    }

    /// `W₂ σ(W₁ z + b₁) + b₂`
    pub fn classify(&self, z: &[f64]) -> Result<Vec<f64>> {
        let h: Vec<f64> = self.hidden.apply(z)?.into_iter().map(sigmoid).collect();
        self.output.apply(&h)
    }

    pub fn classify_rows(&self, z: &DenseMatrix) -> Result<DenseMatrix> {
        let h = self.hidden.apply_rows(z)?.map(sigmoid);
        self.output.apply_rows(&h)
    }

    /// Canonical latent of an encoding: the inverse operator for a single
    /// transformation, or inverse-x, second encoder, inverse-y.
    pub fn stack(&self, ops: &OperatorSet, h: &[f64], pose: (i64, i64)) -> Result<Vec<f64>> {
        self.check_ops(ops)?;
        match ops {
            OperatorSet::Single(op) => op.apply_inverse(pose.0, h),
            OperatorSet::Compound { x, y } => {
                let a = x.apply_inverse(pose.0, h)?;
                let b = self.encoder2.as_ref().expect("checked").apply(&a)?;
                y.apply_inverse(pose.1, &b)
            }
        }
    }

    /// Batched [`Model::stack`] with one pose per row.
    pub fn stack_rows(&self, ops: &OperatorSet, h: &DenseMatrix, poses: &[(i64, i64)]) -> Result<DenseMatrix> {
        self.check_ops(ops)?;
        let kx: Vec<i64> = poses.iter().map(|p| p.0).collect();
        match ops {
            OperatorSet::Single(op) => canonicalize_rows(op, h, &kx),
            OperatorSet::Compound { x, y } => {
                let ky: Vec<i64> = poses.iter().map(|p| p.1).collect();
                let a = canonicalize_rows(x, h, &kx)?;
                let b = self.encoder2.as_ref().expect("checked").apply_rows(&a)?;
                canonicalize_rows(y, &b, &ky)
            }
        }
    }

    /// Canonical embeddings of image rows at the given poses.
    pub fn embed_rows(&self, ops: &OperatorSet, x: &DenseMatrix, poses: &[(i64, i64)]) -> Result<DenseMatrix> {
        self.stack_rows(ops, &self.encode_rows(x)?, poses)
    }

    pub fn predict(&self, ops: &OperatorSet, x: &[f64], pose: (i64, i64)) -> Result<usize> {
        let z = self.stack(ops, &self.encode(x)?, pose)?;
        Ok(argmax(&self.classify(&z)?))
    }

    pub fn predict_rows(&self, ops: &OperatorSet, x: &DenseMatrix, poses: &[(i64, i64)]) -> Result<Vec<usize>> {
        let logits = self.classify_rows(&self.embed_rows(ops, x, poses)?)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
