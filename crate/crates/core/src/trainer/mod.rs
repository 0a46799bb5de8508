//! Deterministic mini-batch training with Adam, per-epoch loss curves and
//! checkpoint persistence.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::datagen::{render_batch, Dataset, DigitRecord, Pose, TransformKind};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{LossBreakdown, Model, ModelConfig, OperatorSet, TrainBatch};
use crate::ndmath::{AdamConfig, AdamState, DenseMatrix};
use crate::operators::OperatorKind;
use crate::rng::{stream, tag};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub transform: TransformKind,
    pub operator: OperatorKind,
    /// Inclusive range of group indices drawn for training views.
    pub index_range: (i64, i64),
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub latent: usize,
    pub hidden: usize,
    pub seed: u64,
    /// When false the alignment term is reported but not optimized.
    pub use_reg: bool,
}

impl TrainConfig {
    pub fn new(transform: TransformKind, operator: OperatorKind) -> Self {
        TrainConfig {
            transform,
            operator,
            index_range: (-2, 2),
            epochs: 20,
            batch: 512,
            lr: 1e-3,
            lambda: 1.0,
            latent: 70,
            hidden: 128,
            seed: 0,
            use_reg: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.transform.spec();
        let (lo, hi) = self.index_range;
        if lo > hi {
            return Err(Error::config(format!("empty training range {lo}..{hi}")));
        }
        spec.check_index(lo).and(spec.check_index(hi)).map_err(|_| {
            Error::config(format!(
                "training range {lo}..{hi} leaves the group of order {}",
                spec.group_order
            ))
        })?;
        if (hi - lo) as usize >= spec.group_order {
            return Err(Error::config("training range covers an index twice"));
        }
        if self.batch == 0 || self.latent == 0 || self.hidden == 0 {
            return Err(Error::config("batch, latent and hidden sizes must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if self.operator == OperatorKind::Fixed && !self.latent.is_multiple_of(spec.group_order) {
            return Err(Error::config(format!(
                "latent {} is not a multiple of group order {}",
                self.latent, spec.group_order
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.latent, self.hidden, self.transform.is_compound())
    }

    pub fn training_indices(&self) -> Vec<i64> {
        (self.index_range.0..=self.index_range.1).collect()
    }

    /// Canonical `key=value` lines, one per field, in fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "transform={}", self.transform);
        let _ = writeln!(s, "operator={}", self.operator);
        let _ = writeln!(s, "range={}..{}", self.index_range.0, self.index_range.1);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch={}", self.batch);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "lambda={}", self.lambda);
        let _ = writeln!(s, "latent={}", self.latent);
        let _ = writeln!(s, "hidden={}", self.hidden);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "reg={}", self.use_reg);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("bad value `{v}` for `{key}`")))
        }
        let mut cfg = TrainConfig::new(TransformKind::Rotation, OperatorKind::None);
        let mut seen = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line `{line}` has no `=`")))?;
            match k {
                "transform" => cfg.transform = v.parse()?,
                "operator" => cfg.operator = v.parse()?,
                "range" => {
                    let (lo, hi) = v
                        .split_once("..")
                        .ok_or_else(|| Error::config(format!("bad range `{v}`")))?;
                    cfg.index_range = (parse(k, lo)?, parse(k, hi)?);
                }
                "epochs" => cfg.epochs = parse(k, v)?,
                "batch" => cfg.batch = parse(k, v)?,
                "lr" => cfg.lr = parse(k, v)?,
                "lambda" => cfg.lambda = parse(k, v)?,
                "latent" => cfg.latent = parse(k, v)?,
                "hidden" => cfg.hidden = parse(k, v)?,
                "seed" => cfg.seed = parse(k, v)?,
                "reg" => cfg.use_reg = parse(k, v)?,
                _ => return Err(Error::config(format!("unknown config key `{k}`"))),
            }
            seen.push(k.to_string());
        }
        if seen.len() != 11 {
            return Err(Error::config("config text is missing keys"));
        }
        Ok(cfg)
    }
}

/// Mean losses over the batches of one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub reg: f64,
    pub op: f64,
    pub total: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<EpochRecord>,
}

/// Views of one batch: positions `start..end` of the epoch order.
fn make_batch(
    config: &TrainConfig,
    records: &[DigitRecord],
    order: &[usize],
    epoch: usize,
    start: usize,
    end: usize,
    exec: Exec,
) -> Result<TrainBatch> {
    let (lo, hi) = config.index_range;
    let compound = config.transform.is_compound();
    let mut first = Vec::with_capacity(end - start);
    let mut second = Vec::with_capacity(end - start);
    for pos in start..end {
        let mut rng = stream(config.seed, &[tag::VIEWS, epoch as u64, pos as u64]);
        let k1 = rng.random_range(lo..=hi);
        let k2 = rng.random_range(lo..=hi);
        let rec = &records[order[pos]];
        let (p1, p2) = if compound {
            (Pose::Compound(k1, 0), Pose::Compound(0, k2))
        } else {
            (Pose::single(config.transform, k1), Pose::single(config.transform, k2))
        };
        first.push((rec, p1));
        second.push((rec, p2));
    }
    Ok(TrainBatch {
        x1: render_batch(&first, exec)?,
        x2: render_batch(&second, exec)?,
        pose1: first.iter().map(|(_, p)| p.indices()).collect(),
        pose2: second.iter().map(|(_, p)| p.indices()).collect(),
        labels: first.iter().map(|(r, _)| r.label() as usize).collect(),
    })
}

/// Epoch-specific shuffle of `0..n`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[tag::SHUFFLE, epoch as u64]));
    order
}

/// Trains on the training split. `on_epoch` sees each record as it is made.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if !dataset.accepts(config.transform) {
        return Err(Error::config(format!(
            "dataset was prepared for {}, not {}",
            dataset.transform.map_or("any".to_string(), |t| t.to_string()),
            config.transform
        )));
    }
    if dataset.train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let mut model = Model::init(config.model_config(), config.seed);
    let mut ops = OperatorSet::build(config.operator, config.transform, config.latent, config.seed)?;

    let shapes: Vec<(usize, usize)> = model
        .params()
        .iter()
        .map(|p| p.shape())
        .chain(ops.learned_mut().iter().map(|p| p.shape()))
        .collect();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &shapes,
    );

    let n = dataset.train.len();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut last = LossBreakdown::default();
    for epoch in 0..config.epochs {
        let order = epoch_order(config.seed, epoch, n);
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for start in (0..n).step_by(config.batch) {
            let end = (start + config.batch).min(n);
            let batch = make_batch(config, &dataset.train, &order, epoch, start, end, exec)?;
            let (loss, grads) = model.batch_loss_and_grad(&ops, &batch, config.lambda, config.use_reg, exec)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {batches}")));
            }
            let mut params = model.params_mut();
            params.extend(ops.learned_mut());
            let grad_refs: Vec<&DenseMatrix> = grads.iter().collect();
            adam.update(&mut params, &grad_refs)?;
            sum.ce += loss.ce;
            sum.reg += loss.reg;
            sum.op += loss.op;
            sum.total += loss.total;
            batches += 1;
        }
        if !model.is_finite() || ops.learned_mut().iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        let b = batches as f64;
        let rec = EpochRecord {
            epoch: epoch + 1,
            ce: sum.ce / b,
            reg: sum.reg / b,
            op: sum.op / b,
            total: sum.total / b,
        };
        last = LossBreakdown {
            ce: rec.ce,
            reg: rec.reg,
            op: rec.op,
            total: rec.total,
        };
        on_epoch(&rec);
        curve.push(rec);
    }

    let checkpoint = Checkpoint::new(config.clone(), model, ops, config.epochs, last).rounded();
    Ok(TrainOutcome { checkpoint, curve })
}

/// Writes the curve as `epoch,ce,reg,op,total`.
pub fn write_curve_csv(curve: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "ce", "reg", "op", "total"])?;
    for r in curve {
        w.write_record([
            r.epoch.to_string(),
            r.ce.to_string(),
            r.reg.to_string(),
            r.op.to_string(),
            r.total.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::datagen::{RawDigit, PIXELS};

    pub(crate) fn toy_digits(n: usize, salt: usize) -> Vec<RawDigit> {
        (0..n)
            .map(|i| {
                let label = ((i + salt) % 9) as u8;
                let mut pixels = [0u8; PIXELS];
                // A vertical bar whose column and length encode the label.
                for r in 6..(10 + label as usize) {
                    pixels[r * 28 + 6 + 2 * label as usize] = 255;
                    pixels[r * 28 + 7 + 2 * label as usize] = 200;
                }
                RawDigit { pixels, label }
            })
            .collect()
    }

    fn toy_dataset(transform: Option<TransformKind>) -> Dataset {
        Dataset::from_digits(&toy_digits(60, 0), &toy_digits(20, 3), 7, transform).unwrap()
    }

    fn quick(transform: TransformKind, operator: OperatorKind) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch: 16,
            hidden: 8,
            ..TrainConfig::new(transform, operator)
        }
    }

    #[test]
    fn defaults_match_reference_settings() {
        let c = TrainConfig::new(TransformKind::Rotation, OperatorKind::Fixed);
        assert_eq!((c.epochs, c.batch, c.lr, c.lambda), (20, 512, 0.001, 1.0));
        assert_eq!((c.latent, c.hidden, c.index_range), (70, 128, (-2, 2)));
        c.validate().unwrap();
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = TrainConfig::new(TransformKind::CompoundXY, OperatorKind::Learned);
        c.lr = 3.3e-4;
        c.lambda = 0.1;
        c.use_reg = false;
        c.seed = u64::MAX;
        c.index_range = (-1, 3);
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert!(TrainConfig::from_text("transform=rotation\n").is_err());
        assert!(TrainConfig::from_text(&c.to_text().replace("lr=", "rate=")).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = TrainConfig::new(TransformKind::Rotation, OperatorKind::Fixed);
        for bad in [
            TrainConfig { index_range: (-2, 10), ..base.clone() },
            TrainConfig { index_range: (2, -2), ..base.clone() },
            TrainConfig { index_range: (-9, 9), ..base.clone() },
            TrainConfig { batch: 0, ..base.clone() },
            TrainConfig { lr: 0.0, ..base.clone() },
            TrainConfig { lambda: -1.0, ..base.clone() },
            TrainConfig { latent: 64, ..base.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = TrainConfig {
            epochs: 0,
            ..quick(TransformKind::Rotation, OperatorKind::Fixed)
        };
        let out = train(&cfg, &toy_dataset(None), Exec::Sequential, |_| {}).unwrap();
        assert!(out.curve.is_empty());
        let init = Checkpoint::new(
            cfg.clone(),
            Model::init(cfg.model_config(), cfg.seed),
            OperatorSet::build(cfg.operator, cfg.transform, cfg.latent, cfg.seed).unwrap(),
            0,
            LossBreakdown::default(),
        )
        .rounded();
        assert_eq!(out.checkpoint, init);
    }

    #[test]
    fn training_is_deterministic_across_exec_modes() {
        let ds = toy_dataset(Some(TransformKind::TranslateY));
        let cfg = quick(TransformKind::TranslateY, OperatorKind::Learned);
        let a = train(&cfg, &ds, Exec::Sequential, |_| {}).unwrap();
        let b = train(&cfg, &ds, Exec::Parallel, |_| {}).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.curve.len(), 2);
        assert!(a.curve.iter().all(|r| r.op > 0.0));
    }

    #[test]
    fn one_epoch_one_record_and_lambda_bookkeeping() {
        let ds = toy_dataset(None);
        let cfg = TrainConfig {
            epochs: 1,
            lambda: 0.0,
            ..quick(TransformKind::Rotation, OperatorKind::Fixed)
        };
        let mut seen = Vec::new();
        let out = train(&cfg, &ds, Exec::Sequential, |r| seen.push(*r)).unwrap();
        assert_eq!(out.curve.len(), 1);
        assert_eq!(seen, out.curve);
        let r = out.curve[0];
        assert_eq!(r.epoch, 1);
        assert!(r.reg > 0.0);
        assert!((r.total - r.ce).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_on_toy_data() {
        let ds = toy_dataset(None);
        let cfg = TrainConfig {
            epochs: 15,
            lr: 5e-3,
            ..quick(TransformKind::TranslateX, OperatorKind::Fixed)
        };
        let out = train(&cfg, &ds, Exec::Sequential, |_| {}).unwrap();
        let first = out.curve.first().unwrap();
        let last = out.curve.last().unwrap();
        assert!(last.total < first.total, "{first:?} -> {last:?}");
        assert!(last.ce < 9f64.ln());
    }

    #[test]
    fn mismatched_dataset_rejected() {
        let ds = toy_dataset(Some(TransformKind::Rotation));
        let cfg = quick(TransformKind::TranslateX, OperatorKind::Fixed);
        assert!(matches!(train(&cfg, &ds, Exec::Sequential, |_| {}), Err(Error::Config(_))));
    }

    #[test]
    fn epoch_orders_are_keyed_permutations() {
        let a = epoch_order(1, 0, 50);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(1, 0, 50));
        assert_ne!(a, epoch_order(1, 1, 50));
    }

    #[test]
    fn curve_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let curve = [EpochRecord {
            epoch: 1,
            ce: 0.5,
            reg: 0.25,
            op: 0.0,
            total: 0.75,
        }];
        write_curve_csv(&curve, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,ce,reg,op,total\n1,0.5,0.25,0,0.75\n");
    }
}
