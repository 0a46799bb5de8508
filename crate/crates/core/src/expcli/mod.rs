//! Experiment commands: dataset preparation, training, evaluation reports
//! and report merging. The `latop` binary is a thin flag parser over these.

mod eval;
mod report;

use std::path::{Path, PathBuf};

pub use eval::{
    ablate_knn, eval_compound, eval_extrapolation, test_subset, AblationRow, CompoundRow, DegreeMode,
    ExtrapolationRow, KnnSettings, ABLATION_K, ABLATION_N, ABLATION_SEEDS, EVAL_CHUNK,
};
pub use report::{
    merge_tables, read_table, summarize, write_ablation, write_compound, write_extrapolation, write_table, Table,
    ABLATION_HEADER, COMPOUND_HEADER, EXTRAPOLATION_HEADER,
};

use crate::datagen::{Dataset, TransformKind};
use crate::error::Result;
use crate::exec::Exec;
use crate::trainer::{self, load_checkpoint, save_checkpoint, Checkpoint, EpochRecord, TrainConfig, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn of(ds: &Dataset) -> Self {
        SplitCounts {
            train: ds.train.len(),
            val: ds.val.len(),
            test: ds.test.len(),
        }
    }
}

/// Reads the MNIST files under `mnist_dir` and writes the dataset cache.
pub fn prepare(mnist_dir: &Path, out: &Path, seed: u64, transform: Option<TransformKind>) -> Result<SplitCounts> {
    let ds = Dataset::from_mnist_dir(mnist_dir, seed, transform)?;
    ds.write_cache(out)?;
    Ok(SplitCounts::of(&ds))
}

/// Where `train` puts the loss curve next to a checkpoint.
pub fn curve_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("curve.csv")
}

/// Trains from a dataset cache and writes the checkpoint and its curve.
pub fn train_files(
    config: &TrainConfig,
    data: &Path,
    out: &Path,
    curve: &Path,
    exec: Exec,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let ds = Dataset::read_cache(data)?;
    let outcome = trainer::train(config, &ds, exec, on_epoch)?;
    save_checkpoint(&outcome.checkpoint, out)?;
    trainer::write_curve_csv(&outcome.curve, curve)?;
    Ok(outcome)
}

/// Loads a checkpoint and the cache it is evaluated on, checking that the
/// cache was prepared for the checkpoint's transform.
pub fn load_inputs(ckpt: &Path, data: &Path) -> Result<(Checkpoint, Dataset)> {
    let ck = load_checkpoint(ckpt)?;
    let ds = Dataset::read_cache(data)?;
    if let Some(t) = ds.transform {
        ck.require_transform(t)?;
    }
    Ok((ck, ds))
}

/// Merges report files into `out` and returns the text summary.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<String> {
    let t = merge_tables(inputs)?;
    write_table(out, &t)?;
    Ok(summarize(&t))
}
