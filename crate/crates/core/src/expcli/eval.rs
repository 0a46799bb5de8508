//! Test-split evaluation at every group degree, in ground-truth or k-NN
//! pose mode, and the k-NN hyperparameter ablation.

use std::fmt;
use std::str::FromStr;

use crate::datagen::{render_batch, Dataset, DigitRecord, Pose, TransformKind};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::argmax;
use crate::pose::{build_reference, candidate_poses, vote, PoseSearcher, ReferenceDB};
use crate::trainer::Checkpoint;

/// Rows rendered and scored at once; bounds memory on the full split.
pub const EVAL_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DegreeMode {
    /// Ground-truth indices are given to the model.
    Gt,
    /// Indices come from k-NN pose inference.
    Knn,
}

impl DegreeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DegreeMode::Gt => "gt",
            DegreeMode::Knn => "knn",
        }
    }
}

impl fmt::Display for DegreeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DegreeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(DegreeMode::Gt),
            "knn" => Ok(DegreeMode::Knn),
            _ => Err(Error::config(format!("unknown degree mode `{s}` (gt or knn)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KnnSettings {
    pub k: usize,
    pub ref_n: usize,
    pub ref_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtrapolationRow {
    pub transform: TransformKind,
    pub operator: String,
    pub degree_mode: DegreeMode,
    /// Present in k-NN mode only.
    pub k: Option<usize>,
    pub degree_units: f64,
    pub group_index: i64,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompoundRow {
    pub kx: i64,
    pub ky: i64,
    pub accuracy: f64,
    pub n: usize,
    pub in_training_cross: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub n: usize,
    pub k: usize,
    /// `None` marks the mean over seeds.
    pub seed: Option<u64>,
    pub acc_pose: f64,
    pub acc_cls: f64,
}

/// The first `max` test digits, or all of them.
pub fn test_subset(ds: &Dataset, max: Option<usize>) -> &[DigitRecord] {
    let n = max.map_or(ds.test.len(), |m| m.min(ds.test.len()));
    &ds.test[..n]
}

fn percent(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n as f64
}

fn same_pose(a: (i64, i64), b: (i64, i64), order: i64) -> bool {
    a.0.rem_euclid(order) == b.0.rem_euclid(order) && a.1.rem_euclid(order) == b.1.rem_euclid(order)
}

/// Scores `records` rendered at `pose`. Returns `(class hits, pose hits)`;
/// pose hits count only in k-NN mode.
fn score_pose(
    ck: &Checkpoint,
    records: &[DigitRecord],
    pose: Pose,
    searcher: Option<(&PoseSearcher, usize)>,
    exec: Exec,
) -> Result<(usize, usize)> {
    let order = ck.config.transform.spec().group_order as i64;
    let mut cls = 0;
    let mut pose_hits = 0;
    for chunk in records.chunks(EVAL_CHUNK) {
        let items: Vec<(&DigitRecord, Pose)> = chunk.iter().map(|r| (r, pose)).collect();
        let x = render_batch(&items, exec)?;
        let labels = chunk.iter().map(|r| r.label() as usize);
        match searcher {
            None => {
                let poses = vec![pose.indices(); chunk.len()];
                let pred = ck.model.predict_rows(&ck.ops, &x, &poses)?;
                cls += pred.iter().zip(labels).filter(|(p, l)| **p == *l).count();
            }
            Some((s, k)) => {
                let results = s.infer_rows(&x, k, exec)?;
                for (r, l) in results.iter().zip(labels) {
                    if argmax(&ck.model.classify(&r.embedding)?) == l {
                        cls += 1;
                    }
                    if same_pose(r.pose, pose.indices(), order) {
                        pose_hits += 1;
                    }
                }
            }
        }
    }
    Ok((cls, pose_hits))
}

fn reference_for(ck: &Checkpoint, ds: &Dataset, knn: &KnnSettings, exec: Exec) -> Result<ReferenceDB> {
    build_reference(
        &ck.model,
        &ck.ops,
        ck.config.transform,
        &ds.val,
        knn.ref_n,
        ck.config.index_range,
        knn.ref_seed,
        exec,
    )
}

fn check_data(ck: &Checkpoint, ds: &Dataset) -> Result<()> {
    if let Some(t) = ds.transform {
        ck.require_transform(t)?;
    }
    Ok(())
}

/// Accuracy on the test split at every degree of a single transform.
pub fn eval_extrapolation(
    ck: &Checkpoint,
    ds: &Dataset,
    mode: DegreeMode,
    knn: Option<KnnSettings>,
    max_test: Option<usize>,
    exec: Exec,
) -> Result<Vec<ExtrapolationRow>> {
    check_data(ck, ds)?;
    let transform = ck.config.transform;
    if transform.is_compound() {
        return Err(Error::config("compound checkpoints are evaluated with eval-compound"));
    }
    let records = test_subset(ds, max_test);
    if records.is_empty() {
        return Err(Error::config("test split is empty"));
    }
    let knn = match mode {
        DegreeMode::Gt => None,
        DegreeMode::Knn => Some(knn.ok_or_else(|| Error::config("knn mode needs --refN"))?),
    };
    let db = knn.as_ref().map(|s| reference_for(ck, ds, s, exec)).transpose()?;
    let searcher = db
        .as_ref()
        .map(|db| PoseSearcher::new(&ck.model, &ck.ops, db, candidate_poses(transform)))
        .transpose()?;
    let spec = transform.spec();
    spec.signed_indices()
        .into_iter()
        .map(|k| {
            let s = searcher.as_ref().zip(knn).map(|(s, c)| (s, c.k));
            let (hits, _) = score_pose(ck, records, Pose::single(transform, k), s, exec)?;
            Ok(ExtrapolationRow {
                transform,
                operator: ck.config.operator.to_string(),
                degree_mode: mode,
                k: knn.map(|c| c.k),
                degree_units: spec.degree_units(k),
                group_index: k,
                accuracy: percent(hits, records.len()),
                n: records.len(),
            })
        })
        .collect()
}

/// Accuracy over the full grid of joint x/y shifts.
pub fn eval_compound(
    ck: &Checkpoint,
    ds: &Dataset,
    mode: DegreeMode,
    knn: Option<KnnSettings>,
    max_test: Option<usize>,
    exec: Exec,
) -> Result<Vec<CompoundRow>> {
    check_data(ck, ds)?;
    if !ck.config.transform.is_compound() {
        return Err(Error::config(format!(
            "eval-compound needs a compound checkpoint, this one is {}",
            ck.config.transform
        )));
    }
    let records = test_subset(ds, max_test);
    if records.is_empty() {
        return Err(Error::config("test split is empty"));
    }
    let knn = match mode {
        DegreeMode::Gt => None,
        DegreeMode::Knn => Some(knn.ok_or_else(|| Error::config("knn mode needs --refN"))?),
    };
    let db = knn.as_ref().map(|s| reference_for(ck, ds, s, exec)).transpose()?;
    let searcher = db
        .as_ref()
        .map(|db| PoseSearcher::new(&ck.model, &ck.ops, db, candidate_poses(TransformKind::CompoundXY)))
        .transpose()?;
    let (lo, hi) = ck.config.index_range;
    let on_axis = |k: i64| (lo..=hi).contains(&k);
    let mut rows = Vec::new();
    for (kx, ky) in candidate_poses(TransformKind::CompoundXY) {
        let s = searcher.as_ref().zip(knn).map(|(s, c)| (s, c.k));
        let (hits, _) = score_pose(ck, records, Pose::Compound(kx, ky), s, exec)?;
        rows.push(CompoundRow {
            kx,
            ky,
            accuracy: percent(hits, records.len()),
            n: records.len(),
            in_training_cross: (kx == 0 && on_axis(ky)) || (ky == 0 && on_axis(kx)),
        });
    }
    Ok(rows)
}

pub const ABLATION_N: [usize; 6] = [100, 200, 500, 1000, 2000, 5000];
pub const ABLATION_K: [usize; 6] = [1, 3, 10, 30, 100, 300];
pub const ABLATION_SEEDS: [u64; 5] = [0, 10, 20, 30, 42];

/// Pose and class accuracy for every `(N, K)` with `K <= N`, per seed and
/// averaged over seeds. Each seed draws one database of the largest size;
/// smaller sizes use its prefixes, which equal the smaller draws.
pub fn ablate_knn(
    ck: &Checkpoint,
    ds: &Dataset,
    grid_n: &[usize],
    grid_k: &[usize],
    seeds: &[u64],
    max_test: Option<usize>,
    exec: Exec,
) -> Result<Vec<AblationRow>> {
    check_data(ck, ds)?;
    if grid_n.is_empty() || grid_k.is_empty() || seeds.is_empty() {
        return Err(Error::config("ablation grid is empty"));
    }
    let transform = ck.config.transform;
    let records = test_subset(ds, max_test);
    if records.is_empty() {
        return Err(Error::config("test split is empty"));
    }
    let max_n = *grid_n.iter().max().expect("non-empty");
    let max_k = *grid_k.iter().max().expect("non-empty");
    let cells: Vec<(usize, usize)> = grid_n
        .iter()
        .flat_map(|&n| grid_k.iter().filter(move |&&k| k <= n).map(move |&k| (n, k)))
        .collect();
    let order = transform.spec().group_order as i64;
    let cands = candidate_poses(transform);
    let true_poses: Vec<Pose> = cands
        .iter()
        .map(|&(a, b)| if transform.is_compound() { Pose::Compound(a, b) } else { Pose::single(transform, a) })
        .collect();

    let mut rows = Vec::new();
    let mut sums = vec![(0.0, 0.0); cells.len()];
    for &seed in seeds {
        let db = reference_for(
            ck,
            ds,
            &KnnSettings {
                k: max_k,
                ref_n: max_n,
                ref_seed: seed,
            },
            exec,
        )?;
        let searcher = PoseSearcher::new(&ck.model, &ck.ops, &db, cands.clone())?;
        let mut pose_hits = vec![0usize; cells.len()];
        let mut cls_hits = vec![0usize; cells.len()];
        let mut total = 0usize;
        for &pose in &true_poses {
            for chunk in records.chunks(EVAL_CHUNK) {
                let items: Vec<(&DigitRecord, Pose)> = chunk.iter().map(|r| (r, pose)).collect();
                let x = render_batch(&items, exec)?;
                let near = searcher.nearest(&x, max_k, grid_n, exec)?;
                let g = cands.len();
                let logits = ck.model.classify_rows(&searcher.candidate_rows(&x)?)?;
                for (q, rec) in chunk.iter().enumerate() {
                    for (c, &(n, k)) in cells.iter().enumerate() {
                        let p = grid_n.iter().position(|&m| m == n).expect("cell size in grid");
                        let list = &near[q][p];
                        let (best, _) = vote(&list[..k.min(list.len())], g);
                        if same_pose(cands[best], pose.indices(), order) {
                            pose_hits[c] += 1;
                        }
                        if argmax(logits.row(q * g + best)) == rec.label() as usize {
                            cls_hits[c] += 1;
                        }
                    }
                }
                total += chunk.len();
            }
        }
        for (c, &(n, k)) in cells.iter().enumerate() {
            let (p, a) = (percent(pose_hits[c], total), percent(cls_hits[c], total));
            sums[c].0 += p;
            sums[c].1 += a;
            rows.push(AblationRow {
                n,
                k,
                seed: Some(seed),
                acc_pose: p,
                acc_cls: a,
            });
        }
    }
    let s = seeds.len() as f64;
    for (c, &(n, k)) in cells.iter().enumerate() {
        rows.push(AblationRow {
            n,
            k,
            seed: None,
            acc_pose: sums[c].0 / s,
            acc_cls: sums[c].1 / s,
        });
    }
    Ok(rows)
}
