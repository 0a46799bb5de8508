//! Pose inference by k-NN voting against a class-agnostic database of
//! canonical embeddings.
//!
//! For a query `x`, every candidate pose `ℓ` gives `z_ℓ`, the canonical
//! embedding of `x` assuming it was transformed by `ℓ`. The `K` smallest
//! distances over all (candidate, reference) pairs vote for their
//! candidate. Distances are exact: a GEMM expansion ranks the pairs, and
//! everything near the selection boundary is rescored directly.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::datagen::{render_batch, DigitRecord, Pose, TransformKind};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{Model, OperatorSet};
use crate::ndmath::DenseMatrix;
use crate::rng::{stream, tag};

pub const DEFAULT_REF_N: usize = 2000;
pub const DEFAULT_K: usize = 1;
pub const DEFAULT_REF_SEED: u64 = 42;

/// Queries per work item in the batched search.
pub const QUERY_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceDB {
    /// `N x latent`, one canonical embedding per row.
    pub embeddings: DenseMatrix,
    /// The known pose each reference was rendered at.
    pub poses: Vec<(i64, i64)>,
    pub seed: u64,
}

impl ReferenceDB {
    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    /// The first `n` references. A database built with the same seed and
    /// size `n` is identical.
    pub fn prefix(&self, n: usize) -> ReferenceDB {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        ReferenceDB {
            embeddings: self.embeddings.gather_rows(&idx),
            poses: self.poses[..idx.len()].to_vec(),
            seed: self.seed,
        }
    }

    /// CSV export: a metadata comment line, a header, then one row per
    /// reference.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_path(path)?;
        w.write_record([format!("# n={} seed={}", self.len(), self.seed)])?;
        let d = self.embeddings.cols();
        let mut header = vec!["pose_x".to_string(), "pose_y".to_string()];
        header.extend((0..d).map(|j| format!("z{j}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![self.poses[i].0.to_string(), self.poses[i].1.to_string()];
            row.extend(self.embeddings.row(i).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Every pose a query is tested against, in ascending index order
/// (lexicographic `(kx, ky)` for compound).
pub fn candidate_poses(transform: TransformKind) -> Vec<(i64, i64)> {
    let idx = transform.spec().signed_indices();
    if transform.is_compound() {
        idx.iter().flat_map(|&x| idx.iter().map(move |&y| (x, y))).collect()
    } else {
        idx.iter().map(|&k| (k, 0)).collect()
    }
}

/// Draws the pose of reference `j`: an index from `range`, on a random
/// single axis for compound transforms.
fn reference_pose(transform: TransformKind, range: (i64, i64), seed: u64, j: usize) -> Pose {
    let mut rng = stream(seed, &[tag::REFERENCE, 1, j as u64]);
    let k = rng.random_range(range.0..=range.1);
    if transform.is_compound() {
        if rng.random_bool(0.5) {
            Pose::Compound(k, 0)
        } else {
            Pose::Compound(0, k)
        }
    } else {
        Pose::single(transform, k)
    }
}

/// Seeded sample of `n` validation digits, each rendered at a known pose
/// drawn from `range` and canonicalized.
#[allow(clippy::too_many_arguments)]
pub fn build_reference(
    model: &Model,
    ops: &OperatorSet,
    transform: TransformKind,
    val: &[DigitRecord],
    n: usize,
    range: (i64, i64),
    seed: u64,
    exec: Exec,
) -> Result<ReferenceDB> {
    if n == 0 || n > val.len() {
        return Err(Error::config(format!(
            "reference size {n} not in 1..={} validation samples",
            val.len()
        )));
    }
    let mut order: Vec<usize> = (0..val.len()).collect();
    order.shuffle(&mut stream(seed, &[tag::REFERENCE, 0]));
    let items: Vec<(&DigitRecord, Pose)> = order[..n]
        .iter()
        .enumerate()
        .map(|(j, &i)| (&val[i], reference_pose(transform, range, seed, j)))
        .collect();
    let poses: Vec<(i64, i64)> = items.iter().map(|(_, p)| p.indices()).collect();
    let mut embeddings = DenseMatrix::zeros(n, model.config.latent);
    let starts: Vec<usize> = (0..n).step_by(512).collect();
    let parts = exec.map(&starts, |&s| -> Result<DenseMatrix> {
        let e = (s + 512).min(n);
        let x = render_batch(&items[s..e], Exec::Sequential)?;
        model.embed_rows(ops, &x, &poses[s..e])
    });
    for (&s, part) in starts.iter().zip(parts) {
        let part = part?;
        for r in 0..part.rows() {
            embeddings.row_mut(s + r).copy_from_slice(part.row(r));
        }
    }
    Ok(ReferenceDB {
        embeddings,
        poses,
        seed,
    })
}

/// One (candidate, reference) pair among the nearest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub candidate: usize,
    pub reference: usize,
    pub dist: f64,
}

fn neighbor_order(a: &Neighbor, b: &Neighbor) -> std::cmp::Ordering {
    a.dist
        .total_cmp(&b.dist)
        .then(a.candidate.cmp(&b.candidate))
        .then(a.reference.cmp(&b.reference))
}

/// Majority vote. Ties go to the smaller summed distance, then to the
/// earlier candidate. Returns the winner and the per-candidate histogram.
pub fn vote(neighbors: &[Neighbor], n_candidates: usize) -> (usize, Vec<usize>) {
    let mut counts = vec![0usize; n_candidates];
    let mut sums = vec![0.0f64; n_candidates];
    for nb in neighbors {
        counts[nb.candidate] += 1;
        sums[nb.candidate] += nb.dist;
    }
    let mut best = 0;
    for c in 1..n_candidates {
        let better = counts[c] > counts[best] || (counts[c] == counts[best] && sums[c] < sums[best]);
        if better {
            best = c;
        }
    }
    (best, counts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseResult {
    pub pose: (i64, i64),
    /// Canonical embedding at the inferred pose.
    pub embedding: Vec<f64>,
    /// Votes per candidate pose, parallel to [`PoseSearcher::candidates`].
    pub votes: Vec<usize>,
}

fn exact_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Batched exact k-NN search against a fixed database.
pub struct PoseSearcher<'a> {
    model: &'a Model,
    ops: &'a OperatorSet,
    db: &'a ReferenceDB,
    candidates: Vec<(i64, i64)>,
    ref_sq: Vec<f64>,
    ref_sq_max: f64,
}

impl<'a> PoseSearcher<'a> {
    pub fn new(model: &'a Model, ops: &'a OperatorSet, db: &'a ReferenceDB, candidates: Vec<(i64, i64)>) -> Result<Self> {
        if db.is_empty() {
            return Err(Error::config("reference database is empty"));
        }
        if candidates.is_empty() {
            return Err(Error::config("no candidate poses"));
        }
        if db.embeddings.cols() != model.config.latent {
            return Err(Error::contract("reference width differs from latent width"));
        }
        let ref_sq: Vec<f64> = (0..db.len())
            .map(|j| db.embeddings.row(j).iter().map(|v| v * v).sum())
            .collect();
        let ref_sq_max = ref_sq.iter().cloned().fold(0.0, f64::max);
        Ok(PoseSearcher {
            model,
            ops,
            db,
            candidates,
            ref_sq,
            ref_sq_max,
        })
    }

    pub fn candidates(&self) -> &[(i64, i64)] {
        &self.candidates
    }

    /// Canonical candidate embeddings, query-major: row `q * G + c`.
    pub fn candidate_rows(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let h = self.model.encode_rows(x)?;
        let g = self.candidates.len();
        let idx: Vec<usize> = (0..h.rows()).flat_map(|q| std::iter::repeat_n(q, g)).collect();
        let poses: Vec<(i64, i64)> = (0..h.rows()).flat_map(|_| self.candidates.iter().copied()).collect();
        self.model.stack_rows(self.ops, &h.gather_rows(&idx), &poses)
    }

    /// Sorted `k` nearest pairs of each query against every database
    /// prefix in `prefixes` (each at most the database size).
    pub fn nearest(&self, x: &DenseMatrix, k: usize, prefixes: &[usize], exec: Exec) -> Result<Vec<Vec<Vec<Neighbor>>>> {
        if k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        if let Some(&p) = prefixes.iter().find(|&&p| p == 0 || p > self.db.len()) {
            return Err(Error::config(format!("reference prefix {p} not in 1..={}", self.db.len())));
        }
        let rows: Vec<usize> = (0..x.rows()).collect();
        let parts = exec.map_chunks(&rows, QUERY_CHUNK, |_, chunk| -> Result<Vec<Vec<Vec<Neighbor>>>> {
            let cand = self.candidate_rows(&x.gather_rows(chunk))?;
            let dots = cand.matmul_nt(&self.db.embeddings)?;
            let g = self.candidates.len();
            let mut out = Vec::with_capacity(chunk.len());
            for q in 0..chunk.len() {
                let block: Vec<usize> = (q * g..(q + 1) * g).collect();
                out.push(
                    prefixes
                        .iter()
                        .map(|&n| self.select(&cand, &dots, &block, n, k))
                        .collect(),
                );
            }
            Ok(out)
        });
        let mut all = Vec::with_capacity(x.rows());
        for p in parts {
            all.extend(p?);
        }
        Ok(all)
    }

    /// Exact top-`k` among candidates `block` and references `0..n`.
    fn select(&self, cand: &DenseMatrix, dots: &DenseMatrix, block: &[usize], n: usize, k: usize) -> Vec<Neighbor> {
        let cand_sq: Vec<f64> = block.iter().map(|&r| cand.row(r).iter().map(|v| v * v).sum()).collect();
        let cand_sq_max = cand_sq.iter().cloned().fold(0.0, f64::max);
        let total = block.len() * n;
        let k = k.min(total);
        let mut approx: Vec<f64> = Vec::with_capacity(total);
        for (c, &r) in block.iter().enumerate() {
            let d = &dots.row(r)[..n];
            approx.extend(d.iter().zip(&self.ref_sq).map(|(dot, rs)| cand_sq[c] + rs - 2.0 * dot));
        }
        let mut scratch = approx.clone();
        let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, f64::total_cmp);
        // Bound on the expansion's rounding error, doubled.
        let band = *kth + 2.0 * 1e-9 * (cand_sq_max + self.ref_sq_max + 1.0);
        let mut picked: Vec<Neighbor> = approx
            .iter()
            .enumerate()
            .filter(|(_, &a)| a <= band)
            .map(|(i, _)| {
                let (c, j) = (i / n, i % n);
                let dist = exact_sq(cand.row(block[c]), self.db.embeddings.row(j)).sqrt();
                Neighbor {
                    candidate: c,
                    reference: j,
                    dist,
                }
            })
            .collect();
        picked.sort_by(neighbor_order);
        picked.truncate(k);
        picked
    }

    /// Pose inference for each row of `x`.
    pub fn infer_rows(&self, x: &DenseMatrix, k: usize, exec: Exec) -> Result<Vec<PoseResult>> {
        let near = self.nearest(x, k, &[self.db.len()], exec)?;
        let g = self.candidates.len();
        let rows: Vec<usize> = (0..x.rows()).collect();
        let cands = exec.map_chunks(&rows, QUERY_CHUNK, |_, chunk| self.candidate_rows(&x.gather_rows(chunk)));
        let mut out = Vec::with_capacity(x.rows());
        let mut q = 0;
        for c in cands {
            let c = c?;
            for local in 0..c.rows() / g {
                let (best, votes) = vote(&near[q][0], g);
                out.push(PoseResult {
                    pose: self.candidates[best],
                    embedding: c.row(local * g + best).to_vec(),
                    votes,
                });
                q += 1;
            }
        }
        Ok(out)
    }
}

/// Infers the single-transform pose of one image.
pub fn infer_pose(
    model: &Model,
    ops: &OperatorSet,
    transform: TransformKind,
    x: &[f64],
    db: &ReferenceDB,
    k: usize,
) -> Result<PoseResult> {
    if transform.is_compound() {
        return Err(Error::config("use infer_pose_compound for compound transforms"));
    }
    let searcher = PoseSearcher::new(model, ops, db, candidate_poses(transform))?;
    let mut r = searcher.infer_rows(&DenseMatrix::row_vector(x), k, Exec::Sequential)?;
    Ok(r.remove(0))
}

/// Infers `(kx, ky)` by exhaustive search over both translation groups.
pub fn infer_pose_compound(model: &Model, ops: &OperatorSet, x: &[f64], db: &ReferenceDB, k: usize) -> Result<PoseResult> {
    if !ops.is_compound() {
        return Err(Error::config("compound inference needs stacked operators"));
    }
    let searcher = PoseSearcher::new(model, ops, db, candidate_poses(TransformKind::CompoundXY))?;
    let mut r = searcher.infer_rows(&DenseMatrix::row_vector(x), k, Exec::Sequential)?;
    Ok(r.remove(0))
}
