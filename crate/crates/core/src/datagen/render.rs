use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::transform::{apply_rotation, Axis, BitGrid, DigitMask, TransformKind, Translate};
use super::{FLAT_LEN, PIXELS};
use crate::error::{Error, Result};

/// Per-pixel black/white noise, reproducible from its id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Background {
    pub id: u64,
    /// `true` is white.
    pub cells: BitGrid,
}

impl Background {
    pub fn from_id(id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(id);
        let mut words = [0u64; PIXELS.div_ceil(64)];
        words.iter_mut().for_each(|w| *w = rng.next_u64());
        Background {
            id,
            cells: BitGrid::from_words(words),
        }
    }
}

/// Group element applied to a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pose {
    Rotation(i64),
    TranslateX(i64),
    TranslateY(i64),
    /// x index, y index
    Compound(i64, i64),
}

impl Pose {
    pub fn identity(kind: TransformKind) -> Self {
        Self::single(kind, 0)
    }

    /// Pose of a single-index family. For `CompoundXY`, `k` is the x index.
    pub fn single(kind: TransformKind, k: i64) -> Self {
        match kind {
            TransformKind::Rotation => Pose::Rotation(k),
            TransformKind::TranslateX => Pose::TranslateX(k),
            TransformKind::TranslateY => Pose::TranslateY(k),
            TransformKind::CompoundXY => Pose::Compound(k, 0),
        }
    }

    pub fn kind(&self) -> TransformKind {
        match self {
            Pose::Rotation(_) => TransformKind::Rotation,
            Pose::TranslateX(_) => TransformKind::TranslateX,
            Pose::TranslateY(_) => TransformKind::TranslateY,
            Pose::Compound(..) => TransformKind::CompoundXY,
        }
    }

    /// Group indices as `(x-or-single, y)`.
    pub fn indices(&self) -> (i64, i64) {
        match *self {
            Pose::Rotation(k) | Pose::TranslateX(k) | Pose::TranslateY(k) => (k, 0),
            Pose::Compound(x, y) => (x, y),
        }
    }

    fn check(&self) -> Result<()> {
        let spec = self.kind().spec();
        let (a, b) = self.indices();
        spec.check_index(a)?;
        spec.check_index(b)
    }

    /// Transforms a digit mask. Rotations always start from the raw mask.
    pub fn apply(&self, mask: &DigitMask) -> DigitMask {
        match *self {
            Pose::Rotation(k) => apply_rotation(mask, k),
            Pose::TranslateX(k) => mask.translated(Axis::X, k),
            Pose::TranslateY(k) => mask.translated(Axis::Y, k),
            Pose::Compound(x, y) => mask.translated(Axis::X, x).translated(Axis::Y, y),
        }
    }
}

/// A rendered 3x28x28 image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Channel-major R, G, B planes; every entry is 0 or 1.
    pub pixels: Vec<f64>,
    pub label: u8,
    pub pose: Pose,
    pub background_id: u64,
}

impl Sample {
    /// Rolls every channel of the image, background included.
    pub fn translated_image(&self, axis: Axis, k: i64) -> Vec<f64> {
        self.pixels
            .chunks_exact(PIXELS)
            .flat_map(|plane| super::transform::roll_plane(plane, axis, k))
            .collect()
    }
}

/// Composites a (transformed) mask over the background into `out`:
/// foreground pure blue, background black or white.
pub fn composite_into(mask: &BitGrid, background: &Background, out: &mut [f64]) {
    debug_assert_eq!(out.len(), FLAT_LEN);
    let (r, rest) = out.split_at_mut(PIXELS);
    let (g, b) = rest.split_at_mut(PIXELS);
    for i in 0..PIXELS {
        if mask.get(i) {
            r[i] = 0.0;
            g[i] = 0.0;
            b[i] = 1.0;
        } else {
            let v = if background.cells.get(i) { 1.0 } else { 0.0 };
            r[i] = v;
            g[i] = v;
            b[i] = v;
        }
    }
}

/// Renders `pose` of a digit into a caller-provided row buffer.
pub fn render_into(mask: &DigitMask, background: &Background, pose: Pose, out: &mut [f64]) -> Result<()> {
    if out.len() != FLAT_LEN {
        return Err(Error::contract(format!(
            "render buffer has length {}, expected {FLAT_LEN}",
            out.len()
        )));
    }
    pose.check()?;
    composite_into(&pose.apply(mask).bits, background, out);
    Ok(())
}

pub fn render_sample(mask: &DigitMask, background: &Background, pose: Pose) -> Result<Sample> {
    let mut pixels = vec![0.0; FLAT_LEN];
    render_into(mask, background, pose, &mut pixels)?;
    Ok(Sample {
        pixels,
        label: mask.label,
        pose,
        background_id: background.id,
    })
}

/// Two views of one digit sharing its background. For `CompoundXY` the
/// first view is shifted along x by `k1` and the second along y by `k2`.
pub fn make_views(
    mask: &DigitMask,
    background: &Background,
    kind: TransformKind,
    k1: i64,
    k2: i64,
) -> Result<(Sample, Sample)> {
    let (p1, p2) = match kind {
        TransformKind::CompoundXY => (Pose::Compound(k1, 0), Pose::Compound(0, k2)),
        _ => (Pose::single(kind, k1), Pose::single(kind, k2)),
    };
    Ok((
        render_sample(mask, background, p1)?,
        render_sample(mask, background, p2)?,
    ))
}
