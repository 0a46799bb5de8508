use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use super::{PIXELS, SIDE};
use crate::error::{Error, Result};

pub const ROTATION_ORDER: usize = 10;
pub const ROTATION_STEP_DEGREES: f64 = 36.0;
pub const TRANSLATION_ORDER: usize = 14;
pub const TRANSLATION_STEP_PIXELS: usize = 2;
/// Rotation center in (row, col) pixel coordinates.
pub const ROTATION_CENTER: f64 = 13.5;

const WORDS: usize = PIXELS.div_ceil(64);

/// 28x28 binary grid packed into bits, row-major.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct BitGrid([u64; WORDS]);

impl BitGrid {
    pub const EMPTY: BitGrid = BitGrid([0; WORDS]);

    pub fn from_fn(mut f: impl FnMut(usize) -> bool) -> Self {
        let mut g = Self::EMPTY;
        for i in 0..PIXELS {
            if f(i) {
                g.set(i, true);
            }
        }
        g
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        (self.0[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: bool) {
        if v {
            self.0[i / 64] |= 1 << (i % 64);
        } else {
            self.0[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn words(&self) -> &[u64; WORDS] {
        &self.0
    }

    pub fn from_words(words: [u64; WORDS]) -> Self {
        let mut g = BitGrid(words);
        // Clear padding bits past the last pixel.
        let extra = WORDS * 64 - PIXELS;
        if extra > 0 {
            g.0[WORDS - 1] &= u64::MAX >> extra;
        }
        g
    }

    /// 98 bytes, LSB-first.
    pub fn to_bytes(&self) -> [u8; PIXELS / 8] {
        let mut out = [0u8; PIXELS / 8];
        for (i, b) in out.iter_mut().enumerate() {
            for bit in 0..8 {
                if self.get(i * 8 + bit) {
                    *b |= 1 << bit;
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8; PIXELS / 8]) -> Self {
        Self::from_fn(|i| (bytes[i / 8] >> (i % 8)) & 1 == 1)
    }
}

impl fmt::Debug for BitGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..SIDE {
            let line: String = (0..SIDE)
                .map(|c| if self.get(r * SIDE + c) { '#' } else { '.' })
                .collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Foreground mask of a digit, classes 0..=8.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DigitMask {
    pub bits: BitGrid,
    pub label: u8,
}

impl DigitMask {
    pub const THRESHOLD: u8 = 128;

    /// Foreground is every pixel strictly above 128. Class 9 is rejected.
    pub fn from_pixels(pixels: &[u8; PIXELS], label: u8) -> Result<Self> {
        if label > 8 {
            return Err(Error::contract(format!(
                "digit masks carry labels 0..=8, got {label}"
            )));
        }
        Ok(DigitMask {
            bits: BitGrid::from_fn(|i| pixels[i] > Self::THRESHOLD),
            label,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformKind {
    Rotation,
    TranslateX,
    TranslateY,
    CompoundXY,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [
        TransformKind::Rotation,
        TransformKind::TranslateX,
        TransformKind::TranslateY,
        TransformKind::CompoundXY,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::Rotation => "rotation",
            TransformKind::TranslateX => "translate-x",
            TransformKind::TranslateY => "translate-y",
            TransformKind::CompoundXY => "compound-xy",
        }
    }

    pub fn spec(self) -> TransformSpec {
        match self {
            TransformKind::Rotation => TransformSpec {
                kind: self,
                group_order: ROTATION_ORDER,
                step: ROTATION_STEP_DEGREES,
            },
            _ => TransformSpec {
                kind: self,
                group_order: TRANSLATION_ORDER,
                step: TRANSLATION_STEP_PIXELS as f64,
            },
        }
    }

    pub fn is_compound(self) -> bool {
        self == TransformKind::CompoundXY
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown transform `{s}`")))
    }
}

/// Cyclic group parameters of a transform family. For `CompoundXY` the
/// order and step are per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub group_order: usize,
    /// Degrees of arc for rotation, pixels for translation.
    pub step: f64,
}

impl TransformSpec {
    /// Signed index range used to label degrees: rotation `-4..=5`
    /// (−144°..180°), translation `-6..=7` (−12..14 px).
    pub fn signed_indices(&self) -> Vec<i64> {
        let n = self.group_order as i64;
        let lo = -((n - 1) / 2);
        (lo..lo + n).collect()
    }

    /// Physical size of the transform for a group index.
    pub fn degree_units(&self, index: i64) -> f64 {
        index as f64 * self.step
    }

    /// Accepts any index strictly inside `(-order, order)`.
    pub fn check_index(&self, k: i64) -> Result<()> {
        let n = self.group_order as i64;
        if k <= -n || k >= n {
            return Err(Error::contract(format!(
                "index {k} outside the {} group of order {n}",
                self.kind
            )));
        }
        Ok(())
    }
}

fn rotation_tables() -> &'static [Vec<Option<u16>>] {
    static TABLES: OnceLock<Vec<Vec<Option<u16>>>> = OnceLock::new();
    TABLES.get_or_init(|| {
        (0..ROTATION_ORDER)
            .map(|k| {
                let theta = (k as f64 * ROTATION_STEP_DEGREES).to_radians();
                let (s, c) = theta.sin_cos();
                (0..PIXELS)
                    .map(|i| {
                        if k == 0 {
                            return Some(i as u16);
                        }
                        let dy = (i / SIDE) as f64 - ROTATION_CENTER;
                        let dx = (i % SIDE) as f64 - ROTATION_CENTER;
                        // Inverse map of a counter-clockwise (on screen) rotation.
                        let sx = dx * c - dy * s + ROTATION_CENTER;
                        let sy = dx * s + dy * c + ROTATION_CENTER;
                        let (r, col) = (sy.round(), sx.round());
                        let side = SIDE as f64;
                        if r < 0.0 || col < 0.0 || r >= side || col >= side {
                            None
                        } else {
                            Some((r as usize * SIDE + col as usize) as u16)
                        }
                    })
                    .collect()
            })
            .collect()
    })
}

/// Nearest-neighbour rotation by `(k mod 10) * 36°` about the image center,
/// zero padding outside the source.
pub fn apply_rotation(mask: &DigitMask, k: i64) -> DigitMask {
    let table = &rotation_tables()[k.rem_euclid(ROTATION_ORDER as i64) as usize];
    DigitMask {
        bits: BitGrid::from_fn(|i| table[i].is_some_and(|s| mask.bits.get(s as usize))),
        label: mask.label,
    }
}

/// Periodic roll of a row-major 28x28 plane by `(k mod 14) * 2` pixels.
/// Positive `k` moves content right (x) or down (y).
pub fn roll_plane<T: Copy>(plane: &[T], axis: Axis, k: i64) -> Vec<T> {
    assert_eq!(plane.len(), PIXELS, "roll_plane expects a 28x28 plane");
    let shift = (k.rem_euclid(TRANSLATION_ORDER as i64) as usize) * TRANSLATION_STEP_PIXELS;
    let mut out = plane.to_vec();
    for r in 0..SIDE {
        for c in 0..SIDE {
            let (nr, nc) = match axis {
                Axis::X => (r, (c + shift) % SIDE),
                Axis::Y => ((r + shift) % SIDE, c),
            };
            out[nr * SIDE + nc] = plane[r * SIDE + c];
        }
    }
    out
}

/// Types that can be circularly translated on the pixel grid.
pub trait Translate: Sized {
    fn translated(&self, axis: Axis, k: i64) -> Self;
}

impl Translate for BitGrid {
    fn translated(&self, axis: Axis, k: i64) -> Self {
        let bits: Vec<bool> = (0..PIXELS).map(|i| self.get(i)).collect();
        let rolled = roll_plane(&bits, axis, k);
        BitGrid::from_fn(|i| rolled[i])
    }
}

impl Translate for DigitMask {
    fn translated(&self, axis: Axis, k: i64) -> Self {
        DigitMask {
            bits: self.bits.translated(axis, k),
            label: self.label,
        }
    }
}

pub fn apply_translation<T: Translate>(item: &T, axis: Axis, k: i64) -> T {
    item.translated(axis, k)
}
