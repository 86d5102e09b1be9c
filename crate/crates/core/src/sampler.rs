//! Neighbor sub-sampler: split an image into two half-resolution images by taking two
//! distinct pixels from every 2x2 cell.

use ndarray::{Array3, ArrayView3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::rng::rng_from;

/// Which of the two sub-images to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    First,
    Second,
}

/// Unordered distinct pairs within a raster-ordered 2x2 cell `[0 1; 2 3]`.
const ALL_PAIRS: [[u8; 2]; 6] = [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]];
const ADJACENT_PAIRS: [[u8; 2]; 4] = [[0, 1], [0, 2], [1, 3], [2, 3]];

/// Per-cell ordered index pairs for one image. Value object; cheap to share.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsamplePlan {
    rows: usize,
    cols: usize,
    picks: Vec<[u8; 2]>,
    seed: u64,
}

impl SubsamplePlan {
    /// Build from explicit picks (raster order over cells).
    pub fn from_picks(rows: usize, cols: usize, picks: Vec<[u8; 2]>) -> Result<Self> {
        if picks.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} picks for {rows}x{cols} cells",
                picks.len()
            )));
        }
        if let Some(p) = picks.iter().find(|p| p[0] == p[1] || p[0] > 3 || p[1] > 3) {
            return Err(Error::InvalidParam(format!("invalid cell pick {p:?}")));
        }
        Ok(Self {
            rows,
            cols,
            picks,
            seed: 0,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn picks(&self) -> &[[u8; 2]] {
        &self.picks
    }

    pub fn pick(&self, row: usize, col: usize) -> [u8; 2] {
        self.picks[row * self.cols + col]
    }

    /// Input pixel `(y, x)` read for output `(row, col)` in `slot`.
    pub fn source(&self, row: usize, col: usize, slot: Slot) -> (usize, usize) {
        let idx = self.pick(row, col)[match slot {
            Slot::First => 0,
            Slot::Second => 1,
        }] as usize;
        (2 * row + idx / 2, 2 * col + idx % 2)
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if h != 2 * self.rows || w != 2 * self.cols {
            return Err(Error::Shape(format!(
                "{h}x{w} input for a plan of {}x{} cells",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

/// Draw a plan for an `h x w` image. Each cell independently gets one of the six
/// distinct pixel pairs (or one of the four 4-adjacent pairs with `neighbor_only`)
/// uniformly, in uniformly random order.
pub fn draw_plan(h: usize, w: usize, seed: u64, neighbor_only: bool) -> Result<SubsamplePlan> {
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("sub-sampling needs even dimensions, got {h}x{w}")));
    }
    let mut rng = rng_from(&[seed]);
    let table: &[[u8; 2]] = if neighbor_only {
        &ADJACENT_PAIRS
    } else {
        &ALL_PAIRS
    };
    let (rows, cols) = (h / 2, w / 2);
    let picks = (0..rows * cols)
        .map(|_| {
            let p = table[rng.random_range(0..table.len())];
            if rng.random_bool(0.5) {
                [p[1], p[0]]
            } else {
                p
            }
        })
        .collect();
    Ok(SubsamplePlan {
        rows,
        cols,
        picks,
        seed,
    })
}

/// Sub-sample an `H x W x C` image.
pub fn apply(img: &Image, plan: &SubsamplePlan, slot: Slot) -> Result<Image> {
    plan.check(img.height(), img.width())?;
    let src = img.data();
    let out = Array3::from_shape_fn((plan.rows, plan.cols, img.channels()), |(r, c, k)| {
        let (y, x) = plan.source(r, c, slot);
        src[[y, x, k]]
    });
    Ok(img.map_data(out))
}

/// Sub-sample a `C x H x W` tensor.
pub fn apply_chw<T: Copy>(x: ArrayView3<'_, T>, plan: &SubsamplePlan, slot: Slot) -> Result<Array3<T>> {
    let (ch, h, w) = x.dim();
    plan.check(h, w)?;
    Ok(Array3::from_shape_fn((ch, plan.rows, plan.cols), |(k, r, c)| {
        let (y, xx) = plan.source(r, c, slot);
        x[[k, y, xx]]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ColorSpace;
    use proptest::prelude::*;

    #[test]
    fn single_cell() {
        let plan = draw_plan(2, 2, 3, false).unwrap();
        assert_eq!((plan.rows(), plan.cols()), (1, 1));
        let [a, b] = plan.pick(0, 0);
        assert_ne!(a, b);
    }

    #[test]
    fn read_off_example() {
        let img = Image::new(
            Array3::from_shape_vec((2, 2, 1), vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            ColorSpace::Srgb,
        )
        .unwrap();
        let plan = SubsamplePlan::from_picks(1, 1, vec![[0, 3]]).unwrap();
        assert_eq!(apply(&img, &plan, Slot::First).unwrap().data()[[0, 0, 0]], 0.1);
        assert_eq!(apply(&img, &plan, Slot::Second).unwrap().data()[[0, 0, 0]], 0.4);
    }

    #[test]
    fn constant_image_gives_equal_outputs() {
        let img = Image::filled(8, 6, 3, 0.7, ColorSpace::Srgb);
        let plan = draw_plan(8, 6, 1, false).unwrap();
        let a = apply(&img, &plan, Slot::First).unwrap();
        let b = apply(&img, &plan, Slot::Second).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), (4, 3, 3));
    }

    #[test]
    fn errors() {
        assert!(draw_plan(3, 4, 0, false).is_err());
        let plan = draw_plan(4, 4, 0, false).unwrap();
        assert!(apply(&Image::filled(6, 4, 1, 0.0, ColorSpace::Srgb), &plan, Slot::First).is_err());
        assert!(SubsamplePlan::from_picks(1, 1, vec![[2, 2]]).is_err());
        assert!(SubsamplePlan::from_picks(1, 2, vec![[0, 1]]).is_err());
    }

    #[test]
    fn deterministic_and_neighbor_only() {
        assert_eq!(draw_plan(16, 16, 9, false).unwrap(), draw_plan(16, 16, 9, false).unwrap());
        let plan = draw_plan(64, 64, 9, true).unwrap();
        for &[a, b] in plan.picks() {
            let (ya, xa) = (a / 2, a % 2);
            let (yb, xb) = (b / 2, b % 2);
            assert_eq!(ya.abs_diff(yb) + xa.abs_diff(xb), 1, "{a} {b}");
        }
    }

    #[test]
    fn chw_matches_hwc() {
        let img = Image::new(
            Array3::from_shape_fn((6, 8, 2), |(y, x, c)| (y * 16 + x * 2 + c) as f32 / 100.0),
            ColorSpace::Srgb,
        )
        .unwrap();
        let plan = draw_plan(6, 8, 4, false).unwrap();
        let chw = img.data().view().permuted_axes([2, 0, 1]);
        for slot in [Slot::First, Slot::Second] {
            let a = apply(&img, &plan, slot).unwrap();
            let b = apply_chw(chw, &plan, slot).unwrap();
            assert_eq!(a.data().view().permuted_axes([2, 0, 1]), b.view());
        }
    }

    proptest! {
        #[test]
        fn slots_never_share_a_pixel(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>(), nb in any::<bool>()) {
            let plan = draw_plan(2 * rows, 2 * cols, seed, nb).unwrap();
            for r in 0..rows {
                for c in 0..cols {
                    prop_assert_ne!(plan.source(r, c, Slot::First), plan.source(r, c, Slot::Second));
                }
            }
        }

        #[test]
        fn apply_is_linear(seed in any::<u64>(), alpha in -2.0f32..2.0, beta in -2.0f32..2.0) {
            let plan = draw_plan(6, 4, seed, false).unwrap();
            let x = Array3::from_shape_fn((6, 4, 2), |(y, xx, c)| ((y * 5 + xx * 3 + c) as f32).sin());
            let y = Array3::from_shape_fn((6, 4, 2), |(y, xx, c)| ((y + xx * 7 + c * 2) as f32).cos());
            let combo = &x * alpha + &y * beta;
            let mk = |d: Array3<f32>| Image::new(d, ColorSpace::Linear).unwrap();
            for slot in [Slot::First, Slot::Second] {
                let lhs = apply(&mk(combo.clone()), &plan, slot).unwrap();
                let rhs = apply(&mk(x.clone()), &plan, slot).unwrap().into_data() * alpha
                    + apply(&mk(y.clone()), &plan, slot).unwrap().into_data() * beta;
                let err = lhs.data().iter().zip(rhs.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
                prop_assert!(err < 1e-5);
            }
        }

        #[test]
        fn shared_plan_preserves_alignment(seed in any::<u64>()) {
            // Encode provenance: pixel value = y * W + x. Two different images tagged the
            // same way must yield identical provenance under a shared plan.
            let (h, w) = (8, 10);
            let tag = |offset: f32| {
                Image::new(
                    Array3::from_shape_fn((h, w, 1), |(y, x, _)| (y * w + x) as f32 + offset),
                    ColorSpace::Linear,
                )
                .unwrap()
            };
            let plan = draw_plan(h, w, seed, false).unwrap();
            let a = apply(&tag(0.0), &plan, Slot::First).unwrap();
            let b = apply(&tag(1000.0), &plan, Slot::First).unwrap();
            for (p, q) in a.data().iter().zip(b.data().iter()) {
                prop_assert_eq!(p + 1000.0, *q);
            }
        }
    }
}
