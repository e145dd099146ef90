//! Randomized-grid fragment extraction.
//!
//! A frame is divided into a 3x3 grid of square fragments separated by a
//! fixed gap (mimicking eroded shard borders), each fragment's origin is
//! displaced by independent integer jitter per axis, and training pairs are
//! built from the central fragment plus one of its 8 neighbors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{to_model_range, ImageRGB};
use crate::tensor::Tensor;

/// The 8 non-center cells in row-major order; index = class index.
/// 0=up-left, 1=up, 2=up-right, 3=left, 4=right, 5=down-left, 6=down,
/// 7=down-right.
pub const NON_CENTER_CELLS: [(usize, usize); 8] = [
    (0, 0),
    (0, 1),
    (0, 2),
    (1, 0),
    (1, 2),
    (2, 0),
    (2, 1),
    (2, 2),
];

pub const CENTER_CELL: (usize, usize) = (1, 1);
pub const NUM_CLASSES: usize = 8;

/// One of the 8 neighbor positions around the central fragment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RelativePositionLabel(usize);

impl RelativePositionLabel {
    pub fn new(class_index: usize) -> Result<RelativePositionLabel> {
        if class_index >= NUM_CLASSES {
            return Err(Error::contract(format!(
                "class index {class_index} out of range [0, 7]"
            )));
        }
        Ok(RelativePositionLabel(class_index))
    }

    pub fn from_cell(cell: (usize, usize)) -> Option<RelativePositionLabel> {
        NON_CENTER_CELLS
            .iter()
            .position(|&c| c == cell)
            .map(RelativePositionLabel)
    }

    pub fn class_index(&self) -> usize {
        self.0
    }

    pub fn cell(&self) -> (usize, usize) {
        NON_CENTER_CELLS[self.0]
    }
}

/// Grid geometry and jitter amplitude for fragment extraction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub frame_side: usize,
    pub fragment_side: usize,
    pub gap: usize,
    pub jitter: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(
        frame_side: usize,
        fragment_side: usize,
        gap: usize,
        jitter: usize,
        seed: u64,
    ) -> Result<SamplerConfig> {
        if frame_side == 0 || fragment_side == 0 {
            return Err(Error::contract("frame and fragment sides must be positive"));
        }
        let need = 3 * fragment_side + 2 * gap + 2 * jitter;
        if need > frame_side {
            return Err(Error::contract(format!(
                "grid needs 3*{fragment_side} + 2*{gap} + 2*{jitter} = {need} px, frame is {frame_side}"
            )));
        }
        Ok(SamplerConfig {
            frame_side,
            fragment_side,
            gap,
            jitter,
            seed,
        })
    }

    /// Full-scale geometry: 398px frame, 96px fragments, 48px gap, ±7px jitter.
    pub fn paper(seed: u64) -> SamplerConfig {
        SamplerConfig::new(398, 96, 48, 7, seed).expect("paper geometry is valid")
    }

    /// Desk-scale geometry: 132px frame, 32px fragments, 16px gap, ±2px jitter.
    pub fn desk(seed: u64) -> SamplerConfig {
        SamplerConfig::new(132, 32, 16, 2, seed).expect("desk geometry is valid")
    }

    /// Geometry scaled to a given fragment side, following the full-scale
    /// proportions (gap = side/2, jitter = side*7/96, tight frame).
    pub fn for_fragment_side(fragment_side: usize, seed: u64) -> Result<SamplerConfig> {
        let gap = fragment_side / 2;
        let jitter = fragment_side * 7 / 96;
        let frame = 3 * fragment_side + 2 * gap + 2 * jitter;
        SamplerConfig::new(frame, fragment_side, gap, jitter, seed)
    }

    fn margin(&self) -> usize {
        (self.frame_side - (3 * self.fragment_side + 2 * self.gap)) / 2
    }
}

/// A cropped fragment: its true grid cell, its pixel origin in the frame,
/// and its pixels in model range `[-1, 1]` as a `[side, side, 3]` tensor.
#[derive(Clone, Debug)]
pub struct Fragment {
    pub cell: (usize, usize),
    pub origin: (usize, usize),
    pub pixels: Tensor,
}

/// A (central, neighbor, label) training triple.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub central: Fragment,
    pub neighbor: Fragment,
    pub label: RelativePositionLabel,
}

/// Un-jittered top-left corner of a grid cell: the 3x3 block is centered in
/// the frame and cells are spaced by `fragment_side + gap`.
pub fn base_origin(cfg: &SamplerConfig, cell: (usize, usize)) -> (usize, usize) {
    let m = cfg.margin();
    let pitch = cfg.fragment_side + cfg.gap;
    (m + cell.0 * pitch, m + cell.1 * pitch)
}

fn check_frame(cfg: &SamplerConfig, img: &ImageRGB) -> Result<()> {
    if img.width() != cfg.frame_side || img.height() != cfg.frame_side {
        return Err(Error::contract(format!(
            "frame must be {0}x{0}, got {1}x{2}",
            cfg.frame_side,
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

fn jitter_offset(cfg: &SamplerConfig, rng: &mut ChaCha8Rng) -> i64 {
    let j = cfg.jitter as i64;
    rng.random_range(-j..=j)
}

fn cut_fragment(
    cfg: &SamplerConfig,
    img: &ImageRGB,
    cell: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Fragment {
    let (by, bx) = base_origin(cfg, cell);
    let dy = jitter_offset(cfg, rng);
    let dx = jitter_offset(cfg, rng);
    // the config invariant guarantees margin >= jitter, so this stays in frame
    let y = (by as i64 + dy) as usize;
    let x = (bx as i64 + dx) as usize;
    let crop = img
        .crop(x, y, cfg.fragment_side)
        .expect("jittered origin stays inside the frame");
    Fragment {
        cell,
        origin: (y, x),
        pixels: to_model_range(&crop),
    }
}

/// Draws one training pair: a uniform random neighbor cell, independent
/// jitter for the central and neighbor fragments, label from cell geometry.
///
/// RNG draw order is part of the determinism contract: neighbor cell, then
/// central (dy, dx), then neighbor (dy, dx).
pub fn sample_pair(cfg: &SamplerConfig, img: &ImageRGB, rng: &mut ChaCha8Rng) -> Result<PairSample> {
    check_frame(cfg, img)?;
    let label = RelativePositionLabel(rng.random_range(0..NUM_CLASSES));
    let central = cut_fragment(cfg, img, CENTER_CELL, rng);
    let neighbor = cut_fragment(cfg, img, label.cell(), rng);
    Ok(PairSample {
        central,
        neighbor,
        label,
    })
}

/// Samples all nine cells with independent jitter, in row-major cell order.
/// The returned fragments carry their true cells as puzzle ground truth.
pub fn sample_grid(cfg: &SamplerConfig, img: &ImageRGB, rng: &mut ChaCha8Rng) -> Result<Vec<Fragment>> {
    check_frame(cfg, img)?;
    let mut fragments = Vec::with_capacity(9);
    for row in 0..3 {
        for col in 0..3 {
            fragments.push(cut_fragment(cfg, img, (row, col), rng));
        }
    }
    Ok(fragments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;

    fn ramp_image(side: usize) -> ImageRGB {
        let mut pixels = Vec::with_capacity(3 * side * side);
        for y in 0..side {
            for x in 0..side {
                pixels.push((x * 255 / side.max(1)) as u8);
                pixels.push((y * 255 / side.max(1)) as u8);
                pixels.push(((x + y) % 256) as u8);
            }
        }
        ImageRGB::new(side, side, pixels).unwrap()
    }

    #[test]
    fn base_origins_for_default_geometry() {
        let cfg = SamplerConfig::paper(0);
        assert_eq!(base_origin(&cfg, (0, 0)), (7, 7));
        assert_eq!(base_origin(&cfg, (1, 1)), (151, 151));
        assert_eq!(base_origin(&cfg, (2, 2)), (295, 295));
    }

    #[test]
    fn base_origin_tight_packing() {
        let cfg = SamplerConfig::new(288, 96, 0, 0, 0).unwrap();
        assert_eq!(base_origin(&cfg, (2, 2)), (192, 192));
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        assert!(SamplerConfig::new(397, 96, 48, 7, 0).is_err());
        assert!(SamplerConfig::new(398, 96, 48, 7, 0).is_ok());
    }

    #[test]
    fn zero_jitter_hits_base_origins() {
        let cfg = SamplerConfig::new(398, 96, 48, 0, 1).unwrap();
        let img = ramp_image(398);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pair = sample_pair(&cfg, &img, &mut rng).unwrap();
        assert_eq!(pair.central.origin, base_origin(&cfg, (1, 1)));
        assert_eq!(pair.neighbor.origin, base_origin(&cfg, pair.label.cell()));
    }

    #[test]
    fn labels_are_uniform_over_ten_thousand_draws() {
        let cfg = SamplerConfig::desk(0);
        let img = ramp_image(cfg.frame_side);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 8];
        for _ in 0..10_000 {
            let pair = sample_pair(&cfg, &img, &mut rng).unwrap();
            counts[pair.label.class_index()] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 0.125).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn jitter_stays_within_bounds_and_frame() {
        let cfg = SamplerConfig::paper(0);
        let img = ramp_image(398);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let pair = sample_pair(&cfg, &img, &mut rng).unwrap();
            for frag in [&pair.central, &pair.neighbor] {
                let (by, bx) = base_origin(&cfg, frag.cell);
                let (y, x) = frag.origin;
                assert!((y as i64 - by as i64).abs() <= 7);
                assert!((x as i64 - bx as i64).abs() <= 7);
                assert!(y + 96 <= 398 && x + 96 <= 398);
            }
        }
    }

    #[test]
    fn grid_returns_one_fragment_per_cell() {
        let cfg = SamplerConfig::paper(0);
        let img = ramp_image(398);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = sample_grid(&cfg, &img, &mut rng).unwrap();
        assert_eq!(grid.len(), 9);
        for (i, frag) in grid.iter().enumerate() {
            assert_eq!(frag.cell, (i / 3, i % 3));
            assert_eq!(frag.pixels.shape(), &[96, 96, 3]);
        }
    }

    /// Separation between two axis-aligned boxes: the largest per-axis gap,
    /// negative when they overlap on both axes.
    fn bbox_gap(a: (usize, usize), b: (usize, usize), side: usize) -> i64 {
        let gap_axis = |p: usize, q: usize| -> i64 {
            let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
            hi as i64 - (lo + side) as i64
        };
        gap_axis(a.0, b.0).max(gap_axis(a.1, b.1))
    }

    fn min_pairwise_gap(grid: &[Fragment], side: usize) -> i64 {
        let mut min = i64::MAX;
        for i in 0..grid.len() {
            for j in i + 1..grid.len() {
                min = min.min(bbox_gap(grid[i].origin, grid[j].origin, side));
            }
        }
        min
    }

    #[test]
    fn grid_gap_without_jitter_is_the_configured_gap() {
        let cfg = SamplerConfig::new(398, 96, 48, 0, 0).unwrap();
        let img = ramp_image(398);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let grid = sample_grid(&cfg, &img, &mut rng).unwrap();
        assert_eq!(min_pairwise_gap(&grid, 96), 48);
    }

    #[test]
    fn grid_gap_with_jitter_has_worst_case_floor() {
        let cfg = SamplerConfig::paper(0);
        let img = ramp_image(398);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let grid = sample_grid(&cfg, &img, &mut rng).unwrap();
            assert!(min_pairwise_gap(&grid, 96) >= 48 - 14);
        }
    }

    #[test]
    fn label_cell_mapping_roundtrips() {
        for idx in 0..8 {
            let label = RelativePositionLabel::new(idx).unwrap();
            assert_eq!(
                RelativePositionLabel::from_cell(label.cell()),
                Some(label)
            );
        }
        assert_eq!(RelativePositionLabel::from_cell(CENTER_CELL), None);
        assert!(RelativePositionLabel::new(8).is_err());
    }

    #[test]
    fn class_indexing_is_row_major_skipping_center() {
        assert_eq!(RelativePositionLabel::new(0).unwrap().cell(), (0, 0));
        assert_eq!(RelativePositionLabel::new(1).unwrap().cell(), (0, 1));
        assert_eq!(RelativePositionLabel::new(4).unwrap().cell(), (1, 2));
        assert_eq!(RelativePositionLabel::new(7).unwrap().cell(), (2, 2));
    }

    #[test]
    fn same_seed_reproduces_samples_bit_exactly() {
        let cfg = SamplerConfig::paper(0);
        let img = ramp_image(398);
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            sample_pair(&cfg, &img, &mut rng).unwrap()
        };
        let (a, b) = (draw(), draw());
        assert_eq!(a.label, b.label);
        assert_eq!(a.central.origin, b.central.origin);
        assert!(a.central.pixels.bitwise_eq(&b.central.pixels));
        assert!(a.neighbor.pixels.bitwise_eq(&b.neighbor.pixels));
    }

    #[test]
    fn fragment_pixels_match_direct_crop() {
        let cfg = SamplerConfig::new(398, 96, 48, 0, 0).unwrap();
        let img = ramp_image(398);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pair = sample_pair(&cfg, &img, &mut rng).unwrap();
        let (y, x) = pair.neighbor.origin;
        let direct = to_model_range(&img.crop(x, y, 96).unwrap());
        assert!(pair.neighbor.pixels.bitwise_eq(&direct));
    }

    #[test]
    fn wrong_frame_size_is_a_contract_violation() {
        let cfg = SamplerConfig::paper(0);
        let img = ramp_image(100);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_pair(&cfg, &img, &mut rng).is_err());
    }

    proptest! {
        /// For gap > 2*jitter no two fragments can overlap, whatever the
        /// jitter realization.
        #[test]
        fn no_overlap_when_gap_exceeds_twice_jitter(seed in 0u64..200) {
            let cfg = SamplerConfig::desk(0);
            prop_assert!(cfg.gap > 2 * cfg.jitter);
            let img = ramp_image(cfg.frame_side);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = sample_grid(&cfg, &img, &mut rng).unwrap();
            prop_assert!(min_pairwise_gap(&grid, cfg.fragment_side) > 0);
        }
    }
}
