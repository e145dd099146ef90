//! Puzzle solving over the 8x8 location-probability matrix.
//!
//! Rows are fragments, columns are locations. The greedy solver repeatedly
//! picks the global maximum and eliminates its row and column; the optimal
//! solver enumerates all permutations and serves as the exactness oracle.
//! Ties break lexicographically so every run is reproducible.

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::image::{model_range_to_u8, ImageRGB};
use crate::model::PairModel;
use crate::sampler::{
    base_origin, Fragment, RelativePositionLabel, SamplerConfig, CENTER_CELL, NUM_CLASSES,
};

/// Dense square score matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SquareMatrix {
    pub fn new(n: usize, values: Vec<f64>) -> Result<SquareMatrix> {
        if n == 0 || values.len() != n * n {
            return Err(Error::contract(format!(
                "square matrix of side {n} needs {} values, got {}",
                n * n,
                values.len()
            )));
        }
        Ok(SquareMatrix { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n + col]
    }
}

/// Row-stochastic 8x8 matrix of location probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMatrix(SquareMatrix);

impl ProbabilityMatrix {
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<ProbabilityMatrix> {
        if rows.len() != NUM_CLASSES {
            return Err(Error::contract(format!(
                "probability matrix needs {NUM_CLASSES} rows, got {}",
                rows.len()
            )));
        }
        let mut values = Vec::with_capacity(NUM_CLASSES * NUM_CLASSES);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != NUM_CLASSES {
                return Err(Error::contract(format!(
                    "row {r} has {} entries, expected {NUM_CLASSES}",
                    row.len()
                )));
            }
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!(
                    "row {r} sums to {sum}, expected 1"
                )));
            }
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::contract(format!("row {r} has entries outside [0,1]")));
            }
            values.extend(row.iter().map(|&v| v as f64));
        }
        Ok(ProbabilityMatrix(SquareMatrix::new(NUM_CLASSES, values)?))
    }

    pub fn matrix(&self) -> &SquareMatrix {
        &self.0
    }
}

/// Bijection fragment index -> location index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    mapping: Vec<usize>,
}

impl Assignment {
    pub fn new(mapping: Vec<usize>) -> Result<Assignment> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &loc in &mapping {
            if loc >= n || seen[loc] {
                return Err(Error::contract(format!(
                    "mapping {mapping:?} is not a bijection"
                )));
            }
            seen[loc] = true;
        }
        Ok(Assignment { mapping })
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn location_of(&self, fragment: usize) -> usize {
        self.mapping[fragment]
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn score(&self, m: &SquareMatrix) -> f64 {
        self.mapping
            .iter()
            .enumerate()
            .map(|(r, &c)| m.get(r, c))
            .sum()
    }
}

/// Iteratively picks the global maximum and removes its row and column.
/// Ties break toward the smallest (row, column) in lexicographic order.
pub fn solve_greedy(m: &SquareMatrix) -> Assignment {
    let n = m.n();
    let mut row_used = vec![false; n];
    let mut col_used = vec![false; n];
    let mut mapping = vec![0usize; n];
    for _ in 0..n {
        let mut best: Option<(usize, usize, f64)> = None;
        for r in 0..n {
            if row_used[r] {
                continue;
            }
            for c in 0..n {
                if col_used[c] {
                    continue;
                }
                let v = m.get(r, c);
                if best.map_or(true, |(_, _, bv)| v > bv) {
                    best = Some((r, c, v));
                }
            }
        }
        let (r, c, _) = best.expect("n iterations over an n x n matrix");
        row_used[r] = true;
        col_used[c] = true;
        mapping[r] = c;
    }
    Assignment { mapping }
}

/// Exhaustive search over all n! assignments, maximizing the score sum.
/// Ties break toward the lexicographically smallest permutation. Refuses
/// n > 10; this is a desk-scale oracle, not a production solver.
pub fn solve_optimal(m: &SquareMatrix) -> Result<Assignment> {
    let n = m.n();
    if n > 10 {
        return Err(Error::contract(format!(
            "optimal solver is capped at n = 10, got {n}"
        )));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for perm in (0..n).permutations(n) {
        let score: f64 = perm.iter().enumerate().map(|(r, &c)| m.get(r, c)).sum();
        if best.as_ref().map_or(true, |(_, bs)| score > *bs) {
            best = Some((perm, score));
        }
    }
    let (mapping, _) = best.expect("n >= 1");
    Ok(Assignment { mapping })
}

/// Puzzle outcome in the two-metric report schema: did every fragment land
/// on its true location, and how many did.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PuzzleMetrics {
    pub perfect_solve: bool,
    pub correctly_placed: usize,
}

pub fn score_assignment(assignment: &Assignment, truth: &Assignment) -> PuzzleMetrics {
    let correctly_placed = assignment
        .mapping
        .iter()
        .zip(&truth.mapping)
        .filter(|(a, t)| a == t)
        .count();
    PuzzleMetrics {
        perfect_solve: correctly_placed == assignment.len(),
        correctly_placed,
    }
}

/// Splits a 9-fragment grid into the central fragment and the 8 others in
/// input order, validating cell uniqueness.
pub fn split_center(fragments: &[Fragment]) -> Result<(&Fragment, Vec<&Fragment>)> {
    if fragments.len() != 9 {
        return Err(Error::contract(format!(
            "puzzle needs exactly 9 fragments, got {}",
            fragments.len()
        )));
    }
    let mut seen = [[false; 3]; 3];
    for f in fragments {
        let (r, c) = f.cell;
        if r > 2 || c > 2 || seen[r][c] {
            return Err(Error::contract(format!(
                "fragment cells must cover the 3x3 grid once each (bad cell {:?})",
                f.cell
            )));
        }
        seen[r][c] = true;
    }
    let center = fragments
        .iter()
        .find(|f| f.cell == CENTER_CELL)
        .expect("cell coverage includes the center");
    let others = fragments.iter().filter(|f| f.cell != CENTER_CELL).collect();
    Ok((center, others))
}

/// Ground-truth assignment: row i (the i-th non-center fragment in input
/// order) maps to the location class of its true cell.
pub fn truth_assignment(fragments: &[Fragment]) -> Result<Assignment> {
    let (_, others) = split_center(fragments)?;
    let mapping = others
        .iter()
        .map(|f| {
            RelativePositionLabel::from_cell(f.cell)
                .expect("non-center cell")
                .class_index()
        })
        .collect();
    Assignment::new(mapping)
}

/// Runs the classifier on (center, fragment_i) for the 8 non-center
/// fragments, inference mode, one batched forward. Row i holds the location
/// probabilities of the i-th non-center fragment in input order.
pub fn build_matrix(model: &mut PairModel, fragments: &[Fragment]) -> Result<ProbabilityMatrix> {
    let (center, others) = split_center(fragments)?;
    let pairs: Vec<(&Fragment, &Fragment)> =
        others.iter().map(|f| (center, *f)).collect();
    let rows = model.predict_batch(&pairs)?;
    ProbabilityMatrix::from_rows(&rows)
}

const BORDER_WIDTH: usize = 2;
const BORDER_RED: [u8; 3] = [255, 0, 0];

/// Pastes fragments at the base grid origins of their assigned locations on
/// a black (gap-masked) canvas. With ground truth given, misplaced fragments
/// get a 2px red outline.
pub fn render_reconstruction(
    cfg: &SamplerConfig,
    fragments: &[Fragment],
    assignment: &Assignment,
    truth: Option<&Assignment>,
) -> Result<ImageRGB> {
    let (center, others) = split_center(fragments)?;
    if assignment.len() != others.len() {
        return Err(Error::contract(format!(
            "assignment covers {} fragments, expected {}",
            assignment.len(),
            others.len()
        )));
    }
    let side = cfg.fragment_side;
    let mut canvas = ImageRGB::filled(cfg.frame_side, cfg.frame_side, [0, 0, 0]);

    let mut paste = |frag: &Fragment, cell: (usize, usize), misplaced: bool| {
        let (oy, ox) = base_origin(cfg, cell);
        let data = frag.pixels.data();
        for y in 0..side {
            for x in 0..side {
                let i = (y * side + x) * 3;
                let rgb = [
                    model_range_to_u8(data[i]),
                    model_range_to_u8(data[i + 1]),
                    model_range_to_u8(data[i + 2]),
                ];
                canvas.set_pixel(ox + x, oy + y, rgb);
            }
        }
        if misplaced {
            for y in 0..side {
                for x in 0..side {
                    let on_border = y < BORDER_WIDTH
                        || y >= side - BORDER_WIDTH
                        || x < BORDER_WIDTH
                        || x >= side - BORDER_WIDTH;
                    if on_border {
                        canvas.set_pixel(ox + x, oy + y, BORDER_RED);
                    }
                }
            }
        }
    };

    paste(center, CENTER_CELL, false);
    for (i, frag) in others.iter().enumerate() {
        let loc = assignment.location_of(i);
        let label = RelativePositionLabel::new(loc)?;
        let misplaced = truth.is_some_and(|t| t.location_of(i) != loc);
        paste(frag, label.cell(), misplaced);
    }
    Ok(canvas)
}

/// One line of the corpus report CSV.
#[derive(Clone, Debug)]
pub struct PuzzleReportRow {
    pub image: String,
    pub metrics: PuzzleMetrics,
    pub greedy_score: f64,
    pub optimal_score: Option<f64>,
}

pub fn report_csv(rows: &[PuzzleReportRow]) -> String {
    let mut s = String::from("image,perfect,correctly_placed,greedy_score,optimal_score\n");
    for r in rows {
        let opt = r
            .optimal_score
            .map_or(String::new(), |v| format!("{v:.6}"));
        s.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            r.image, r.metrics.perfect_solve as u8, r.metrics.correctly_placed, r.greedy_score, opt
        ));
    }
    s
}

/// Samples a grid from each frame-sized image, solves it greedily, and
/// scores against the ground-truth cells. `with_oracle` also runs the
/// brute-force optimal solver per puzzle.
pub fn solve_corpus(
    model: &mut PairModel,
    cfg: &SamplerConfig,
    images: &[(String, ImageRGB)],
    seed: u64,
    with_oracle: bool,
) -> Result<Vec<PuzzleReportRow>> {
    use rand_chacha::rand_core::SeedableRng;
    let mut rows = Vec::with_capacity(images.len());
    for (idx, (name, img)) in images.iter().enumerate() {
        let grid_seed = crate::rng::derive_seed(seed, 0x67726964, idx as u64); // "grid"
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(grid_seed);
        let fragments = crate::sampler::sample_grid(cfg, img, &mut rng)?;
        let matrix = build_matrix(model, &fragments)?;
        let truth = truth_assignment(&fragments)?;
        let greedy = solve_greedy(matrix.matrix());
        let optimal_score = if with_oracle {
            Some(solve_optimal(matrix.matrix())?.score(matrix.matrix()))
        } else {
            None
        };
        rows.push(PuzzleReportRow {
            image: name.clone(),
            metrics: score_assignment(&greedy, &truth),
            greedy_score: greedy.score(matrix.matrix()),
            optimal_score,
        });
    }
    Ok(rows)
}

/// Aggregate of the two-metric schema over a corpus.
#[derive(Clone, Copy, Debug)]
pub struct CorpusMetrics {
    pub puzzles: usize,
    pub perfect_rate: f64,
    pub fraction_correct: f64,
}

pub fn aggregate(rows: &[PuzzleReportRow]) -> CorpusMetrics {
    let puzzles = rows.len();
    let perfect = rows.iter().filter(|r| r.metrics.perfect_solve).count();
    let placed: usize = rows.iter().map(|r| r.metrics.correctly_placed).sum();
    CorpusMetrics {
        puzzles,
        perfect_rate: perfect as f64 / puzzles.max(1) as f64,
        fraction_correct: placed as f64 / (NUM_CLASSES * puzzles.max(1)) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(n: usize, v: Vec<f64>) -> SquareMatrix {
        SquareMatrix::new(n, v).unwrap()
    }

    #[test]
    fn greedy_recovers_permutation_matrix() {
        // P maps fragment r to location (r + 3) % 8
        let mut v = vec![0.0; 64];
        for r in 0..8 {
            v[r * 8 + (r + 3) % 8] = 1.0;
        }
        let m = mat(8, v);
        let a = solve_greedy(&m);
        let o = solve_optimal(&m).unwrap();
        for r in 0..8 {
            assert_eq!(a.location_of(r), (r + 3) % 8);
        }
        assert_eq!(a, o);
        assert_eq!(o.score(&m), 8.0);
    }

    #[test]
    fn two_by_two_where_greedy_is_optimal() {
        let m = mat(2, vec![0.6, 0.4, 0.5, 0.5]);
        let g = solve_greedy(&m);
        assert_eq!(g.mapping(), &[0, 1]);
        assert_eq!(g.score(&m), 0.6 + 0.5);
        let o = solve_optimal(&m).unwrap();
        assert_eq!(o.score(&m), g.score(&m));
    }

    #[test]
    fn suboptimality_witness_reproduces_exactly() {
        let m = mat(2, vec![0.6, 0.5, 0.5, 0.0]);
        let g = solve_greedy(&m);
        assert_eq!(g.mapping(), &[0, 1]);
        assert_eq!(g.score(&m), 0.6);
        let o = solve_optimal(&m).unwrap();
        assert_eq!(o.mapping(), &[1, 0]);
        assert_eq!(o.score(&m), 1.0);
    }

    #[test]
    fn ties_break_lexicographically() {
        let m = mat(3, vec![0.5; 9]);
        assert_eq!(solve_greedy(&m).mapping(), &[0, 1, 2]);
        assert_eq!(solve_optimal(&m).unwrap().mapping(), &[0, 1, 2]);
    }

    #[test]
    fn optimal_refuses_large_matrices() {
        let m = mat(11, vec![0.0; 121]);
        assert!(solve_optimal(&m).is_err());
    }

    #[test]
    fn assignment_validates_bijections() {
        assert!(Assignment::new(vec![2, 0, 1]).is_ok());
        assert!(Assignment::new(vec![0, 0, 1]).is_err());
        assert!(Assignment::new(vec![0, 3]).is_err());
    }

    #[test]
    fn scoring_identity_and_transposition() {
        let truth = Assignment::new((0..8).collect()).unwrap();
        let exact = score_assignment(&truth, &truth);
        assert_eq!(exact.correctly_placed, 8);
        assert!(exact.perfect_solve);

        let mut swapped: Vec<usize> = (0..8).collect();
        swapped.swap(2, 5);
        let swapped = Assignment::new(swapped).unwrap();
        let m = score_assignment(&swapped, &truth);
        assert_eq!(m.correctly_placed, 6);
        assert!(!m.perfect_solve);
    }

    fn grid_fragments(cfg: &SamplerConfig, img: &ImageRGB) -> Vec<Fragment> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let no_jitter = SamplerConfig::new(
            cfg.frame_side,
            cfg.fragment_side,
            cfg.gap,
            0,
            cfg.seed,
        )
        .unwrap();
        crate::sampler::sample_grid(&no_jitter, img, &mut rng).unwrap()
    }

    fn ramp_image(side: usize) -> ImageRGB {
        let mut pixels = Vec::with_capacity(3 * side * side);
        for y in 0..side {
            for x in 0..side {
                pixels.push((x * 251 / side) as u8);
                pixels.push((y * 251 / side) as u8);
                pixels.push(((x * 7 + y * 13) % 256) as u8);
            }
        }
        ImageRGB::new(side, side, pixels).unwrap()
    }

    #[test]
    fn identity_render_matches_gap_masked_source() {
        let cfg = SamplerConfig::desk(0);
        let img = ramp_image(cfg.frame_side);
        let frags = grid_fragments(&cfg, &img);
        let identity = truth_assignment(&frags).unwrap();
        let rendered = render_reconstruction(&cfg, &frags, &identity, None).unwrap();

        let mut expected = ImageRGB::filled(cfg.frame_side, cfg.frame_side, [0, 0, 0]);
        for row in 0..3 {
            for col in 0..3 {
                let (oy, ox) = base_origin(&cfg, (row, col));
                for y in 0..cfg.fragment_side {
                    for x in 0..cfg.fragment_side {
                        expected.set_pixel(ox + x, oy + y, img.pixel(ox + x, oy + y));
                    }
                }
            }
        }
        assert_eq!(rendered, expected);
    }

    #[test]
    fn misplaced_fragments_get_red_borders() {
        let cfg = SamplerConfig::desk(0);
        let img = ramp_image(cfg.frame_side);
        let frags = grid_fragments(&cfg, &img);
        let truth = truth_assignment(&frags).unwrap();
        // swap two fragments
        let mut mapping = truth.mapping().to_vec();
        mapping.swap(0, 7);
        let solved = Assignment::new(mapping).unwrap();
        let rendered = render_reconstruction(&cfg, &frags, &solved, Some(&truth)).unwrap();
        assert_eq!(rendered.width(), cfg.frame_side);

        // count cells whose top-left corner pixel is the border red
        let mut red_cells = 0;
        for row in 0..3 {
            for col in 0..3 {
                let (oy, ox) = base_origin(&cfg, (row, col));
                if rendered.pixel(ox, oy) == [255, 0, 0] {
                    red_cells += 1;
                }
            }
        }
        assert_eq!(red_cells, 2);
    }

    #[test]
    fn split_center_validates_input() {
        let cfg = SamplerConfig::desk(0);
        let img = ramp_image(cfg.frame_side);
        let frags = grid_fragments(&cfg, &img);
        assert!(split_center(&frags).is_ok());
        assert!(split_center(&frags[..8]).is_err());
        let mut dup = frags.clone();
        dup[0].cell = (1, 1);
        assert!(split_center(&dup).is_err());
    }

    #[test]
    fn build_matrix_on_untrained_model_is_uniform() {
        use crate::fen::FenConfig;
        use crate::fusion::{FusionConfig, FusionKind};
        let cfg = SamplerConfig::desk(0);
        let img = ramp_image(cfg.frame_side);
        let frags = grid_fragments(&cfg, &img);
        let mut model = PairModel::init(
            FenConfig::desk(),
            FusionConfig::desk(FusionKind::Concat),
            3,
        )
        .unwrap();
        let pm = build_matrix(&mut model, &frags).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(pm.matrix().get(r, c), 0.125);
            }
            let sum: f64 = (0..8).map(|c| pm.matrix().get(r, c)).sum();
            assert!((sum - 1.0).abs() <= 1e-6);
        }
        assert!(build_matrix(&mut model, &frags[..5]).is_err());
    }

    #[test]
    fn probability_matrix_validation() {
        let good = vec![vec![0.125f32; 8]; 8];
        assert!(ProbabilityMatrix::from_rows(&good).is_ok());
        let mut bad = good.clone();
        bad[3][0] += 0.5;
        assert!(ProbabilityMatrix::from_rows(&bad).is_err());
        assert!(ProbabilityMatrix::from_rows(&good[..7]).is_err());
    }

    #[test]
    fn fragment_shapes_must_match_for_stacking() {
        let a = Fragment {
            cell: (0, 0),
            origin: (0, 0),
            pixels: Tensor::zeros(vec![4, 4, 3]),
        };
        let b = Fragment {
            cell: (0, 1),
            origin: (0, 0),
            pixels: Tensor::zeros(vec![8, 8, 3]),
        };
        assert!(crate::model::stack_pixels([&a, &b].into_iter()).is_err());
    }

    fn random_row_stochastic(rng: &mut ChaCha8Rng) -> SquareMatrix {
        let mut v = vec![0.0f64; 64];
        for r in 0..8 {
            let mut sum = 0.0;
            for c in 0..8 {
                let x: f64 = rng.random_range(0.0..1.0);
                v[r * 8 + c] = x;
                sum += x;
            }
            for c in 0..8 {
                v[r * 8 + c] /= sum;
            }
        }
        SquareMatrix::new(8, v).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn solvers_return_bijections_and_greedy_never_wins(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_row_stochastic(&mut rng);
            let g = solve_greedy(&m);
            let o = solve_optimal(&m).unwrap();
            prop_assert!(Assignment::new(g.mapping().to_vec()).is_ok());
            prop_assert!(Assignment::new(o.mapping().to_vec()).is_ok());
            prop_assert!(g.score(&m) <= o.score(&m) + 1e-12);
        }

        /// A matrix whose row maxima sit on distinct columns is solved
        /// exactly by greedy: each row's contribution is individually maximal.
        #[test]
        fn greedy_matches_optimal_on_permutation_dominant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = vec![0.0f64; 64];
            let mut cols: Vec<usize> = (0..8).collect();
            for i in (1..8).rev() {
                cols.swap(i, rng.random_range(0..=i));
            }
            for r in 0..8 {
                let mut noise_sum = 0.0;
                let mut noise = [0.0f64; 8];
                for (c, nv) in noise.iter_mut().enumerate() {
                    if c != cols[r] {
                        *nv = rng.random_range(0.0..1.0);
                        noise_sum += *nv;
                    }
                }
                for c in 0..8 {
                    v[r * 8 + c] = if c == cols[r] {
                        0.6
                    } else {
                        0.4 * noise[c] / noise_sum
                    };
                }
            }
            let m = SquareMatrix::new(8, v).unwrap();
            let g = solve_greedy(&m);
            let o = solve_optimal(&m).unwrap();
            prop_assert_eq!(g.mapping(), &cols[..]);
            prop_assert!((g.score(&m) - o.score(&m)).abs() <= 1e-12);
        }
    }
}
