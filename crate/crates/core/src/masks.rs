//! Condition masks: the fixed sampling grid, initial-condition projection,
//! backtracking to grid resolution, edge probability maps and the randomly
//! adaptive mask.
//!
//! Masks are single-channel and broadcast over image channels.

use rand::Rng;

use crate::error::{DpiError, Result};
use crate::image::ImageTensor;

const MODULE: &str = "condition_masks";

/// Binary `H x W` mask with ones where both coordinates are multiples of `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedMask {
    height: usize,
    width: usize,
    k: usize,
    bits: Vec<bool>,
}

impl FixedMask {
    pub fn new(height: usize, width: usize, k: usize) -> Result<Self> {
        make_fixed_mask(height, width, k)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> usize {
        self.k
    }

    /// Grid resolution `(H / k, W / k)`.
    pub fn grid_shape(&self) -> (usize, usize) {
        (self.height / self.k, self.width / self.k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.width + j]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Mask as a one-channel 0/1 image.
    pub fn to_image(&self) -> ImageTensor {
        bits_to_image(&self.bits, self.height, self.width)
    }

    /// Zeroes every off-grid pixel of `img`.
    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor> {
        self.check_image(img)?;
        Ok(apply_bits(&self.bits, img))
    }

    pub fn check_image(&self, img: &ImageTensor) -> Result<()> {
        if img.height() != self.height || img.width() != self.width {
            return Err(DpiError::shape(
                MODULE,
                format!(
                    "image {}x{} vs mask {}x{}",
                    img.height(),
                    img.width(),
                    self.height,
                    self.width
                ),
            ));
        }
        Ok(())
    }
}

pub fn make_fixed_mask(height: usize, width: usize, k: usize) -> Result<FixedMask> {
    if k == 0 {
        return Err(DpiError::param(MODULE, "stride k must be >= 1"));
    }
    if height == 0 || width == 0 {
        return Err(DpiError::param(MODULE, "mask dimensions must be >= 1"));
    }
    if height % k != 0 || width % k != 0 {
        return Err(DpiError::param(MODULE, format!("k = {k} must divide {height}x{width}")));
    }
    let bits = (0..height * width).map(|p| (p / width) % k == 0 && (p % width) % k == 0).collect();
    Ok(FixedMask { height, width, k, bits })
}

/// Per-step random subset of the fixed grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptiveMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl AdaptiveMask {
    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(DpiError::shape(MODULE, "mask bit count does not match dimensions"));
        }
        Ok(AdaptiveMask { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.width + j]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn to_image(&self) -> ImageTensor {
        bits_to_image(&self.bits, self.height, self.width)
    }

    pub fn is_subset_of(&self, fm: &FixedMask) -> bool {
        self.height == fm.height
            && self.width == fm.width
            && self.bits.iter().zip(&fm.bits).all(|(a, f)| !*a || *f)
    }
}

fn bits_to_image(bits: &[bool], h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_vec(h, w, 1, bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect())
        .expect("consistent mask dimensions")
}

fn apply_bits(bits: &[bool], img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    for c in 0..img.channels() {
        for (v, b) in out.plane_mut(c).iter_mut().zip(bits) {
            if !*b {
                *v = 0.0;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionRole {
    Initial,
    /// Intermediate condition after the corrector at timestep `t`.
    Intermediate(usize),
}

/// Full-resolution condition image supported on the fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub values: ImageTensor,
    pub role: ConditionRole,
}

impl Condition {
    pub fn intermediate(values: ImageTensor, t: usize) -> Self {
        Condition { values, role: ConditionRole::Intermediate(t) }
    }
}

/// Places `I_L^bc(i, j)` at grid position `(k i, k j)`; zero elsewhere.
pub fn project_initial_condition(base: &ImageTensor, fm: &FixedMask) -> Result<Condition> {
    let (gh, gw) = fm.grid_shape();
    if base.height() != gh || base.width() != gw {
        return Err(DpiError::shape(
            MODULE,
            format!("base condition {}x{} vs grid {gh}x{gw}", base.height(), base.width()),
        ));
    }
    let k = fm.stride();
    let mut values = ImageTensor::zeros(fm.height(), fm.width(), base.channels());
    for c in 0..base.channels() {
        for i in 0..gh {
            for j in 0..gw {
                values.set(k * i, k * j, c, base.get(i, j, c));
            }
        }
    }
    Ok(Condition { values, role: ConditionRole::Initial })
}

/// Reads grid positions back: `y_b(i, j) = y(k i, k j)`.
pub fn backtrack(y: &ImageTensor, k: usize) -> Result<ImageTensor> {
    if k == 0 || y.height() % k != 0 || y.width() % k != 0 {
        return Err(DpiError::param(MODULE, format!("k = {k} must divide {}x{}", y.height(), y.width())));
    }
    let (gh, gw) = (y.height() / k, y.width() / k);
    Ok(ImageTensor::from_fn(gh, gw, y.channels(), |i, j, c| y.get(k * i, k * j, c)))
}

/// Grid-resolution map of per-position acceptance probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub p: Vec<f64>,
}

impl ProbabilityMap {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.width + j]
    }

    pub fn to_image(&self) -> ImageTensor {
        ImageTensor::from_vec(self.height, self.width, 1, self.p.clone()).expect("consistent map")
    }
}

/// Absolute response of the four-neighbour Laplacian (centre -4) on luminance,
/// replicate padding at the border.
pub fn laplacian_magnitude(img: &ImageTensor) -> ImageTensor {
    let lum = img.luminance();
    let (h, w) = (lum.height(), lum.width());
    let at = |i: isize, j: isize| {
        let ii = i.clamp(0, h as isize - 1) as usize;
        let jj = j.clamp(0, w as isize - 1) as usize;
        lum.get(ii, jj, 0)
    };
    ImageTensor::from_fn(h, w, 1, |i, j, _| {
        let (i, j) = (i as isize, j as isize);
        (at(i - 1, j) + at(i + 1, j) + at(i, j - 1) + at(i, j + 1) - 4.0 * at(i, j)).abs()
    })
}

/// Min-max normalised Laplacian magnitude. A flat response maps to all zeros.
pub fn edge_probability_map(y_b: &ImageTensor) -> ProbabilityMap {
    let lap = laplacian_magnitude(y_b);
    let (lo, hi) = lap.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let p = if hi > lo {
        lap.data().iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; lap.len()]
    };
    ProbabilityMap { height: lap.height(), width: lap.width(), p }
}

/// Bernoulli draw of `p^s` at every grid position.
///
/// Exactly one uniform is consumed per grid position in row-major order, so
/// masks drawn from equal streams with different `s` are nested.
pub fn mask_from_probability<R: Rng + ?Sized>(
    p: &ProbabilityMap,
    fm: &FixedMask,
    s: f64,
    rng: &mut R,
) -> Result<AdaptiveMask> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(DpiError::param(MODULE, format!("exponent s must be > 0, got {s}")));
    }
    if (p.height, p.width) != fm.grid_shape() {
        return Err(DpiError::shape(MODULE, "probability map does not match the grid"));
    }
    let k = fm.stride();
    let mut bits = vec![false; fm.height() * fm.width()];
    for i in 0..p.height {
        for j in 0..p.width {
            let u: f64 = rng.random();
            if u < p.get(i, j).powf(s) {
                bits[(k * i) * fm.width() + k * j] = true;
            }
        }
    }
    AdaptiveMask::from_bits(fm.height(), fm.width(), bits)
}

/// `Mask_gen(y_t, s)`: backtrack, edge map, then Bernoulli(`p^s`) on the grid.
pub fn mask_gen<R: Rng + ?Sized>(y_t: &Condition, fm: &FixedMask, s: f64, rng: &mut R) -> Result<AdaptiveMask> {
    fm.check_image(&y_t.values)?;
    let y_b = backtrack(&y_t.values, fm.stride())?;
    mask_from_probability(&edge_probability_map(&y_b), fm, s, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Domain, RngStreams};
    use proptest::prelude::*;

    fn ones_at(fm: &FixedMask) -> Vec<(usize, usize)> {
        let mut v = vec![];
        for i in 0..fm.height() {
            for j in 0..fm.width() {
                if fm.get(i, j) {
                    v.push((i, j));
                }
            }
        }
        v
    }

    #[test]
    fn fixed_mask_examples() {
        let fm = make_fixed_mask(4, 4, 2).unwrap();
        assert_eq!(ones_at(&fm), vec![(0, 0), (0, 2), (2, 0), (2, 2)]);
        assert_eq!(make_fixed_mask(5, 3, 1).unwrap().popcount(), 15);
        let fm = make_fixed_mask(6, 6, 3).unwrap();
        let expected: Vec<_> = (0..6).flat_map(|i| (0..6).map(move |j| (i, j))).filter(|(i, j)| i % 3 == 0 && j % 3 == 0).collect();
        assert_eq!(ones_at(&fm), expected);
        assert_eq!(fm.popcount(), 4);
        assert!(make_fixed_mask(5, 4, 2).is_err());
        assert!(make_fixed_mask(4, 4, 0).is_err());
    }

    #[test]
    fn projection_example_and_identity() {
        let fm = make_fixed_mask(4, 4, 2).unwrap();
        let base = ImageTensor::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = project_initial_condition(&base, &fm).unwrap();
        let mut expected = ImageTensor::zeros(4, 4, 1);
        expected.set(0, 0, 0, 1.0);
        expected.set(0, 2, 0, 2.0);
        expected.set(2, 0, 0, 3.0);
        expected.set(2, 2, 0, 4.0);
        assert_eq!(y.values, expected);
        assert_eq!(y.role, ConditionRole::Initial);
        assert_eq!(backtrack(&y.values, 2).unwrap(), base);

        let zero = project_initial_condition(&ImageTensor::zeros(2, 2, 1), &fm).unwrap();
        assert!(zero.values.data().iter().all(|v| *v == 0.0));

        let fm1 = make_fixed_mask(3, 3, 1).unwrap();
        let base = ImageTensor::from_fn(3, 3, 1, |i, j, _| (i * 3 + j) as f64 * 0.1);
        assert_eq!(project_initial_condition(&base, &fm1).unwrap().values, base);

        assert!(project_initial_condition(&ImageTensor::zeros(3, 2, 1), &fm).is_err());
    }

    #[test]
    fn backtrack_of_constant_grid() {
        let fm = make_fixed_mask(6, 6, 3).unwrap();
        let y = fm.apply(&ImageTensor::filled(6, 6, 1, 0.7)).unwrap();
        assert_eq!(backtrack(&y, 3).unwrap(), ImageTensor::filled(2, 2, 1, 0.7));
    }

    // Independent brute-force oracle: explicit padded array, explicit kernel.
    fn brute_laplacian(img: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h = img.len();
        let w = img[0].len();
        let mut padded = vec![vec![0.0; w + 2]; h + 2];
        for pi in 0..h + 2 {
            for pj in 0..w + 2 {
                let si = pi.saturating_sub(1).min(h - 1);
                let sj = pj.saturating_sub(1).min(w - 1);
                padded[pi][pj] = img[si][sj];
            }
        }
        let kernel = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
        let mut out = vec![vec![0.0; w]; h];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (di, row) in kernel.iter().enumerate() {
                    for (dj, kv) in row.iter().enumerate() {
                        acc += kv * padded[i + di][j + dj];
                    }
                }
                out[i][j] = acc.abs();
            }
        }
        out
    }

    #[test]
    fn edge_map_constant_is_zero() {
        let p = edge_probability_map(&ImageTensor::filled(4, 5, 1, 0.3));
        assert!(p.p.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn edge_map_single_bright_pixel() {
        let mut img = ImageTensor::zeros(5, 5, 1);
        img.set(2, 2, 0, 1.0);
        let rows: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| img.get(i, j, 0)).collect()).collect();
        let lap = brute_laplacian(&rows);
        let max = lap.iter().flatten().cloned().fold(f64::MIN, f64::max);
        let min = lap.iter().flatten().cloned().fold(f64::MAX, f64::min);
        let p = edge_probability_map(&img);
        for i in 0..5 {
            for j in 0..5 {
                assert!((p.get(i, j) - (lap[i][j] - min) / (max - min)).abs() < 1e-15);
            }
        }
        assert_eq!(p.get(2, 2), 1.0);
        assert_eq!(p.get(0, 0), 0.0);
        assert_eq!(p.get(2, 1), 0.25);
    }

    #[test]
    fn edge_map_linear_ramp() {
        let img = ImageTensor::from_fn(4, 6, 1, |_, j, _| 0.1 * j as f64);
        let rows: Vec<Vec<f64>> = (0..4).map(|i| (0..6).map(|j| img.get(i, j, 0)).collect()).collect();
        let lap = brute_laplacian(&rows);
        let got = laplacian_magnitude(&img);
        for i in 0..4 {
            for j in 0..6 {
                assert!((got.get(i, j, 0) - lap[i][j]).abs() < 1e-12);
            }
            for j in 1..5 {
                assert!(got.get(i, j, 0) < 1e-12);
            }
        }
        let p = edge_probability_map(&img);
        assert!((p.get(0, 0) - 1.0).abs() < 1e-12 && (p.get(3, 5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn edge_map_uses_luminance() {
        let rgb = ImageTensor::from_fn(3, 3, 3, |i, j, c| if i == 1 && j == 1 { [1.0, 0.5, 0.0][c] } else { 0.0 });
        assert_eq!(edge_probability_map(&rgb), edge_probability_map(&rgb.luminance()));
    }

    fn condition_with_p(fm: &FixedMask, value: impl Fn(usize, usize) -> f64) -> Condition {
        let (gh, gw) = fm.grid_shape();
        let base = ImageTensor::from_fn(gh, gw, 1, |i, j, _| value(i, j));
        project_initial_condition(&base, fm).unwrap()
    }

    #[test]
    fn mask_gen_extremes() {
        let fm = make_fixed_mask(8, 8, 2).unwrap();
        let streams = RngStreams::new(3);
        let p1 = ProbabilityMap { height: 4, width: 4, p: vec![1.0; 16] };
        let p0 = ProbabilityMap { height: 4, width: 4, p: vec![0.0; 16] };
        for s in [0.5, 1.0, 3.0] {
            let m = mask_from_probability(&p1, &fm, s, &mut streams.stream(Domain::AdaptiveMask, 1)).unwrap();
            assert_eq!(m.bits(), fm.bits());
            let m = mask_from_probability(&p0, &fm, s, &mut streams.stream(Domain::AdaptiveMask, 1)).unwrap();
            assert_eq!(m.popcount(), 0);
        }
        assert!(mask_from_probability(&p1, &fm, 0.0, &mut streams.stream(Domain::AdaptiveMask, 1)).is_err());
        // Constant condition has no edges: nothing kept.
        let flat = condition_with_p(&fm, |_, _| 0.2);
        assert_eq!(mask_gen(&flat, &fm, 1.0, &mut streams.stream(Domain::AdaptiveMask, 2)).unwrap().popcount(), 0);
    }

    #[test]
    fn mask_gen_bernoulli_rate() {
        let fm = make_fixed_mask(200, 200, 2).unwrap();
        let p = ProbabilityMap { height: 100, width: 100, p: vec![0.5; 10_000] };
        let m = mask_from_probability(&p, &fm, 2.0, &mut RngStreams::new(11).stream(Domain::AdaptiveMask, 0)).unwrap();
        let frac = m.popcount() as f64 / 10_000.0;
        assert!((frac - 0.25).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn mask_gen_monotone_in_s() {
        let fm = make_fixed_mask(16, 16, 2).unwrap();
        let y = condition_with_p(&fm, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.6);
        let mut means = vec![];
        for s in [1.0, 1.2, 1.4, 1.8] {
            let total: usize = (0..1000)
                .map(|seed| mask_gen(&y, &fm, s, &mut RngStreams::new(seed).stream(Domain::AdaptiveMask, 5)).unwrap().popcount())
                .sum();
            means.push(total as f64 / 1000.0);
        }
        assert!(means.windows(2).all(|w| w[1] <= w[0]), "{means:?}");
        assert!(means[3] < means[0]);
    }

    proptest! {
        #[test]
        fn popcount_formula(hk in 1usize..8, wk in 1usize..8, k in 1usize..5) {
            let fm = make_fixed_mask(hk * k, wk * k, k).unwrap();
            prop_assert_eq!(fm.popcount(), hk * wk);
        }

        #[test]
        fn adaptive_within_fixed_and_deterministic(seed in 0u64..10_000, s in 0.2f64..3.0) {
            let fm = make_fixed_mask(8, 12, 2).unwrap();
            let y = condition_with_p(&fm, |i, j| ((i * 13 + j * 5 + seed as usize) % 7) as f64 / 7.0);
            let streams = RngStreams::new(seed);
            let a = mask_gen(&y, &fm, s, &mut streams.stream(Domain::AdaptiveMask, 9)).unwrap();
            let b = mask_gen(&y, &fm, s, &mut streams.stream(Domain::AdaptiveMask, 9)).unwrap();
            prop_assert!(a.is_subset_of(&fm));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn backtrack_inverts_projection(vals in proptest::collection::vec(-1.0f64..1.0, 12), k in 1usize..4) {
            let fm = make_fixed_mask(3 * k, 4 * k, k).unwrap();
            let base = ImageTensor::from_vec(3, 4, 1, vals).unwrap();
            let y = project_initial_condition(&base, &fm).unwrap();
            prop_assert_eq!(backtrack(&y.values, k).unwrap(), base);
        }
    }
}
