//! Keypoint descriptors and mutual ratio-test matching.

use std::f64::consts::TAU;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::Keypoint;
use crate::error::{Error, Result};
use crate::imgio::GrayImage;
use crate::scalespace::{EvolutionLevel, ScaleSpace};

pub const FLOAT_DESCRIPTOR_LEN: usize = 64;
pub const BINARY_DESCRIPTOR_BITS: usize = 256;
pub const DEFAULT_RATIO: f64 = 0.8;
/// Binary descriptors need this many sigmas of clearance from the border.
pub const BINARY_BORDER: f64 = 16.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatDescriptor {
    values: Vec<f64>,
}

impl FloatDescriptor {
    /// Normalizes `values`; the zero vector becomes `e0`.
    pub fn from_raw(mut values: Vec<f64>) -> Result<Self> {
        if values.len() != FLOAT_DESCRIPTOR_LEN {
            return Err(Error::InvalidParameter(format!(
                "float descriptor needs {FLOAT_DESCRIPTOR_LEN} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "non-finite descriptor value".into(),
            ));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-15 {
            values.iter_mut().for_each(|v| *v = 0.0);
            values[0] = 1.0;
        } else {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryDescriptor {
    pub bits: [u64; 4],
}

impl BinaryDescriptor {
    pub const ZERO: Self = Self { bits: [0; 4] };

    pub fn bit(&self, i: usize) -> bool {
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, v: bool) {
        let mask = 1u64 << (i % 64);
        if v {
            self.bits[i / 64] |= mask;
        } else {
            self.bits[i / 64] &= !mask;
        }
    }

    pub fn hamming(&self, other: &Self) -> u32 {
        self.bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }
}

/// A homogeneous descriptor list.
#[derive(Debug, Clone, PartialEq)]
pub enum Descriptors {
    Float(Vec<FloatDescriptor>),
    Binary(Vec<BinaryDescriptor>),
}

impl Descriptors {
    pub fn len(&self) -> usize {
        match self {
            Descriptors::Float(v) => v.len(),
            Descriptors::Binary(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub query: usize,
    pub train: usize,
    pub distance: f64,
    /// Best over second-best distance; 0 without a second neighbor.
    pub ratio: f64,
}

fn gaussian(dx: f64, dy: f64, s: f64) -> f64 {
    (-(dx * dx + dy * dy) / (2.0 * s * s)).exp()
}

const SUBREGION_CENTERS: [f64; 4] = [-7.5, -2.5, 2.5, 7.5];

/// M-SURF style descriptor from the first derivatives of one level.
pub fn float_descriptor_on_level(kp: &Keypoint, level: &EvolutionLevel) -> Result<FloatDescriptor> {
    let ds = level.downscale() as f64;
    let s = kp.sigma / ds;
    let (cx, cy) = (kp.x / ds, kp.y / ds);
    let (w, h) = (level.width() as f64, level.height() as f64);
    let reach = 12.0 * s * std::f64::consts::SQRT_2;
    if cx + reach < 0.0 || cy + reach < 0.0 || cx - reach > w - 1.0 || cy - reach > h - 1.0 {
        return Err(Error::NearBorder);
    }
    let (sin, cos) = kp.orientation.sin_cos();
    let mut out = Vec::with_capacity(FLOAT_DESCRIPTOR_LEN);
    for (gy, &sy) in SUBREGION_CENTERS.iter().enumerate() {
        for (gx, &sx) in SUBREGION_CENTERS.iter().enumerate() {
            let (mut dx, mut dy, mut adx, mut ady) = (0.0, 0.0, 0.0, 0.0);
            for j in -4..=4 {
                for i in -4..=4 {
                    let (u, v) = (sx + i as f64, sy + j as f64);
                    let px = cx + s * (u * cos - v * sin);
                    let py = cy + s * (u * sin + v * cos);
                    let wgt = gaussian(i as f64, j as f64, 2.5);
                    let lx = level.lx().bilinear_clamped(px, py);
                    let ly = level.ly().bilinear_clamped(px, py);
                    let ru = wgt * (lx * cos + ly * sin);
                    let rv = wgt * (-lx * sin + ly * cos);
                    dx += ru;
                    dy += rv;
                    adx += ru.abs();
                    ady += rv.abs();
                }
            }
            let outer = gaussian(gx as f64 - 1.5, gy as f64 - 1.5, 1.5);
            out.extend([dx * outer, dy * outer, adx * outer, ady * outer]);
        }
    }
    FloatDescriptor::from_raw(out)
}

pub fn float_descriptor<S: ScaleSpace + ?Sized>(
    kp: &Keypoint,
    space: &S,
) -> Result<FloatDescriptor> {
    let level = space.level(kp.level).ok_or_else(|| {
        Error::InvalidParameter(format!("keypoint level {} out of range", kp.level))
    })?;
    float_descriptor_on_level(kp, level)
}

/// Sample point of the concentric pattern: offset in sigma units and
/// smoothing sigma in sigma units.
#[derive(Debug, Clone, Copy)]
struct PatternPoint {
    x: f64,
    y: f64,
    smoothing: f64,
}

/// Sample points and the compared index pairs.
type Pattern = (Vec<PatternPoint>, Vec<(usize, usize)>);

const RINGS: [(f64, usize); 4] = [(2.0, 6), (4.0, 10), (7.0, 12), (11.0, 14)];

fn pattern() -> &'static Pattern {
    static PATTERN: OnceLock<Pattern> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut pts = vec![PatternPoint {
            x: 0.0,
            y: 0.0,
            smoothing: 0.5,
        }];
        for (ring, &(r, n)) in RINGS.iter().enumerate() {
            // odd rings are staggered by half a step
            let phase = if ring % 2 == 1 { 0.5 } else { 0.0 };
            for k in 0..n {
                let a = TAU * (k as f64 + phase) / n as f64;
                pts.push(PatternPoint {
                    x: r * a.cos(),
                    y: r * a.sin(),
                    smoothing: 0.4 * r,
                });
            }
        }
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                pairs.push(((pts[i].x - pts[j].x).hypot(pts[i].y - pts[j].y), i, j));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let pairs = pairs
            .into_iter()
            .take(BINARY_DESCRIPTOR_BITS)
            .map(|(_, i, j)| (i, j))
            .collect();
        (pts, pairs)
    })
}

pub fn pattern_len() -> usize {
    pattern().0.len()
}

/// Gaussian-weighted mean around `(x, y)` of `img - reference`.
fn smoothed_sample(img: &GrayImage, x: f64, y: f64, s: f64, reference: f64) -> f64 {
    let f = img.as_field();
    let r = (3.0 * s).ceil().max(1.0) as isize;
    let (ix, iy) = (x.round() as isize, y.round() as isize);
    let (mut acc, mut wsum) = (0.0, 0.0);
    for py in iy - r..=iy + r {
        for px in ix - r..=ix + r {
            let wgt = gaussian(px as f64 - x, py as f64 - y, s);
            acc += wgt * (f.get_clamped(px, py) - reference);
            wsum += wgt;
        }
    }
    acc / wsum
}

/// 256-bit concentric-pattern descriptor; bit `k` is `I(p_i) > I(p_j)` for
/// the `k`-th shortest point pair.
pub fn binary_descriptor(kp: &Keypoint, img: &GrayImage) -> Result<BinaryDescriptor> {
    let margin = BINARY_BORDER * kp.sigma;
    let (w, h) = (img.width() as f64, img.height() as f64);
    if kp.x < margin || kp.y < margin || kp.x > w - 1.0 - margin || kp.y > h - 1.0 - margin {
        return Err(Error::NearBorder);
    }
    let (pts, pairs) = pattern();
    let (sin, cos) = kp.orientation.sin_cos();
    let reference = img.get(kp.x.round() as usize, kp.y.round() as usize);
    let values: Vec<f64> = pts
        .iter()
        .map(|p| {
            let (u, v) = (p.x * kp.sigma, p.y * kp.sigma);
            let x = kp.x + u * cos - v * sin;
            let y = kp.y + u * sin + v * cos;
            smoothed_sample(img, x, y, p.smoothing * kp.sigma, reference)
        })
        .collect();
    let mut d = BinaryDescriptor::ZERO;
    for (k, &(i, j)) in pairs.iter().enumerate() {
        d.set(k, values[i] > values[j]);
    }
    Ok(d)
}

type Neighbour = (usize, f64);

/// Best and second-best `(index, distance)`; ties keep the lower index.
fn two_nearest(n: usize, dist: impl Fn(usize) -> f64) -> (Option<Neighbour>, Option<Neighbour>) {
    let mut best: Option<(usize, f64)> = None;
    let mut second: Option<(usize, f64)> = None;
    for j in 0..n {
        let d = dist(j);
        match best {
            Some((_, bd)) if d >= bd => {
                if second.is_none_or(|(_, sd)| d < sd) {
                    second = Some((j, d));
                }
            }
            _ => {
                second = best;
                best = Some((j, d));
            }
        }
    }
    (best, second)
}

fn match_with(
    na: usize,
    nb: usize,
    ratio: f64,
    dist: impl Fn(usize, usize) -> f64 + Sync,
) -> Vec<Match> {
    let back: Vec<Option<usize>> = (0..nb)
        .into_par_iter()
        .map(|j| two_nearest(na, |i| dist(i, j)).0.map(|b| b.0))
        .collect();
    (0..na)
        .into_par_iter()
        .filter_map(|i| {
            let (best, second) = two_nearest(nb, |j| dist(i, j));
            let (train, d1) = best?;
            let r = match second {
                None => 0.0,
                Some((_, d2)) if d2 > 0.0 => d1 / d2,
                Some(_) => 1.0,
            };
            if second.is_some() && !(r < ratio) {
                return None;
            }
            if back[train] != Some(i) {
                return None;
            }
            Some(Match {
                query: i,
                train,
                distance: d1,
                ratio: r,
            })
        })
        .collect()
}

fn check_kinds(a: &Descriptors, b: &Descriptors) -> Result<()> {
    if b.is_empty() {
        return Err(Error::Empty("train descriptors"));
    }
    match (a, b) {
        (Descriptors::Float(_), Descriptors::Float(_))
        | (Descriptors::Binary(_), Descriptors::Binary(_)) => Ok(()),
        _ => Err(Error::KindMismatch),
    }
}

fn run_matching(a: &Descriptors, b: &Descriptors, ratio: f64) -> Vec<Match> {
    match (a, b) {
        (Descriptors::Float(a), Descriptors::Float(b)) => {
            match_with(a.len(), b.len(), ratio, |i, j| a[i].distance(&b[j]))
        }
        (Descriptors::Binary(a), Descriptors::Binary(b)) => {
            match_with(a.len(), b.len(), ratio, |i, j| a[i].hamming(&b[j]) as f64)
        }
        _ => unreachable!("kinds checked"),
    }
}

/// Mutual nearest neighbors passing the ratio test, ordered by query index.
pub fn match_descriptors(a: &Descriptors, b: &Descriptors, ratio: f64) -> Result<Vec<Match>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "ratio must be in (0, 1], got {ratio}"
        )));
    }
    check_kinds(a, b)?;
    Ok(run_matching(a, b, ratio))
}

/// Mutual nearest neighbors without the ratio test.
pub fn mutual_matches(a: &Descriptors, b: &Descriptors) -> Result<Vec<Match>> {
    check_kinds(a, b)?;
    Ok(run_matching(a, b, f64::INFINITY))
}

/// The subset of `matches` that passes the ratio test.
pub fn ratio_filter(matches: &[Match], ratio: f64) -> Vec<Match> {
    matches
        .iter()
        .copied()
        .filter(|m| m.ratio < ratio)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::DetectorKind;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kp(x: f64, y: f64, sigma: f64, orientation: f64) -> Keypoint {
        Keypoint {
            x,
            y,
            sigma,
            level: 0,
            response: 1.0,
            orientation,
            detector: DetectorKind::NonlinearHessian,
        }
    }

    fn texture(scale: f64) -> impl Fn(usize, usize) -> f64 {
        move |x, y| {
            let (u, v) = (x as f64 / scale, y as f64 / scale);
            0.5 + 0.2 * (0.37 * u + 0.11 * v).sin() * (0.23 * v - 0.05 * u).cos()
                + 0.15 * (0.61 * u * 0.5 + 0.29 * v).sin()
        }
    }

    #[test]
    fn pattern_shape() {
        let (pts, pairs) = pattern();
        assert_eq!(pts.len(), 43);
        assert_eq!(pairs.len(), 256);
        assert!(pairs.iter().all(|&(i, j)| i < j && j < 43));
    }

    #[test]
    fn flat_patch_descriptors() {
        let img = GrayImage::filled(80, 80, 0.4);
        let lvl = EvolutionLevel::new(img.clone(), 2.0, 0, 0, 1);
        let d = float_descriptor_on_level(&kp(40.0, 40.0, 2.0, 0.3), &lvl).unwrap();
        assert_eq!(d.values()[0], 1.0);
        assert!(d.values()[1..].iter().all(|&v| v == 0.0));
        let b = binary_descriptor(&kp(40.0, 40.0, 1.0, 0.3), &img).unwrap();
        assert_eq!(b, BinaryDescriptor::ZERO);
    }

    #[test]
    fn determinism_and_unit_norm() {
        let img = GrayImage::from_fn(96, 96, texture(1.0));
        let lvl = EvolutionLevel::new(img.clone(), 2.0, 0, 0, 1);
        let k = kp(48.0, 48.0, 2.0, 1.0);
        let a = float_descriptor_on_level(&k, &lvl).unwrap();
        let b = float_descriptor_on_level(&k, &lvl).unwrap();
        assert_eq!(a.distance(&b), 0.0);
        let n: f64 = a.values().iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-6);
        let k1 = kp(48.0, 48.0, 1.0, 1.0);
        assert_eq!(
            binary_descriptor(&k1, &img)
                .unwrap()
                .hamming(&binary_descriptor(&k1, &img).unwrap()),
            0
        );
    }

    #[test]
    fn binary_offset_invariance_brute_force() {
        let img = GrayImage::from_fn(64, 64, |x, y| 0.8 * texture(0.7)(x, y));
        let shifted = GrayImage::from_fn(64, 64, |x, y| img.get(x, y) + 0.1);
        for (x, y) in [(32.0, 32.0), (20.0, 40.0), (41.0, 25.0)] {
            let k = kp(x, y, 1.0, 0.7);
            let a = binary_descriptor(&k, &img).unwrap();
            let b = binary_descriptor(&k, &shifted).unwrap();
            assert_eq!(a.hamming(&b), 0);
        }
    }

    #[test]
    fn border_and_range_errors() {
        let img = GrayImage::filled(64, 64, 0.5);
        assert!(matches!(
            binary_descriptor(&kp(10.0, 32.0, 1.0, 0.0), &img),
            Err(Error::NearBorder)
        ));
        assert!(binary_descriptor(&kp(16.0, 47.0, 1.0, 0.0), &img).is_ok());
        let lvl = EvolutionLevel::new(img, 2.0, 0, 0, 1);
        assert!(matches!(
            float_descriptor_on_level(&kp(-500.0, 32.0, 2.0, 0.0), &lvl),
            Err(Error::NearBorder)
        ));
    }

    #[test]
    fn rescaled_patch_is_closer_than_random() {
        // The same continuous texture rendered at scale 1 and 2.
        let small = GrayImage::from_fn(128, 128, texture(1.0));
        let large = GrayImage::from_fn(256, 256, texture(2.0));
        let ls = EvolutionLevel::new(small.clone(), 2.0, 0, 0, 1);
        let ll = EvolutionLevel::new(large, 4.0, 0, 0, 1);
        let d_small = float_descriptor_on_level(&kp(64.0, 64.0, 2.0, 0.4), &ls).unwrap();
        let d_large = float_descriptor_on_level(&kp(128.0, 128.0, 4.0, 0.4), &ll).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = GrayImage::from_fn(128, 128, |_, _| rng.random_range(0.0..1.0));
        let ln = EvolutionLevel::new(noise, 2.0, 0, 0, 1);
        let d_rand = float_descriptor_on_level(&kp(64.0, 64.0, 2.0, 0.4), &ln).unwrap();
        let near = d_small.distance(&d_large);
        assert!(near < d_small.distance(&d_rand), "{near}");
        assert!(near < 0.3, "{near}");
    }

    fn random_float(rng: &mut ChaCha8Rng) -> FloatDescriptor {
        FloatDescriptor::from_raw((0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matching_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let one = Descriptors::Float(vec![random_float(&mut rng)]);
        let m = match_descriptors(&one, &one, DEFAULT_RATIO).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(
            (m[0].query, m[0].train, m[0].distance, m[0].ratio),
            (0, 0, 0.0, 0.0)
        );

        // e0 against e1..e3: all at distance sqrt 2
        let e = |k: usize| {
            let mut v = vec![0.0; 64];
            v[k] = 1.0;
            FloatDescriptor::from_raw(v).unwrap()
        };
        let a = Descriptors::Float(vec![e(0)]);
        let b = Descriptors::Float(vec![e(1), e(2), e(3)]);
        assert!(match_descriptors(&a, &b, DEFAULT_RATIO).unwrap().is_empty());

        let originals: Vec<FloatDescriptor> = (0..10).map(|_| random_float(&mut rng)).collect();
        let mut perm: Vec<usize> = (0..10).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<FloatDescriptor> = perm.iter().map(|&i| originals[i].clone()).collect();
        let m = match_descriptors(
            &Descriptors::Float(originals.clone()),
            &Descriptors::Float(shuffled),
            DEFAULT_RATIO,
        )
        .unwrap();
        assert_eq!(m.len(), 10);
        for mm in &m {
            assert_eq!(perm[mm.train], mm.query);
        }
    }

    #[test]
    fn matching_errors() {
        let f = Descriptors::Float(vec![FloatDescriptor::from_raw(vec![1.0; 64]).unwrap()]);
        let b = Descriptors::Binary(vec![BinaryDescriptor::ZERO]);
        assert!(matches!(
            match_descriptors(&f, &b, 0.8),
            Err(Error::KindMismatch)
        ));
        assert!(matches!(
            match_descriptors(&f, &Descriptors::Float(vec![]), 0.8),
            Err(Error::Empty(_))
        ));
        assert!(FloatDescriptor::from_raw(vec![1.0; 3]).is_err());
    }

    #[test]
    fn binary_matching_tie_breaks_low_index() {
        let mut d = BinaryDescriptor::ZERO;
        d.set(5, true);
        let a = Descriptors::Binary(vec![d]);
        let b = Descriptors::Binary(vec![d, d]);
        // equal best distances: ratio 1 rejects
        assert!(match_descriptors(&a, &b, 0.8).unwrap().is_empty());
        let (best, second) = two_nearest(3, |j| [2.0, 1.0, 1.0][j]);
        assert_eq!(best, Some((1, 1.0)));
        assert_eq!(second, Some((2, 1.0)));
    }

    proptest! {
        #[test]
        fn self_matching_is_identity(seed in any::<u64>(), n in 2usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds: Vec<BinaryDescriptor> = (0..n)
                .map(|_| BinaryDescriptor { bits: [rng.random(), rng.random(), rng.random(), rng.random()] })
                .collect();
            let a = Descriptors::Binary(ds);
            let m = match_descriptors(&a, &a, DEFAULT_RATIO).unwrap();
            prop_assert_eq!(m.len(), n);
            for (i, mm) in m.iter().enumerate() {
                prop_assert_eq!((mm.query, mm.train), (i, i));
                prop_assert!(mm.ratio >= 0.0 && mm.ratio <= 1.0);
            }
        }

        #[test]
        fn matches_independent_of_train_order(seed in any::<u64>(), n in 2usize..15) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<FloatDescriptor> = (0..n).map(|_| random_float(&mut rng)).collect();
            let b: Vec<FloatDescriptor> = (0..n + 3).map(|_| random_float(&mut rng)).collect();
            let mut perm: Vec<usize> = (0..b.len()).collect();
            perm.shuffle(&mut rng);
            let pb: Vec<FloatDescriptor> = perm.iter().map(|&i| b[i].clone()).collect();
            let m1 = match_descriptors(&Descriptors::Float(a.clone()), &Descriptors::Float(b), 0.9).unwrap();
            let m2 = match_descriptors(&Descriptors::Float(a), &Descriptors::Float(pb), 0.9).unwrap();
            let p1: Vec<(usize, usize)> = m1.iter().map(|m| (m.query, m.train)).collect();
            let p2: Vec<(usize, usize)> = m2.iter().map(|m| (m.query, perm[m.train])).collect();
            prop_assert_eq!(p1, p2);
        }
    }
}
