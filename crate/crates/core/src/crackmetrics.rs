//! Perspective correction and crack morphometry.
//!
//! A crack is segmented as the largest dark component, thinned to a 1-px
//! spine, and measured as area (pixel count), spine length (weighted path
//! length of the spine's spanning tree) and average width (mean of
//! `2 * EDT - 1` along the spine).

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homography::Homography;
use crate::imgio::{save_rgb, to_u8, Field, GrayImage};

/// Preimage tolerance when deciding whether a warped pixel is mapped.
const VALID_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} bits for {width}x{height}",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Out-of-range coordinates read as `false`.
    #[inline]
    pub fn get_or_false(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.get(x as usize, y as usize)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a && b)
                .collect(),
        }
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            if self.get(x, y) {
                1.0
            } else {
                0.0
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrackMetrics {
    pub area: usize,
    pub spine_length: f64,
    pub avg_width: f64,
}

impl CrackMetrics {
    pub const ZERO: CrackMetrics = CrackMetrics {
        area: 0,
        spine_length: 0.0,
        avg_width: 0.0,
    };

    /// Area divided by spine length; reported as a diagnostic only.
    pub fn area_over_length(&self) -> Option<f64> {
        (self.spine_length > 0.0).then(|| self.area as f64 / self.spine_length)
    }
}

/// Percent errors against a baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricErrors {
    pub area_err: f64,
    pub length_err: f64,
    pub width_err: f64,
}

/// Inverse-map `img` through `h` onto an `out_w x out_h` canvas.
///
/// Output pixel `q` takes `img(h^-1 q)`; the mask marks pixels whose
/// preimage falls inside `img`.
pub fn warp_image(
    img: &GrayImage,
    h: &Homography,
    out_w: usize,
    out_h: usize,
) -> Result<(GrayImage, BinaryMask)> {
    let inv = h.invert()?;
    let field = img.as_field();
    let (wmax, hmax) = ((img.width() - 1) as f64, (img.height() - 1) as f64);
    let mut data = Vec::with_capacity(out_w * out_h);
    let mut bits = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        for x in 0..out_w {
            let sample = inv.apply([x as f64, y as f64]).ok().and_then(|[px, py]| {
                let inside = px >= -VALID_EPS
                    && py >= -VALID_EPS
                    && px <= wmax + VALID_EPS
                    && py <= hmax + VALID_EPS;
                inside.then(|| field.bilinear_clamped(px, py))
            });
            data.push(sample.unwrap_or(0.0));
            bits.push(sample.is_some());
        }
    }
    let out = GrayImage::from_field_clamped(Field::new(out_w, out_h, data)?);
    Ok((out, BinaryMask::new(out_w, out_h, bits)?))
}

/// Otsu threshold over an 8-bit histogram. Returns the largest level that
/// belongs to the dark class, or `None` when fewer than two levels occur.
/// Ties between equally good splits resolve to the middle of the plateau.
pub fn otsu_threshold(hist: &[u64; 256]) -> Option<u8> {
    let total: u64 = hist.iter().sum();
    if hist.iter().filter(|&&n| n > 0).count() < 2 {
        return None;
    }
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &n)| i as f64 * n as f64)
        .sum();
    let (mut w0, mut sum0) = (0u64, 0.0);
    let mut best = f64::NEG_INFINITY;
    let (mut first, mut last) = (0usize, 0usize);
    for (t, &n) in hist.iter().enumerate().take(255) {
        w0 += n;
        sum0 += t as f64 * n as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 / w0 as f64;
        let m1 = (sum_all - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (m0 - m1) * (m0 - m1);
        // relative tolerance keeps floating noise from splitting a plateau
        if between > best * (1.0 + 1e-12) {
            best = between;
            first = t;
            last = t;
        } else if between >= best * (1.0 - 1e-12) {
            last = t;
        }
    }
    Some(((first + last) / 2) as u8)
}

/// Segment the crack: dark Otsu class, opening (reconstruction from a 3x3
/// cross erosion), then the largest 8-connected component.
pub fn segment_crack(img: &GrayImage) -> BinaryMask {
    segment_crack_within(img, None)
}

/// Like [`segment_crack`], restricted to pixels where `valid` is set.
pub fn segment_crack_within(img: &GrayImage, valid: Option<&BinaryMask>) -> BinaryMask {
    let (w, h) = (img.width(), img.height());
    let is_valid = |x: usize, y: usize| valid.is_none_or(|m| m.get(x, y));
    let mut hist = [0u64; 256];
    for y in 0..h {
        for x in 0..w {
            if is_valid(x, y) {
                hist[to_u8(img.get(x, y)) as usize] += 1;
            }
        }
    }
    let Some(t) = otsu_threshold(&hist) else {
        return BinaryMask::empty(w, h);
    };
    let dark = BinaryMask::from_fn(w, h, |x, y| is_valid(x, y) && to_u8(img.get(x, y)) <= t);
    largest_component(&open_by_reconstruction(&dark))
}

const CROSS: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
const RING: [(isize, isize); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

/// Erode with a 3x3 cross (outside the image counts as set), then rebuild
/// every 4-connected region that kept at least one seed.
pub fn open_by_reconstruction(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let outside = |x: isize, y: isize| x < 0 || y < 0 || x >= w as isize || y >= h as isize;
    let mut out = BinaryMask::empty(w, h);
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let (xi, yi) = (x as isize, y as isize);
            let survives = CROSS.iter().all(|&(dx, dy)| {
                let (nx, ny) = (xi + dx, yi + dy);
                outside(nx, ny) || mask.get(nx as usize, ny as usize)
            });
            if survives {
                out.set(x, y, true);
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        for &(dx, dy) in &CROSS {
            let (nx, ny) = (x as isize + dx, y as isize + dy);
            if mask.get_or_false(nx, ny) && !out.get(nx as usize, ny as usize) {
                out.set(nx as usize, ny as usize, true);
                queue.push_back((nx as usize, ny as usize));
            }
        }
    }
    out
}

/// Largest 8-connected component; ties go to the component met first in
/// raster order.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![usize::MAX; w * h];
    let mut best: Option<(usize, usize)> = None;
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits[start] || label[start] != usize::MAX {
            continue;
        }
        let mut size = 0;
        label[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for &(dx, dy) in &RING {
                let (nx, ny) = (x + dx, y + dy);
                if mask.get_or_false(nx, ny) {
                    let j = ny as usize * w + nx as usize;
                    if label[j] == usize::MAX {
                        label[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((next, size));
        }
        next += 1;
    }
    match best {
        None => BinaryMask::empty(w, h),
        Some((id, _)) => BinaryMask {
            width: w,
            height: h,
            bits: label.iter().map(|&l| l == id).collect(),
        },
    }
}

/// Zhang–Suen thinning. Pixels outside the mask read as background.
pub fn skeletonize(mask: &BinaryMask) -> BinaryMask {
    let mut cur = mask.clone();
    let (w, h) = (mask.width, mask.height);
    let mut doomed = Vec::new();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            doomed.clear();
            for y in 0..h {
                for x in 0..w {
                    if !cur.get(x, y) {
                        continue;
                    }
                    let (xi, yi) = (x as isize, y as isize);
                    // p2..p9: N, NE, E, SE, S, SW, W, NW
                    let n: [bool; 8] = [
                        cur.get_or_false(xi, yi - 1),
                        cur.get_or_false(xi + 1, yi - 1),
                        cur.get_or_false(xi + 1, yi),
                        cur.get_or_false(xi + 1, yi + 1),
                        cur.get_or_false(xi, yi + 1),
                        cur.get_or_false(xi - 1, yi + 1),
                        cur.get_or_false(xi - 1, yi),
                        cur.get_or_false(xi - 1, yi - 1),
                    ];
                    let b = n.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let remove = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if remove {
                        doomed.push(y * w + x);
                    }
                }
            }
            for &i in &doomed {
                cur.bits[i] = false;
            }
            changed |= !doomed.is_empty();
        }
        if !changed {
            return cur;
        }
    }
}

/// Exact Euclidean distance from each set pixel to the nearest unset pixel;
/// everything outside the image counts as unset. Unset pixels get 0.
pub fn distance_transform(mask: &BinaryMask) -> Field {
    let (w, h) = (mask.width, mask.height);
    // Pad by one background pixel on every side.
    let (pw, ph) = (w + 2, h + 2);
    const INF: f64 = 1e20;
    let mut grid: Vec<f64> = (0..pw * ph)
        .map(|i| {
            let (x, y) = (i % pw, i / pw);
            let inside = x >= 1 && y >= 1 && x <= w && y <= h && mask.get(x - 1, y - 1);
            if inside {
                INF
            } else {
                0.0
            }
        })
        .collect();
    let mut line = Vec::new();
    let mut out = Vec::new();
    for x in 0..pw {
        line.clear();
        line.extend((0..ph).map(|y| grid[y * pw + x]));
        squared_edt_1d(&line, &mut out);
        for y in 0..ph {
            grid[y * pw + x] = out[y];
        }
    }
    for y in 0..ph {
        line.clear();
        line.extend_from_slice(&grid[y * pw..(y + 1) * pw]);
        squared_edt_1d(&line, &mut out);
        grid[y * pw..(y + 1) * pw].copy_from_slice(&out);
    }
    Field::from_fn(w, h, |x, y| grid[(y + 1) * pw + x + 1].sqrt())
}

/// Felzenszwalb–Huttenlocher lower envelope of parabolas.
fn squared_edt_1d(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, 0.0);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sq = |i: usize| (i * i) as f64;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Total weight of a minimum spanning forest over 8-adjacent skeleton
/// pixels: 1 per axial step, sqrt(2) per diagonal step.
pub fn spine_length(skeleton: &BinaryMask) -> f64 {
    let (w, h) = (skeleton.width, skeleton.height);
    let mut ds = DisjointSet::new(w * h);
    let mut axial = 0usize;
    let mut diagonal = 0usize;
    // Kruskal with two weight classes: all axial edges precede diagonals.
    for &(dx, dy, is_diag) in &[(1, 0, false), (0, 1, false), (1, 1, true), (-1, 1, true)] {
        for y in 0..h {
            for x in 0..w {
                if !skeleton.get(x, y) {
                    continue;
                }
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if skeleton.get_or_false(nx, ny)
                    && ds.union(y * w + x, ny as usize * w + nx as usize)
                {
                    if is_diag {
                        diagonal += 1;
                    } else {
                        axial += 1;
                    }
                }
            }
        }
    }
    axial as f64 + diagonal as f64 * std::f64::consts::SQRT_2
}

pub fn compute_metrics(mask: &BinaryMask) -> CrackMetrics {
    let area = mask.count();
    if area == 0 {
        return CrackMetrics::ZERO;
    }
    let skeleton = skeletonize(mask);
    let dist = distance_transform(mask);
    let widths: Vec<f64> = (0..mask.height)
        .flat_map(|y| (0..mask.width).map(move |x| (x, y)))
        .filter(|&(x, y)| skeleton.get(x, y))
        .map(|(x, y)| 2.0 * dist.get(x, y) - 1.0)
        .collect();
    let avg_width = if widths.is_empty() {
        0.0
    } else {
        widths.iter().sum::<f64>() / widths.len() as f64
    };
    CrackMetrics {
        area,
        spine_length: spine_length(&skeleton),
        avg_width,
    }
}

/// `100 * |corrected - baseline| / baseline` per metric.
pub fn metric_errors(corrected: &CrackMetrics, baseline: &CrackMetrics) -> Result<MetricErrors> {
    let pct = |c: f64, b: f64, name: &str| {
        if b > 0.0 {
            Ok(100.0 * (c - b).abs() / b)
        } else {
            Err(Error::InvalidParameter(format!("baseline {name} is zero")))
        }
    };
    Ok(MetricErrors {
        area_err: pct(corrected.area as f64, baseline.area as f64, "area")?,
        length_err: pct(
            corrected.spine_length,
            baseline.spine_length,
            "spine length",
        )?,
        width_err: pct(corrected.avg_width, baseline.avg_width, "average width")?,
    })
}

pub const OVERLAY_BASELINE: [u8; 3] = [255, 0, 0];
pub const OVERLAY_CORRECTED: [u8; 3] = [0, 0, 255];
pub const OVERLAY_BOTH: [u8; 3] = [128, 0, 128];
pub const OVERLAY_BACKGROUND: [u8; 3] = [255, 255, 255];

/// Baseline-only pixels red, corrected-only blue, both purple, rest white.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Overlay {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Overlay {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_rgb(self.width, self.height, self.rgb.clone(), path)
    }
}

pub fn render_overlay(baseline: &BinaryMask, corrected: &BinaryMask) -> Result<Overlay> {
    if baseline.width != corrected.width || baseline.height != corrected.height {
        return Err(Error::DimensionMismatch(format!(
            "baseline {}x{} vs corrected {}x{}",
            baseline.width, baseline.height, corrected.width, corrected.height
        )));
    }
    let rgb = baseline
        .bits
        .iter()
        .zip(&corrected.bits)
        .flat_map(|(&b, &c)| match (b, c) {
            (true, true) => OVERLAY_BOTH,
            (true, false) => OVERLAY_BASELINE,
            (false, true) => OVERLAY_CORRECTED,
            (false, false) => OVERLAY_BACKGROUND,
        })
        .collect();
    Ok(Overlay {
        width: baseline.width,
        height: baseline.height,
        rgb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bar(w: usize, h: usize, x0: usize, y0: usize, len: usize, thick: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| {
            x >= x0 && x < x0 + len && y >= y0 && y < y0 + thick
        })
    }

    fn bar_image(mask: &BinaryMask) -> GrayImage {
        GrayImage::from_fn(mask.width(), mask.height(), |x, y| {
            if mask.get(x, y) {
                0.0
            } else {
                1.0
            }
        })
    }

    #[test]
    fn warp_identity_and_translation() {
        let img = GrayImage::from_fn(100, 40, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        let (out, mask) = warp_image(&img, &Homography::IDENTITY, 100, 40).unwrap();
        assert_eq!(out, img);
        assert_eq!(mask.count(), 100 * 40);

        let (_, mask) = warp_image(&img, &Homography::translation(10.0, 0.0), 100, 40).unwrap();
        for y in 0..40 {
            for x in 0..100 {
                assert_eq!(mask.get(x, y), x >= 10, "({x},{y})");
            }
        }
    }

    #[test]
    fn warp_round_trip_interior() {
        let img = GrayImage::from_fn(120, 90, |x, y| {
            0.5 + 0.3 * ((x as f64) / 9.0).sin() * ((y as f64) / 7.0).cos()
        });
        let h =
            Homography::new([[1.02, 0.03, 2.5], [-0.01, 0.98, -1.5], [1e-4, -5e-5, 1.0]]).unwrap();
        let (fwd, _) = warp_image(&img, &h, 120, 90).unwrap();
        let (back, mask) = warp_image(&fwd, &h.invert().unwrap(), 120, 90).unwrap();
        for y in 10..80 {
            for x in 10..110 {
                assert!(mask.get(x, y));
                assert!((back.get(x, y) - img.get(x, y)).abs() <= 2.0 / 255.0);
            }
        }
    }

    #[test]
    fn segmentation_examples() {
        assert_eq!(segment_crack(&GrayImage::filled(50, 20, 1.0)).count(), 0);

        let mask = bar(420, 20, 10, 8, 400, 3);
        let img = bar_image(&mask);
        assert_eq!(segment_crack(&img), mask);

        let mut speck = img.clone().into_field();
        speck.set(3, 2, 0.0);
        let speck = GrayImage::from_field_clamped(speck);
        assert_eq!(segment_crack(&speck), mask);
    }

    #[test]
    fn otsu_splits_bimodal_plateau_in_middle() {
        let mut hist = [0u64; 256];
        hist[0] = 10;
        hist[255] = 90;
        assert_eq!(otsu_threshold(&hist), Some(127));
        hist[255] = 0;
        assert_eq!(otsu_threshold(&hist), None);
    }

    #[test]
    fn skeleton_examples() {
        let line = bar(30, 5, 2, 2, 20, 1);
        assert_eq!(skeletonize(&line), line);
        assert_eq!(skeletonize(&BinaryMask::empty(4, 4)).count(), 0);

        let b = bar(420, 9, 10, 3, 400, 3);
        let s = skeletonize(&b);
        assert!(s
            .bits()
            .iter()
            .enumerate()
            .all(|(i, &v)| !v || i / 420 == 4));
        assert!((s.count() as i64 - 398).abs() <= 2, "{}", s.count());
    }

    #[test]
    fn metrics_examples() {
        assert_eq!(
            compute_metrics(&BinaryMask::empty(5, 5)),
            CrackMetrics::ZERO
        );

        let m = compute_metrics(&bar(420, 9, 10, 3, 400, 3));
        assert_eq!(m.area, 1200);
        assert!((m.spine_length - 398.0).abs() <= 2.0);
        assert!((m.avg_width - 3.0).abs() <= 0.1);

        let diag = BinaryMask::from_fn(14, 14, |x, y| x == y && (2..12).contains(&x));
        let m = compute_metrics(&diag);
        assert_eq!(m.area, 10);
        assert!((m.spine_length - 9.0 * std::f64::consts::SQRT_2).abs() < 1e-12);
        assert!((m.avg_width - 1.0).abs() < 1e-12);
    }

    #[test]
    fn straight_segment_spine_is_exact() {
        for n in [1usize, 2, 7, 30] {
            let axial = bar(40, 3, 1, 1, n, 1);
            assert_eq!(spine_length(&axial), (n - 1) as f64);
            let diag = BinaryMask::from_fn(40, 40, |x, y| x == y && x < n);
            assert!(
                (spine_length(&diag) - (n - 1) as f64 * std::f64::consts::SQRT_2).abs() < 1e-12
            );
        }
    }

    #[test]
    fn odd_width_bars_measure_their_width() {
        for w in [1usize, 3, 5] {
            let m = compute_metrics(&bar(140, 20, 10, 5, 120, w));
            assert!(
                (m.avg_width - w as f64).abs() <= 0.1,
                "width {w}: {}",
                m.avg_width
            );
        }
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mask = BinaryMask::from_fn(17, 13, |x, y| (x * 5 + y * 3) % 7 != 0 && x > 0);
        let d = distance_transform(&mask);
        for y in 0..13 {
            for x in 0..17 {
                let expected = if !mask.get(x, y) {
                    0.0
                } else {
                    let mut best = f64::INFINITY;
                    for by in -1..=13isize {
                        for bx in -1..=17isize {
                            if !mask.get_or_false(bx, by) {
                                best = best.min(
                                    ((bx - x as isize) as f64).hypot((by - y as isize) as f64),
                                );
                            }
                        }
                    }
                    best
                };
                assert!((d.get(x, y) - expected).abs() < 1e-12, "({x},{y})");
            }
        }
    }

    #[test]
    fn metric_error_examples() {
        let base = CrackMetrics {
            area: 2422,
            spine_length: 768.0,
            avg_width: 3.2,
        };
        let sift = CrackMetrics { area: 2532, ..base };
        let e = metric_errors(&sift, &base).unwrap();
        assert!((e.area_err - 4.5417).abs() < 1e-3);
        assert_eq!(e.area_err.round(), 5.0);
        let kaze = CrackMetrics { area: 2367, ..base };
        let e = metric_errors(&kaze, &base).unwrap();
        assert!((e.area_err - 2.2708).abs() < 1e-3);
        assert_eq!(e.area_err.round(), 2.0);
        let e = metric_errors(&base, &base).unwrap();
        assert_eq!((e.area_err, e.length_err, e.width_err), (0.0, 0.0, 0.0));
        assert!(metric_errors(&base, &CrackMetrics::ZERO).is_err());
    }

    #[test]
    fn overlay_colors() {
        let a = bar(20, 10, 2, 4, 10, 2);
        let o = render_overlay(&a, &a).unwrap();
        assert_eq!(o.pixel(5, 4), OVERLAY_BOTH);
        assert_eq!(o.pixel(0, 0), OVERLAY_BACKGROUND);

        let b = bar(20, 10, 2, 0, 10, 2);
        let o = render_overlay(&a, &b).unwrap();
        assert_eq!(o.pixel(5, 4), OVERLAY_BASELINE);
        assert_eq!(o.pixel(5, 0), OVERLAY_CORRECTED);

        let shifted = bar(20, 10, 3, 4, 10, 2);
        let o = render_overlay(&a, &shifted).unwrap();
        for y in 0..10 {
            for x in 0..20 {
                let expected = match (a.get(x, y), shifted.get(x, y)) {
                    (true, true) => OVERLAY_BOTH,
                    (true, false) => OVERLAY_BASELINE,
                    (false, true) => OVERLAY_CORRECTED,
                    _ => OVERLAY_BACKGROUND,
                };
                assert_eq!(o.pixel(x, y), expected);
            }
        }
        assert_eq!(o.pixel(2, 4), OVERLAY_BASELINE);
        assert_eq!(o.pixel(12, 4), OVERLAY_CORRECTED);
        assert!(render_overlay(&a, &BinaryMask::empty(3, 3)).is_err());
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        (4usize..24, 4usize..24).prop_flat_map(|(w, h)| {
            proptest::collection::vec(proptest::bool::weighted(0.6), w * h)
                .prop_map(move |bits| BinaryMask::new(w, h, bits).unwrap())
        })
    }

    proptest! {
        #[test]
        fn skeleton_idempotent_subset(mask in arb_mask()) {
            let s = skeletonize(&mask);
            prop_assert!(s.is_subset_of(&mask));
            prop_assert_eq!(skeletonize(&s), s);
        }

        #[test]
        fn self_errors_are_zero(area in 1usize..10_000, len in 0.5f64..1e3, width in 0.5f64..50.0) {
            let m = CrackMetrics { area, spine_length: len, avg_width: width };
            let e = metric_errors(&m, &m).unwrap();
            prop_assert_eq!((e.area_err, e.length_err, e.width_err), (0.0, 0.0, 0.0));
        }
    }
}
