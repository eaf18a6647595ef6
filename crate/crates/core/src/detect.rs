//! Keypoint detection and orientation assignment.
//!
//! Three detectors share the [`Keypoint`] type:
//! scale-normalized Hessian determinant extrema on the nonlinear scale space,
//! difference-of-Gaussian extrema on the linear pyramid, and the FAST
//! segment test for the binary baseline.

use std::cmp::Ordering;
use std::f64::consts::{PI, TAU};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::imgio::{Field, GrayImage};
use crate::scalespace::{blur_field, EvolutionLevel, GaussianPyramid, NonlinearScaleSpace};

pub const DEFAULT_HESSIAN_THRESHOLD: f64 = 1e-4;
pub const DOG_CONTRAST_THRESHOLD: f64 = 0.03;
/// `|DoG|` must exceed half the contrast threshold.
pub const DEFAULT_DOG_THRESHOLD: f64 = 0.5 * DOG_CONTRAST_THRESHOLD;
pub const DEFAULT_FAST_THRESHOLD: f64 = 0.1;
pub const DEFAULT_FAST_ARC: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    NonlinearHessian,
    Dog,
    Fast,
}

impl DetectorKind {
    pub fn tag(&self) -> &'static str {
        match self {
            DetectorKind::NonlinearHessian => "nonlinear-hessian",
            DetectorKind::Dog => "dog",
            DetectorKind::Fast => "fast",
        }
    }
}

impl std::fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    /// Base-image coordinates, px.
    pub x: f64,
    pub y: f64,
    /// Base-image scale, px.
    pub sigma: f64,
    /// Flat index of the scale level the keypoint was found on.
    pub level: usize,
    pub response: f64,
    /// Radians in `[0, 2 pi)`.
    pub orientation: f64,
    pub detector: DetectorKind,
}

/// Canonical ordering: response descending, then `y`, then `x`.
pub fn canonical_order(a: &Keypoint, b: &Keypoint) -> Ordering {
    b.response
        .total_cmp(&a.response)
        .then(a.y.total_cmp(&b.y))
        .then(a.x.total_cmp(&b.x))
        .then(a.level.cmp(&b.level))
}

/// Scale-normalized Hessian determinant `sigma^4 (Lxx Lyy - Lxy^2)`, with
/// sigma in the level's own pixels.
pub fn hessian_response(level: &EvolutionLevel) -> Field {
    let s2 = level.local_sigma().powi(2);
    let norm = s2 * s2;
    let mut out = level.lxx().zip_map(level.lyy(), |a, b| a * b);
    for (o, &xy) in out.data_mut().iter_mut().zip(level.lxy().data()) {
        *o = norm * (*o - xy * xy);
    }
    out
}

/// One detector response plane.
#[derive(Debug, Clone)]
pub struct ResponseLayer {
    pub field: Field,
    /// Base pixels per layer pixel.
    pub downscale: usize,
    /// Base-image sigma of the layer.
    pub sigma: f64,
    /// Flat level index carried into keypoints.
    pub level: usize,
    /// Pixels within this distance of the border are never candidates.
    pub margin: usize,
}

/// Something extrema can be searched in: ordered groups of response layers.
/// Neighbors in scale are taken only within a group.
pub trait ResponseStack {
    fn kind(&self) -> DetectorKind;
    /// Whether minima (negative responses) also count.
    fn signed(&self) -> bool;
    fn groups(&self) -> Vec<Vec<ResponseLayer>>;
}

impl ResponseStack for NonlinearScaleSpace {
    fn kind(&self) -> DetectorKind {
        DetectorKind::NonlinearHessian
    }

    fn signed(&self) -> bool {
        false
    }

    fn groups(&self) -> Vec<Vec<ResponseLayer>> {
        let layers = self
            .levels
            .par_iter()
            .enumerate()
            .map(|(i, lvl)| ResponseLayer {
                field: hessian_response(lvl),
                downscale: lvl.downscale(),
                sigma: lvl.sigma(),
                level: i,
                margin: (2.0 * lvl.local_sigma()).ceil() as usize + 1,
            })
            .collect();
        vec![layers]
    }
}

impl ResponseStack for GaussianPyramid {
    fn kind(&self) -> DetectorKind {
        DetectorKind::Dog
    }

    fn signed(&self) -> bool {
        true
    }

    fn groups(&self) -> Vec<Vec<ResponseLayer>> {
        let per = self.planes_per_octave();
        self.octaves
            .iter()
            .enumerate()
            .map(|(o, oct)| {
                oct.dogs
                    .iter()
                    .enumerate()
                    .map(|(s, dog)| ResponseLayer {
                        field: dog.clone(),
                        downscale: oct.downscale,
                        sigma: oct.planes[s].sigma(),
                        level: o * per + s,
                        margin: 2,
                    })
                    .collect()
            })
            .collect()
    }
}

/// Integer-located strict extremum before subpixel refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub group: usize,
    pub layer: usize,
    pub x: usize,
    pub y: usize,
    pub value: f64,
}

/// Value of `layer` at the position of `(x, y)` in `from`'s raster.
fn sample_mapped(layer: &ResponseLayer, from: &ResponseLayer, x: f64, y: f64) -> f64 {
    if layer.downscale == from.downscale {
        layer.field.bilinear_clamped(x, y)
    } else {
        let f = from.downscale as f64 / layer.downscale as f64;
        layer.field.bilinear_clamped(x * f, y * f)
    }
}

fn is_strict_extremum(layers: &[ResponseLayer], i: usize, x: usize, y: usize, sign: f64) -> bool {
    let center = &layers[i];
    let v = sign * center.field.get(x, y);
    for (li, layer) in layers.iter().enumerate().take(i + 2).skip(i - 1) {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                if li == i && dx == 0 && dy == 0 {
                    continue;
                }
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                let n = if li == i {
                    center.field.get_clamped(nx, ny)
                } else {
                    sample_mapped(layer, center, nx as f64, ny as f64)
                };
                if sign * n >= v {
                    return false;
                }
            }
        }
    }
    true
}

/// All strict 3x3x3 extrema whose absolute response exceeds `threshold`.
pub fn find_candidates(
    groups: &[Vec<ResponseLayer>],
    signed: bool,
    threshold: f64,
) -> Vec<Candidate> {
    let mut jobs = Vec::new();
    for (g, layers) in groups.iter().enumerate() {
        for i in 1..layers.len().saturating_sub(1) {
            jobs.push((g, i));
        }
    }
    jobs.par_iter()
        .flat_map_iter(|&(g, i)| {
            let layers = &groups[g];
            let layer = &layers[i];
            let (w, h) = (layer.field.width(), layer.field.height());
            let m = layer.margin;
            let mut found = Vec::new();
            if w <= 2 * m || h <= 2 * m {
                return found.into_iter();
            }
            for y in m..h - m {
                for x in m..w - m {
                    let v = layer.field.get(x, y);
                    let sign = if v > threshold {
                        1.0
                    } else if signed && v < -threshold {
                        -1.0
                    } else {
                        continue;
                    };
                    if is_strict_extremum(layers, i, x, y, sign) {
                        found.push(Candidate {
                            group: g,
                            layer: i,
                            x,
                            y,
                            value: v,
                        });
                    }
                }
            }
            found.into_iter()
        })
        .collect()
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    if det.abs() < 1e-18 || !det.is_finite() {
        return None;
    }
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut m = a;
        for r in 0..3 {
            m[r][k] = b[r];
        }
        let dk = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        *o = dk / det;
    }
    Some(out)
}

/// One Newton step on the quadratic fit of the response around a candidate;
/// offsets are clamped to half a pixel / half a level.
fn refine(layers: &[ResponseLayer], c: &Candidate, kind: DetectorKind) -> Keypoint {
    let center = &layers[c.layer];
    let (x, y) = (c.x as f64, c.y as f64);
    let at = |l: isize, dx: f64, dy: f64| -> f64 {
        let layer = &layers[(c.layer as isize + l) as usize];
        if l == 0 {
            center.field.bilinear_clamped(x + dx, y + dy)
        } else {
            sample_mapped(layer, center, x + dx, y + dy)
        }
    };
    let v = at(0, 0.0, 0.0);
    let gx = 0.5 * (at(0, 1.0, 0.0) - at(0, -1.0, 0.0));
    let gy = 0.5 * (at(0, 0.0, 1.0) - at(0, 0.0, -1.0));
    let gs = 0.5 * (at(1, 0.0, 0.0) - at(-1, 0.0, 0.0));
    let hxx = at(0, 1.0, 0.0) + at(0, -1.0, 0.0) - 2.0 * v;
    let hyy = at(0, 0.0, 1.0) + at(0, 0.0, -1.0) - 2.0 * v;
    let hss = at(1, 0.0, 0.0) + at(-1, 0.0, 0.0) - 2.0 * v;
    let hxy = 0.25 * (at(0, 1.0, 1.0) - at(0, 1.0, -1.0) - at(0, -1.0, 1.0) + at(0, -1.0, -1.0));
    let hxs = 0.25 * (at(1, 1.0, 0.0) - at(1, -1.0, 0.0) - at(-1, 1.0, 0.0) + at(-1, -1.0, 0.0));
    let hys = 0.25 * (at(1, 0.0, 1.0) - at(1, 0.0, -1.0) - at(-1, 0.0, 1.0) + at(-1, 0.0, -1.0));
    let offset = solve3(
        [[hxx, hxy, hxs], [hxy, hyy, hys], [hxs, hys, hss]],
        [-gx, -gy, -gs],
    )
    .filter(|o| o.iter().all(|v| v.is_finite()))
    .unwrap_or([0.0; 3])
    .map(|o| o.clamp(-0.5, 0.5));
    let ds = center.downscale as f64;
    let neighbor = if offset[2] >= 0.0 {
        &layers[c.layer + 1]
    } else {
        &layers[c.layer - 1]
    };
    let ratio = (neighbor.sigma / center.sigma).abs();
    let sigma = center.sigma * ratio.powf(offset[2].abs());
    let response = v + 0.5 * (gx * offset[0] + gy * offset[1] + gs * offset[2]);
    Keypoint {
        x: (x + offset[0]) * ds,
        y: (y + offset[1]) * ds,
        sigma,
        level: center.level,
        response: response.abs(),
        orientation: 0.0,
        detector: kind,
    }
}

/// Scale-space extrema above `threshold`, refined and canonically sorted.
/// Orientation is left at 0; see [`assign_orientation`].
pub fn detect_extrema<S: ResponseStack + ?Sized>(space: &S, threshold: f64) -> Vec<Keypoint> {
    let groups = space.groups();
    let candidates = find_candidates(&groups, space.signed(), threshold);
    let kind = space.kind();
    let mut kps: Vec<Keypoint> = candidates
        .par_iter()
        .map(|c| refine(&groups[c.group], c, kind))
        .collect();
    kps.sort_by(canonical_order);
    kps
}

/// Bresenham circle of radius 3, clockwise from 12 o'clock.
pub const FAST_CIRCLE: [(isize, isize); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

/// Segment-test score at `(x, y)`: the summed absolute contrast over the
/// longest run of consistently brighter or darker circle pixels, if that
/// run has at least `arc` pixels.
pub fn fast_score(img: &Field, x: usize, y: usize, threshold: f64, arc: usize) -> Option<f64> {
    let p = img.get(x, y);
    let mut class = [0i8; 16];
    let mut diff = [0.0f64; 16];
    for (i, &(dx, dy)) in FAST_CIRCLE.iter().enumerate() {
        let v = img.get((x as isize + dx) as usize, (y as isize + dy) as usize);
        diff[i] = (v - p).abs();
        class[i] = if v > p + threshold {
            1
        } else if v < p - threshold {
            -1
        } else {
            0
        };
    }
    let mut best: Option<(usize, f64)> = None;
    for sign in [1i8, -1] {
        if class.iter().all(|&c| c == sign) {
            return Some(diff.iter().sum());
        }
        // Start scanning just after a non-member so runs never wrap mid-way.
        let Some(start) = (0..16).find(|&i| class[i] != sign) else {
            continue;
        };
        let (mut len, mut sum) = (0usize, 0.0);
        for k in 1..=16 {
            let i = (start + k) % 16;
            if class[i] == sign {
                len += 1;
                sum += diff[i];
            } else {
                if len >= arc && best.is_none_or(|(l, s)| len > l || (len == l && sum > s)) {
                    best = Some((len, sum));
                }
                len = 0;
                sum = 0.0;
            }
        }
    }
    best.map(|(_, s)| s)
}

/// FAST corners at a single scale with 3x3 non-maximum suppression.
pub fn fast_corners(img: &GrayImage, threshold: f64, arc: usize) -> Vec<Keypoint> {
    fast_on_field(img.as_field(), threshold, arc, 1, 1.0, 0)
}

fn fast_on_field(
    field: &Field,
    threshold: f64,
    arc: usize,
    downscale: usize,
    sigma: f64,
    level: usize,
) -> Vec<Keypoint> {
    let (w, h) = (field.width(), field.height());
    if w < 7 || h < 7 {
        return Vec::new();
    }
    let mut scores = Field::zeros(w, h);
    scores
        .data_mut()
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(y, row)| {
            if y < 3 || y >= h - 3 {
                return;
            }
            for (x, s) in row.iter_mut().enumerate().take(w - 3).skip(3) {
                *s = fast_score(field, x, y, threshold, arc).unwrap_or(0.0);
            }
        });
    let mut kps = Vec::new();
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            let s = scores.get(x, y);
            if s <= 0.0 {
                continue;
            }
            let mut keep = true;
            'nms: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = scores.get((x as isize + dx) as usize, (y as isize + dy) as usize);
                    // equal scores: the earlier pixel in raster order wins
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if n > s || (n == s && earlier) {
                        keep = false;
                        break 'nms;
                    }
                }
            }
            if keep {
                kps.push(Keypoint {
                    x: (x * downscale) as f64,
                    y: (y * downscale) as f64,
                    sigma,
                    level,
                    response: s,
                    orientation: 0.0,
                    detector: DetectorKind::Fast,
                });
            }
        }
    }
    kps
}

/// Images FAST runs on: the input, then blurred 2x decimations.
pub fn fast_pyramid(img: &GrayImage, scales: usize) -> Vec<GrayImage> {
    let mut out = vec![img.clone()];
    for _ in 1..scales.max(1) {
        let prev = out.last().expect("non-empty").as_field();
        if prev.width() < 14 || prev.height() < 14 {
            break;
        }
        out.push(GrayImage::from_field_clamped(
            blur_field(prev, 1.0).decimate(),
        ));
    }
    out
}

/// FAST over `scales` dyadic scales (1 = base only, 3 = base, 2x, 4x).
/// Keypoint `level` is the scale index and `sigma` is `2^level`.
pub fn fast_corners_multiscale(
    img: &GrayImage,
    threshold: f64,
    arc: usize,
    scales: usize,
) -> Vec<Keypoint> {
    let mut kps: Vec<Keypoint> = fast_pyramid(img, scales)
        .iter()
        .enumerate()
        .flat_map(|(level, im)| {
            let ds = 1usize << level;
            fast_on_field(im.as_field(), threshold, arc, ds, ds as f64, level)
        })
        .collect();
    kps.sort_by(canonical_order);
    kps
}

/// Gradient levels matching the FAST scales, for orientation assignment.
pub fn fast_levels(img: &GrayImage, scales: usize) -> Vec<EvolutionLevel> {
    fast_pyramid(img, scales)
        .into_iter()
        .enumerate()
        .map(|(level, im)| {
            let ds = 1usize << level;
            EvolutionLevel::new(im, ds as f64, 0, level, ds)
        })
        .collect()
}

const ORIENTATION_RADIUS: i32 = 6;
const ORIENTATION_WEIGHT_SIGMA: f64 = 2.5;
const SECTOR_WIDTH: f64 = PI / 3.0;
const SECTOR_STEPS: usize = 72;

/// Dominant gradient direction around `kp` on `level`.
///
/// Gradients are sampled on a grid of spacing sigma within radius `6 sigma`,
/// Gaussian weighted, and a `pi/3` sector slides around the circle in
/// `pi/36` steps; the sector with the longest summed vector wins, ties to
/// the smaller start angle.
pub fn assign_orientation(kp: &Keypoint, level: &EvolutionLevel) -> f64 {
    let ds = level.downscale() as f64;
    let s = (kp.sigma / ds).max(1e-6);
    let (cx, cy) = (kp.x / ds, kp.y / ds);
    let mut samples: Vec<(f64, f64, f64)> = Vec::new();
    for j in -ORIENTATION_RADIUS..=ORIENTATION_RADIUS {
        for i in -ORIENTATION_RADIUS..=ORIENTATION_RADIUS {
            let r2 = (i * i + j * j) as f64;
            if r2 >= (ORIENTATION_RADIUS * ORIENTATION_RADIUS) as f64 {
                continue;
            }
            let (px, py) = (cx + i as f64 * s, cy + j as f64 * s);
            let wgt = (-r2 / (2.0 * ORIENTATION_WEIGHT_SIGMA * ORIENTATION_WEIGHT_SIGMA)).exp();
            let gx = wgt * level.lx().bilinear_clamped(px, py);
            let gy = wgt * level.ly().bilinear_clamped(px, py);
            if gx == 0.0 && gy == 0.0 {
                continue;
            }
            samples.push((gy.atan2(gx).rem_euclid(TAU), gx, gy));
        }
    }
    let mut best = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..SECTOR_STEPS {
        let start = k as f64 * TAU / SECTOR_STEPS as f64;
        let (mut sx, mut sy) = (0.0, 0.0);
        for &(ang, gx, gy) in &samples {
            if (ang - start).rem_euclid(TAU) < SECTOR_WIDTH {
                sx += gx;
                sy += gy;
            }
        }
        let norm = sx * sx + sy * sy;
        if norm > best.0 {
            best = (norm, sx, sy);
        }
    }
    if best.0 == 0.0 {
        return 0.0;
    }
    let o = best.2.atan2(best.1).rem_euclid(TAU);
    if o >= TAU {
        0.0
    } else {
        o
    }
}
