//! Linear and nonlinear scale spaces.
//!
//! The nonlinear space evolves the image under Perona–Malik diffusion with
//! the `g2` conductivity, integrated by additive operator splitting (AOS).
//! The Gaussian pyramid with difference-of-Gaussian planes is the linear
//! baseline.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imgio::{Field, GrayImage};

/// Largest AOS sub-step, in squared octave pixels.
pub const DT_MAX: f64 = 10.0;
/// Pre-smoothing applied before contrast estimation and evolution.
pub const PRESMOOTH_SIGMA: f64 = 1.0;
pub const DEFAULT_KAPPA_PERCENTILE: f64 = 0.70;
const KAPPA_BINS: usize = 300;
const KAPPA_FALLBACK: f64 = 0.01;
/// Gradient magnitudes at or below this are treated as zero (rounding residue
/// of convolving flat regions).
const ZERO_GRADIENT: f64 = 1e-12;
const MIN_OCTAVE_SIDE: usize = 16;
const MIN_IMAGE_SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScaleSchedule {
    pub base_sigma: f64,
    pub octaves: usize,
    pub sublevels: usize,
}

impl Default for ScaleSchedule {
    fn default() -> Self {
        Self {
            base_sigma: 1.6,
            octaves: 4,
            sublevels: 4,
        }
    }
}

impl ScaleSchedule {
    /// Sigma in base-image pixels of octave `o`, sublevel `s`.
    pub fn sigma(&self, octave: usize, sublevel: usize) -> f64 {
        self.base_sigma * 2f64.powf(octave as f64 + sublevel as f64 / self.sublevels as f64)
    }

    /// Evolution time `sigma^2 / 2`.
    pub fn time(&self, octave: usize, sublevel: usize) -> f64 {
        let s = self.sigma(octave, sublevel);
        s * s / 2.0
    }

    pub fn level_count(&self) -> usize {
        self.octaves * self.sublevels
    }

    /// `(octave, sublevel, sigma, time)` for each nonlinear level in order.
    pub fn levels(&self) -> impl Iterator<Item = (usize, usize, f64, f64)> + '_ {
        (0..self.octaves).flat_map(move |o| {
            (0..self.sublevels).map(move |s| (o, s, self.sigma(o, s), self.time(o, s)))
        })
    }

    /// The same schedule with octaves dropped until it fits the image.
    pub fn fitted(&self, width: usize, height: usize) -> Result<ScaleSchedule> {
        let mut out = *self;
        while out.octaves > 1 && out.check_image(width, height).is_err() {
            out.octaves -= 1;
        }
        out.check_image(width, height)?;
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        if !(self.base_sigma > 0.0) || self.octaves == 0 || self.sublevels == 0 {
            return Err(Error::InvalidParameter(format!(
                "invalid scale schedule {self:?}"
            )));
        }
        Ok(())
    }

    pub fn check_image(&self, width: usize, height: usize) -> Result<()> {
        self.validate()?;
        let side = width.min(height);
        if side < MIN_IMAGE_SIDE {
            return Err(Error::ImageTooSmall(format!(
                "{width}x{height}, need at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
            )));
        }
        let deepest = side >> (self.octaves - 1).min(usize::BITS as usize - 1);
        if deepest < MIN_OCTAVE_SIDE {
            return Err(Error::ImageTooSmall(format!(
                "{width}x{height} cannot hold {} octaves of at least {MIN_OCTAVE_SIDE} px",
                self.octaves
            )));
        }
        Ok(())
    }
}

/// Normalized Gaussian kernel of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn convolve_rows(src: &Field, kernel: &[f64]) -> Field {
    let (w, h) = (src.width(), src.height());
    let r = (kernel.len() / 2) as isize;
    let mut out = Field::zeros(w, h);
    out.data_mut()
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(y, row)| {
            for (x, o) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, &wk) in kernel.iter().enumerate() {
                    acc += wk * src.get_reflect(x as isize + k as isize - r, y as isize);
                }
                *o = acc;
            }
        });
    out
}

fn convolve_cols(src: &Field, kernel: &[f64]) -> Field {
    let (w, h) = (src.width(), src.height());
    let r = (kernel.len() / 2) as isize;
    let mut out = Field::zeros(w, h);
    out.data_mut()
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(y, row)| {
            for (x, o) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, &wk) in kernel.iter().enumerate() {
                    acc += wk * src.get_reflect(x as isize, y as isize + k as isize - r);
                }
                *o = acc;
            }
        });
    out
}

pub(crate) fn blur_field(src: &Field, sigma: f64) -> Field {
    if sigma == 0.0 {
        return src.clone();
    }
    let kernel = gaussian_kernel(sigma);
    convolve_cols(&convolve_rows(src, &kernel), &kernel)
}

/// Separable Gaussian blur with symmetric boundary reflection.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Result<GrayImage> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!("negative sigma {sigma}")));
    }
    Ok(GrayImage::from_field_clamped(blur_field(
        img.as_field(),
        sigma,
    )))
}

/// Scharr derivative along x with sample spacing `step`, per pixel.
pub(crate) fn scharr_x(src: &Field, step: usize) -> Field {
    let s = step as isize;
    let norm = 1.0 / (32.0 * step as f64);
    Field::from_fn(src.width(), src.height(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        let d = |dy: isize| src.get_reflect(x + s, y + dy) - src.get_reflect(x - s, y + dy);
        (3.0 * d(-s) + 10.0 * d(0) + 3.0 * d(s)) * norm
    })
}

pub(crate) fn scharr_y(src: &Field, step: usize) -> Field {
    let s = step as isize;
    let norm = 1.0 / (32.0 * step as f64);
    Field::from_fn(src.width(), src.height(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        let d = |dx: isize| src.get_reflect(x + dx, y + s) - src.get_reflect(x + dx, y - s);
        (3.0 * d(-s) + 10.0 * d(0) + 3.0 * d(s)) * norm
    })
}

#[derive(Debug, Clone)]
pub struct Gradient {
    pub lx: Field,
    pub ly: Field,
    pub magnitude: Field,
}

/// Scharr first derivatives and gradient magnitude.
pub fn gradient(img: &GrayImage) -> Result<Gradient> {
    if img.width() < 3 || img.height() < 3 {
        return Err(Error::ImageTooSmall(format!(
            "gradient needs 3x3, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    Ok(field_gradient(img.as_field()))
}

pub(crate) fn field_gradient(f: &Field) -> Gradient {
    let lx = scharr_x(f, 1);
    let ly = scharr_y(f, 1);
    let magnitude = lx.zip_map(&ly, f64::hypot);
    Gradient { lx, ly, magnitude }
}

/// Contrast parameter: the `percentile` point of the gradient-magnitude
/// histogram of the pre-smoothed image, zero gradients excluded.
pub fn estimate_kappa(img: &GrayImage, percentile: f64) -> Result<f64> {
    if !(percentile > 0.0 && percentile < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "percentile {percentile} outside (0, 1)"
        )));
    }
    let smooth = blur_field(img.as_field(), PRESMOOTH_SIGMA);
    let magnitude = field_gradient(&smooth).magnitude;
    Ok(kappa_from_magnitudes(magnitude.data(), percentile))
}

pub(crate) fn kappa_from_magnitudes(magnitudes: &[f64], percentile: f64) -> f64 {
    let max = magnitudes.iter().cloned().fold(0.0, f64::max);
    if max <= ZERO_GRADIENT {
        return KAPPA_FALLBACK;
    }
    let mut hist = [0usize; KAPPA_BINS];
    let mut count = 0usize;
    for &m in magnitudes.iter().filter(|&&m| m > ZERO_GRADIENT) {
        let bin = ((m / max) * KAPPA_BINS as f64).ceil() as usize;
        hist[bin.clamp(1, KAPPA_BINS) - 1] += 1;
        count += 1;
    }
    let target = percentile * count as f64;
    let mut cumulative = 0usize;
    for (i, &n) in hist.iter().enumerate() {
        cumulative += n;
        if cumulative as f64 >= target {
            return (i + 1) as f64 * max / KAPPA_BINS as f64;
        }
    }
    max
}

/// Perona–Malik `g2` conductivity `1 / (1 + (|grad L| / kappa)^2)`.
pub fn conductivity(magnitude: &Field, kappa: f64) -> Result<Field> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "kappa {kappa} must be > 0"
        )));
    }
    let inv = 1.0 / (kappa * kappa);
    Ok(magnitude.map(|g| 1.0 / (1.0 + g * g * inv)))
}

/// Solve the 1-D system `(I - 2 dt A(c)) u = rhs` in place, where `A` is the
/// Neumann divergence operator with half-pixel conductivities `(c_i + c_j)/2`.
fn solve_line(rhs: &mut [f64], c: &[f64], dt: f64, scratch: &mut Vec<f64>) {
    let n = rhs.len();
    if n == 1 {
        return;
    }
    let tau = 2.0 * dt;
    // flux[i] couples samples i and i+1
    let flux = |i: usize| tau * 0.5 * (c[i] + c[i + 1]);
    scratch.clear();
    scratch.resize(n, 0.0);
    // Thomas algorithm: diag 1 + flux(i-1) + flux(i), off-diagonals -flux.
    let mut prev_flux = 0.0;
    let mut upper_prev = 0.0;
    for i in 0..n {
        let next_flux = if i + 1 < n { flux(i) } else { 0.0 };
        let denom = 1.0 + prev_flux + next_flux + prev_flux * upper_prev;
        let upper = -next_flux / denom;
        scratch[i] = upper;
        let carried = if i == 0 { 0.0 } else { prev_flux * rhs[i - 1] };
        rhs[i] = (rhs[i] + carried) / denom;
        prev_flux = next_flux;
        upper_prev = upper;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
}

pub(crate) fn aos_step(l: &Field, c: &Field, dt: f64) -> Field {
    let (w, h) = (l.width(), l.height());
    let mut rows = l.data().to_vec();
    rows.par_chunks_mut(w)
        .zip(c.data().par_chunks(w))
        .for_each_init(Vec::new, |scratch, (row, crow)| {
            solve_line(row, crow, dt, scratch)
        });
    let cols: Vec<Vec<f64>> = (0..w)
        .into_par_iter()
        .map_init(Vec::new, |scratch, x| {
            let mut col: Vec<f64> = (0..h).map(|y| l.get(x, y)).collect();
            let ccol: Vec<f64> = (0..h).map(|y| c.get(x, y)).collect();
            solve_line(&mut col, &ccol, dt, scratch);
            col
        })
        .collect();
    for (x, col) in cols.iter().enumerate() {
        for (y, &v) in col.iter().enumerate() {
            let i = y * w + x;
            rows[i] = 0.5 * (rows[i] + v);
        }
    }
    Field::new(w, h, rows).expect("dimensions preserved")
}

/// One semi-implicit AOS diffusion step of size `dt`.
pub fn diffuse_step(l: &GrayImage, c: &Field, dt: f64) -> Result<GrayImage> {
    if !l.as_field().same_dims(c) {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs conductivity {}x{}",
            l.width(),
            l.height(),
            c.width(),
            c.height()
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt {dt} must be > 0")));
    }
    Ok(GrayImage::from_field_clamped(aos_step(l.as_field(), c, dt)))
}

/// Evolve `l` by nonlinear diffusion for `duration` (in the raster's own
/// pixel units), recomputing conductivity before every sub-step.
/// `gradient_scale` converts raster gradients into the units `kappa` is
/// expressed in.
fn evolve_field(l: &Field, kappa: f64, duration: f64, gradient_scale: f64) -> Field {
    if duration <= 0.0 {
        return l.clone();
    }
    let steps = (duration / DT_MAX).ceil().max(1.0) as usize;
    let dt = duration / steps as f64;
    let mut cur = l.clone();
    let inv = 1.0 / (kappa * kappa);
    for _ in 0..steps {
        let g = field_gradient(&cur).magnitude;
        let c = g.map(|m| {
            let m = m * gradient_scale;
            1.0 / (1.0 + m * m * inv)
        });
        cur = aos_step(&cur, &c, dt);
    }
    cur
}

/// Nonlinear diffusion of `img` over total time `t` with sub-steps of at most
/// [`DT_MAX`].
pub fn evolve_nonlinear(img: &GrayImage, kappa: f64, t: f64) -> Result<GrayImage> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "kappa {kappa} must be > 0"
        )));
    }
    if !(t >= 0.0) {
        return Err(Error::InvalidParameter(format!("time {t} must be >= 0")));
    }
    Ok(GrayImage::from_field_clamped(evolve_field(
        img.as_field(),
        kappa,
        t,
        1.0,
    )))
}

/// One scale level with its derivative fields. Derivatives are computed at
/// construction and the level is immutable afterwards.
#[derive(Debug, Clone)]
pub struct EvolutionLevel {
    sigma: f64,
    time: f64,
    octave: usize,
    sublevel: usize,
    downscale: usize,
    l: GrayImage,
    lx: Field,
    ly: Field,
    lxx: Field,
    lyy: Field,
    lxy: Field,
}

impl EvolutionLevel {
    /// `sigma` is in base-image pixels; derivatives are per level pixel,
    /// taken on `L` regularized by a Gaussian of the level's local sigma.
    pub fn new(l: GrayImage, sigma: f64, octave: usize, sublevel: usize, downscale: usize) -> Self {
        let smooth = blur_field(l.as_field(), sigma / downscale as f64);
        let lx = scharr_x(&smooth, 1);
        let ly = scharr_y(&smooth, 1);
        let (lxx, lyy, lxy) = second_derivatives(&smooth);
        Self {
            sigma,
            time: sigma * sigma / 2.0,
            octave,
            sublevel,
            downscale,
            l,
            lx,
            ly,
            lxx,
            lyy,
            lxy,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Sigma measured in this level's own pixels.
    pub fn local_sigma(&self) -> f64 {
        self.sigma / self.downscale as f64
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn octave(&self) -> usize {
        self.octave
    }

    pub fn sublevel(&self) -> usize {
        self.sublevel
    }

    pub fn downscale(&self) -> usize {
        self.downscale
    }

    pub fn image(&self) -> &GrayImage {
        &self.l
    }

    pub fn lx(&self) -> &Field {
        &self.lx
    }

    pub fn ly(&self) -> &Field {
        &self.ly
    }

    pub fn lxx(&self) -> &Field {
        &self.lxx
    }

    pub fn lyy(&self) -> &Field {
        &self.lyy
    }

    pub fn lxy(&self) -> &Field {
        &self.lxy
    }

    pub fn width(&self) -> usize {
        self.l.width()
    }

    pub fn height(&self) -> usize {
        self.l.height()
    }
}

/// Compact second differences `[1, -2, 1]` and the central cross difference.
fn second_derivatives(f: &Field) -> (Field, Field, Field) {
    let (w, h) = (f.width(), f.height());
    let at =
        |x: usize, y: usize, dx: isize, dy: isize| f.get_reflect(x as isize + dx, y as isize + dy);
    let lxx = Field::from_fn(w, h, |x, y| {
        at(x, y, 1, 0) - 2.0 * f.get(x, y) + at(x, y, -1, 0)
    });
    let lyy = Field::from_fn(w, h, |x, y| {
        at(x, y, 0, 1) - 2.0 * f.get(x, y) + at(x, y, 0, -1)
    });
    let lxy = Field::from_fn(w, h, |x, y| {
        0.25 * (at(x, y, 1, 1) - at(x, y, 1, -1) - at(x, y, -1, 1) + at(x, y, -1, -1))
    });
    (lxx, lyy, lxy)
}

/// A stack of scale levels addressable by a flat index.
pub trait ScaleSpace {
    fn level(&self, index: usize) -> Option<&EvolutionLevel>;
}

#[derive(Debug, Clone)]
pub struct NonlinearScaleSpace {
    pub levels: Vec<EvolutionLevel>,
    pub schedule: ScaleSchedule,
    pub kappa: f64,
}

impl ScaleSpace for NonlinearScaleSpace {
    fn level(&self, index: usize) -> Option<&EvolutionLevel> {
        self.levels.get(index)
    }
}

pub fn build_nonlinear_scale_space(
    img: &GrayImage,
    schedule: &ScaleSchedule,
) -> Result<NonlinearScaleSpace> {
    schedule.check_image(img.width(), img.height())?;
    let kappa = estimate_kappa(img, DEFAULT_KAPPA_PERCENTILE)?;
    let mut current = blur_field(img.as_field(), PRESMOOTH_SIGMA);
    let mut t_current = 0.0;
    let mut levels = Vec::with_capacity(schedule.level_count());
    for (octave, sublevel, sigma, t) in schedule.levels() {
        let downscale = 1usize << octave;
        if octave > 0 && sublevel == 0 {
            current = current.decimate();
        }
        // Times and gradients are in base pixels; the raster is downscaled.
        let area = (downscale * downscale) as f64;
        current = evolve_field(
            &current,
            kappa,
            (t - t_current) / area,
            1.0 / downscale as f64,
        );
        t_current = t;
        let l = GrayImage::from_field_clamped(current.clone());
        levels.push(EvolutionLevel::new(l, sigma, octave, sublevel, downscale));
    }
    Ok(NonlinearScaleSpace {
        levels,
        schedule: *schedule,
        kappa,
    })
}

#[derive(Debug, Clone)]
pub struct PyramidOctave {
    pub downscale: usize,
    /// `S + 3` blurred planes.
    pub planes: Vec<EvolutionLevel>,
    /// `DoG[i] = planes[i + 1] - planes[i]`.
    pub dogs: Vec<Field>,
}

#[derive(Debug, Clone)]
pub struct GaussianPyramid {
    pub octaves: Vec<PyramidOctave>,
    pub schedule: ScaleSchedule,
}

impl GaussianPyramid {
    pub fn planes_per_octave(&self) -> usize {
        self.schedule.sublevels + 3
    }

    /// Plane by flat index `octave * (S + 3) + plane`.
    pub fn plane(&self, flat: usize) -> Option<&EvolutionLevel> {
        let per = self.planes_per_octave();
        self.octaves.get(flat / per)?.planes.get(flat % per)
    }
}

impl ScaleSpace for GaussianPyramid {
    fn level(&self, index: usize) -> Option<&EvolutionLevel> {
        self.plane(index)
    }
}

pub fn build_gaussian_pyramid(
    img: &GrayImage,
    schedule: &ScaleSchedule,
) -> Result<GaussianPyramid> {
    schedule.check_image(img.width(), img.height())?;
    let s0 = schedule.base_sigma;
    let per = schedule.sublevels + 3;
    let mut base = blur_field(img.as_field(), s0);
    let mut octaves = Vec::with_capacity(schedule.octaves);
    for octave in 0..schedule.octaves {
        let downscale = 1usize << octave;
        let fields: Vec<Field> = (0..per)
            .into_par_iter()
            .map(|s| {
                let local = s0 * 2f64.powf(s as f64 / schedule.sublevels as f64);
                blur_field(&base, (local * local - s0 * s0).max(0.0).sqrt())
            })
            .collect();
        let dogs: Vec<Field> = fields
            .windows(2)
            .map(|p| p[1].zip_map(&p[0], |a, b| a - b))
            .collect();
        let next_base = fields[schedule.sublevels].decimate();
        let planes = fields
            .into_iter()
            .enumerate()
            .map(|(s, f)| {
                let sigma =
                    schedule.sigma(octave, 0) * 2f64.powf(s as f64 / schedule.sublevels as f64);
                EvolutionLevel::new(
                    GrayImage::from_field_clamped(f),
                    sigma,
                    octave,
                    s,
                    downscale,
                )
            })
            .collect();
        octaves.push(PyramidOctave {
            downscale,
            planes,
            dogs,
        });
        base = next_base;
    }
    Ok(GaussianPyramid {
        octaves,
        schedule: *schedule,
    })
}
