//! End-to-end alignment, synthetic scenes and the perturbation benchmark.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crackmetrics::{
    compute_metrics, metric_errors, render_overlay, segment_crack, segment_crack_within,
    warp_image, BinaryMask, CrackMetrics, MetricErrors, Overlay,
};
use crate::descmatch::{
    binary_descriptor, float_descriptor, mutual_matches, ratio_filter, Descriptors, Match,
    DEFAULT_RATIO,
};
use crate::detect::{
    assign_orientation, canonical_order, detect_extrema, fast_corners_multiscale, fast_levels,
    Keypoint, DEFAULT_DOG_THRESHOLD, DEFAULT_FAST_ARC, DEFAULT_FAST_THRESHOLD,
    DEFAULT_HESSIAN_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::homography::{ransac, Correspondence, Homography, RansacConfig};
use crate::imgio::{load_image, save_image, GrayImage};
use crate::scalespace::{
    build_gaussian_pyramid, build_nonlinear_scale_space, gaussian_blur, ScaleSchedule, ScaleSpace,
};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorChoice {
    NonlinearHessian,
    Dog,
    FastBinary,
}

impl DetectorChoice {
    pub const ALL: [DetectorChoice; 3] = [
        DetectorChoice::NonlinearHessian,
        DetectorChoice::Dog,
        DetectorChoice::FastBinary,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            DetectorChoice::NonlinearHessian => "nonlinear-hessian",
            DetectorChoice::Dog => "dog",
            DetectorChoice::FastBinary => "fast-binary",
        }
    }
}

impl std::fmt::Display for DetectorChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for DetectorChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonlinear" | "nonlinear-hessian" => Ok(DetectorChoice::NonlinearHessian),
            "dog" => Ok(DetectorChoice::Dog),
            "fast" | "fast-binary" => Ok(DetectorChoice::FastBinary),
            other => Err(Error::InvalidParameter(format!(
                "unknown detector '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub detector: DetectorChoice,
    pub schedule: ScaleSchedule,
    pub hessian_threshold: f64,
    pub dog_threshold: f64,
    pub fast_threshold: f64,
    pub fast_arc: usize,
    /// Dyadic scales for FAST (1 = base image only).
    pub fast_scales: usize,
    pub ratio: f64,
    /// Strongest keypoints kept per image.
    pub max_keypoints: usize,
    pub ransac: RansacConfig,
    /// Include wall-clock stage timings in the report. Off by default so
    /// reports are reproducible byte for byte.
    pub timings: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            detector: DetectorChoice::NonlinearHessian,
            schedule: ScaleSchedule::default(),
            hessian_threshold: DEFAULT_HESSIAN_THRESHOLD,
            dog_threshold: DEFAULT_DOG_THRESHOLD,
            fast_threshold: DEFAULT_FAST_THRESHOLD,
            fast_arc: DEFAULT_FAST_ARC,
            fast_scales: 3,
            ratio: DEFAULT_RATIO,
            max_keypoints: 2000,
            ransac: RansacConfig::default(),
            timings: false,
        }
    }
}

impl AlignConfig {
    pub fn with_detector(mut self, detector: DetectorChoice) -> Self {
        self.detector = detector;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.ransac.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.ransac.validate()?;
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "ratio {} outside (0, 1]",
                self.ratio
            )));
        }
        if !(self.fast_threshold > 0.0 && self.fast_threshold < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "FAST threshold {} outside (0, 1)",
                self.fast_threshold
            )));
        }
        if self.fast_arc == 0 || self.fast_arc > 16 || self.fast_scales == 0 {
            return Err(Error::InvalidParameter(
                "FAST arc must be 1..=16 and scales >= 1".into(),
            ));
        }
        if self.max_keypoints == 0 {
            return Err(Error::InvalidParameter(
                "max_keypoints must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Oriented keypoints with one descriptor each.
#[derive(Debug, Clone)]
pub struct Features {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Descriptors,
}

fn describe_scale_space<S: ScaleSpace + Sync>(
    mut kps: Vec<Keypoint>,
    space: &S,
    cap: usize,
) -> Features {
    kps.truncate(cap);
    let described: Vec<_> = kps
        .par_iter()
        .filter_map(|kp| {
            let level = space.level(kp.level)?;
            let mut kp = *kp;
            kp.orientation = assign_orientation(&kp, level);
            float_descriptor(&kp, space).ok().map(|d| (kp, d))
        })
        .collect();
    let (keypoints, descriptors) = described.into_iter().unzip();
    Features {
        keypoints,
        descriptors: Descriptors::Float(descriptors),
    }
}

/// Detect, orient and describe keypoints with the configured detector.
pub fn extract_features(img: &GrayImage, cfg: &AlignConfig) -> Result<Features> {
    let schedule = cfg.schedule.fitted(img.width(), img.height())?;
    match cfg.detector {
        DetectorChoice::NonlinearHessian => {
            let space = build_nonlinear_scale_space(img, &schedule)?;
            let kps = detect_extrema(&space, cfg.hessian_threshold);
            Ok(describe_scale_space(kps, &space, cfg.max_keypoints))
        }
        DetectorChoice::Dog => {
            let pyramid = build_gaussian_pyramid(img, &schedule)?;
            let kps = detect_extrema(&pyramid, cfg.dog_threshold);
            Ok(describe_scale_space(kps, &pyramid, cfg.max_keypoints))
        }
        DetectorChoice::FastBinary => {
            let mut kps =
                fast_corners_multiscale(img, cfg.fast_threshold, cfg.fast_arc, cfg.fast_scales);
            let levels = fast_levels(img, cfg.fast_scales);
            kps.retain(|k| binary_descriptor(k, img).is_ok());
            kps.truncate(cfg.max_keypoints);
            let described: Vec<_> = kps
                .par_iter()
                .map(|kp| {
                    let mut kp = *kp;
                    kp.orientation = assign_orientation(&kp, &levels[kp.level]);
                    let d = binary_descriptor(&kp, img).expect("border checked");
                    (kp, d)
                })
                .collect();
            let (keypoints, descriptors) = described.into_iter().unzip();
            Ok(Features {
                keypoints,
                descriptors: Descriptors::Binary(descriptors),
            })
        }
    }
}

/// Keypoints only, canonically ordered, for the `detect` command.
pub fn detect_keypoints(img: &GrayImage, cfg: &AlignConfig) -> Result<Vec<Keypoint>> {
    let mut kps = extract_features(img, cfg)?.keypoints;
    kps.sort_by(canonical_order);
    Ok(kps)
}

/// One correspondence as written to `matches.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub qx: f64,
    pub qy: f64,
    pub tx: f64,
    pub ty: f64,
    pub distance: f64,
    pub ratio: f64,
    pub inlier: bool,
}

/// Mutual matches before and after the ratio test.
pub fn match_features(a: &Features, b: &Features, ratio: f64) -> Result<(Vec<Match>, Vec<Match>)> {
    if a.keypoints.is_empty() || b.keypoints.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let mutual = mutual_matches(&a.descriptors, &b.descriptors)?;
    let filtered = ratio_filter(&mutual, ratio);
    Ok((mutual, filtered))
}

fn records(
    a: &Features,
    b: &Features,
    matches: &[Match],
    inliers: Option<&[bool]>,
) -> Vec<MatchRecord> {
    matches
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let (q, t) = (a.keypoints[m.query], b.keypoints[m.train]);
            MatchRecord {
                qx: q.x,
                qy: q.y,
                tx: t.x,
                ty: t.y,
                distance: m.distance,
                ratio: m.ratio,
                inlier: inliers.is_some_and(|f| f[i]),
            }
        })
        .collect()
}

pub fn matches_csv(rows: &[MatchRecord], with_inlier: bool) -> String {
    let mut out = String::from("qx,qy,tx,ty,distance,ratio");
    if with_inlier {
        out.push_str(",inlier");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{:.4},{:.4},{:.4},{:.4},{:.6},{:.6}",
            r.qx, r.qy, r.tx, r.ty, r.distance, r.ratio
        );
        if with_inlier {
            let _ = write!(out, ",{}", u8::from(r.inlier));
        }
        out.push('\n');
    }
    out
}

pub fn keypoints_csv(kps: &[Keypoint]) -> String {
    let mut out = String::from("x,y,sigma,response,orientation,detector\n");
    for k in kps {
        let _ = writeln!(
            out,
            "{:.4},{:.4},{:.4},{:.6e},{:.6},{}",
            k.x, k.y, k.sigma, k.response, k.orientation, k.detector
        );
    }
    out
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (v * f).round() / f
}

/// Metrics as reported: integer area, lengths to one decimal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub area: usize,
    pub spine_length: f64,
    pub avg_width: f64,
    pub area_over_length: Option<f64>,
}

impl From<&CrackMetrics> for MetricsSummary {
    fn from(m: &CrackMetrics) -> Self {
        Self {
            area: m.area,
            spine_length: round_to(m.spine_length, 1),
            avg_width: round_to(m.avg_width, 1),
            area_over_length: m.area_over_length().map(|v| round_to(v, 2)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorsSummary {
    pub area_err: f64,
    pub length_err: f64,
    pub width_err: f64,
}

impl From<&MetricErrors> for ErrorsSummary {
    fn from(e: &MetricErrors) -> Self {
        Self {
            area_err: round_to(e.area_err, 2),
            length_err: round_to(e.length_err, 2),
            width_err: round_to(e.width_err, 2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    /// Reference image, whole frame.
    pub reference: MetricsSummary,
    /// Target image before correction, whole frame.
    pub target: MetricsSummary,
    /// Reference restricted to the valid region of the corrected image.
    pub baseline: Option<MetricsSummary>,
    pub corrected: Option<MetricsSummary>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub report: Option<String>,
    pub corrected: Option<String>,
    pub overlay: Option<String>,
    pub matches: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignStatus {
    Aligned,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub schema: u32,
    pub status: AlignStatus,
    pub failure: Option<String>,
    pub detector: DetectorChoice,
    pub seed: u64,
    pub keypoints_reference: usize,
    pub keypoints_target: usize,
    /// Mutual nearest neighbors, before the ratio test.
    pub matches_mutual: usize,
    /// Matches handed to RANSAC.
    pub matches_before_ransac: usize,
    pub matches_after_ransac: usize,
    pub inliers: usize,
    pub sigma_final: Option<f64>,
    pub iterations_run: Option<usize>,
    /// Row-major, maps reference to target.
    pub homography: Option<[f64; 9]>,
    pub metrics: ReportMetrics,
    pub errors: Option<ErrorsSummary>,
    pub artifacts: Artifacts,
    pub timings_ms: Option<BTreeMap<String, f64>>,
}

impl AlignReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn aligned(&self) -> bool {
        self.status == AlignStatus::Aligned
    }
}

/// Everything `align` produces, before anything is written.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub report: AlignReport,
    pub homography: Option<Homography>,
    pub matches: Vec<MatchRecord>,
    pub corrected: Option<GrayImage>,
    pub overlay: Option<Overlay>,
    /// Unrounded metric errors, when both metric sets exist.
    pub errors: Option<MetricErrors>,
}

struct Timer {
    enabled: bool,
    start: Instant,
    stages: BTreeMap<String, f64>,
}

impl Timer {
    fn new(enabled: bool) -> Self {
        Self {
            enabled,
            start: Instant::now(),
            stages: BTreeMap::new(),
        }
    }

    fn lap(&mut self, name: &str) {
        if self.enabled {
            let now = Instant::now();
            let ms = (now - self.start).as_secs_f64() * 1e3;
            self.stages.insert(name.to_string(), ms);
            self.start = now;
        }
    }

    fn finish(self) -> Option<BTreeMap<String, f64>> {
        self.enabled.then_some(self.stages)
    }
}

/// Align `target` onto `reference` and compare their crack metrics.
///
/// Alignment failures are reported in the returned value; only invalid
/// configuration is an error.
pub fn align_images(
    reference: &GrayImage,
    target: &GrayImage,
    cfg: &AlignConfig,
) -> Result<Alignment> {
    cfg.validate()?;
    let mut timer = Timer::new(cfg.timings);
    let fa = extract_features(reference, cfg)?;
    timer.lap("features_reference");
    let fb = extract_features(target, cfg)?;
    timer.lap("features_target");
    let (mutual, filtered) = match_features(&fa, &fb, cfg.ratio)?;
    timer.lap("matching");

    let reference_metrics = compute_metrics(&segment_crack(reference));
    let target_metrics = compute_metrics(&segment_crack(target));
    let mut report = AlignReport {
        schema: REPORT_SCHEMA,
        status: AlignStatus::Failed,
        failure: None,
        detector: cfg.detector,
        seed: cfg.ransac.seed,
        keypoints_reference: fa.keypoints.len(),
        keypoints_target: fb.keypoints.len(),
        matches_mutual: mutual.len(),
        matches_before_ransac: filtered.len(),
        matches_after_ransac: 0,
        inliers: 0,
        sigma_final: None,
        iterations_run: None,
        homography: None,
        metrics: ReportMetrics {
            reference: (&reference_metrics).into(),
            target: (&target_metrics).into(),
            baseline: None,
            corrected: None,
        },
        errors: None,
        artifacts: Artifacts::default(),
        timings_ms: None,
    };

    let correspondences: Vec<Correspondence> = filtered
        .iter()
        .map(|m| {
            let (q, t) = (fa.keypoints[m.query], fb.keypoints[m.train]);
            Correspondence::new([q.x, q.y], [t.x, t.y])
        })
        .collect();
    let fit = if correspondences.len() < 4 {
        Err(Error::InsufficientMatches {
            needed: 4,
            have: correspondences.len(),
        })
    } else {
        ransac(&correspondences, &cfg.ransac)
    };
    timer.lap("ransac");

    let fit = match fit {
        Ok(fit) => fit,
        Err(e) => {
            report.failure = Some(e.to_string());
            let matches = records(&fa, &fb, &filtered, None);
            report.timings_ms = timer.finish();
            return Ok(Alignment {
                report,
                homography: None,
                matches,
                corrected: None,
                overlay: None,
                errors: None,
            });
        }
    };

    let h = fit.homography;
    let (corrected, valid) =
        warp_image(target, &h.invert()?, reference.width(), reference.height())?;
    timer.lap("warp");
    let baseline_mask = segment_crack_within(reference, Some(&valid));
    let corrected_mask = segment_crack_within(&corrected, Some(&valid));
    let baseline_metrics = compute_metrics(&baseline_mask);
    let corrected_metrics = compute_metrics(&corrected_mask);
    let errors = metric_errors(&corrected_metrics, &baseline_metrics).ok();
    let overlay = render_overlay(&baseline_mask, &corrected_mask)?;
    timer.lap("metrics");

    report.status = AlignStatus::Aligned;
    report.matches_after_ransac = fit.inlier_count();
    report.inliers = fit.inlier_count();
    report.sigma_final = Some(fit.sigma);
    report.iterations_run = Some(fit.iterations);
    report.homography = Some(h.to_row_major());
    report.metrics.baseline = Some((&baseline_metrics).into());
    report.metrics.corrected = Some((&corrected_metrics).into());
    report.errors = errors.as_ref().map(Into::into);
    if errors.is_none() {
        report.failure = Some("baseline has no measurable crack; errors undefined".into());
    }
    report.timings_ms = timer.finish();
    Ok(Alignment {
        report,
        homography: Some(h),
        matches: records(&fa, &fb, &filtered, Some(&fit.inliers)),
        corrected: Some(corrected),
        overlay: Some(overlay),
        errors,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Write report.json, matches.csv and, on success, corrected.png and
/// overlay.png into `out_dir`, recording their paths in the report.
pub fn write_alignment(al: &mut Alignment, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let path_str = |name: &str| out_dir.join(name).to_string_lossy().into_owned();
    let matches_path = out_dir.join("matches.csv");
    write_text(&matches_path, &matches_csv(&al.matches, true))?;
    al.report.artifacts.matches = Some(path_str("matches.csv"));
    if let Some(img) = &al.corrected {
        save_image(img, out_dir.join("corrected.png"))?;
        al.report.artifacts.corrected = Some(path_str("corrected.png"));
    }
    if let Some(ov) = &al.overlay {
        ov.save(out_dir.join("overlay.png"))?;
        al.report.artifacts.overlay = Some(path_str("overlay.png"));
    }
    al.report.artifacts.report = Some(path_str("report.json"));
    write_text(&out_dir.join("report.json"), &al.report.to_json())
}

/// Load two images, align them and optionally write artifacts.
pub fn align(
    reference: impl AsRef<Path>,
    target: impl AsRef<Path>,
    cfg: &AlignConfig,
    out_dir: Option<&Path>,
) -> Result<Alignment> {
    let a = load_image(reference)?;
    let b = load_image(target)?;
    let mut al = align_images(&a, &b, cfg)?;
    if let Some(dir) = out_dir {
        write_alignment(&mut al, dir)?;
    }
    Ok(al)
}

pub const TILT_LEVELS: [f64; 3] = [1e-4, 5e-4, 1.5e-3];
pub const NOISE_LEVELS: [f64; 3] = [2.0 / 255.0, 5.0 / 255.0, 10.0 / 255.0];
pub const BLUR_LEVELS: [f64; 3] = [0.5, 1.5, 3.0];
pub const CONTRAST_LEVELS: [f64; 3] = [1.0, 0.6, 0.3];
pub const SHADOW_LEVELS: [f64; 3] = [0.9, 0.6, 0.3];

/// Image degradations applied to a synthetic target. Zero tilt, noise and
/// blur and unit contrast and shadow are neutral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    /// Projective `h31` per px, applied about the image center.
    pub tilt: f64,
    pub noise: f64,
    pub blur: f64,
    pub contrast: f64,
    /// Shadow ramp end value at the right edge.
    pub shadow: f64,
}

impl PerturbSpec {
    pub const NEUTRAL: PerturbSpec = PerturbSpec {
        tilt: 0.0,
        noise: 0.0,
        blur: 0.0,
        contrast: 1.0,
        shadow: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        fn check(name: &str, v: f64, neutral: f64, grid: &[f64]) -> Result<()> {
            if v == neutral || grid.iter().any(|g| (g - v).abs() < 1e-12) {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!(
                    "{name} {v} not in grid {grid:?}"
                )))
            }
        }
        check("tilt", self.tilt, 0.0, &TILT_LEVELS)?;
        check("noise", self.noise, 0.0, &NOISE_LEVELS)?;
        check("blur", self.blur, 0.0, &BLUR_LEVELS)?;
        check("contrast", self.contrast, 1.0, &CONTRAST_LEVELS)?;
        check("shadow", self.shadow, 1.0, &SHADOW_LEVELS)
    }
}

/// Ground-truth homography of a tilt about the image center.
pub fn tilt_homography(h31: f64, width: usize, height: usize) -> Homography {
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let to = Homography::translation(cx, cy);
    let from = Homography::translation(-cx, -cy);
    let p = Homography::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [h31, 0.0, 1.0]])
        .expect("tilt is invertible");
    to.compose(&p.compose(&from).expect("finite"))
        .expect("finite")
}

/// Apply warp, noise, blur, contrast and shadow in that order. The warp
/// replicates border pixels so the target has no empty margin.
pub fn perturb(img: &GrayImage, spec: &PerturbSpec, seed: u64) -> Result<GrayImage> {
    spec.validate()?;
    let (w, h) = (img.width(), img.height());
    let mut out = if spec.tilt != 0.0 {
        let hg = tilt_homography(spec.tilt, w, h);
        let inv = hg.invert()?;
        let f = img.as_field();
        GrayImage::from_fn(w, h, |x, y| match inv.apply([x as f64, y as f64]) {
            Ok([px, py]) => f.bilinear_clamped(px, py),
            Err(_) => 0.0,
        })
    } else {
        img.clone()
    };
    if spec.noise > 0.0 {
        let normal =
            Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = out
            .data()
            .iter()
            .map(|&v| v + normal.sample(&mut rng))
            .collect();
        out = GrayImage::from_field_clamped(crate::imgio::Field::new(w, h, data)?);
    }
    if spec.blur > 0.0 {
        out = gaussian_blur(&out, spec.blur)?;
    }
    if spec.contrast != 1.0 || spec.shadow != 1.0 {
        let denom = (w.max(2) - 1) as f64;
        let src = out;
        out = GrayImage::from_fn(w, h, |x, y| {
            let v = 0.5 + spec.contrast * (src.get(x, y) - 0.5);
            let ramp = 1.0 + (spec.shadow - 1.0) * x as f64 / denom;
            v * ramp
        });
    }
    Ok(out)
}

/// Light textured surface with one dark crack 5 to 7 px wide crossing the
/// middle of the frame.
pub fn synthetic_scene(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (width as f64, height as f64);
    let n_blobs = (wf * hf / 250.0) as usize;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            let amp = rng.random_range(0.08..0.2) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (
                rng.random_range(0.0..wf),
                rng.random_range(0.0..hf),
                rng.random_range(1.5..5.0),
                amp,
            )
        })
        .collect();

    let mut path = Vec::new();
    let (mut x, mut y) = (0.15 * wf, rng.random_range(0.35..0.65) * hf);
    let mut heading: f64 = rng.random_range(-0.3..0.3);
    while x < 0.85 * wf {
        path.push((x, y));
        heading = (heading + rng.random_range(-0.35..0.35)).clamp(-0.7, 0.7);
        x += 4.0 * heading.cos();
        y = (y + 4.0 * heading.sin()).clamp(0.2 * hf, 0.8 * hf);
    }
    path.push((x, y));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);

    // Spatial bins keep the blob sum local.
    let cell = 16.0;
    let (gw, gh) = (
        (wf / cell).ceil() as usize + 1,
        (hf / cell).ceil() as usize + 1,
    );
    let mut grid: Vec<Vec<usize>> = vec![Vec::new(); gw * gh];
    for (i, b) in blobs.iter().enumerate() {
        let r = 3.0 * b.2;
        let (x0, x1) = (
            ((b.0 - r) / cell).floor().max(0.0) as usize,
            ((b.0 + r) / cell) as usize,
        );
        let (y0, y1) = (
            ((b.1 - r) / cell).floor().max(0.0) as usize,
            ((b.1 + r) / cell) as usize,
        );
        for gy in y0..=y1.min(gh - 1) {
            for gx in x0..=x1.min(gw - 1) {
                grid[gy * gw + gx].push(i);
            }
        }
    }

    GrayImage::from_fn(width, height, |px, py| {
        let (fx, fy) = (px as f64, py as f64);
        let cellv = &grid[(py as f64 / cell) as usize * gw + (px as f64 / cell) as usize];
        let mut v = 0.7;
        for &i in cellv {
            let (bx, by, s, a) = blobs[i];
            let d2 = (fx - bx).powi(2) + (fy - by).powi(2);
            v += a * (-d2 / (2.0 * s * s)).exp();
        }
        v = v.clamp(0.45, 0.95);
        let (mut best, mut along) = (f64::INFINITY, 0.0);
        for (k, seg) in path.windows(2).enumerate() {
            let ((ax, ay), (bx, by)) = (seg[0], seg[1]);
            let (dx, dy) = (bx - ax, by - ay);
            let t = (((fx - ax) * dx + (fy - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
            let d = (fx - ax - t * dx).hypot(fy - ay - t * dy);
            if d < best {
                best = d;
                along = k as f64 + t;
            }
        }
        let half = 3.0 + 0.5 * (0.15 * along + phase).sin();
        let cover = (half + 0.5 - best).clamp(0.0, 1.0);
        v * (1.0 - cover) + 0.15 * cover
    })
}

/// Largest reprojection disagreement over the image corners, px.
pub fn max_corner_error(
    estimate: &Homography,
    truth: &Homography,
    width: usize,
    height: usize,
) -> f64 {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]]
        .iter()
        .map(|&c| match (estimate.apply(c), truth.apply(c)) {
            (Ok(a), Ok(b)) => (a[0] - b[0]).hypot(a[1] - b[1]),
            _ => f64::INFINITY,
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Factor {
    Identity,
    Tilt,
    Noise,
    Blur,
    Contrast,
    Shadow,
}

impl FromStr for Factor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Factor::Identity),
            "tilt" => Ok(Factor::Tilt),
            "noise" => Ok(Factor::Noise),
            "blur" => Ok(Factor::Blur),
            "contrast" => Ok(Factor::Contrast),
            "shadow" => Ok(Factor::Shadow),
            other => Err(Error::InvalidParameter(format!(
                "unknown grid factor '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub name: String,
    pub spec: PerturbSpec,
}

/// Cells for the given factors. Every non-identity cell carries a mild
/// tilt so there is a transform to recover.
pub fn grid_cells(factors: &[Factor]) -> Vec<BenchCell> {
    const NAMES: [&str; 3] = ["low", "medium", "high"];
    let mild = PerturbSpec {
        tilt: TILT_LEVELS[0],
        ..PerturbSpec::NEUTRAL
    };
    let mut cells = Vec::new();
    let mut fs = factors.to_vec();
    fs.sort();
    fs.dedup();
    for f in fs {
        match f {
            Factor::Identity => cells.push(BenchCell {
                name: "identity".into(),
                spec: PerturbSpec::NEUTRAL,
            }),
            Factor::Tilt => {
                for (name, &t) in ["mild", "medium", "severe"].iter().zip(&TILT_LEVELS) {
                    cells.push(BenchCell {
                        name: format!("tilt-{name}"),
                        spec: PerturbSpec { tilt: t, ..mild },
                    });
                }
            }
            Factor::Noise => {
                for (name, &n) in NAMES.iter().zip(&NOISE_LEVELS) {
                    cells.push(BenchCell {
                        name: format!("noise-{name}"),
                        spec: PerturbSpec { noise: n, ..mild },
                    });
                }
            }
            Factor::Blur => {
                for (name, &b) in NAMES.iter().zip(&BLUR_LEVELS) {
                    cells.push(BenchCell {
                        name: format!("blur-{name}"),
                        spec: PerturbSpec { blur: b, ..mild },
                    });
                }
            }
            Factor::Contrast => {
                for (name, &c) in ["high", "medium", "low"].iter().zip(&CONTRAST_LEVELS) {
                    cells.push(BenchCell {
                        name: format!("contrast-{name}"),
                        spec: PerturbSpec {
                            contrast: c,
                            ..mild
                        },
                    });
                }
            }
            Factor::Shadow => {
                for (name, &s) in NAMES.iter().zip(&SHADOW_LEVELS) {
                    cells.push(BenchCell {
                        name: format!("shadow-{name}"),
                        spec: PerturbSpec { shadow: s, ..mild },
                    });
                }
            }
        }
    }
    cells
}

pub fn cell_by_name(name: &str) -> Option<BenchCell> {
    grid_cells(&[
        Factor::Identity,
        Factor::Tilt,
        Factor::Noise,
        Factor::Blur,
        Factor::Contrast,
        Factor::Shadow,
    ])
    .into_iter()
    .find(|c| c.name == name)
}

/// Source images for a bench run.
#[derive(Debug, Clone)]
pub enum BenchSource {
    /// A fresh synthetic scene per seed.
    Synthetic { width: usize, height: usize },
    /// Named images reused for every seed.
    Corpus(Vec<(String, GrayImage)>),
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub source: BenchSource,
    pub cells: Vec<BenchCell>,
    pub detectors: Vec<DetectorChoice>,
    pub seeds: Vec<u64>,
    /// Worker threads; 0 uses the rayon default.
    pub jobs: usize,
    pub align: AlignConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            source: BenchSource::Synthetic {
                width: 320,
                height: 240,
            },
            cells: grid_cells(&[
                Factor::Identity,
                Factor::Tilt,
                Factor::Noise,
                Factor::Blur,
                Factor::Contrast,
                Factor::Shadow,
            ]),
            detectors: DetectorChoice::ALL.to_vec(),
            seeds: (0..3).collect(),
            jobs: 0,
            align: AlignConfig::default(),
        }
    }
}

/// One benchmark run's scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub base: String,
    pub cell: String,
    pub cell_index: usize,
    pub detector: DetectorChoice,
    pub seed: u64,
    pub aligned: bool,
    pub matches: usize,
    pub inliers: usize,
    pub corner_error: Option<f64>,
    pub errors: Option<MetricErrors>,
}

/// Run one (base, cell, detector, seed) case.
pub fn run_case(
    base_name: &str,
    base: &GrayImage,
    cell: &BenchCell,
    cell_index: usize,
    detector: DetectorChoice,
    seed: u64,
    align_cfg: &AlignConfig,
) -> Result<BenchRow> {
    let target = perturb(base, &cell.spec, seed)?;
    let truth = tilt_homography(cell.spec.tilt, base.width(), base.height());
    let cfg = align_cfg.with_detector(detector).with_seed(seed);
    let al = align_images(base, &target, &cfg)?;
    Ok(BenchRow {
        base: base_name.to_string(),
        cell: cell.name.clone(),
        cell_index,
        detector,
        seed,
        aligned: al.report.aligned(),
        matches: al.report.matches_before_ransac,
        inliers: al.report.inliers,
        corner_error: al
            .homography
            .map(|h| max_corner_error(&h, &truth, base.width(), base.height())),
        errors: al.errors,
    })
}

fn run_cases(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let bases: Vec<(String, u64, GrayImage)> = match &cfg.source {
        BenchSource::Synthetic { width, height } => cfg
            .seeds
            .iter()
            .map(|&s| {
                (
                    format!("synthetic-{s}"),
                    s,
                    synthetic_scene(*width, *height, s),
                )
            })
            .collect(),
        BenchSource::Corpus(images) => images
            .iter()
            .flat_map(|(name, img)| {
                cfg.seeds
                    .iter()
                    .map(move |&s| (name.clone(), s, img.clone()))
            })
            .collect(),
    };
    let mut jobs = Vec::new();
    for (bi, (_, seed, _)) in bases.iter().enumerate() {
        for (ci, _) in cfg.cells.iter().enumerate() {
            for &d in &cfg.detectors {
                jobs.push((bi, *seed, ci, d));
            }
        }
    }
    let mut rows = jobs
        .par_iter()
        .map(|&(bi, seed, ci, d)| {
            let (name, _, img) = &bases[bi];
            run_case(name, img, &cfg.cells[ci], ci, d, seed, &cfg.align)
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        (a.cell_index, a.detector, &a.base, a.seed).cmp(&(
            b.cell_index,
            b.detector,
            &b.base,
            b.seed,
        ))
    });
    Ok(rows)
}

/// Run every case on a pool of `cfg.jobs` workers. Rows come back in
/// canonical order regardless of scheduling.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    for c in &cfg.cells {
        c.spec.validate()?;
    }
    if cfg.seeds.is_empty() || cfg.detectors.is_empty() || cfg.cells.is_empty() {
        return Err(Error::InvalidParameter(
            "bench needs seeds, detectors and cells".into(),
        ));
    }
    if let BenchSource::Corpus(images) = &cfg.source {
        if images.is_empty() {
            return Err(Error::Empty("bench corpus"));
        }
    }
    cfg.align.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    pool.install(|| run_cases(cfg))
}

fn opt(v: Option<f64>, decimals: usize) -> String {
    v.map(|x| format!("{x:.decimals$}")).unwrap_or_default()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(
        "cell,detector,base,seed,aligned,matches,inliers,corner_error,area_err,length_err,width_err\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.cell,
            r.detector,
            r.base,
            r.seed,
            u8::from(r.aligned),
            r.matches,
            r.inliers,
            opt(r.corner_error, 3),
            opt(r.errors.map(|e| e.area_err), 2),
            opt(r.errors.map(|e| e.length_err), 2),
            opt(r.errors.map(|e| e.width_err), 2),
        );
    }
    out
}

/// Per-cell table of mean inlier counts, one column per detector.
pub fn aggregate_table(rows: &[BenchRow]) -> String {
    let mut detectors: Vec<DetectorChoice> = rows.iter().map(|r| r.detector).collect();
    detectors.sort();
    detectors.dedup();
    let mut cells: Vec<(usize, &str)> = rows
        .iter()
        .map(|r| (r.cell_index, r.cell.as_str()))
        .collect();
    cells.sort();
    cells.dedup();
    let mut out = format!("{:<18}", "cell");
    for d in &detectors {
        let _ = write!(out, " {:>24}", format!("{d} inliers (ok/n)"));
    }
    out.push('\n');
    for (ci, name) in cells {
        let _ = write!(out, "{name:<18}");
        for d in &detectors {
            let sel: Vec<&BenchRow> = rows
                .iter()
                .filter(|r| r.cell_index == ci && r.detector == *d)
                .collect();
            let mean = sel.iter().map(|r| r.inliers as f64).sum::<f64>() / sel.len().max(1) as f64;
            let ok = sel.iter().filter(|r| r.aligned).count();
            let _ = write!(out, " {:>24}", format!("{mean:.1} ({ok}/{})", sel.len()));
        }
        out.push('\n');
    }
    out
}

/// Load every PNG/PNM image in `dir`, sorted by file name.
pub fn load_corpus(dir: &Path) -> Result<Vec<(String, GrayImage)>> {
    let entries = std::fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
                matches!(
                    e.to_ascii_lowercase().as_str(),
                    "png" | "pgm" | "ppm" | "pnm"
                )
            })
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            load_image(&p).map(|img| (name, img))
        })
        .collect()
}

/// Mask helper for callers that want the raw segmentation of an image.
pub fn crack_mask(img: &GrayImage) -> BinaryMask {
    segment_crack(img)
}
