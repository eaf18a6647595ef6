use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crackalign::crackmetrics::distance_transform;
use crackalign::pipeline::{
    aggregate_table, bench_csv, cell_by_name, detect_keypoints, extract_features, grid_cells,
    keypoints_csv, load_corpus, match_features, matches_csv, perturb, run_bench, synthetic_scene,
    BenchConfig, BenchSource, Factor, MatchRecord, MetricsSummary,
};
use crackalign::scalespace::{build_gaussian_pyramid, build_nonlinear_scale_space};
use crackalign::{
    align, compute_metrics, load_image, save_image, segment_crack, AlignConfig, DetectorChoice,
    RansacConfig,
};

/// Perspective alignment and crack measurement for time-lapse images.
#[derive(Parser)]
#[command(name = "crackalign", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align a target image onto a reference and compare crack metrics.
    Align {
        reference: PathBuf,
        target: PathBuf,
        #[command(flatten)]
        opts: PipelineOpts,
        /// Directory for report.json, corrected.png, overlay.png, matches.csv.
        #[arg(long, default_value = "crackalign-out")]
        out: PathBuf,
        /// Record per-stage wall-clock times in the report.
        #[arg(long)]
        timings: bool,
    },
    /// Detect keypoints and print them as CSV.
    Detect {
        image: PathBuf,
        #[command(flatten)]
        opts: PipelineOpts,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Match keypoints between two images and print the matches as CSV.
    Match {
        reference: PathBuf,
        target: PathBuf,
        #[command(flatten)]
        opts: PipelineOpts,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment the crack in one image and print its metrics as JSON.
    Metrics {
        image: PathBuf,
        /// Also write the crack mask as a PNG.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Also write the distance transform (normalized) as a PNG.
        #[arg(long)]
        distance: Option<PathBuf>,
    },
    /// Run the perturbation benchmark and write bench.csv.
    Bench(BenchArgs),
    /// Render a synthetic crack scene, optionally with a perturbed copy.
    Synth {
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 320)]
        width: usize,
        #[arg(long, default_value_t = 240)]
        height: usize,
        /// Bench cell to apply, e.g. tilt-medium or noise-low.
        #[arg(long, requires = "target")]
        cell: Option<String>,
        /// Where to write the perturbed copy.
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Dump every scale level of an image as PNGs.
    Levels {
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dump the Gaussian pyramid instead of the nonlinear scale space.
        #[arg(long)]
        linear: bool,
    },
}

#[derive(Args, Clone)]
struct PipelineOpts {
    /// nonlinear, dog or fast.
    #[arg(long, default_value = "nonlinear")]
    detector: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lowe ratio for match filtering.
    #[arg(long, default_value_t = 0.8)]
    ratio: f64,
    #[arg(long)]
    hessian_threshold: Option<f64>,
    #[arg(long)]
    dog_threshold: Option<f64>,
    #[arg(long)]
    fast_threshold: Option<f64>,
    #[command(flatten)]
    ransac: RansacOpts,
}

#[derive(Args, Clone)]
struct RansacOpts {
    /// Correspondences per RANSAC sample.
    #[arg(long = "ransac-k", alias = "sample-size", default_value_t = 10)]
    sample_size: usize,
    #[arg(long = "ransac-p", alias = "confidence", default_value_t = 0.99)]
    confidence: f64,
    /// Initial outlier ratio guess.
    #[arg(long = "ransac-e0", alias = "outlier-ratio", default_value_t = 0.5)]
    outlier_ratio: f64,
    #[arg(long = "ransac-cap", alias = "max-iterations", default_value_t = 5000)]
    max_iterations: usize,
    /// Initial noise sigma in px; the adaptive sigma never exceeds it.
    #[arg(long = "ransac-sigma0", alias = "initial-sigma", default_value_t = 1.0)]
    initial_sigma: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// Use synthetic scenes (the default unless --corpus is given).
    #[arg(long, conflicts_with = "corpus")]
    synthetic: bool,
    /// Directory of base images.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Factors to vary: identity, tilt, noise, blur, contrast, shadow.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "identity,tilt,noise,blur,contrast,shadow"
    )]
    grid: Vec<String>,
    /// Named cells to run instead of whole factors.
    #[arg(long, value_delimiter = ',')]
    cells: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "nonlinear,dog,fast")]
    detectors: Vec<String>,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long, default_value_t = 320)]
    width: usize,
    #[arg(long, default_value_t = 240)]
    height: usize,
    #[arg(long, default_value = "crackalign-bench")]
    out: PathBuf,
}

impl PipelineOpts {
    fn config(&self) -> Result<AlignConfig> {
        let detector: DetectorChoice = self.detector.parse()?;
        let mut cfg = AlignConfig {
            detector,
            ratio: self.ratio,
            ransac: RansacConfig {
                sample_size: self.ransac.sample_size,
                confidence: self.ransac.confidence,
                initial_outlier_ratio: self.ransac.outlier_ratio,
                max_iterations: self.ransac.max_iterations,
                initial_sigma: self.ransac.initial_sigma,
                seed: self.seed,
            },
            ..AlignConfig::default()
        };
        if let Some(t) = self.hessian_threshold {
            cfg.hessian_threshold = t;
        }
        if let Some(t) = self.dog_threshold {
            cfg.dog_threshold = t;
        }
        if let Some(t) = self.fast_threshold {
            cfg.fast_threshold = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Align {
            reference,
            target,
            opts,
            out,
            timings,
        } => {
            let mut cfg = opts.config()?;
            cfg.timings = timings;
            let al = align(&reference, &target, &cfg, Some(&out))?;
            let r = &al.report;
            if r.aligned() {
                eprintln!(
                    "aligned: {} inliers of {} matches, report in {}",
                    r.inliers,
                    r.matches_before_ransac,
                    out.display()
                );
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!(
                    "alignment failed: {}",
                    r.failure.as_deref().unwrap_or("unknown reason")
                );
                Ok(ExitCode::from(2))
            }
        }
        Command::Detect { image, opts, out } => {
            let img = load_image(&image)?;
            let kps = detect_keypoints(&img, &opts.config()?)?;
            emit(&keypoints_csv(&kps), out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Match {
            reference,
            target,
            opts,
            out,
        } => {
            let cfg = opts.config()?;
            let (a, b) = (load_image(&reference)?, load_image(&target)?);
            let (fa, fb) = (extract_features(&a, &cfg)?, extract_features(&b, &cfg)?);
            let (_, filtered) = match_features(&fa, &fb, cfg.ratio)?;
            let rows: Vec<MatchRecord> = filtered
                .iter()
                .map(|m| {
                    let (q, t) = (fa.keypoints[m.query], fb.keypoints[m.train]);
                    MatchRecord {
                        qx: q.x,
                        qy: q.y,
                        tx: t.x,
                        ty: t.y,
                        distance: m.distance,
                        ratio: m.ratio,
                        inlier: false,
                    }
                })
                .collect();
            emit(&matches_csv(&rows, false), out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Metrics {
            image,
            mask,
            distance,
        } => {
            let img = load_image(&image)?;
            let m = segment_crack(&img);
            let summary = MetricsSummary::from(&compute_metrics(&m));
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if let Some(p) = mask {
                save_image(&m.to_image(), p)?;
            }
            if let Some(p) = distance {
                crackalign::imgio::save_field_normalized(&distance_transform(&m), p)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench(args) => bench(args),
        Command::Synth {
            out,
            seed,
            width,
            height,
            cell,
            target,
        } => {
            let img = synthetic_scene(width, height, seed);
            save_image(&img, &out)?;
            if let (Some(name), Some(path)) = (cell, target) {
                let Some(c) = cell_by_name(&name) else {
                    bail!("unknown cell '{name}'");
                };
                save_image(&perturb(&img, &c.spec, seed)?, path)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Levels { image, out, linear } => {
            let img = load_image(&image)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let schedule =
                crackalign::ScaleSchedule::default().fitted(img.width(), img.height())?;
            if linear {
                let pyr = build_gaussian_pyramid(&img, &schedule)?;
                for (o, oct) in pyr.octaves.iter().enumerate() {
                    for (s, plane) in oct.planes.iter().enumerate() {
                        save_image(plane.image(), out.join(format!("plane_o{o}_s{s}.png")))?;
                    }
                }
            } else {
                let space = build_nonlinear_scale_space(&img, &schedule)?;
                for (i, lvl) in space.levels.iter().enumerate() {
                    save_image(lvl.image(), out.join(format!("level_{i:02}.png")))?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn bench(args: BenchArgs) -> Result<ExitCode> {
    let source = match &args.corpus {
        Some(dir) => BenchSource::Corpus(load_corpus(dir)?),
        None => BenchSource::Synthetic {
            width: args.width,
            height: args.height,
        },
    };
    let cells = if args.cells.is_empty() {
        let factors = args
            .grid
            .iter()
            .map(|g| g.parse::<Factor>())
            .collect::<crackalign::Result<Vec<_>>>()?;
        grid_cells(&factors)
    } else {
        args.cells
            .iter()
            .map(|n| cell_by_name(n).with_context(|| format!("unknown cell '{n}'")))
            .collect::<Result<Vec<_>>>()?
    };
    let detectors = args
        .detectors
        .iter()
        .map(|d| d.parse::<DetectorChoice>())
        .collect::<crackalign::Result<Vec<_>>>()?;
    let cfg = BenchConfig {
        source,
        cells,
        detectors,
        seeds: (0..args.seeds).collect(),
        jobs: args.jobs,
        align: AlignConfig::default(),
    };
    let rows = run_bench(&cfg)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let csv_path = args.out.join("bench.csv");
    std::fs::write(&csv_path, bench_csv(&rows))
        .with_context(|| format!("writing {}", csv_path.display()))?;
    print!("{}", aggregate_table(&rows));
    eprintln!("{} runs written to {}", rows.len(), csv_path.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    // Usage errors exit 1 like other configuration errors; 2 is reserved
    // for alignment failure.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
