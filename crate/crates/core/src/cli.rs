//! Command-line front end: argument parsing, configuration resolution and the
//! subcommands of the `depth-transfer` binary.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::AlignParams;
use crate::database::{Database, IngestOptions};
use crate::error::{Error, Result};
use crate::eval::{run_benchmark, Aggregation, BenchmarkConfig, Protocol};
use crate::flow::{estimate_flow_with, flow_confidence, FlowParams};
use crate::io::{load_depth, load_rgb, save_depth_pfm, save_depth_png, save_mask, save_rgb, write_flo, write_trace_csv};
use crate::motionseg::{detect_motion, RansacParams, SegmentParams};
use crate::optimizer::{infer_image, infer_video, ObjectiveParams, PipelineParams};
use crate::raster::{resize_depth, to_grayscale, ImageRGB};
use crate::viewsynth::{
    compose_anaglyph, compose_side_by_side, depth_to_disparity, render_view, temporal_filter_disparity, StereoParams,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Everything a config file may set. Flags override file values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Worker threads; all logical cores when unset.
    pub workers: Option<usize>,
    pub objective: ObjectiveParams,
    pub align: AlignParams,
    pub flow: FlowParams,
    pub stereo: StereoParams,
    pub dump: DumpConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DumpConfig {
    /// Objective value per IRLS iteration as CSV.
    pub traces: bool,
    /// Warped candidate depths (PFM) and their warp fields (.flo).
    pub warps: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.objective.validate()?;
        self.align.validate()?;
        self.stereo.validate()
    }

    pub fn pipeline(&self) -> PipelineParams {
        PipelineParams {
            objective: self.objective.clone(),
            align: self.align.clone(),
            flow: self.flow.clone(),
            ransac: RansacParams::default(),
            segment: SegmentParams::default(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "depth-transfer", version, about = "Depth from a single image or video by transfer from an RGBD database")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest a database directory and write its feature cache.
    BuildDb {
        dir: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        /// Working resolution as WIDTHxHEIGHT; 460x345 or 345x460 by default.
        #[arg(long, value_parser = parse_size)]
        canonical: Option<(usize, usize)>,
        #[command(flatten)]
        common: Common,
    },
    /// Infer the depth of one image.
    Infer {
        image: PathBuf,
        #[arg(long)]
        db: PathBuf,
        /// Output depth PNG (16-bit millimetres); a PFM is written next to it.
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Infer depth for a directory of video frames.
    InferVideo {
        frames: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Skip motion segmentation and the motion-aware pass.
        #[arg(long)]
        no_motion: bool,
        /// Drop the temporal coherence rows.
        #[arg(long)]
        no_temporal: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Write moving-object masks for a directory of video frames.
    MotionMask {
        frames: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Render stereo frames from images and their depth maps.
    Stereo {
        frames: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = StereoFormat::Anaglyph)]
        format: StereoFormat,
        #[arg(long)]
        max_disparity: Option<f64>,
        #[arg(long)]
        convergence_percentile: Option<f64>,
        /// Skip flow-guided smoothing of the disparities.
        #[arg(long)]
        no_temporal: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score a test directory against a database.
    Eval {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_enum, default_value_t = ProtocolArg::Make3d)]
        protocol: ProtocolArg,
        #[arg(long, value_enum, default_value_t = AggregationArg::ImageMean)]
        aggregation: AggregationArg,
        /// Permit test items that are part of the database.
        #[arg(long)]
        allow_overlap: bool,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StereoFormat {
    Anaglyph,
    Sbs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProtocolArg {
    Make3d,
    Rgbd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AggregationArg {
    ImageMean,
    PixelPooled,
}

/// Options shared by every subcommand.
#[derive(Debug, Args, Default)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub dump_traces: bool,
    #[arg(long)]
    pub dump_warps: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if self.workers.is_some() {
            c.workers = self.workers;
        }
        let o = &mut c.objective;
        for (dst, src) in [
            (&mut o.alpha, self.alpha),
            (&mut o.beta, self.beta),
            (&mut o.gamma, self.gamma),
            (&mut o.nu, self.nu),
            (&mut o.eta, self.eta),
            (&mut o.tau, self.tau),
        ] {
            if let Some(v) = src {
                *dst = v;
            }
        }
        if let Some(k) = self.k {
            o.k = k;
        }
        c.dump.traces |= self.dump_traces;
        c.dump.warps |= self.dump_warps;
        Ok(c)
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::BuildDb { common, .. }
            | Command::Infer { common, .. }
            | Command::InferVideo { common, .. }
            | Command::MotionMask { common, .. }
            | Command::Stereo { common, .. }
            | Command::Eval { common, .. } => common,
        }
    }

    /// The configuration after applying the file and then the flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = self.common().resolve()?;
        match self {
            Command::InferVideo { no_motion, no_temporal, .. } => {
                c.objective.motion &= !no_motion;
                c.objective.temporal &= !no_temporal;
            }
            Command::Stereo { max_disparity, convergence_percentile, .. } => {
                if let Some(v) = max_disparity {
                    c.stereo.max_disparity = *v;
                }
                if let Some(v) = convergence_percentile {
                    c.stereo.convergence_percentile = *v;
                }
            }
            _ => {}
        }
        c.validate()?;
        Ok(c)
    }
}

fn is_usage_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::Overlap(_))
}

/// Parses `argv` and runs the subcommand; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let config = match cli.command.resolve() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    if cli.command.common().print_config {
        print!("{}", config.to_toml());
        return EXIT_OK;
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = config.workers {
        pool = pool.num_threads(n);
    }
    let outcome = match pool.build() {
        Ok(pool) => pool.install(|| execute(&cli.command, &config)),
        Err(e) => Err(Error::Config(e.to_string())),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage_error(&e) {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Image files of a frame directory in name order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().map(|e| e.to_string_lossy().to_ascii_lowercase()).unwrap_or_default();
        if p.is_file() && matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::InvalidValue(format!("no frames in {}", dir.display())));
    }
    Ok(out)
}

fn load_frames(dir: &Path) -> Result<Vec<ImageRGB>> {
    list_frames(dir)?.iter().map(|p| load_rgb(p)).collect()
}

/// Depth maps of a directory: PFM files when present, otherwise PNG, in name order.
fn list_depths(dir: &Path) -> Result<Vec<PathBuf>> {
    let by_ext = |want: &str| -> Result<Vec<PathBuf>> {
        let mut v = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = entry.map_err(|e| Error::io(dir, e))?.path();
            if p.extension().is_some_and(|e| e.eq_ignore_ascii_case(want)) {
                v.push(p);
            }
        }
        v.sort();
        Ok(v)
    };
    let pfm = by_ext("pfm")?;
    if !pfm.is_empty() {
        return Ok(pfm);
    }
    by_ext("png")
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|n| *n >= 32);
    match s.split_once(['x', 'X']).map(|(w, h)| (parse(w), parse(h))) {
        Some((Some(w), Some(h))) => Ok((w, h)),
        _ => Err(format!("expected WIDTHxHEIGHT with both sides at least 32, got `{s}`")),
    }
}

fn execute(cmd: &Command, c: &RunConfig) -> Result<()> {
    match cmd {
        Command::BuildDb { dir, cache, canonical, .. } => {
            let opts = IngestOptions { canonical: *canonical, cache: cache.exists().then(|| cache.clone()) };
            let (db, errors) = Database::ingest(dir, &opts)?;
            for e in &errors {
                eprintln!("skipped {}: {}", e.path.display(), e.message);
            }
            db.save_cache(cache)?;
            eprintln!("{} entries written to {}", db.len(), cache.display());
            Ok(())
        }
        Command::Infer { image, db, output, .. } => {
            let db = Database::load_cache(db)?;
            let img = load_rgb(image)?;
            let res = infer_image(&db, &img, &c.pipeline())?;
            save_depth_png(&res.depth, output)?;
            save_depth_pfm(&res.depth, &output.with_extension("pfm"))?;
            let stem = output.with_extension("");
            let stem = stem.to_string_lossy();
            if c.dump.traces {
                write_trace_csv(Path::new(&format!("{stem}_trace.csv")), &res.solve.trace)?;
            }
            if c.dump.warps {
                for (j, cand) in res.candidates.iter().enumerate() {
                    save_depth_pfm(&cand.depth, Path::new(&format!("{stem}_cand{j}.pfm")))?;
                    let (w, h) = cand.warp.dims();
                    let uv: Vec<(f32, f32)> = cand.warp.u().iter().zip(cand.warp.v()).map(|(u, v)| (*u as f32, *v as f32)).collect();
                    write_flo(Path::new(&format!("{stem}_cand{j}.flo")), w, h, &uv)?;
                }
            }
            Ok(())
        }
        Command::InferVideo { frames, db, output, .. } => {
            let db = Database::load_cache(db)?;
            let imgs = load_frames(frames)?;
            let res = infer_video(&db, &imgs, &c.pipeline())?;
            create_dir(output)?;
            for (t, d) in res.depths.iter().enumerate() {
                save_depth_png(d, &output.join(format!("depth_{t:05}.png")))?;
                save_depth_pfm(d, &output.join(format!("depth_{t:05}.pfm")))?;
            }
            if let Some(masks) = &res.masks {
                for (t, m) in masks.iter().enumerate() {
                    save_mask(&m.mask, &output.join(format!("mask_{t:05}.png")))?;
                }
            }
            if c.dump.traces {
                for (i, tr) in res.traces.iter().enumerate() {
                    write_trace_csv(&output.join(format!("trace_{i:02}.csv")), tr)?;
                }
            }
            Ok(())
        }
        Command::MotionMask { frames, output, .. } => {
            let imgs = load_frames(frames)?;
            let p = c.pipeline();
            let seg = SegmentParams { tau: c.objective.tau, ..SegmentParams::default() };
            let analysis = detect_motion(&imgs, &p.ransac, &p.flow, &seg)?;
            create_dir(output)?;
            for (t, m) in analysis.masks.iter().enumerate() {
                save_mask(&m.mask, &output.join(format!("mask_{t:05}.png")))?;
            }
            Ok(())
        }
        Command::Stereo { frames, depth, output, format, no_temporal, .. } => {
            let imgs = load_frames(frames)?;
            let depth_paths = list_depths(depth)?;
            if depth_paths.len() != imgs.len() {
                return Err(Error::InvalidValue(format!(
                    "{} frames but {} depth maps",
                    imgs.len(),
                    depth_paths.len()
                )));
            }
            let disps = imgs
                .par_iter()
                .zip(&depth_paths)
                .map(|(img, p)| {
                    let d = load_depth(p)?;
                    let d = if d.dims() == img.dims() { d } else { resize_depth(&d, img.width(), img.height()) };
                    depth_to_disparity(&d, &c.stereo)
                })
                .collect::<Result<Vec<_>>>()?;
            let disps = if *no_temporal || imgs.len() < 2 {
                disps
            } else {
                let gray: Vec<_> = imgs.iter().map(to_grayscale).collect();
                let pairs = gray
                    .par_windows(2)
                    .map(|g| {
                        let f = estimate_flow_with(&g[0], &g[1], &c.flow)?;
                        let s = flow_confidence(&g[0], &g[1], &f)?;
                        Ok((f, s))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (flows, conf): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
                temporal_filter_disparity(&disps, &flows, Some(&conf))?
            };
            create_dir(output)?;
            imgs.par_iter().zip(&disps).enumerate().try_for_each(|(t, (img, d))| {
                let (right, _) = render_view(img, d)?;
                let (out, name) = match format {
                    StereoFormat::Anaglyph => (compose_anaglyph(img, &right)?, format!("anaglyph_{t:05}.png")),
                    StereoFormat::Sbs => (compose_side_by_side(img, &right)?, format!("sbs_{t:05}.png")),
                };
                save_rgb(&out, &output.join(name))
            })
        }
        Command::Eval { db, test, protocol, aggregation, allow_overlap, output, .. } => {
            let db = Database::load_cache(db)?;
            let cfg = BenchmarkConfig {
                protocol: match protocol {
                    ProtocolArg::Make3d => Protocol::Make3d,
                    ProtocolArg::Rgbd => Protocol::Rgbd,
                },
                aggregation: match aggregation {
                    AggregationArg::ImageMean => Aggregation::ImageMean,
                    AggregationArg::PixelPooled => Aggregation::PixelPooled,
                },
                allow_overlap: *allow_overlap,
                pipeline: c.pipeline(),
            };
            let report = run_benchmark(&db, test, &cfg)?;
            let json = report.write(output, &cfg)?;
            eprintln!(
                "rel {:.4}  log10 {:.4}  rms {:.4}  ({} items, {} failed); summary in {}",
                report.rel,
                report.log10,
                report.rms,
                report.items.len(),
                report.failures(),
                json.display()
            );
            Ok(())
        }
    }
}
