//! Error metrics, depth-range rescaling and the train/test benchmark harness.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::database::{scan_sources, Database, SourceKind};
use crate::error::{Error, Result};
use crate::io::{load_depth, load_rgb};
use crate::optimizer::{infer_image, infer_video, PipelineParams};
use crate::raster::{resize_depth, DepthMap, ImageRGB};

/// Per-image depth errors over the pixels where both maps are valid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DepthMetrics {
    pub rel: f64,
    pub log10: f64,
    pub rms: f64,
    pub pixels: usize,
}

pub fn depth_metrics(d: &DepthMap, gt: &DepthMap) -> Result<DepthMetrics> {
    if d.dims() != gt.dims() {
        return Err(Error::SizeMismatch(format!("depth {:?} vs ground truth {:?}", d.dims(), gt.dims())));
    }
    let (mut rel, mut lg, mut sq, mut n) = (0.0, 0.0, 0.0, 0usize);
    for i in 0..d.len() {
        if let (Some(a), Some(b)) = (d.get(i), gt.get(i)) {
            rel += (a - b).abs() / b;
            lg += (a.log10() - b.log10()).abs();
            sq += (a - b) * (a - b);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoValidOverlap);
    }
    let nf = n as f64;
    Ok(DepthMetrics { rel: rel / nf, log10: lg / nf, rms: (sq / nf).sqrt(), pixels: n })
}

/// Affine map of the valid range of `d` onto `[lo, hi]`; a constant map
/// becomes the midpoint.
pub fn rescale_to_range(d: &DepthMap, lo: f64, hi: f64) -> Result<DepthMap> {
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(Error::InvalidValue(format!("range must satisfy hi > lo > 0, got [{lo}, {hi}]")));
    }
    let (min, max) = d.min_max_valid().ok_or(Error::NoValidOverlap)?;
    let (w, h) = d.dims();
    let data = d
        .values()
        .iter()
        .map(|v| if max > min { lo + (v - min) * (hi - lo) / (max - min) } else { 0.5 * (lo + hi) })
        .collect();
    DepthMap::with_mask(w, h, data, d.valid().to_vec())
}

/// PSNR in dB of two [0, 1] images over the unmasked pixels (`mask` true =
/// included). Identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageRGB, b: &ImageRGB, mask: Option<&[bool]>) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::SizeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    if mask.is_some_and(|m| m.len() != a.len()) {
        return Err(Error::SizeMismatch("mask length differs from image".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (p, q)) in a.data().iter().zip(b.data()).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        sum += (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>();
        n += 3;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mse = sum / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

/// Formats a PSNR value, writing the infinite sentinel as `inf`.
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Metrics on the raw inferred and ground-truth depths.
    #[default]
    Make3d,
    /// Inferred and ground-truth depths each rescaled to 1–81 m first.
    Rgbd,
}

impl Protocol {
    pub const RGBD_RANGE: (f64, f64) = (1.0, 81.0);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Mean of the per-image values.
    #[default]
    ImageMean,
    /// Every valid pixel of every image weighted equally.
    PixelPooled,
}

#[derive(Clone, Debug, Default)]
pub struct BenchmarkConfig {
    pub protocol: Protocol,
    pub aggregation: Aggregation,
    /// Skips the train/test disjointness check (hold-in sanity runs).
    pub allow_overlap: bool,
    pub pipeline: PipelineParams,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ItemResult {
    pub item: String,
    pub metrics: Option<DepthMetrics>,
    pub psnr: Option<f64>,
    /// `None` on success, otherwise the failure message.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub rel: f64,
    pub log10: f64,
    pub rms: f64,
    pub psnr: Option<f64>,
    pub aggregation: Aggregation,
    pub items: Vec<ItemResult>,
}

impl MetricReport {
    /// Aggregates the successful items; failed items are kept but excluded.
    pub fn aggregate(items: Vec<ItemResult>, aggregation: Aggregation) -> Result<MetricReport> {
        let ok: Vec<DepthMetrics> = items.iter().filter_map(|i| i.metrics).collect();
        if ok.is_empty() {
            return Err(Error::InvalidValue("no test item succeeded".into()));
        }
        let (rel, log10, rms) = match aggregation {
            Aggregation::ImageMean => {
                let n = ok.len() as f64;
                (
                    ok.iter().map(|m| m.rel).sum::<f64>() / n,
                    ok.iter().map(|m| m.log10).sum::<f64>() / n,
                    ok.iter().map(|m| m.rms).sum::<f64>() / n,
                )
            }
            Aggregation::PixelPooled => {
                let n = ok.iter().map(|m| m.pixels).sum::<usize>() as f64;
                let pooled = |f: &dyn Fn(&DepthMetrics) -> f64| ok.iter().map(|m| f(m) * m.pixels as f64).sum::<f64>() / n;
                (pooled(&|m| m.rel), pooled(&|m| m.log10), pooled(&|m| m.rms * m.rms).sqrt())
            }
        };
        let ps: Vec<f64> = items.iter().filter_map(|i| i.psnr).collect();
        let psnr = (!ps.is_empty()).then(|| ps.iter().sum::<f64>() / ps.len() as f64);
        Ok(MetricReport { rel, log10, rms, psnr, aggregation, items })
    }

    pub fn failures(&self) -> usize {
        self.items.iter().filter(|i| i.error.is_some()).count()
    }

    /// `item,rel,log10,rms,psnr,status`, one row per item.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("item,rel,log10,rms,psnr,status\n");
        for it in &self.items {
            let num = |f: fn(&DepthMetrics) -> f64| it.metrics.map(|m| format!("{:.6}", f(&m))).unwrap_or_default();
            let status = match &it.error {
                None => "ok".to_string(),
                Some(e) => format!("\"error: {}\"", e.replace('"', "'")),
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                it.item,
                num(|m| m.rel),
                num(|m| m.log10),
                num(|m| m.rms),
                it.psnr.map(format_psnr).unwrap_or_default(),
                status
            );
        }
        s
    }

    pub fn summary_json(&self, config: &BenchmarkConfig) -> serde_json::Value {
        serde_json::json!({
            "rel": self.rel,
            "log10": self.log10,
            "rms": self.rms,
            "psnr": self.psnr.map(format_psnr),
            "items": self.items.len(),
            "failed": self.failures(),
            "config": {
                "protocol": config.protocol,
                "aggregation": config.aggregation,
                "objective": config.pipeline.objective,
                "align": config.pipeline.align,
                "flow": config.pipeline.flow,
            }
        })
    }

    /// Writes the CSV to `csv` and the JSON summary next to it.
    pub fn write(&self, csv: &Path, config: &BenchmarkConfig) -> Result<PathBuf> {
        fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        let json = csv.with_extension("json");
        let text = serde_json::to_string_pretty(&self.summary_json(config)).expect("json value");
        fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        Ok(json)
    }
}

fn canonical_path(p: &Path) -> PathBuf {
    p.canonicalize().unwrap_or_else(|_| p.to_path_buf())
}

/// Fails when the test directory and the database share a root or a file.
pub fn check_disjoint(db: &Database, test_root: &Path) -> Result<()> {
    let test = canonical_path(test_root);
    if let Some(root) = db.root() {
        let root = canonical_path(root);
        if root.starts_with(&test) || test.starts_with(&root) {
            return Err(Error::Overlap(format!(
                "test set {} and training database {} overlap",
                test.display(),
                root.display()
            )));
        }
    }
    let train: std::collections::HashSet<PathBuf> =
        db.entries().iter().filter_map(|e| e.paths()).map(|(img, _)| canonical_path(img)).collect();
    for src in scan_sources(test_root)? {
        for (_, img, _) in &src.frames {
            if train.contains(&canonical_path(img)) {
                return Err(Error::Overlap(format!("{} is part of the training database", img.display())));
            }
        }
    }
    Ok(())
}

fn score(depth: &DepthMap, gt: &DepthMap, protocol: Protocol) -> Result<DepthMetrics> {
    let d = resize_depth(depth, gt.width(), gt.height());
    match protocol {
        Protocol::Make3d => depth_metrics(&d, gt),
        Protocol::Rgbd => {
            let (lo, hi) = Protocol::RGBD_RANGE;
            depth_metrics(&rescale_to_range(&d, lo, hi)?, &rescale_to_range(gt, lo, hi)?)
        }
    }
}

fn failed(item: String, e: Error) -> ItemResult {
    ItemResult { item, metrics: None, psnr: None, error: Some(e.to_string()) }
}

fn still_item(db: &Database, item: String, image: &Path, depth: &Path, cfg: &BenchmarkConfig) -> ItemResult {
    let run = || -> Result<DepthMetrics> {
        let img = load_rgb(image)?;
        let gt = load_depth(depth)?;
        let inferred = infer_image(db, &img, &cfg.pipeline)?;
        score(&inferred.depth, &gt, cfg.protocol)
    };
    match run() {
        Ok(m) => ItemResult { item, metrics: Some(m), psnr: None, error: None },
        Err(e) => failed(item, e),
    }
}

fn video_items(db: &Database, name: &str, frames: &[(usize, PathBuf, PathBuf)], cfg: &BenchmarkConfig) -> Vec<ItemResult> {
    let item = |k: usize| format!("{name}/{k:05}");
    let images: Result<Vec<ImageRGB>> = frames.iter().map(|(_, img, _)| load_rgb(img)).collect();
    let inferred = images.and_then(|imgs| infer_video(db, &imgs, &cfg.pipeline));
    match inferred {
        Err(e) => {
            let msg = e.to_string();
            frames
                .iter()
                .map(|(k, _, _)| ItemResult { item: item(*k), metrics: None, psnr: None, error: Some(msg.clone()) })
                .collect()
        }
        Ok(v) => frames
            .iter()
            .zip(&v.depths)
            .map(|((k, _, depth), d)| match load_depth(depth).and_then(|gt| score(d, &gt, cfg.protocol)) {
                Ok(m) => ItemResult { item: item(*k), metrics: Some(m), psnr: None, error: None },
                Err(e) => failed(item(*k), e),
            })
            .collect(),
    }
}

/// Infers every test item against `db` and scores it. Still sources are
/// scored per image, video sources are inferred as sequences. Items that
/// fail are reported and excluded from the aggregate.
pub fn run_benchmark(db: &Database, test_root: &Path, cfg: &BenchmarkConfig) -> Result<MetricReport> {
    cfg.pipeline.validate()?;
    let sources = scan_sources(test_root)?;
    if sources.iter().all(|s| s.frames.is_empty()) {
        return Err(Error::EmptyTestSet);
    }
    if !cfg.allow_overlap {
        check_disjoint(db, test_root)?;
    }
    let mut items = Vec::new();
    for src in &sources {
        match src.kind {
            SourceKind::Still => {
                let mut part: Vec<ItemResult> = src
                    .frames
                    .par_iter()
                    .map(|(k, img, depth)| still_item(db, format!("{}/{k:05}", src.name), img, depth, cfg))
                    .collect();
                items.append(&mut part);
            }
            SourceKind::Video => items.extend(video_items(db, &src.name, &src.frames, cfg)),
        }
    }
    MetricReport::aggregate(items, cfg.aggregation)
}
