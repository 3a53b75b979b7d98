//! RGBD database: ingest, depth prior, feature cache and top-K retrieval.
//!
//! Layout: `<root>/<source>/img_%05d.{png,jpg}` with `depth_%05d.{png,pfm}`.
//! An optional `<root>/manifest.txt` lists sources as `still <dir>` or
//! `video <dir>`; without it every subdirectory is a source, and sources with
//! more than one frame are videos.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{
    compute_dense_sift, compute_flow_histogram, compute_gist, match_distance, DescriptorGrid, FeatureSet, FlowHistogram,
    GistDescriptor, DEFAULT_CELL, FLOW_HIST_LEN, GIST_LEN,
};
use crate::flow::estimate_flow;
use crate::io::{load_depth, load_rgb};
use crate::raster::{resize, resize_depth, to_grayscale, DepthMap, ImageRGB};

const MAGIC: &[u8; 4] = b"DTDB";
const VERSION: u16 = 1;

/// Canonical working resolution for an image of the given size.
pub fn canonical_size(width: usize, height: usize) -> (usize, usize) {
    if width >= height {
        (460, 345)
    } else {
        (345, 460)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceKind {
    Still,
    Video,
}

#[derive(Clone, Debug, PartialEq)]
enum EntryData {
    InMemory { image: ImageRGB, depth: DepthMap },
    OnDisk { image: PathBuf, depth: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatabaseEntry {
    pub id: usize,
    pub source: String,
    pub frame: usize,
    pub kind: SourceKind,
    pub features: FeatureSet,
    /// SHA-256 of the source files (or in-memory rasters) and the canonical size.
    pub hash: [u8; 32],
    data: EntryData,
}

impl DatabaseEntry {
    pub fn paths(&self) -> Option<(&Path, &Path)> {
        match &self.data {
            EntryData::OnDisk { image, depth } => Some((image, depth)),
            EntryData::InMemory { .. } => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct IngestError {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct Database {
    root: Option<PathBuf>,
    width: usize,
    height: usize,
    entries: Vec<DatabaseEntry>,
    prior: DepthMap,
}

/// A retrieved candidate: index into the database entries and its distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub distance: f64,
}

/// Pixelwise mean of the valid depths; pixels no entry covers get the mean
/// of all valid samples.
pub fn compute_prior(depths: &[DepthMap]) -> Result<DepthMap> {
    let first = depths.first().ok_or(Error::EmptyDatabase)?;
    let (w, h) = first.dims();
    let mut sum = vec![0.0; w * h];
    let mut count = vec![0usize; w * h];
    for d in depths {
        accumulate(d, &mut sum, &mut count)?;
    }
    finish_prior(w, h, &sum, &count)
}

fn accumulate(d: &DepthMap, sum: &mut [f64], count: &mut [usize]) -> Result<()> {
    if d.len() != sum.len() {
        return Err(Error::SizeMismatch("depth maps of the prior differ in size".into()));
    }
    for i in 0..sum.len() {
        if let Some(v) = d.get(i) {
            sum[i] += v;
            count[i] += 1;
        }
    }
    Ok(())
}

fn finish_prior(w: usize, h: usize, sum: &[f64], count: &[usize]) -> Result<DepthMap> {
    let total: usize = count.iter().sum();
    if total == 0 {
        return Err(Error::InvalidValue("no valid depth sample in the database".into()));
    }
    let global = sum.iter().sum::<f64>() / total as f64;
    let data = sum.iter().zip(count).map(|(s, c)| if *c > 0 { s / *c as f64 } else { global }).collect();
    DepthMap::new(w, h, data)
}

fn hash_rasters(image: &ImageRGB, depth: &DepthMap, canonical: (usize, usize)) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update((canonical.0 as u64).to_le_bytes());
    hasher.update((canonical.1 as u64).to_le_bytes());
    hasher.update((image.width() as u64).to_le_bytes());
    for p in image.data() {
        for c in p {
            hasher.update(c.to_le_bytes());
        }
    }
    for (v, ok) in depth.values().iter().zip(depth.valid()) {
        hasher.update(v.to_le_bytes());
        hasher.update([*ok as u8]);
    }
    hasher.finalize().into()
}

fn hash_files(image: &Path, depth: &Path, canonical: (usize, usize)) -> Result<[u8; 32]> {
    let mut hasher = Sha256::new();
    hasher.update((canonical.0 as u64).to_le_bytes());
    hasher.update((canonical.1 as u64).to_le_bytes());
    for p in [image, depth] {
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hasher.finalize().into())
}

/// GIST and, for video frames, the flow histogram towards `neighbour`.
pub fn image_features(image: &ImageRGB, neighbour: Option<&ImageRGB>) -> Result<FeatureSet> {
    let gist = compute_gist(image)?;
    let flow = match neighbour {
        Some(n) => Some(compute_flow_histogram(&estimate_flow(&to_grayscale(image), &to_grayscale(n))?)),
        None => None,
    };
    Ok(FeatureSet { gist, flow })
}

/// One frame of an in-memory source.
#[derive(Clone, Debug)]
pub struct MemoryFrame {
    pub source: String,
    pub frame: usize,
    pub image: ImageRGB,
    pub depth: DepthMap,
}

/// One source directory of a database-layout tree.
#[derive(Clone, Debug)]
pub struct SourceFrames {
    pub name: String,
    pub kind: SourceKind,
    /// Frame index, image path and depth path, ordered by index.
    pub frames: Vec<(usize, PathBuf, PathBuf)>,
}

fn frame_index(name: &str, prefix: &str) -> Option<(usize, String)> {
    let rest = name.strip_prefix(prefix)?;
    let (num, ext) = rest.split_once('.')?;
    if num.len() != 5 || !num.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((num.parse().ok()?, ext.to_ascii_lowercase()))
}

fn scan_source(dir: &Path, name: String, kind: Option<SourceKind>) -> Result<SourceFrames> {
    let mut images = Vec::new();
    let mut depths = std::collections::BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let file = entry.file_name().to_string_lossy().into_owned();
        if let Some((k, ext)) = frame_index(&file, "img_") {
            if ext == "png" || ext == "jpg" || ext == "jpeg" {
                images.push((k, entry.path()));
            }
        } else if let Some((k, ext)) = frame_index(&file, "depth_") {
            if ext == "png" || ext == "pfm" {
                depths.insert(k, entry.path());
            }
        }
    }
    images.sort();
    let frames: Vec<(usize, PathBuf, PathBuf)> = images
        .into_iter()
        .map(|(k, img)| {
            let depth = depths.get(&k).cloned().unwrap_or_else(|| dir.join(format!("depth_{k:05}.png")));
            (k, img, depth)
        })
        .collect();
    let kind = kind.unwrap_or(if frames.len() > 1 { SourceKind::Video } else { SourceKind::Still });
    Ok(SourceFrames { name, kind, frames })
}

/// Lists the sources of a database-layout directory, sorted by name.
pub fn scan_sources(root: &Path) -> Result<Vec<SourceFrames>> {
    let manifest = root.join("manifest.txt");
    let mut sources = Vec::new();
    if manifest.exists() {
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (kind, path) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::format(&manifest, format!("line {}: expected `still|video <path>`", n + 1)))?;
            let kind = match kind {
                "still" => SourceKind::Still,
                "video" => SourceKind::Video,
                other => return Err(Error::format(&manifest, format!("line {}: unknown kind `{other}`", n + 1))),
            };
            let path = path.trim();
            sources.push(scan_source(&root.join(path), path.to_string(), Some(kind))?);
        }
    } else {
        for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
            let entry = entry.map_err(|e| Error::io(root, e))?;
            if entry.path().is_dir() {
                let name = entry.file_name().to_string_lossy().into_owned();
                sources.push(scan_source(&entry.path(), name, None)?);
            }
        }
    }
    sources.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(sources)
}

#[derive(Clone, Debug, Default)]
pub struct IngestOptions {
    /// Working resolution; derived from the first image's orientation when unset.
    pub canonical: Option<(usize, usize)>,
    /// Existing cache whose entries are reused when their content hash matches.
    pub cache: Option<PathBuf>,
}

fn load_canonical(image: &Path, depth: &Path, canonical: (usize, usize)) -> Result<(ImageRGB, DepthMap)> {
    let img = load_rgb(image)?;
    let d = load_depth(depth)?;
    if img.dims() != d.dims() {
        return Err(Error::SizeMismatch(format!("image {:?} vs depth {:?}", img.dims(), d.dims())));
    }
    if d.valid_count() == 0 {
        return Err(Error::InvalidValue("depth map has no valid pixel".into()));
    }
    Ok((resize(&img, canonical.0, canonical.1), resize_depth(&d, canonical.0, canonical.1)))
}

impl Database {
    /// Ingests a directory; per-entry failures are returned next to the database.
    pub fn ingest(root: &Path, options: &IngestOptions) -> Result<(Database, Vec<IngestError>)> {
        let sources = scan_sources(root)?;
        let first = sources.iter().flat_map(|s| s.frames.first()).next().ok_or(Error::EmptyDatabase)?;
        let canonical = match options.canonical {
            Some(c) => c,
            None => {
                let img = load_rgb(&first.1)?;
                canonical_size(img.width(), img.height())
            }
        };
        let cached: Vec<DatabaseEntry> = match &options.cache {
            Some(p) if p.exists() => match Database::load_cache(p) {
                Ok(db) if (db.width, db.height) == canonical => db.entries,
                _ => Vec::new(),
            },
            _ => Vec::new(),
        };

        struct Job {
            source: String,
            kind: SourceKind,
            frame: usize,
            image: PathBuf,
            depth: PathBuf,
            neighbour: Option<PathBuf>,
        }
        let mut jobs = Vec::new();
        for s in &sources {
            for (k, (frame, image, depth)) in s.frames.iter().enumerate() {
                let neighbour = (s.kind == SourceKind::Video && s.frames.len() > 1).then(|| {
                    let j = if k + 1 < s.frames.len() { k + 1 } else { k - 1 };
                    s.frames[j].1.clone()
                });
                jobs.push(Job {
                    source: s.name.clone(),
                    kind: s.kind,
                    frame: *frame,
                    image: image.clone(),
                    depth: depth.clone(),
                    neighbour,
                });
            }
        }

        let (w, h) = canonical;
        let mut sum = vec![0.0; w * h];
        let mut count = vec![0usize; w * h];
        let mut entries = Vec::new();
        let mut errors = Vec::new();
        // bounded batches keep memory flat; accumulation stays in path order
        for batch in jobs.chunks(16) {
            let results: Vec<Result<(DatabaseEntry, DepthMap)>> = batch
                .par_iter()
                .map(|job| {
                    let hash = hash_files(&job.image, &job.depth, canonical)?;
                    let (image, depth) = load_canonical(&job.image, &job.depth, canonical)?;
                    let reuse = cached.iter().find(|e| {
                        e.hash == hash && e.source == job.source && e.frame == job.frame && e.kind == job.kind
                    });
                    let features = match reuse {
                        Some(e) => e.features.clone(),
                        None => {
                            let neighbour = match &job.neighbour {
                                Some(p) => Some(resize(&load_rgb(p)?, w, h)),
                                None => None,
                            };
                            image_features(&image, neighbour.as_ref())?
                        }
                    };
                    let entry = DatabaseEntry {
                        id: 0,
                        source: job.source.clone(),
                        frame: job.frame,
                        kind: job.kind,
                        features,
                        hash,
                        data: EntryData::OnDisk { image: job.image.clone(), depth: job.depth.clone() },
                    };
                    Ok((entry, depth))
                })
                .collect();
            for (job, r) in batch.iter().zip(results) {
                match r {
                    Ok((mut entry, depth)) => {
                        accumulate(&depth, &mut sum, &mut count)?;
                        entry.id = entries.len();
                        entries.push(entry);
                    }
                    Err(e) => errors.push(IngestError { path: job.image.clone(), message: e.to_string() }),
                }
            }
        }
        if entries.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        let prior = finish_prior(w, h, &sum, &count)?;
        Ok((Database { root: Some(root.to_path_buf()), width: w, height: h, entries, prior }, errors))
    }

    /// Builds a database from in-memory frames, ordered by (source, frame).
    pub fn from_frames(mut frames: Vec<MemoryFrame>, canonical: (usize, usize)) -> Result<Database> {
        if frames.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        frames.sort_by(|a, b| a.source.cmp(&b.source).then(a.frame.cmp(&b.frame)));
        let (w, h) = canonical;
        let frames: Vec<MemoryFrame> = frames
            .into_iter()
            .map(|f| {
                if f.image.dims() != f.depth.dims() {
                    return Err(Error::SizeMismatch(format!("frame {} of {}", f.frame, f.source)));
                }
                Ok(MemoryFrame { image: resize(&f.image, w, h), depth: resize_depth(&f.depth, w, h), ..f })
            })
            .collect::<Result<_>>()?;
        let count_of = |s: &str| frames.iter().filter(|f| f.source == s).count();
        let entries: Vec<DatabaseEntry> = frames
            .par_iter()
            .enumerate()
            .map(|(id, f)| {
                let video = count_of(&f.source) > 1;
                let neighbour = if video {
                    let next = frames.get(id + 1).filter(|n| n.source == f.source);
                    next.or_else(|| id.checked_sub(1).map(|j| &frames[j])).map(|n| &n.image)
                } else {
                    None
                };
                Ok(DatabaseEntry {
                    id,
                    source: f.source.clone(),
                    frame: f.frame,
                    kind: if video { SourceKind::Video } else { SourceKind::Still },
                    features: image_features(&f.image, neighbour)?,
                    hash: hash_rasters(&f.image, &f.depth, canonical),
                    data: EntryData::InMemory { image: f.image.clone(), depth: f.depth.clone() },
                })
            })
            .collect::<Result<_>>()?;
        let prior = compute_prior(&frames.iter().map(|f| f.depth.clone()).collect::<Vec<_>>())?;
        Ok(Database { root: None, width: w, height: h, entries, prior })
    }

    pub fn canonical_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn entries(&self) -> &[DatabaseEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prior(&self) -> &DepthMap {
        &self.prior
    }

    /// Image and depth of an entry at canonical resolution.
    pub fn load(&self, index: usize) -> Result<(ImageRGB, DepthMap)> {
        let e = self.entries.get(index).ok_or(Error::IndexOutOfRange { index, len: self.entries.len() })?;
        match &e.data {
            EntryData::InMemory { image, depth } => Ok((image.clone(), depth.clone())),
            EntryData::OnDisk { image, depth } => load_canonical(image, depth, (self.width, self.height)),
        }
    }

    /// Dense SIFT of an entry, computed on demand.
    pub fn descriptors(&self, index: usize) -> Result<DescriptorGrid> {
        compute_dense_sift(&self.load(index)?.0, DEFAULT_CELL)
    }

    /// Top-`k` entries by feature distance, at most one per source, ties by entry id.
    pub fn query_candidates(&self, query: &FeatureSet, k: usize) -> Result<Vec<Candidate>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        if k == 0 {
            return Err(Error::InvalidValue("k must be >= 1".into()));
        }
        let mut ranked: Vec<(f64, usize)> =
            self.entries.iter().enumerate().map(|(i, e)| (match_distance(query, &e.features), i)).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(self.entries[a.1].id.cmp(&self.entries[b.1].id)));
        let mut seen = HashSet::new();
        Ok(ranked
            .into_iter()
            .filter(|(_, i)| seen.insert(self.entries[*i].source.as_str()))
            .take(k)
            .map(|(distance, index)| Candidate { index, distance })
            .collect())
    }

    /// Writes the feature cache. Only directory-backed databases can be cached.
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let root = self.root.as_ref().ok_or_else(|| Error::InvalidValue("in-memory databases cannot be cached".into()))?;
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut b, &root.to_string_lossy());
        b.extend_from_slice(&(self.width as u32).to_le_bytes());
        b.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in self.prior.values() {
            b.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        b.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let EntryData::OnDisk { image, depth } = &e.data else {
                return Err(Error::InvalidValue("in-memory entry in a directory database".into()));
            };
            b.extend_from_slice(&(e.id as u32).to_le_bytes());
            put_str(&mut b, &e.source);
            b.extend_from_slice(&(e.frame as u32).to_le_bytes());
            b.push(match e.kind {
                SourceKind::Still => 0,
                SourceKind::Video => 1,
            });
            put_str(&mut b, &image.to_string_lossy());
            put_str(&mut b, &depth.to_string_lossy());
            for v in e.features.gist.as_slice() {
                b.extend_from_slice(&v.to_le_bytes());
            }
            match &e.features.flow {
                Some(f) => {
                    b.push(1);
                    for v in f.as_slice() {
                        b.extend_from_slice(&v.to_le_bytes());
                    }
                }
                None => b.push(0),
            }
            b.extend_from_slice(&e.hash);
        }
        fs::write(path, b).map_err(|e| Error::io(path, e))
    }

    pub fn load_cache(path: &Path) -> Result<Database> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { bytes: &bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a feature cache (bad magic)"));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported cache version {version}")));
        }
        let root = PathBuf::from(r.string()?);
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        if width == 0 || height == 0 {
            return Err(Error::format(path, "zero canonical size"));
        }
        let prior: Vec<f64> = (0..width * height).map(|_| r.f32().map(|v| v as f64)).collect::<Result<_>>()?;
        let prior = DepthMap::new(width, height, prior)?;
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let id = r.u32()? as usize;
            let source = r.string()?;
            let frame = r.u32()? as usize;
            let kind = match r.take(1)?[0] {
                0 => SourceKind::Still,
                1 => SourceKind::Video,
                k => return Err(Error::format(path, format!("bad source kind {k}"))),
            };
            let image = PathBuf::from(r.string()?);
            let depth = PathBuf::from(r.string()?);
            let gist = GistDescriptor::from_vec((0..GIST_LEN).map(|_| r.f32()).collect::<Result<_>>()?)?;
            let flow = match r.take(1)?[0] {
                0 => None,
                1 => Some(FlowHistogram::from_vec((0..FLOW_HIST_LEN).map(|_| r.f32()).collect::<Result<_>>()?)?),
                k => return Err(Error::format(path, format!("bad flow flag {k}"))),
            };
            let hash: [u8; 32] = r.array()?;
            entries.push(DatabaseEntry {
                id,
                source,
                frame,
                kind,
                features: FeatureSet { gist, flow },
                hash,
                data: EntryData::OnDisk { image, depth },
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        if entries.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        Ok(Database { root: Some(root), width, height, entries, prior })
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated cache"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let path = self.path;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(path, "non-UTF-8 string"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{save_depth_png, save_rgb};
    use crate::raster::gaussian_blur;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(seed: u64, w: usize, h: usize) -> (ImageRGB, DepthMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = crate::raster::GrayImage::from_fn(w, h, |_, _| rng.random::<f64>());
        let g = gaussian_blur(&g, 1.0);
        let tint = rng.random::<f64>();
        let img = g.map(|v| [*v, 0.5 * (v + tint), 1.0 - v]);
        let base = rng.random_range(2.0..8.0);
        let depth = DepthMap::new(w, h, (0..w * h).map(|i| base + (i / w) as f64 * 0.05).collect()).unwrap();
        (img, depth)
    }

    fn write_source(root: &Path, name: &str, frames: &[(ImageRGB, DepthMap)]) {
        let dir = root.join(name);
        fs::create_dir_all(&dir).unwrap();
        for (k, (img, d)) in frames.iter().enumerate() {
            save_rgb(img, &dir.join(format!("img_{k:05}.png"))).unwrap();
            save_depth_png(d, &dir.join(format!("depth_{k:05}.png"))).unwrap();
        }
    }

    #[test]
    fn prior_of_two_constants_is_their_mean() {
        let p = compute_prior(&[DepthMap::constant(4, 3, 2.0), DepthMap::constant(4, 3, 4.0)]).unwrap();
        assert!(p.values().iter().all(|v| (*v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn single_entry_prior_fills_holes_with_its_mean() {
        let d = DepthMap::new(2, 2, vec![1.0, 0.0, 3.0, 5.0]).unwrap();
        let p = compute_prior(&[d]).unwrap();
        assert_eq!(p.values(), &[1.0, 3.0, 3.0, 5.0]);
        assert_eq!(p.valid_count(), 4);
    }

    #[test]
    fn prior_matches_masked_mean_oracle_and_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let maps: Vec<DepthMap> = (0..5)
            .map(|_| {
                DepthMap::new(6, 5, (0..30).map(|_| if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random_range(1.0..9.0) }).collect())
                    .unwrap()
            })
            .collect();
        let p = compute_prior(&maps).unwrap();
        let all: Vec<f64> = maps.iter().flat_map(|m| (0..30).filter_map(|i| m.get(i))).collect();
        let global = all.iter().sum::<f64>() / all.len() as f64;
        for i in 0..30 {
            let s: Vec<f64> = maps.iter().filter_map(|m| m.get(i)).collect();
            let oracle = if s.is_empty() { global } else { s.iter().sum::<f64>() / s.len() as f64 };
            assert!((p.values()[i] - oracle).abs() < 1e-6);
        }
        let mut shuffled = maps.clone();
        shuffled.shuffle(&mut rng);
        let q = compute_prior(&shuffled).unwrap();
        for (a, b) in p.values().iter().zip(q.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn memory_db(sources: &[(&str, usize)], seed: u64) -> Database {
        let mut frames = Vec::new();
        let mut s = seed;
        for (name, n) in sources {
            for k in 0..*n {
                s += 1;
                let (image, depth) = scene(s, 48, 40);
                frames.push(MemoryFrame { source: name.to_string(), frame: k, image, depth });
            }
        }
        Database::from_frames(frames, (48, 40)).unwrap()
    }

    #[test]
    fn self_query_ranks_first_at_zero() {
        let db = memory_db(&[("a", 1), ("b", 1), ("c", 1)], 10);
        for (i, e) in db.entries().iter().enumerate() {
            let c = db.query_candidates(&e.features, 7).unwrap();
            assert_eq!(c[0].index, i);
            assert_eq!(c[0].distance, 0.0);
        }
    }

    #[test]
    fn one_candidate_per_video() {
        let db = memory_db(&[("v1", 3), ("v2", 2), ("v3", 2)], 20);
        assert!(db.entries().iter().all(|e| e.features.flow.is_some()));
        let c = db.query_candidates(&db.entries()[0].features, 7).unwrap();
        assert_eq!(c.len(), 3);
        let sources: HashSet<&str> = c.iter().map(|c| db.entries()[c.index].source.as_str()).collect();
        assert_eq!(sources.len(), 3);
    }

    #[test]
    fn ranking_matches_brute_force_oracle() {
        let db = memory_db(&[("s0", 4), ("s1", 3), ("s2", 4), ("s3", 3), ("s4", 3), ("s5", 3)], 40);
        assert_eq!(db.len(), 20);
        let q = memory_db(&[("q", 2)], 99).entries()[0].features.clone();
        let got = db.query_candidates(&q, 4).unwrap();
        let mut all: Vec<(f64, usize)> =
            db.entries().iter().enumerate().map(|(i, e)| (match_distance(&q, &e.features), i)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut seen = Vec::new();
        let mut oracle = Vec::new();
        for (d, i) in all {
            let s = &db.entries()[i].source;
            if !seen.contains(s) {
                seen.push(s.clone());
                oracle.push((i, d));
            }
        }
        oracle.truncate(4);
        assert_eq!(got.iter().map(|c| (c.index, c.distance)).collect::<Vec<_>>(), oracle);
        assert!(got.windows(2).all(|w| w[0].distance <= w[1].distance));
    }

    #[test]
    fn ingest_directory_and_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("db");
        write_source(&root, "still_a", &[scene(1, 40, 32)]);
        write_source(&root, "still_b", &[scene(2, 40, 32)]);
        write_source(&root, "video", &(3..6).map(|s| scene(s, 40, 32)).collect::<Vec<_>>());
        let opts = IngestOptions { canonical: Some((40, 32)), cache: None };
        let (db, errors) = Database::ingest(&root, &opts).unwrap();
        assert!(errors.is_empty());
        assert_eq!(db.len(), 5);
        assert_eq!(db.entries()[2].source, "video");
        assert_eq!(db.entries().iter().filter(|e| e.source == "video").count(), 3);
        let cache = dir.path().join("cache.bin");
        db.save_cache(&cache).unwrap();
        let loaded = Database::load_cache(&cache).unwrap();
        assert_eq!(loaded.entries(), db.entries());
        // warm re-ingest reproduces the cache byte for byte
        let opts = IngestOptions { cache: Some(cache.clone()), ..opts };
        let (again, _) = Database::ingest(&root, &opts).unwrap();
        let cache2 = dir.path().join("cache2.bin");
        again.save_cache(&cache2).unwrap();
        assert_eq!(fs::read(&cache).unwrap(), fs::read(&cache2).unwrap());
        let (img, depth) = loaded.load(0).unwrap();
        assert_eq!(img.dims(), (40, 32));
        assert_eq!(depth.dims(), (40, 32));
    }

    #[test]
    fn corrupted_entry_is_reported_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for s in 0..5 {
            write_source(root, &format!("s{s}"), &[scene(s, 40, 32)]);
        }
        fs::write(root.join("s3/depth_00000.png"), b"not a png").unwrap();
        let (db, errors) = Database::ingest(root, &IngestOptions { canonical: Some((40, 32)), cache: None }).unwrap();
        assert_eq!(db.len(), 4);
        assert_eq!(errors.len(), 1);
    }

    #[test]
    fn manifest_controls_sources() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        write_source(root, "x", &[scene(1, 40, 32), scene(2, 40, 32)]);
        write_source(root, "y", &[scene(3, 40, 32)]);
        fs::write(root.join("manifest.txt"), "still y\n").unwrap();
        let (db, _) = Database::ingest(root, &IngestOptions { canonical: Some((40, 32)), cache: None }).unwrap();
        assert_eq!(db.len(), 1);
        assert_eq!(db.entries()[0].kind, SourceKind::Still);
    }

    #[test]
    fn empty_directory_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Database::ingest(dir.path(), &IngestOptions::default()), Err(Error::EmptyDatabase)));
    }

    #[test]
    fn bad_cache_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        fs::write(&p, b"XXXX\x01\x00").unwrap();
        assert!(Database::load_cache(&p).is_err());
    }
}
