//! Manifest ingestion, image decoding, real-frame oversampling and the
//! synthetic four-cue dataset.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: u8,
    pub video_id: String,
    pub split: Split,
}

/// Rows of `path,label,video_id,split`; relative paths resolve against `root`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

#[derive(Deserialize)]
struct RawRow {
    path: String,
    label: String,
    video_id: String,
    split: String,
}

impl DatasetManifest {
    /// Validates labels and split disjointness, not file existence.
    pub fn new(root: impl Into<PathBuf>, rows: Vec<ManifestRow>) -> Result<Self> {
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for (i, row) in rows.iter().enumerate() {
            if row.label > 1 {
                return Err(Error::Data(format!("row {}: label {} is not 0 or 1", i + 1, row.label)));
            }
            match seen.get(row.path.as_str()) {
                Some(&s) if s != row.split => {
                    return Err(Error::Data(format!(
                        "{} appears in both the {} and {} splits",
                        row.path, s, row.split
                    )))
                }
                _ => {
                    seen.insert(&row.path, row.split);
                }
            }
        }
        Ok(DatasetManifest { root: root.into(), rows })
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::Data(format!("manifest header: {e}")))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "video_id", "split"] {
            return Err(Error::Data(format!(
                "manifest header must be path,label,video_id,split, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.deserialize::<RawRow>().enumerate() {
            let raw = rec.map_err(|e| Error::Data(format!("manifest row {}: {e}", i + 1)))?;
            let label = match raw.label.as_str() {
                "0" => 0,
                "1" => 1,
                other => return Err(Error::Data(format!("row {}: label '{other}' is not 0 or 1", i + 1))),
            };
            rows.push(ManifestRow {
                path: raw.path,
                label,
                video_id: raw.video_id,
                split: raw.split.parse()?,
            });
        }
        Self::new(root, rows)
    }

    /// Reads a manifest and checks that every listed image exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::parse(&text, root)?;
        for row in &manifest.rows {
            let p = manifest.resolve(&row.path);
            if !p.is_file() {
                return Err(Error::Data(format!("listed image {} does not exist", p.display())));
            }
        }
        Ok(manifest)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(vec![]);
        w.write_record(["path", "label", "video_id", "split"]).expect("in-memory write");
        for r in &self.rows {
            w.write_record([r.path.clone(), r.label.to_string(), r.video_id.clone(), r.split.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv output is utf-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split_rows(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }
}

/// Decoded frames of one split, pixels in `[0, 1]`, CHW per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub resolution: usize,
    pub ids: Vec<String>,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub video_ids: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, id: String, image: Vec<f64>, label: u8, video_id: String) {
        debug_assert_eq!(image.len(), 3 * self.resolution * self.resolution);
        self.ids.push(id);
        self.images.push(image);
        self.labels.push(label);
        self.video_ids.push(video_id);
    }

    pub fn empty(resolution: usize) -> Self {
        Dataset {
            resolution,
            ids: vec![],
            images: vec![],
            labels: vec![],
            video_ids: vec![],
        }
    }

    pub fn from_manifest(manifest: &DatasetManifest, split: Split, resolution: usize) -> Result<Self> {
        let mut ds = Self::empty(resolution);
        for row in manifest.split_rows(split) {
            let img = load_image(&manifest.resolve(&row.path), resolution)?;
            ds.push(row.path.clone(), img, row.label, row.video_id.clone());
        }
        Ok(ds)
    }

    /// Stacks the given samples into a `(B, 3, H, W)` batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        let r = self.resolution;
        let mut data = Vec::with_capacity(indices.len() * 3 * r * r);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images[i]);
            labels.push(self.labels[i]);
        }
        (Tensor::from_vec(&[indices.len(), 3, r, r], data).expect("consistent sizes"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut ds = Self::empty(self.resolution);
        for &i in indices {
            ds.push(self.ids[i].clone(), self.images[i].clone(), self.labels[i], self.video_ids[i].clone());
        }
        ds
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let fake = self.labels.iter().filter(|&&y| y == 1).count();
        [self.len() - fake, fake]
    }
}

/// Decodes an image to CHW floats; its size must equal the model resolution.
pub fn load_image(path: &Path, resolution: usize) -> Result<Vec<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    if w as usize != resolution || h as usize != resolution {
        return Err(Error::Data(format!(
            "{} is {}x{}, expected {}x{}",
            path.display(),
            w,
            h,
            resolution,
            resolution
        )));
    }
    Ok(rgb_to_chw(&img))
}

pub fn rgb_to_chw(img: &image::RgbImage) -> Vec<f64> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    out
}

pub fn chw_to_rgb(data: &[f64], h: usize, w: usize) -> image::RgbImage {
    let plane = h * w;
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|c| to_u8(data[c * plane + i])))
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Training order before shuffling: every real frame repeated `factor` times.
pub fn oversample_indices(labels: &[u8], factor: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let reps = if y == 0 { factor.max(1) } else { 1 };
        out.extend(std::iter::repeat_n(i, reps));
    }
    out
}

/// Picks up to `per_video` frames of each video, evenly strided in frame
/// order with a seeded offset. Videos are visited in first-appearance order.
pub fn sample_frames(video_ids: &[String], per_video: usize, seed: u64) -> Vec<usize> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut first: HashMap<&str, usize> = HashMap::new();
    for (i, v) in video_ids.iter().enumerate() {
        let key = *first.entry(v.as_str()).or_insert(i);
        groups.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for frames in groups.values() {
        let n = frames.len();
        if per_video == 0 || n <= per_video {
            out.extend_from_slice(frames);
            continue;
        }
        let stride = n as f64 / per_video as f64;
        let offset = rng.random_range(0.0..stride);
        for k in 0..per_video {
            let idx = ((offset + k as f64 * stride).floor() as usize).min(n - 1);
            out.push(frames[idx]);
        }
    }
    out
}

/// Parameters of the synthetic two-class set. Fake frames carry four small
/// high-frequency texture patches, one per image quadrant at a random offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub size: usize,
    pub videos: usize,
    pub frames_per_video: usize,
    pub cue_size: usize,
    pub cue_amplitude: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            videos: 100,
            frames_per_video: 10,
            cue_size: 8,
            cue_amplitude: 0.2,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || self.size % 2 != 0 {
            return Err(Error::Config(format!("synthetic size must be even and at least 16, got {}", self.size)));
        }
        if self.cue_size == 0 || 2 * self.cue_size > self.size / 2 {
            return Err(Error::Config(format!(
                "cue_size {} does not fit in a {}px quadrant",
                self.cue_size,
                self.size / 2
            )));
        }
        if self.videos == 0 || self.frames_per_video == 0 {
            return Err(Error::Config("synthetic set needs at least one video and frame".into()));
        }
        Ok(())
    }
}

struct VideoScene {
    base: [f64; 3],
    gradient: [[f64; 2]; 3],
    blobs: Vec<(f64, f64, f64, f64)>,
    cues: Vec<(usize, usize)>,
    phase: Vec<u32>,
}

fn make_scene(cfg: &SynthConfig, fake: bool, rng: &mut ChaCha8Rng) -> VideoScene {
    let s = cfg.size as f64;
    let base = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let gradient = std::array::from_fn(|_| [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)]);
    let blobs = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(s / 10.0..s / 4.0),
                rng.random_range(-0.15..0.15),
            )
        })
        .collect();
    let half = cfg.size / 2;
    let mut cues = Vec::new();
    let mut phase = Vec::new();
    if fake {
        for (qy, qx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let span = half - cfg.cue_size;
            cues.push((qy * half + rng.random_range(0..=span), qx * half + rng.random_range(0..=span)));
            phase.push(rng.random_range(0..2));
        }
    }
    VideoScene {
        base,
        gradient,
        blobs,
        cues,
        phase,
    }
}

fn render(cfg: &SynthConfig, scene: &VideoScene, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = cfg.size;
    let s = n as f64;
    // small per-frame drift so frames of one video differ
    let (dy, dx) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let mut out = vec![0.0; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = ((y as f64 + dy) / s - 0.5, (x as f64 + dx) / s - 0.5);
            let mut shade = 0.0;
            for &(by, bx, r, a) in &scene.blobs {
                let d2 = ((y as f64 + dy - by).powi(2) + (x as f64 + dx - bx).powi(2)) / (r * r);
                shade += a * (-d2).exp();
            }
            for c in 0..3 {
                let g = scene.gradient[c];
                out[(c * n + y) * n + x] = scene.base[c] + g[0] * fy + g[1] * fx + shade;
            }
        }
    }
    let k = cfg.cue_size;
    for (&(cy, cx), &ph) in scene.cues.iter().zip(&scene.phase) {
        for y in cy..cy + k {
            for x in cx..cx + k {
                let sign = if (x + y + ph as usize) % 2 == 0 { 1.0 } else { -1.0 };
                for c in 0..3 {
                    out[(c * n + y) * n + x] += sign * cfg.cue_amplitude;
                }
            }
        }
    }
    for v in out.iter_mut() {
        let noisy = *v + cfg.noise * rng.random_range(-1.0..1.0);
        // quantise so in-memory frames equal their PNG round trip
        *v = to_u8(noisy) as f64 / 255.0;
    }
    out
}

/// Generates whole videos; labels alternate so the classes are balanced.
pub fn synthesize(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ds = Dataset::empty(cfg.size);
    for v in 0..cfg.videos {
        let label = (v % 2) as u8;
        let scene = make_scene(cfg, label == 1, &mut rng);
        let vid = format!("v{v:05}");
        for f in 0..cfg.frames_per_video {
            let img = render(cfg, &scene, &mut rng);
            ds.push(format!("{vid}_f{f:03}"), img, label, vid.clone());
        }
    }
    Ok(ds)
}

/// Splits whole videos into train/val/test by fractions of the video count.
pub fn split_by_video(ds: &Dataset, val_frac: f64, test_frac: f64) -> BTreeMap<Split, Vec<usize>> {
    let mut order: Vec<&str> = Vec::new();
    for v in &ds.video_ids {
        if order.last() != Some(&v.as_str()) && !order.contains(&v.as_str()) {
            order.push(v);
        }
    }
    let n = order.len();
    let n_test = (n as f64 * test_frac).round() as usize;
    let n_val = (n as f64 * val_frac).round() as usize;
    let split_of: HashMap<&str, Split> = order
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let s = if i >= n - n_test {
                Split::Test
            } else if i >= n - n_test - n_val {
                Split::Val
            } else {
                Split::Train
            };
            (*v, s)
        })
        .collect();
    let mut out: BTreeMap<Split, Vec<usize>> = BTreeMap::new();
    for (i, v) in ds.video_ids.iter().enumerate() {
        out.entry(split_of[v.as_str()]).or_default().push(i);
    }
    out
}

/// Writes every frame as PNG under `dir/images` plus `dir/manifest.csv`.
pub fn write_dataset(ds: &Dataset, splits: &BTreeMap<Split, Vec<usize>>, dir: &Path) -> Result<DatasetManifest> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut rows = Vec::with_capacity(ds.len());
    for (split, indices) in splits {
        for &i in indices {
            let rel = format!("images/{}.png", ds.ids[i]);
            let path = dir.join(&rel);
            chw_to_rgb(&ds.images[i], ds.resolution, ds.resolution)
                .save(&path)
                .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
            rows.push(ManifestRow {
                path: rel,
                label: ds.labels[i],
                video_id: ds.video_ids[i].clone(),
                split: *split,
            });
        }
    }
    let manifest = DatasetManifest::new(dir, rows)?;
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}
