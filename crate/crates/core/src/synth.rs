//! Synthetic expression videos with separately controlled identity and
//! expression factors.
//!
//! An identity is a smooth random image (a sum of Gaussian blobs). An
//! expression class is a localized displacement field; a sequence warps
//! the identity image by that field with an intensity that either ramps
//! up to the last frame or peaks mid-sequence.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, CodecConfig, CodecError, Gop, RawFrame};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Codec { path: PathBuf, source: CodecError },
    #[error("{path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, SynthError>;

fn invalid(msg: impl Into<String>) -> SynthError {
    SynthError::InvalidParameter(msg.into())
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Image geometry shared by every frame of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for Canvas {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
        }
    }
}

impl Canvas {
    fn check(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !(self.channels == 1 || self.channels == 3) {
            return Err(invalid(format!("canvas {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubjectSpec {
    pub identity_id: u32,
    pub base_pattern_seed: u64,
    pub blobs: usize,
}

impl SubjectSpec {
    pub const DEFAULT_BLOBS: usize = 6;

    /// The base pattern seed is a function of the identity alone.
    pub fn new(identity_id: u32) -> Self {
        Self {
            identity_id,
            base_pattern_seed: mix_seed(&[0x1d, identity_id as u64]),
            blobs: Self::DEFAULT_BLOBS,
        }
    }

    /// Sum of seeded Gaussian blobs, normalized to `[32, 223]`.
    /// Returned as planar `c × h × w` gray levels.
    pub fn base_image(&self, canvas: Canvas) -> Vec<f64> {
        let Canvas {
            height: h,
            width: w,
            channels: c,
        } = canvas;
        let mut rng = ChaCha8Rng::seed_from_u64(self.base_pattern_seed);
        let mut img = vec![0.0; c * h * w];
        let scale = h.min(w) as f64;
        // One blob per cell of a near-square grid, jittered inside its
        // cell, so no region of the canvas is left flat.
        let k = self.blobs.max(1);
        let rows = (k as f64).sqrt().floor().max(1.0) as usize;
        let cols = k.div_ceil(rows);
        for b in 0..k {
            let (r, q) = (b / cols, b % cols);
            let cy = (r as f64 + rng.random_range(0.15..0.85)) * h as f64 / rows as f64;
            let cx = (q as f64 + rng.random_range(0.15..0.85)) * w as f64 / cols as f64;
            let sigma = scale * rng.random_range(0.12..0.24);
            let amps: Vec<f64> = (0..c)
                .map(|_| {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    sign * rng.random_range(0.5..1.0)
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let g = (-d2 / (2.0 * sigma * sigma)).exp();
                    for (ch, a) in amps.iter().enumerate() {
                        img[(ch * h + y) * w + x] += a * g;
                    }
                }
            }
        }
        let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for v in &mut img {
            *v = if span > 0.0 {
                (32.0 + (*v - lo) / span * 191.0).round()
            } else {
                128.0
            };
        }
        img
    }
}

/// A localized displacement field for one expression class.
///
/// Class `k` pushes a Gaussian-weighted patch centred on a point of a
/// circle around the image centre along the direction `2πk/C`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpressionTemplate {
    pub class_id: usize,
    pub n_classes: usize,
    /// Peak displacement at full intensity, as a fraction of the short side.
    pub amplitude: f64,
    /// Patch width, as a fraction of the short side.
    pub sigma: f64,
    /// Distance of the patch centre from the image centre, same units.
    pub radius: f64,
}

impl ExpressionTemplate {
    pub const DEFAULT_CLASSES: usize = 7;

    pub fn new(class_id: usize, n_classes: usize) -> Result<Self> {
        if n_classes == 0 || class_id >= n_classes {
            return Err(invalid(format!("class {class_id} of {n_classes}")));
        }
        Ok(Self {
            class_id,
            n_classes,
            amplitude: 0.2,
            sigma: 0.12,
            radius: 0.3,
        })
    }

    fn angle(&self) -> f64 {
        std::f64::consts::TAU * self.class_id as f64 / self.n_classes as f64
    }

    /// Displacement `(dy, dx)` in pixels at intensity `s`.
    pub fn displacement(&self, canvas: Canvas, y: f64, x: f64, s: f64) -> (f64, f64) {
        let short = canvas.height.min(canvas.width) as f64;
        let a = self.angle();
        let cy = (canvas.height as f64 - 1.0) / 2.0 + self.radius * short * a.sin();
        let cx = (canvas.width as f64 - 1.0) / 2.0 + self.radius * short * a.cos();
        let sig = self.sigma * short;
        let d2 = (y - cy).powi(2) + (x - cx).powi(2);
        let m = s * self.amplitude * short * (-d2 / (2.0 * sig * sig)).exp();
        (m * a.sin(), m * a.cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Neutral at frame 0, apex at the last frame.
    Ramp,
    /// Neutral at both ends, apex at `floor(L/2)`.
    Peak,
}

impl Profile {
    pub fn intensity(self, t: usize, len: usize) -> f64 {
        let u = t as f64 / (len - 1) as f64;
        match self {
            Profile::Ramp => u,
            Profile::Peak => 1.0 - (2.0 * u - 1.0).abs(),
        }
    }

    pub fn apex_idx(self, len: usize) -> usize {
        match self {
            Profile::Ramp => len - 1,
            Profile::Peak => len / 2,
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Ramp => "ramp",
            Profile::Peak => "peak",
        })
    }
}

impl FromStr for Profile {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ramp" => Ok(Profile::Ramp),
            "peak" => Ok(Profile::Peak),
            other => Err(invalid(format!("profile `{other}` (expected ramp or peak)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub frames: Vec<RawFrame>,
    pub expression_label: usize,
    pub identity_label: u32,
    pub apex_idx: usize,
    pub profile: Profile,
}

pub const NOISE_AMPLITUDE: i32 = 2;

fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Renders one labelled sequence. Frame `t` is the base image warped at
/// intensity `s(t)`, plus integer noise in `[-2, 2]`.
pub fn render_sequence(
    subject: &SubjectSpec,
    template: &ExpressionTemplate,
    profile: Profile,
    len: usize,
    canvas: Canvas,
    noise_seed: u64,
) -> Result<SequenceSample> {
    if len < 2 {
        return Err(invalid(format!("sequence length {len} < 2")));
    }
    canvas.check()?;
    let Canvas {
        height: h,
        width: w,
        channels: c,
    } = canvas;
    let base = subject.base_image(canvas);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut frames = Vec::with_capacity(len);
    for t in 0..len {
        let s = profile.intensity(t, len);
        let mut pixels = vec![0u8; h * w * c];
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = template.displacement(canvas, y as f64, x as f64, s);
                for ch in 0..c {
                    let plane = &base[ch * h * w..(ch + 1) * h * w];
                    let v = bilinear(plane, h, w, y as f64 - dy, x as f64 - dx).round() as i32;
                    let noise = rng.random_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
                    pixels[(y * w + x) * c + ch] = (v + noise).clamp(0, 255) as u8;
                }
            }
        }
        frames.push(RawFrame::new(h, w, c, pixels).expect("canvas checked"));
    }
    Ok(SequenceSample {
        frames,
        expression_label: template.class_id,
        identity_label: subject.identity_id,
        apex_idx: profile.apex_idx(len),
        profile,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetConfig {
    pub n_identities: usize,
    pub n_classes: usize,
    pub per_cell: usize,
    pub profile: Profile,
    pub seed: u64,
    pub length: usize,
    pub canvas: Canvas,
    pub test_fraction: f64,
    pub codec: CodecConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_identities: 20,
            n_classes: ExpressionTemplate::DEFAULT_CLASSES,
            per_cell: 4,
            profile: Profile::Ramp,
            seed: 0,
            length: 16,
            canvas: Canvas::default(),
            test_fraction: 0.2,
            codec: CodecConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the dataset directory.
    pub path: String,
    pub expression_label: usize,
    pub identity_label: u32,
    pub apex_idx: usize,
    pub profile: Profile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.csv",
            Split::Test => "test.csv",
        }
    }
}

impl FromStr for Split {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(invalid(format!("split `{other}` (expected train or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// Shuffles identities with `seed` and assigns the last
/// `round(n · test_fraction)` (at least one) to the test split.
pub fn split_identities(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<u32>, Vec<u32>)> {
    if n < 2 {
        return Err(invalid(format!("{n} identities; at least 2 are needed for a split")));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(invalid(format!("test fraction {test_fraction}")));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut ids: Vec<u32> = (0..n as u32).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5e11])));
    let test = ids.split_off(n - n_test);
    ids.sort_unstable();
    let mut test = test;
    test.sort_unstable();
    Ok((ids, test))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Renders every (identity, class) cell `per_cell` times, encodes each
/// sequence and writes it under `out/gops/`, then writes `train.csv`
/// and `test.csv`.
pub fn generate_dataset(config: &DatasetConfig, out: &Path) -> Result<DatasetManifest> {
    if config.n_classes == 0 || config.per_cell == 0 {
        return Err(invalid("classes and sequences per cell must be positive"));
    }
    config.canvas.check()?;
    let (train_ids, _) = split_identities(config.n_identities, config.test_fraction, config.seed)?;
    let gop_dir = out.join("gops");
    fs::create_dir_all(&gop_dir).map_err(io_err(&gop_dir))?;
    let mut manifest = DatasetManifest::default();
    for id in 0..config.n_identities as u32 {
        let subject = SubjectSpec::new(id);
        for class in 0..config.n_classes {
            let template = ExpressionTemplate::new(class, config.n_classes)?;
            for rep in 0..config.per_cell {
                let noise_seed = mix_seed(&[config.seed, id as u64, class as u64, rep as u64]);
                let sample = render_sequence(
                    &subject,
                    &template,
                    config.profile,
                    config.length,
                    config.canvas,
                    noise_seed,
                )?;
                let rel = format!("gops/id{id:03}_c{class}_r{rep}.rgop");
                let path = out.join(&rel);
                let gop = codec::encode_gop(&sample.frames, config.codec).map_err(|source| {
                    SynthError::Codec {
                        path: path.clone(),
                        source,
                    }
                })?;
                let mut bytes = Vec::new();
                codec::write_gop(&gop, &mut bytes).map_err(|source| SynthError::Codec {
                    path: path.clone(),
                    source,
                })?;
                fs::write(&path, bytes).map_err(io_err(&path))?;
                let entry = ManifestEntry {
                    path: rel,
                    expression_label: class,
                    identity_label: id,
                    apex_idx: sample.apex_idx,
                    profile: config.profile,
                };
                if train_ids.binary_search(&id).is_ok() {
                    manifest.train.push(entry);
                } else {
                    manifest.test.push(entry);
                }
            }
        }
    }
    for split in [Split::Train, Split::Test] {
        write_manifest(&out.join(split.file_name()), manifest.split(split))?;
    }
    Ok(manifest)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let manifest_err = |e: csv::Error| SynthError::Manifest {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(manifest_err)?;
    for e in entries {
        w.serialize(e).map_err(manifest_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let manifest_err = |e: csv::Error| SynthError::Manifest {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(manifest_err)?;
    r.deserialize().map(|rec| rec.map_err(manifest_err)).collect()
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    Ok(DatasetManifest {
        train: read_manifest(&dir.join(Split::Train.file_name()))?,
        test: read_manifest(&dir.join(Split::Test.file_name()))?,
    })
}

/// A manifest entry together with its decoded container.
#[derive(Clone, Debug)]
pub struct LoadedSequence {
    pub entry: ManifestEntry,
    pub gop: Gop,
}

/// Reads and validates the RGOP file of every entry.
pub fn load_sequences(dir: &Path, entries: &[ManifestEntry]) -> Result<Vec<LoadedSequence>> {
    entries
        .iter()
        .map(|entry| {
            let path = dir.join(&entry.path);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let gop = codec::parse_gop(&bytes).map_err(|source| SynthError::Codec {
                path: path.clone(),
                source,
            })?;
            if entry.apex_idx >= gop.frame_count() {
                return Err(SynthError::Manifest {
                    path,
                    detail: format!(
                        "apex_idx {} but the sequence has {} frames",
                        entry.apex_idx,
                        gop.frame_count()
                    ),
                });
            }
            Ok(LoadedSequence {
                entry: entry.clone(),
                gop,
            })
        })
        .collect()
}

pub fn load_split(dir: &Path, split: Split) -> Result<Vec<LoadedSequence>> {
    let entries = read_manifest(&dir.join(split.file_name()))?;
    load_sequences(dir, &entries)
}
