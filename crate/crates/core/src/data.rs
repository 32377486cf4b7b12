//! Synthetic two-stream videos.
//!
//! Every video has an appearance stream and a motion stream of equal length.
//! Frames are Gaussian noise except inside a short signature window, where a
//! class-specific patch is added. The motion window starts `lag` frames after
//! the appearance window, so the two cues never coincide when `lag` is at
//! least the window width.
//!
//! Confusable pairs `(a, b)` are built so that neither stream alone can tell
//! `a` from `b`: each video of the pair draws a variant `v ∈ {0, 1}`, both
//! classes show appearance patch `U_v`, class `a` shows motion patch `V_v` and
//! class `b` shows `V_{1−v}`. Only the pairing across the two windows is
//! class-specific.
//!
//! Frames are produced on demand from `(seed, video, stream, frame)` and
//! rounded to `f32`, so a dataset written to disk and read back is
//! bit-identical to the generated one.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: u32 = 1;
pub const VIDEO_MAGIC: &[u8; 4] = b"TSVD";
pub const VIDEO_VERSION: u32 = 1;
/// dtype code for little-endian IEEE-754 binary32.
pub const DTYPE_F32: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Appearance,
    Motion,
}

impl Stream {
    pub const BOTH: [Stream; 2] = [Stream::Appearance, Stream::Motion];

    pub fn index(self) -> usize {
        match self {
            Stream::Appearance => 0,
            Stream::Motion => 1,
        }
    }

    pub fn other(self) -> Stream {
        match self {
            Stream::Appearance => Stream::Motion,
            Stream::Motion => Stream::Appearance,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::Appearance => "appearance",
            Stream::Motion => "motion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub videos_per_class: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Frames between the appearance and motion signature onsets.
    pub lag: usize,
    /// Length of each signature window in frames.
    pub signature_width: usize,
    /// Side length of the square signature patch.
    pub patch_size: usize,
    /// Magnitude of every signature patch entry.
    pub amplitude: f64,
    pub confusable_pairs: Vec<[usize; 2]>,
    /// Reuse the variant patches of confusable pairs as the signatures of
    /// unpaired classes, so each stream on its own must tell the variants
    /// apart. Needs at least two pairs.
    pub share_variant_patches: bool,
    /// Standard deviation σ of the additive noise.
    pub noise: f64,
    /// Minimum distance of the signature windows from either end of a video.
    pub onset_margin: usize,
    /// Share of each class's videos held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 8,
            videos_per_class: 40,
            frames: 60,
            channels: 3,
            height: 32,
            width: 32,
            lag: 5,
            signature_width: 5,
            patch_size: 12,
            amplitude: 2.0,
            confusable_pairs: vec![[0, 1], [2, 3]],
            share_variant_patches: true,
            noise: 0.3,
            onset_margin: 10,
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.signature_width == 0 {
            return bad("frame dimensions and signature width must be positive".into());
        }
        if self.patch_size == 0 || self.patch_size > self.height.min(self.width) {
            return bad(format!(
                "patch size {} does not fit a {}x{} frame",
                self.patch_size, self.height, self.width
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.amplitude.is_finite()) {
            return bad("noise and amplitude must be finite, noise non-negative".into());
        }
        if self.lag + self.signature_width >= self.frames {
            return bad(format!(
                "lag {} does not fit: it must be below frames {} minus signature width {}",
                self.lag, self.frames, self.signature_width
            ));
        }
        if 2 * self.onset_margin + self.lag + self.signature_width > self.frames {
            return bad(format!(
                "no room for signature windows: {} frames, margin {}, lag {}, width {}",
                self.frames, self.onset_margin, self.lag, self.signature_width
            ));
        }
        let mut seen = vec![false; self.classes];
        for &[a, b] in &self.confusable_pairs {
            if a >= self.classes || b >= self.classes || a == b || seen[a] || seen[b] {
                return bad(format!(
                    "confusable pair ({a}, {b}) must name two distinct, unpaired classes"
                ));
            }
            seen[a] = true;
            seen[b] = true;
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!(
                "test fraction {} outside (0, 1)",
                self.test_fraction
            ));
        }
        let test = self.test_per_class();
        if test == 0 || test >= self.videos_per_class {
            return bad(format!(
                "{} videos per class cannot be split with test fraction {}",
                self.videos_per_class, self.test_fraction
            ));
        }
        Ok(())
    }

    pub fn test_per_class(&self) -> usize {
        (self.videos_per_class as f64 * self.test_fraction).round() as usize
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Latest admissible appearance onset.
    pub fn max_onset(&self) -> usize {
        self.frames - self.onset_margin - self.lag - self.signature_width
    }

    pub fn partner(&self, class: usize) -> Option<usize> {
        self.confusable_pairs.iter().find_map(|&[a, b]| {
            if a == class {
                Some(b)
            } else if b == class {
                Some(a)
            } else {
                None
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoInfo {
    pub id: usize,
    pub label: usize,
    /// Confusable-pair variant; always 0 for unpaired classes.
    pub variant: usize,
    /// Signature onset of the appearance and motion streams.
    pub onsets: [usize; 2],
    pub split: Split,
}

impl VideoInfo {
    pub fn onset(&self, stream: Stream) -> usize {
        self.onsets[stream.index()]
    }
}

/// One fully materialised video.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub info: VideoInfo,
    pub appearance: Vec<Tensor>,
    pub motion: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
struct Patch {
    y: usize,
    x: usize,
    values: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Source {
    Generated(Vec<[Patch; 2]>),
    Stored(PathBuf),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    config: SyntheticConfig,
    videos: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    #[serde(flatten)]
    info: VideoInfo,
    file: String,
}

/// A synthetic dataset backed either by the generator or by files on disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    config: SyntheticConfig,
    videos: Vec<VideoInfo>,
    source: Source,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

const TAG_PATCHES: u64 = 1;
const TAG_VIDEO: u64 = 2;
const TAG_SPLIT: u64 = 3;
const TAG_NOISE: u64 = 4;

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl Dataset {
    pub fn generate(config: &SyntheticConfig) -> Result<Self> {
        config.validate()?;
        let n = config.classes;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_PATCHES]));
        let draw = |rng: &mut ChaCha8Rng| Patch {
            y: rng.random_range(0..=config.height - config.patch_size),
            x: rng.random_range(0..=config.width - config.patch_size),
            values: (0..config.channels * config.patch_size * config.patch_size)
                .map(|_| {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    round_f32(sign * config.amplitude)
                })
                .collect(),
        };
        // Table indexed by class·2 + variant.
        let mut table: Vec<Option<[Patch; 2]>> = vec![None; 2 * n];
        let mut carriers: Vec<[Patch; 2]> = Vec::new();
        for &[a, b] in &config.confusable_pairs {
            let u = [draw(&mut rng), draw(&mut rng)];
            let v = [draw(&mut rng), draw(&mut rng)];
            for variant in 0..2 {
                table[2 * a + variant] = Some([u[variant].clone(), v[variant].clone()]);
                table[2 * b + variant] = Some([u[variant].clone(), v[1 - variant].clone()]);
                carriers.push([u[variant].clone(), v[variant].clone()]);
            }
        }
        let k = carriers.len();
        let sharing = config.share_variant_patches && config.confusable_pairs.len() >= 2;
        let mut next = 0;
        for c in 0..n {
            if config.partner(c).is_some() {
                continue;
            }
            let p = if sharing && next < k {
                // Motion patch from the next pair over, so no unpaired class
                // repeats a pair's combination.
                [
                    carriers[next][0].clone(),
                    carriers[(next + 2) % k][1].clone(),
                ]
            } else {
                [draw(&mut rng), draw(&mut rng)]
            };
            next += 1;
            table[2 * c] = Some(p.clone());
            table[2 * c + 1] = Some(p);
        }
        let patches = table.into_iter().map(Option::unwrap).collect();

        let per = config.videos_per_class;
        let mut videos = Vec::with_capacity(n * per);
        for c in 0..n {
            let mut order: Vec<usize> = (0..per).collect();
            let mut split_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_SPLIT, c as u64]));
            order.shuffle(&mut split_rng);
            let mut is_test = vec![false; per];
            for &i in &order[..config.test_per_class()] {
                is_test[i] = true;
            }
            for (i, &test) in is_test.iter().enumerate() {
                let id = c * per + i;
                let mut vr =
                    ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_VIDEO, id as u64]));
                let variant = if config.partner(c).is_some() {
                    vr.random_range(0..2)
                } else {
                    0
                };
                let onset = vr.random_range(config.onset_margin..=config.max_onset());
                videos.push(VideoInfo {
                    id,
                    label: c,
                    variant,
                    onsets: [onset, onset + config.lag],
                    split: if test { Split::Test } else { Split::Train },
                });
            }
        }
        Ok(Dataset {
            config: config.clone(),
            videos,
            source: Source::Generated(patches),
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn frames(&self) -> usize {
        self.config.frames
    }

    pub fn videos(&self) -> &[VideoInfo] {
        &self.videos
    }

    pub fn info(&self, id: usize) -> Result<&VideoInfo> {
        self.videos
            .get(id)
            .ok_or_else(|| Error::Data(format!("no video {id}")))
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.videos
            .iter()
            .filter(|v| v.split == split)
            .map(|v| v.id)
            .collect()
    }

    /// True when frame `t` of `stream` lies inside the signature window.
    pub fn in_window(&self, id: usize, stream: Stream, t: usize) -> Result<bool> {
        let on = self.info(id)?.onset(stream);
        Ok(t >= on && t < on + self.config.signature_width)
    }

    pub fn frame(&self, id: usize, stream: Stream, t: usize) -> Result<Tensor> {
        let info = self.info(id)?;
        if t >= self.config.frames {
            return Err(Error::Data(format!(
                "frame {t} outside video {id} of length {}",
                self.config.frames
            )));
        }
        let values = match &self.source {
            Source::Generated(patches) => self.synthesize(patches, info, stream, t),
            Source::Stored(dir) => self.read_frame(dir, id, stream, t)?,
        };
        Ok(Tensor::new(self.config.frame_shape().to_vec(), values)?)
    }

    fn synthesize(
        &self,
        patches: &[[Patch; 2]],
        info: &VideoInfo,
        stream: Stream,
        t: usize,
    ) -> Vec<f64> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[TAG_NOISE, info.id as u64, stream.index() as u64, t as u64],
        ));
        let mut values: Vec<f64> = (0..cfg.frame_len())
            .map(|_| cfg.noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let on = info.onset(stream);
        if t >= on && t < on + cfg.signature_width {
            let patch = &patches[2 * info.label + info.variant][stream.index()];
            let p = cfg.patch_size;
            for c in 0..cfg.channels {
                for dy in 0..p {
                    let row = (c * cfg.height + patch.y + dy) * cfg.width + patch.x;
                    let src = (c * p + dy) * p;
                    for dx in 0..p {
                        values[row + dx] += patch.values[src + dx];
                    }
                }
            }
        }
        values.into_iter().map(round_f32).collect()
    }

    pub fn video(&self, id: usize) -> Result<SyntheticVideo> {
        let frames = |s| {
            (0..self.config.frames)
                .map(|t| self.frame(id, s, t))
                .collect::<Result<Vec<_>>>()
        };
        Ok(SyntheticVideo {
            info: self.info(id)?.clone(),
            appearance: frames(Stream::Appearance)?,
            motion: frames(Stream::Motion)?,
        })
    }

    fn video_file(id: usize) -> String {
        format!("video_{id:05}.bin")
    }

    fn header_len(&self) -> u64 {
        4 + 4 + 4 + 4 + 5 * 8
    }

    /// Writes the manifest and one binary file per video into `dir`.
    ///
    /// Video file layout, little-endian: magic `TSVD`, u32 version, u32 dtype
    /// (1 = f32), u32 ndim (5), u64 dims `[streams, frames, channels, height,
    /// width]`, then the values in row-major order.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = &self.config;
        for info in &self.videos {
            let path = dir.join(Self::video_file(info.id));
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            let mut header = Vec::with_capacity(self.header_len() as usize);
            header.extend_from_slice(VIDEO_MAGIC);
            header.extend_from_slice(&VIDEO_VERSION.to_le_bytes());
            header.extend_from_slice(&DTYPE_F32.to_le_bytes());
            header.extend_from_slice(&5u32.to_le_bytes());
            for d in [2, cfg.frames, cfg.channels, cfg.height, cfg.width] {
                header.extend_from_slice(&(d as u64).to_le_bytes());
            }
            w.write_all(&header).map_err(|e| Error::io(&path, e))?;
            let mut buf = Vec::with_capacity(cfg.frame_len() * 4);
            for stream in Stream::BOTH {
                for t in 0..cfg.frames {
                    buf.clear();
                    for v in self.frame(info.id, stream, t)?.values() {
                        buf.extend_from_slice(&(*v as f32).to_le_bytes());
                    }
                    w.write_all(&buf).map_err(|e| Error::io(&path, e))?;
                }
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        let manifest = Manifest {
            schema_version: MANIFEST_SCHEMA,
            config: cfg.clone(),
            videos: self
                .videos
                .iter()
                .map(|info| ManifestEntry {
                    info: info.clone(),
                    file: Self::video_file(info.id),
                })
                .collect(),
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Opens a saved dataset; frames are read lazily from the video files.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.schema_version != MANIFEST_SCHEMA {
            return Err(Error::Data(format!(
                "manifest schema {} is not supported",
                manifest.schema_version
            )));
        }
        manifest.config.validate()?;
        let ds = Dataset {
            config: manifest.config,
            videos: manifest.videos.iter().map(|e| e.info.clone()).collect(),
            source: Source::Stored(dir.to_path_buf()),
        };
        for (i, e) in manifest.videos.iter().enumerate() {
            if e.info.id != i || e.file != Self::video_file(i) || e.info.label >= ds.classes() {
                return Err(Error::Data(format!("manifest entry {i} is inconsistent")));
            }
            ds.check_header(&dir.join(&e.file))?;
        }
        Ok(ds)
    }

    fn check_header(&self, path: &Path) -> Result<()> {
        let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut head = vec![0u8; self.header_len() as usize];
        f.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
        let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
        let cfg = &self.config;
        let dims: Vec<u64> = (0..5)
            .map(|i| u64::from_le_bytes(head[16 + 8 * i..24 + 8 * i].try_into().unwrap()))
            .collect();
        let want = [2, cfg.frames, cfg.channels, cfg.height, cfg.width].map(|d| d as u64);
        if &head[..4] != VIDEO_MAGIC
            || u32_at(4) != VIDEO_VERSION
            || u32_at(8) != DTYPE_F32
            || u32_at(12) != 5
            || dims != want
        {
            return Err(Error::Data(format!("{}: bad video header", path.display())));
        }
        let expected = self.header_len() + (2 * cfg.frames * cfg.frame_len() * 4) as u64;
        let len = f.metadata().map_err(|e| Error::io(path, e))?.len();
        if len != expected {
            return Err(Error::Data(format!(
                "{}: {len} bytes, expected {expected}",
                path.display()
            )));
        }
        Ok(())
    }

    fn read_frame(&self, dir: &Path, id: usize, stream: Stream, t: usize) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let path = dir.join(Self::video_file(id));
        let mut f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let index = (stream.index() * cfg.frames + t) * cfg.frame_len();
        f.seek(SeekFrom::Start(self.header_len() + 4 * index as u64))
            .map_err(|e| Error::io(&path, e))?;
        let mut buf = vec![0u8; cfg.frame_len() * 4];
        f.read_exact(&mut buf).map_err(|e| Error::io(&path, e))?;
        Ok(buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            classes: 4,
            videos_per_class: 4,
            frames: 20,
            height: 8,
            width: 8,
            patch_size: 4,
            lag: 3,
            signature_width: 3,
            onset_margin: 2,
            test_fraction: 0.5,
            confusable_pairs: vec![[0, 1]],
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let ds = Dataset::generate(&small()).unwrap();
        let train = ds.ids(Split::Train);
        let test = ds.ids(Split::Test);
        assert_eq!(train.len() + test.len(), 16);
        assert!(train.iter().all(|i| !test.contains(i)));
        for c in 0..4 {
            let n = test.iter().filter(|&&i| ds.videos()[i].label == c).count();
            assert_eq!(n, 2);
        }
    }

    #[test]
    fn onsets_respect_lag_and_margins() {
        let cfg = small();
        let ds = Dataset::generate(&cfg).unwrap();
        for v in ds.videos() {
            assert_eq!(v.onsets[1], v.onsets[0] + cfg.lag);
            assert!(v.onsets[0] >= cfg.onset_margin);
            assert!(v.onsets[1] + cfg.signature_width + cfg.onset_margin <= cfg.frames);
        }
    }

    #[test]
    fn rejects_infeasible_windows() {
        let cfg = SyntheticConfig { lag: 16, ..small() };
        assert!(Dataset::generate(&cfg).is_err());
        let cfg = SyntheticConfig {
            onset_margin: 8,
            ..small()
        };
        assert!(Dataset::generate(&cfg).is_err());
        let cfg = SyntheticConfig {
            confusable_pairs: vec![[0, 1], [1, 2]],
            ..small()
        };
        assert!(Dataset::generate(&cfg).is_err());
    }

    #[test]
    fn noiseless_frames_outside_window_are_zero() {
        let cfg = SyntheticConfig {
            noise: 0.0,
            ..small()
        };
        let ds = Dataset::generate(&cfg).unwrap();
        let v = &ds.videos()[5];
        let before = ds.frame(5, Stream::Motion, v.onsets[1] - 1).unwrap();
        assert!(before.values().iter().all(|&x| x == 0.0));
        let inside = ds.frame(5, Stream::Motion, v.onsets[1]).unwrap();
        let nonzero = inside.values().iter().filter(|&&x| x != 0.0).count();
        assert_eq!(nonzero, cfg.channels * cfg.patch_size * cfg.patch_size);
    }

    #[test]
    fn pair_streams_are_individually_ambiguous() {
        let cfg = SyntheticConfig {
            noise: 0.0,
            ..small()
        };
        let ds = Dataset::generate(&cfg).unwrap();
        let sig = |id: usize, s: Stream| ds.frame(id, s, ds.videos()[id].onset(s)).unwrap();
        let a: Vec<_> = ds.videos().iter().filter(|v| v.label == 0).collect();
        let b: Vec<_> = ds.videos().iter().filter(|v| v.label == 1).collect();
        for va in &a {
            for vb in &b {
                let same_app = sig(va.id, Stream::Appearance) == sig(vb.id, Stream::Appearance);
                let same_mot = sig(va.id, Stream::Motion) == sig(vb.id, Stream::Motion);
                assert_eq!(same_app, va.variant == vb.variant);
                assert_eq!(same_mot, va.variant != vb.variant);
            }
        }
    }
}
