//! Raw video types, the synthetic two-phase motion dataset and its binary file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Error, Result};

/// A `frames × height × width × channels` block of 8-bit pixels, frame-major,
/// row-major, channel-last. Used both for whole videos and for sampled clips.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoTensor {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

/// Clips share the video layout.
pub type Clip = VideoTensor;

impl VideoTensor {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<u8>,
    ) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(config_err("video dimensions must be nonzero"));
        }
        let expected = frames * height * width * channels;
        if data.len() != expected {
            return Err(contract_err(format!(
                "pixel buffer holds {} bytes, dimensions require {expected}",
                data.len()
            )));
        }
        Ok(Self { frames, height, width, channels, data })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(frames, height, width, channels, vec![0; frames * height * width * channels])
    }

    /// Builds a tensor from a per-pixel function of `(t, y, x, c)`.
    pub fn from_fn(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> u8,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(frames * height * width * channels);
        for t in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    for c in 0..channels {
                        data.push(f(t, y, x, c));
                    }
                }
            }
        }
        Self::new(frames, height, width, channels, data)
    }

    /// Concatenates equally shaped frame slices.
    pub fn from_frames<'a>(
        height: usize,
        width: usize,
        channels: usize,
        frames: impl IntoIterator<Item = &'a [u8]>,
    ) -> Result<Self> {
        let mut data = Vec::new();
        let mut count = 0;
        for f in frames {
            if f.len() != height * width * channels {
                return Err(contract_err("frame slice has wrong length"));
            }
            data.extend_from_slice(f);
            count += 1;
        }
        Self::new(count, height, width, channels, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    #[inline]
    pub fn pixel(&self, t: usize, y: usize, x: usize, c: usize) -> u8 {
        self.data[((t * self.height + y) * self.width + x) * self.channels + c]
    }

    /// Checks the constraints a full-length dataset video must satisfy.
    pub fn validate_video(&self) -> Result<()> {
        if self.frames < 2 || !self.frames.is_multiple_of(2) {
            return Err(config_err(format!(
                "video frame count must be even and at least 2, got {}",
                self.frames
            )));
        }
        Ok(())
    }
}

/// Read access to individual frames of a video.
///
/// Everything that turns a video into model input goes through this trait so
/// that evaluation can substitute an instrumented prefix-only accessor.
pub trait FrameSource {
    fn num_frames(&self) -> usize;
    /// `(height, width, channels)`
    fn frame_shape(&self) -> (usize, usize, usize);
    fn read_frame(&self, t: usize) -> Result<&[u8]>;
}

impl FrameSource for VideoTensor {
    fn num_frames(&self) -> usize {
        self.frames
    }

    fn frame_shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    fn read_frame(&self, t: usize) -> Result<&[u8]> {
        if t >= self.frames {
            return Err(contract_err(format!("frame {t} out of range ({} frames)", self.frames)));
        }
        Ok(self.frame(t))
    }
}

/// Frame accessor that exposes only the first `limit` frames of a video and
/// records every access. Any read at or beyond `limit` is refused and counted.
#[derive(Debug)]
pub struct PrefixGuard<'a> {
    video: &'a VideoTensor,
    limit: usize,
    reads: AtomicU64,
    violations: AtomicU64,
    max_read: AtomicU64,
}

impl<'a> PrefixGuard<'a> {
    pub fn new(video: &'a VideoTensor, limit: usize) -> Self {
        Self {
            video,
            limit,
            reads: AtomicU64::new(0),
            violations: AtomicU64::new(0),
            max_read: AtomicU64::new(0),
        }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn violations(&self) -> u64 {
        self.violations.load(Ordering::Relaxed)
    }

    /// Highest frame index successfully read, if any read happened.
    pub fn max_read(&self) -> Option<usize> {
        (self.reads() > 0).then(|| self.max_read.load(Ordering::Relaxed) as usize)
    }
}

impl FrameSource for PrefixGuard<'_> {
    fn num_frames(&self) -> usize {
        self.video.frames
    }

    fn frame_shape(&self) -> (usize, usize, usize) {
        self.video.frame_shape()
    }

    fn read_frame(&self, t: usize) -> Result<&[u8]> {
        if t >= self.limit {
            self.violations.fetch_add(1, Ordering::Relaxed);
            return Err(Error::Leakage { frame: t, limit: self.limit });
        }
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.max_read.fetch_max(t as u64, Ordering::Relaxed);
        self.video.read_frame(t)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledVideo {
    pub video: VideoTensor,
    pub label: u32,
}

/// Parameters of the synthetic two-phase motion dataset.
///
/// A square sprite moves on a toroidal canvas. For frames before the phase
/// boundary it moves in phase-1 direction `d1`, afterwards in phase-2
/// direction `d2`; the class is `d1 * n2 + d2`. The two phases draw from
/// disjoint direction sets, so a clip reaching past the boundary always shows
/// a turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n1: usize,
    pub n2: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub sprite_size: usize,
    /// Pixels moved per frame along each axis of the direction vector.
    pub speed: usize,
    pub noise_std: f64,
    pub phase_boundary: f64,
    pub videos_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n1: 3,
            n2: 3,
            frames: 32,
            height: 32,
            width: 32,
            channels: 1,
            sprite_size: 6,
            speed: 1,
            noise_std: 8.0,
            phase_boundary: 0.5,
            videos_per_class: 100,
            seed: 0,
        }
    }
}

/// Unit direction table `(dx, dy)`. Phase 1 uses the first `n1` entries,
/// phase 2 the `n2` entries after those.
pub const DIRECTIONS: [(i64, i64); 8] =
    [(1, 0), (0, -1), (-1, 0), (0, 1), (1, -1), (-1, -1), (-1, 1), (1, 1)];

const BACKGROUND: f64 = 40.0;
const FOREGROUND: f64 = 215.0;

impl SyntheticConfig {
    pub fn num_classes(&self) -> usize {
        self.n1 * self.n2
    }

    /// Index of the first phase-2 frame.
    pub fn boundary_frame(&self) -> usize {
        ((self.phase_boundary * self.frames as f64) + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n1 == 0 || self.n2 == 0 || self.n1 + self.n2 > DIRECTIONS.len() {
            return Err(config_err(format!(
                "n1 and n2 must be positive with n1 + n2 <= {}, got {} and {}",
                DIRECTIONS.len(),
                self.n1,
                self.n2
            )));
        }
        if !(self.phase_boundary > 0.0 && self.phase_boundary < 1.0) {
            return Err(config_err("phase_boundary must lie strictly between 0 and 1"));
        }
        if self.frames < 2 || !self.frames.is_multiple_of(2) {
            return Err(config_err("frames must be even and at least 2"));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(config_err("frame dimensions must be nonzero"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(config_err("noise_std must be finite and nonnegative"));
        }
        let side = self.height.min(self.width);
        // The canvas wraps, so the sprite itself must fit and one frame's step must be
        // shorter than the free space around it, otherwise it leaves the visible field
        // of motion and the direction aliases.
        if self.sprite_size == 0 || self.sprite_size >= side {
            return Err(config_err(format!(
                "sprite of size {} escapes a {}x{} frame",
                self.sprite_size, self.height, self.width
            )));
        }
        if self.speed == 0 || 2 * self.speed >= side - self.sprite_size {
            return Err(config_err(format!(
                "sprite moving {} px/frame escapes a {}x{} frame",
                self.speed, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Renders one video for class `(d1, d2)` starting at `(x0, y0)`.
fn render(
    cfg: &SyntheticConfig,
    d1: usize,
    d2: usize,
    start: (i64, i64),
    rng: &mut ChaCha8Rng,
    noise: Option<&Normal<f64>>,
) -> VideoTensor {
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let boundary = cfg.boundary_frame();
    let speed = cfg.speed as i64;
    let mut data = Vec::with_capacity(cfg.frames * h * w * c);
    let (mut x, mut y) = start;
    for t in 0..cfg.frames {
        if t > 0 {
            let (dx, dy) = if t < boundary { DIRECTIONS[d1] } else { DIRECTIONS[cfg.n1 + d2] };
            x = (x + dx * speed).rem_euclid(w as i64);
            y = (y + dy * speed).rem_euclid(h as i64);
        }
        for row in 0..h as i64 {
            let in_rows = (row - y).rem_euclid(h as i64) < cfg.sprite_size as i64;
            for col in 0..w as i64 {
                let inside = in_rows && (col - x).rem_euclid(w as i64) < cfg.sprite_size as i64;
                let base = if inside { FOREGROUND } else { BACKGROUND };
                for _ in 0..c {
                    let v = match noise {
                        Some(n) => base + n.sample(rng),
                        None => base,
                    };
                    data.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    VideoTensor { frames: cfg.frames, height: h, width: w, channels: c, data }
}

/// Generates `n1 * n2 * videos_per_class` videos, class-major.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<Vec<LabeledVideo>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = if cfg.noise_std > 0.0 {
        Some(Normal::new(0.0, cfg.noise_std).map_err(|e| config_err(e.to_string()))?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(cfg.num_classes() * cfg.videos_per_class);
    for d1 in 0..cfg.n1 {
        for d2 in 0..cfg.n2 {
            let label = (d1 * cfg.n2 + d2) as u32;
            for _ in 0..cfg.videos_per_class {
                let start = (
                    rng.random_range(0..cfg.width as i64),
                    rng.random_range(0..cfg.height as i64),
                );
                let video = render(cfg, d1, d2, start, &mut rng, noise.as_ref());
                out.push(LabeledVideo { video, label });
            }
        }
    }
    Ok(out)
}

/// Best achievable top-1 accuracy from the first `rho * frames` frames.
///
/// Up to and including the phase boundary only `d1` is visible, so the best a
/// classifier can do is guess `d2` uniformly.
pub fn bayes_ceiling(rho: f64, cfg: &SyntheticConfig) -> f64 {
    if rho <= cfg.phase_boundary + 1e-12 {
        1.0 / cfg.n2 as f64
    } else {
        1.0
    }
}

pub const DATASET_MAGIC_PREFIX: &[u8; 6] = b"EASTDS";
pub const DATASET_VERSION: &[u8; 2] = b"01";
pub const DATASET_HEADER_LEN: usize = 32;

/// Writes videos in the `EASTDS01` format: 8 magic bytes followed by six
/// little-endian u32 fields (count, frames, height, width, channels,
/// num_classes), then per video a u32 label and the raw pixel bytes.
pub fn write_dataset_to<W: Write>(
    videos: &[LabeledVideo],
    num_classes: usize,
    mut out: W,
) -> Result<()> {
    let (t, h, w, c) = match videos.first() {
        Some(v) => (v.video.frames, v.video.height, v.video.width, v.video.channels),
        None => (0, 0, 0, 0),
    };
    for (i, v) in videos.iter().enumerate() {
        if (v.video.frames, v.video.height, v.video.width, v.video.channels) != (t, h, w, c) {
            return Err(contract_err(format!("video {i} has different dimensions")));
        }
        if v.label as usize >= num_classes {
            return Err(contract_err(format!("video {i} label {} >= {num_classes}", v.label)));
        }
    }
    out.write_all(DATASET_MAGIC_PREFIX)?;
    out.write_all(DATASET_VERSION)?;
    for field in [videos.len(), t, h, w, c, num_classes] {
        let field = u32::try_from(field).map_err(|_| contract_err("header field exceeds u32"))?;
        out.write_all(&field.to_le_bytes())?;
    }
    for v in videos {
        out.write_all(&v.label.to_le_bytes())?;
        out.write_all(&v.video.data)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_dataset(videos: &[LabeledVideo], num_classes: usize, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    write_dataset_to(videos, num_classes, BufWriter::new(file))
}

/// Header fields of a dataset file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub count: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::Format {
                        offset: self.offset + filled as u64,
                        msg: format!("truncated file while reading {what}"),
                    })
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => {
                    return Err(Error::Format {
                        offset: self.offset + filled as u64,
                        msg: e.to_string(),
                    })
                }
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

pub fn read_dataset_from<R: Read>(input: R) -> Result<(DatasetHeader, Vec<LabeledVideo>)> {
    let mut r = CountingReader { inner: input, offset: 0 };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic, "magic")?;
    if &magic[..6] != DATASET_MAGIC_PREFIX {
        return Err(Error::Format { offset: 0, msg: "bad magic, not an EASTDS dataset".into() });
    }
    if &magic[6..] != DATASET_VERSION {
        return Err(Error::Format {
            offset: 6,
            msg: format!("unsupported dataset version {:?}", String::from_utf8_lossy(&magic[6..])),
        });
    }
    let count = r.read_u32("count")? as usize;
    let frames = r.read_u32("frames")? as usize;
    let height = r.read_u32("height")? as usize;
    let width = r.read_u32("width")? as usize;
    let channels = r.read_u32("channels")? as usize;
    let num_classes = r.read_u32("num_classes")? as usize;
    let header = DatasetHeader { count, frames, height, width, channels, num_classes };
    let per_video = frames * height * width * channels;
    if count > 0 && per_video == 0 {
        return Err(Error::Format {
            offset: 12,
            msg: "nonempty dataset with a zero dimension".into(),
        });
    }
    let mut videos = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let label_offset = r.offset;
        let label = r.read_u32("label")?;
        if label as usize >= num_classes {
            return Err(Error::Format {
                offset: label_offset,
                msg: format!("video {i} label {label} >= num_classes {num_classes}"),
            });
        }
        let mut data = vec![0u8; per_video];
        r.read_exact(&mut data, "pixels")?;
        videos.push(LabeledVideo {
            video: VideoTensor { frames, height, width, channels, data },
            label,
        });
    }
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe)? != 0 {
        return Err(Error::Format {
            offset: r.offset,
            msg: "trailing bytes after last video".into(),
        });
    }
    Ok((header, videos))
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<LabeledVideo>)> {
    let file = File::open(path)?;
    read_dataset_from(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            n1: 3,
            n2: 3,
            frames: 16,
            height: 16,
            width: 16,
            sprite_size: 3,
            videos_per_class: 4,
            seed: 7,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn single_class_without_noise_differs_only_by_start() {
        let cfg = SyntheticConfig { n1: 1, n2: 1, noise_std: 0.0, ..small_cfg() };
        let videos = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(videos.len(), 4);
        assert!(videos.iter().all(|v| v.label == 0));
        // Shifting each video back by its start position gives the same video.
        let start_of = |v: &VideoTensor| {
            (0..16 * 16)
                .find(|&k| {
                    let (y, x) = (k / 16, k % 16);
                    v.pixel(0, y, x, 0) == 215
                        && v.pixel(0, (y + 15) % 16, x, 0) == 40
                        && v.pixel(0, y, (x + 15) % 16, 0) == 40
                })
                .map(|k| (k / 16, k % 16))
                .unwrap()
        };
        let (y0, x0) = start_of(&videos[0].video);
        for v in &videos[1..] {
            let (y1, x1) = start_of(&v.video);
            for t in 0..16 {
                for y in 0..16 {
                    for x in 0..16 {
                        assert_eq!(
                            videos[0].video.pixel(t, (y + y0) % 16, (x + x0) % 16, 0),
                            v.video.pixel(t, (y + y1) % 16, (x + x1) % 16, 0)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_synthetic_dataset(&cfg).unwrap();
        let b = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        write_dataset_to(&a, 9, &mut ba).unwrap();
        write_dataset_to(&b, 9, &mut bb).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn class_balance() {
        let cfg = SyntheticConfig { videos_per_class: 100, frames: 4, height: 8, width: 8, sprite_size: 2, ..small_cfg() };
        let videos = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(videos.len(), 900);
        let mut counts = [0usize; 9];
        for v in &videos {
            counts[v.label as usize] += 1;
        }
        assert_eq!(counts, [100; 9]);
    }

    #[test]
    fn prefix_is_independent_of_second_direction() {
        let cfg = SyntheticConfig { noise_std: 0.0, ..small_cfg() };
        let boundary = cfg.boundary_frame();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for d1 in 0..3 {
            let base = render(&cfg, d1, 0, (5, 9), &mut rng, None);
            for d2 in 1..3 {
                let other = render(&cfg, d1, d2, (5, 9), &mut rng, None);
                for t in 0..boundary {
                    assert_eq!(base.frame(t), other.frame(t));
                }
                assert_ne!(base.frame(boundary), other.frame(boundary));
            }
        }
    }

    #[test]
    fn escaping_sprite_is_rejected() {
        let too_big = SyntheticConfig { sprite_size: 16, ..small_cfg() };
        assert!(matches!(generate_synthetic_dataset(&too_big), Err(Error::Config(_))));
        let too_fast = SyntheticConfig { speed: 7, ..small_cfg() };
        assert!(matches!(generate_synthetic_dataset(&too_fast), Err(Error::Config(_))));
    }

    #[test]
    fn ceiling_values() {
        let cfg = small_cfg();
        assert!((bayes_ceiling(0.3, &cfg) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(bayes_ceiling(0.9, &cfg), 1.0);
        let four = SyntheticConfig { n2: 4, ..cfg };
        assert_eq!(bayes_ceiling(0.5, &four), 0.25);
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let mut buf = Vec::new();
        write_dataset_to(&[], 9, &mut buf).unwrap();
        assert_eq!(buf.len(), DATASET_HEADER_LEN);
        assert_eq!(&buf[..8], b"EASTDS01");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 0);
        let (header, videos) = read_dataset_from(&buf[..]).unwrap();
        assert_eq!(header.count, 0);
        assert!(videos.is_empty());
    }

    #[test]
    fn single_video_file_size() {
        let video = VideoTensor::from_fn(4, 8, 8, 1, |t, y, x, _| (t * 64 + y * 8 + x) as u8).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&[LabeledVideo { video, label: 2 }], 3, &mut buf).unwrap();
        assert_eq!(buf.len(), 292);
    }

    #[test]
    fn format_errors_carry_offsets() {
        let video = VideoTensor::zeros(2, 2, 2, 1).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&[LabeledVideo { video, label: 0 }], 1, &mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_dataset_from(&bad_magic[..]), Err(Error::Format { offset: 0, .. })));

        let mut bad_version = buf.clone();
        bad_version[7] = b'2';
        assert!(matches!(read_dataset_from(&bad_version[..]), Err(Error::Format { offset: 6, .. })));

        let truncated = &buf[..buf.len() - 3];
        match read_dataset_from(truncated) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, buf.len() - 3),
            other => panic!("expected format error, got {other:?}"),
        }

        let mut bad_label = buf.clone();
        bad_label[32] = 5;
        assert!(matches!(read_dataset_from(&bad_label[..]), Err(Error::Format { offset: 32, .. })));

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_dataset_from(&trailing[..]).is_err());
    }

    #[test]
    fn mixed_dimensions_are_rejected() {
        let a = LabeledVideo { video: VideoTensor::zeros(2, 2, 2, 1).unwrap(), label: 0 };
        let b = LabeledVideo { video: VideoTensor::zeros(2, 4, 2, 1).unwrap(), label: 0 };
        assert!(write_dataset_to(&[a, b], 1, Vec::new()).is_err());
    }

    #[test]
    fn prefix_guard_refuses_late_frames() {
        let v = VideoTensor::from_fn(8, 2, 2, 1, |t, _, _, _| t as u8).unwrap();
        let g = PrefixGuard::new(&v, 3);
        assert_eq!(g.read_frame(2).unwrap()[0], 2);
        assert!(matches!(g.read_frame(3), Err(Error::Leakage { frame: 3, limit: 3 })));
        assert_eq!(g.reads(), 1);
        assert_eq!(g.violations(), 1);
        assert_eq!(g.max_read(), Some(2));
    }
}
