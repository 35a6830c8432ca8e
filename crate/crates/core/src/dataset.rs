//! Sequence loading (KITTI odometry, 7-Scenes), synthetic sequences and
//! K-frame windowing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{PairSpec, WindowTarget};
use crate::model::NormStats;
use crate::nn::Tensor;
use crate::pose::{relative, Pose, PoseMatrix};

pub const KITTI_TRAIN: [&str; 4] = ["00", "02", "08", "09"];
pub const KITTI_TEST: [&str; 6] = ["03", "04", "05", "06", "07", "10"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Kitti,
    SevenScenes,
    Synthetic,
}

/// RGB image, channel-major `[3, height, width]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn from_rgb(img: &RgbImage) -> Frame {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
            }
        }
        Frame { height: h, width: w, data }
    }

    pub fn to_rgb(&self) -> RgbImage {
        let (h, w) = (self.height, self.width);
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (self.data[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        })
    }

    /// Bilinear resize to `(height, width)`; returns a clone if already that size.
    pub fn resized(&self, size: (usize, usize)) -> Frame {
        if (self.height, self.width) == size {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| self.data[(c * h + y as usize) * w + x as usize] as f32;
            Rgb([px(0), px(1), px(2)])
        });
        let out = image::imageops::resize(&buf, size.1 as u32, size.0 as u32, FilterType::Triangle);
        let mut data = vec![0.0; 3 * size.0 * size.1];
        for (x, y, p) in out.enumerate_pixels() {
            for c in 0..3 {
                data[(c * size.0 + y as usize) * size.1 + x as usize] = p.0[c] as f64;
            }
        }
        Frame { height: size.0, width: size.1, data }
    }
}

#[derive(Clone, Debug)]
pub enum FrameRef {
    Path(PathBuf),
    Memory(Arc<Frame>),
}

impl FrameRef {
    /// Loads the frame and resizes it to `size = (height, width)`.
    pub fn load(&self, size: (usize, usize)) -> Result<Frame> {
        match self {
            FrameRef::Memory(f) => Ok(f.resized(size)),
            FrameRef::Path(p) => {
                if !p.exists() {
                    return Err(Error::MissingFile(p.clone()));
                }
                let img = image::open(p).map_err(|e| Error::Image { path: p.clone(), msg: e.to_string() })?;
                let img = img.resize_exact(size.1 as u32, size.0 as u32, FilterType::Triangle).to_rgb8();
                Ok(Frame::from_rgb(&img))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SequenceRecord {
    pub id: String,
    pub frames: Vec<FrameRef>,
    /// Camera-to-world poses, one per frame.
    pub gt: Vec<Pose>,
    pub fps: f64,
    pub source: Source,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    /// Frames `start..end` with their poses, as a new record.
    pub fn slice(&self, start: usize, end: usize) -> SequenceRecord {
        SequenceRecord {
            id: format!("{}[{start}..{end}]", self.id),
            frames: self.frames[start..end].to_vec(),
            gt: self.gt[start..end].to_vec(),
            fps: self.fps,
            source: self.source,
        }
    }

    /// Loads every frame at `size`.
    pub fn load_frames(&self, size: (usize, usize)) -> Result<Vec<Frame>> {
        self.frames.iter().map(|f| f.load(size)).collect()
    }

    /// Total ground-truth path length in metres.
    pub fn path_length(&self) -> f64 {
        self.gt.windows(2).map(|w| crate::pose::translation_distance(&w[0], &w[1])).sum()
    }
}

fn parse_floats(line: &str, path: &Path, lineno: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>().map_err(|e| Error::PoseParse { path: path.to_path_buf(), line: lineno, msg: format!("`{tok}`: {e}") })
        })
        .collect()
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

/// Parses a KITTI pose file: one row-major 3×4 matrix (12 numbers) per line.
pub fn read_kitti_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = read_text(path)?;
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = parse_floats(line, path, i + 1)?;
        let v: [f64; 12] = v.as_slice().try_into().map_err(|_| Error::PoseParse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected 12 values, found {}", v.len()),
        })?;
        poses.push(Pose::from_matrix(&PoseMatrix::from_row_major(&v))?);
    }
    Ok(poses)
}

pub fn write_kitti_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for p in poses {
        let row: Vec<String> = p.to_matrix().to_row_major().iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a 7-Scenes per-frame pose file (4×4 homogeneous matrix).
pub fn read_sevenscenes_pose(path: &Path) -> Result<Pose> {
    let text = read_text(path)?;
    let rows: Vec<(usize, &str)> = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).collect();
    let err = |line: usize, msg: String| Error::PoseParse { path: path.to_path_buf(), line, msg };
    if rows.len() != 4 {
        return Err(err(rows.len(), format!("expected 4 rows, found {}", rows.len())));
    }
    let mut m = [[0.0; 4]; 3];
    for (r, &(i, line)) in rows.iter().enumerate() {
        let v = parse_floats(line, path, i + 1)?;
        if v.len() != 4 {
            return Err(err(i + 1, format!("expected 4 values, found {}", v.len())));
        }
        if r < 3 {
            m[r].copy_from_slice(&v);
        }
    }
    Pose::from_matrix(&PoseMatrix(m))
}

pub fn write_sevenscenes_pose(path: &Path, pose: &Pose) -> Result<()> {
    let m = pose.to_matrix().0;
    let mut text = String::new();
    for row in m.iter() {
        text.push_str(&row.iter().map(|v| format!("{v:.17e}")).collect::<Vec<_>>().join("\t"));
        text.push('\n');
    }
    text.push_str("0\t0\t0\t1\n");
    fs::write(path, text)?;
    Ok(())
}

fn sorted_files(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix)))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads `root/poses/<seq>.txt` with frames from `root/sequences/<seq>/image_2/*.png`.
pub fn load_kitti_sequence(root: &Path, seq: &str) -> Result<SequenceRecord> {
    let gt = read_kitti_poses(&root.join("poses").join(format!("{seq}.txt")))?;
    let frames = sorted_files(&root.join("sequences").join(seq).join("image_2"), ".png")?;
    if frames.len() != gt.len() {
        return Err(Error::LengthMismatch { left: frames.len(), right: gt.len() });
    }
    Ok(SequenceRecord { id: seq.to_string(), frames: frames.into_iter().map(FrameRef::Path).collect(), gt, fps: 10.0, source: Source::Kitti })
}

/// Writes a sequence in the KITTI layout read by [`load_kitti_sequence`].
pub fn write_kitti_sequence(root: &Path, seq: &str, record: &SequenceRecord, size: (usize, usize)) -> Result<()> {
    let dir = root.join("sequences").join(seq).join("image_2");
    fs::create_dir_all(&dir)?;
    for (i, f) in record.frames.iter().enumerate() {
        let path = dir.join(format!("{i:06}.png"));
        f.load(size)?.to_rgb().save(&path).map_err(|e| Error::Image { path, msg: e.to_string() })?;
    }
    write_kitti_poses(&root.join("poses").join(format!("{seq}.txt")), &record.gt)
}

fn sevenscenes_dir(root: &Path, scene: &str, seq: &str) -> PathBuf {
    let seq = if seq.starts_with("seq-") { seq.to_string() } else { format!("seq-{seq}") };
    root.join(scene).join(seq)
}

/// Loads `root/<scene>/seq-XX/frame-NNNNNN.{color.png,pose.txt}`.
pub fn load_sevenscenes_sequence(root: &Path, scene: &str, seq: &str) -> Result<SequenceRecord> {
    let dir = sevenscenes_dir(root, scene, seq);
    let pose_files = sorted_files(&dir, ".pose.txt")?;
    let frames = sorted_files(&dir, ".color.png")?;
    if frames.len() != pose_files.len() {
        return Err(Error::LengthMismatch { left: frames.len(), right: pose_files.len() });
    }
    let gt = pose_files.iter().map(|p| read_sevenscenes_pose(p)).collect::<Result<Vec<_>>>()?;
    Ok(SequenceRecord {
        id: format!("{scene}/{}", dir.file_name().and_then(|n| n.to_str()).unwrap_or(seq)),
        frames: frames.into_iter().map(FrameRef::Path).collect(),
        gt,
        fps: 30.0,
        source: Source::SevenScenes,
    })
}

pub fn write_sevenscenes_sequence(root: &Path, scene: &str, seq: &str, record: &SequenceRecord, size: (usize, usize)) -> Result<()> {
    let dir = sevenscenes_dir(root, scene, seq);
    fs::create_dir_all(&dir)?;
    for (i, (f, p)) in record.frames.iter().zip(&record.gt).enumerate() {
        let path = dir.join(format!("frame-{i:06}.color.png"));
        f.load(size)?.to_rgb().save(&path).map_err(|e| Error::Image { path, msg: e.to_string() })?;
        write_sevenscenes_pose(&dir.join(format!("frame-{i:06}.pose.txt")), p)?;
    }
    Ok(())
}

/// Sequence ids listed in a scene's `TrainSplit.txt` / `TestSplit.txt`
/// (lines such as `sequence1`), returned as `seq-01`.
pub fn sevenscenes_split(root: &Path, scene: &str, train: bool) -> Result<Vec<String>> {
    let file = root.join(scene).join(if train { "TrainSplit.txt" } else { "TestSplit.txt" });
    let text = read_text(&file)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let digits = l.trim().trim_start_matches("sequence");
            let n: u32 = digits.parse().map_err(|_| Error::PoseParse { path: file.clone(), line: i + 1, msg: format!("bad split entry `{l}`") })?;
            Ok(format!("seq-{n:02}"))
        })
        .collect()
}

/// Shape of a synthetic drive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    /// Segments of random curvature; the vehicle keeps reaching new ground.
    Open,
    /// Laps of a circle, so later frames revisit ground seen earlier.
    /// Yaw rates follow from speed and radius; `yaw_rate_range` is unused.
    Circuit,
}

/// Parameters of a synthetic sequence: a down-looking camera moving over a
/// procedurally textured ground plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub n_frames: usize,
    pub fps: f64,
    pub route: Route,
    /// Radius in metres of the [`Route::Circuit`] loop.
    pub circuit_radius: f64,
    /// Speed bounds in m/s; each constant-curvature segment draws its speed from here.
    pub speed_range: (f64, f64),
    /// Yaw-rate magnitude bounds in °/s; the sign is random per segment.
    pub yaw_rate_range: (f64, f64),
    /// Segment lengths in frames.
    pub segment_frames: (usize, usize),
    pub vertical_amplitude: f64,
    /// Period of the height oscillation in metres of travelled distance.
    pub vertical_period: f64,
    pub camera_height: f64,
    pub image_size: (usize, usize),
    /// Amplitude of the fine fixed-pattern texture detail.
    pub texture_noise: f64,
    /// Standard deviation of independent per-frame pixel noise.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_frames: 320,
            fps: 10.0,
            route: Route::Open,
            circuit_radius: 60.0,
            speed_range: (18.0, 22.0),
            yaw_rate_range: (0.0, 8.0),
            segment_frames: (20, 60),
            vertical_amplitude: 0.5,
            vertical_period: 80.0,
            camera_height: 20.0,
            image_size: (32, 32),
            texture_noise: 0.1,
            pixel_noise: 0.0,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.n_frames < 2 {
            return bad("n_frames must be at least 2");
        }
        if !(self.fps > 0.0) {
            return bad("fps must be positive");
        }
        for (lo, hi) in [self.speed_range, self.yaw_rate_range] {
            if !(lo >= 0.0 && hi >= lo) {
                return bad("ranges must satisfy 0 <= lo <= hi");
            }
        }
        if self.segment_frames.0 == 0 || self.segment_frames.1 < self.segment_frames.0 {
            return bad("segment_frames must satisfy 1 <= lo <= hi");
        }
        if self.vertical_amplitude < 0.0 || !(self.vertical_period > 0.0) || self.texture_noise < 0.0 || self.pixel_noise < 0.0 {
            return bad("noise levels and amplitudes must be nonnegative");
        }
        if self.camera_height <= self.vertical_amplitude {
            return bad("camera_height must exceed vertical_amplitude");
        }
        if self.route == Route::Circuit && !(self.circuit_radius > 0.0) {
            return bad("circuit_radius must be positive");
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return bad("image_size must be positive");
        }
        Ok(())
    }
}

fn hash2(seed: u64, x: i64, y: i64) -> f64 {
    let mut z = seed ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinearly interpolated lattice noise in `[0, 1]` with cell size `cell` metres.
fn value_noise(seed: u64, x: f64, y: f64, cell: f64) -> f64 {
    let (gx, gy) = (x / cell, y / cell);
    let (x0, y0) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - x0, gy - y0);
    let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = hash2(seed, ix, iy);
    let b = hash2(seed, ix + 1, iy);
    let c = hash2(seed, ix, iy + 1);
    let d = hash2(seed, ix + 1, iy + 1);
    let top = a + (b - a) * sx;
    let bottom = c + (d - c) * sx;
    top + (bottom - top) * sy
}

fn ground_color(seed: u64, x: f64, y: f64, detail: f64) -> [f64; 3] {
    std::array::from_fn(|c| {
        let s = seed.wrapping_add(1000 * c as u64 + 1);
        let coarse = 0.5 * value_noise(s, x, y, 25.0) + 0.3 * value_noise(s ^ 0xA5, x, y, 9.0);
        let fine = value_noise(s ^ 0x5A, x, y, 3.0) - 0.5;
        (0.1 + coarse + detail * fine).clamp(0.0, 1.0)
    })
}

/// Renders the ground as seen by a camera at `pose`, looking straight down
/// with a 90° horizontal field of view. Image columns run along the camera's
/// forward axis, rows along its left axis.
pub fn render_ground(p: &SynthParams, pose: &Pose, rng: &mut impl Rng) -> Frame {
    let (h, w) = p.image_size;
    let t = pose.t();
    let height = p.camera_height + t[2];
    let focal = w as f64 / 2.0;
    let r = pose.rotation_matrix();
    let mut data = vec![0.0; 3 * h * w];
    for v in 0..h {
        for u in 0..w {
            let forward = height * (u as f64 + 0.5 - w as f64 / 2.0) / focal;
            let left = -height * (v as f64 + 0.5 - h as f64 / 2.0) / focal;
            let gx = t[0] + r[0][0] * forward + r[0][1] * left;
            let gy = t[1] + r[1][0] * forward + r[1][1] * left;
            let col = ground_color(p.seed, gx, gy, p.texture_noise);
            for c in 0..3 {
                let noise = if p.pixel_noise > 0.0 { p.pixel_noise * (rng.random::<f64>() - 0.5) * 12f64.sqrt() } else { 0.0 };
                data[(c * h + v) * w + u] = (col[c] + noise).clamp(0.0, 1.0);
            }
        }
    }
    Frame { height: h, width: w, data }
}

/// Generates the ground-truth trajectory of a synthetic sequence.
pub fn synth_trajectory(p: &SynthParams) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let dt = 1.0 / p.fps;
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let mut poses = Vec::with_capacity(p.n_frames);
    let (mut x, mut y, mut heading, mut travelled) = (0.0, 0.0, 0.0, 0.0);
    let (mut speed, mut yaw_rate, mut left) = (0.0, 0.0, 0usize);
    let lap = 2.0 * std::f64::consts::PI * p.circuit_radius;
    // On a circuit the height profile repeats every lap.
    let period = match p.route {
        Route::Open => p.vertical_period,
        Route::Circuit => lap / (lap / p.vertical_period).round().max(1.0),
    };
    for i in 0..p.n_frames {
        let z = p.vertical_amplitude * (2.0 * std::f64::consts::PI * travelled / period).sin();
        poses.push(Pose::from_axis_angle([0.0, 0.0, 1.0], heading, [x, y, z]));
        if i + 1 == p.n_frames {
            break;
        }
        if left == 0 {
            speed = draw(&mut rng, p.speed_range);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            yaw_rate = sign * draw(&mut rng, p.yaw_rate_range).to_radians();
            left = if p.segment_frames.1 > p.segment_frames.0 {
                rng.random_range(p.segment_frames.0..=p.segment_frames.1)
            } else {
                p.segment_frames.0
            };
        }
        left -= 1;
        if p.route == Route::Circuit {
            yaw_rate = speed / p.circuit_radius;
        }
        // Exact arc for constant speed and yaw rate over one frame interval.
        let dtheta = yaw_rate * dt;
        let ds = speed * dt;
        let (dx, dy) = if dtheta.abs() < 1e-12 {
            (ds * heading.cos(), ds * heading.sin())
        } else {
            let radius = ds / dtheta;
            (radius * ((heading + dtheta).sin() - heading.sin()), -radius * ((heading + dtheta).cos() - heading.cos()))
        };
        x += dx;
        y += dy;
        heading += dtheta;
        travelled += ds;
    }
    poses
}

/// Deterministic synthetic sequence for `p`.
pub fn synth_sequence(p: &SynthParams) -> Result<SequenceRecord> {
    p.validate()?;
    let gt = synth_trajectory(p);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x006E_6F69_7365);
    let frames = gt.iter().map(|pose| FrameRef::Memory(Arc::new(render_ground(p, pose, &mut noise_rng)))).collect();
    Ok(SequenceRecord { id: format!("synth-{}", p.seed), frames, gt, fps: p.fps, source: Source::Synthetic })
}

/// Reproducibility record written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub sequences: Vec<(String, SynthParams)>,
}

impl SynthManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<SynthManifest> {
        let text = read_text(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug)]
pub struct FrameWindow {
    pub seq_id: String,
    pub start: usize,
    pub frames: Vec<FrameRef>,
}

/// Number of windows `window_iter` yields.
pub fn window_count(len: usize, k: usize, stride: usize) -> usize {
    if len < k || stride == 0 {
        0
    } else {
        (len - k) / stride + 1
    }
}

/// Windows starting at `0, stride, 2·stride, …` with their CTC targets.
pub fn window_iter<'a>(
    seq: &'a SequenceRecord,
    k: usize,
    stride: usize,
    spec: &'a PairSpec,
) -> Result<impl Iterator<Item = Result<(FrameWindow, WindowTarget)>> + 'a> {
    if stride == 0 {
        return Err(Error::Config("window stride must be at least 1".into()));
    }
    if spec.k() != k {
        return Err(Error::shape(format!("pair spec for K={} used with K={k}", spec.k())));
    }
    if seq.len() < k || seq.frames.len() != seq.len() {
        return Err(Error::SequenceTooShort { len: seq.len().min(seq.frames.len()), k });
    }
    Ok((0..window_count(seq.len(), k, stride)).map(move |w| {
        let start = w * stride;
        let target = WindowTarget::from_globals(seq.gt[start..start + k].to_vec(), spec)?;
        debug_assert!(target.pair_inconsistency(spec) < 1e-9);
        Ok((FrameWindow { seq_id: seq.id.clone(), start, frames: seq.frames[start..start + k].to_vec() }, target))
    }))
}

pub(crate) fn mean_std(values: impl Iterator<Item = [f64; 3]>) -> ([f64; 3], [f64; 3]) {
    let v: Vec<[f64; 3]> = values.collect();
    let n = v.len().max(1) as f64;
    let mean: [f64; 3] = std::array::from_fn(|c| v.iter().map(|x| x[c]).sum::<f64>() / n);
    let std: [f64; 3] = std::array::from_fn(|c| {
        let var = v.iter().map(|x| (x[c] - mean[c]).powi(2)).sum::<f64>() / n;
        // Constant axes keep unit scale rather than dividing by zero.
        if var.sqrt() > 1e-6 {
            var.sqrt()
        } else {
            1.0
        }
    });
    (mean, std)
}

/// Per-channel image statistics and per-axis translation statistics of the
/// global poses and adjacent relative transforms.
pub fn estimate_norm_stats(frames: &[Frame], gt: &[Pose]) -> NormStats {
    let pixel = |c: usize| frames.iter().flat_map(move |f| f.data[c * f.height * f.width..(c + 1) * f.height * f.width].iter().copied());
    let count = frames.iter().map(|f| f.height * f.width).sum::<usize>().max(1) as f64;
    let image_mean: [f64; 3] = std::array::from_fn(|c| pixel(c).sum::<f64>() / count);
    let image_std: [f64; 3] = std::array::from_fn(|c| {
        let s = (pixel(c).map(|v| (v - image_mean[c]).powi(2)).sum::<f64>() / count).sqrt();
        if s > 1e-6 {
            s
        } else {
            1.0
        }
    });
    let (global_t_mean, global_t_std) = mean_std(gt.iter().map(|p| p.t()));
    let (rel_t_mean, rel_t_std) = mean_std(gt.windows(2).map(|w| relative(&w[0], &w[1]).t()));
    NormStats { image_mean, image_std, global_t_mean, global_t_std, rel_t_mean, rel_t_std }
}

/// Stacks frames `[N, 3, H, W]` (window-major order) and normalizes them.
pub fn stack_frames(frames: &[&Frame], norm: &NormStats) -> Tensor {
    let (h, w) = (frames[0].height, frames[0].width);
    let mut data = Vec::with_capacity(frames.len() * 3 * h * w);
    for f in frames {
        assert_eq!((f.height, f.width), (h, w), "frames of one batch must share a size");
        data.extend_from_slice(&f.data);
    }
    let mut t = Tensor::from_vec(&[frames.len(), 3, h, w], data);
    norm.normalize_images(&mut t);
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::make_pair_spec;
    use crate::pose::{compose, rotation_angle_deg, translation_distance};

    fn still() -> SynthParams {
        SynthParams { n_frames: 12, speed_range: (0.0, 0.0), yaw_rate_range: (0.0, 0.0), ..SynthParams::default() }
    }

    #[test]
    fn motionless_sequence_is_constant() {
        let seq = synth_sequence(&still()).unwrap();
        let frames = seq.load_frames((32, 32)).unwrap();
        assert!(seq.gt.iter().all(|p| *p == seq.gt[0]));
        assert!(frames.iter().all(|f| *f == frames[0]));
    }

    #[test]
    fn straight_line_step_length() {
        let p = SynthParams { speed_range: (12.0, 12.0), vertical_amplitude: 0.0, ..still() };
        let gt = synth_trajectory(&p);
        for w in gt.windows(2) {
            assert!((translation_distance(&w[0], &w[1]) - 12.0 / p.fps).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_yaw_rate_heading() {
        let p = SynthParams { n_frames: 9, speed_range: (5.0, 5.0), yaw_rate_range: (6.0, 6.0), segment_frames: (100, 100), ..still() };
        let gt = synth_trajectory(&p);
        let expected = (p.n_frames - 1) as f64 * 6.0 / p.fps;
        assert!((rotation_angle_deg(&gt[0], &gt[p.n_frames - 1]) - expected).abs() < 1e-9);
    }

    #[test]
    fn arc_steps_are_chords() {
        let p = SynthParams { n_frames: 20, speed_range: (10.0, 10.0), yaw_rate_range: (30.0, 30.0), vertical_amplitude: 0.0, ..still() };
        let gt = synth_trajectory(&p);
        let dtheta = (30.0f64 / p.fps).to_radians();
        let radius = 1.0 / (30.0f64.to_radians() / 10.0);
        let chord = 2.0 * radius * (dtheta / 2.0).sin();
        for w in gt.windows(2) {
            assert!((translation_distance(&w[0], &w[1]) - chord).abs() < 1e-9);
        }
    }

    #[test]
    fn seeds_control_output() {
        let p = SynthParams { n_frames: 30, pixel_noise: 0.05, ..SynthParams::default() };
        let a = synth_sequence(&p).unwrap();
        let b = synth_sequence(&p).unwrap();
        let c = synth_sequence(&SynthParams { seed: 1, ..p.clone() }).unwrap();
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.load_frames((32, 32)).unwrap(), b.load_frames((32, 32)).unwrap());
        assert_ne!(a.gt, c.gt);
    }

    #[test]
    fn consecutive_frames_are_correlated() {
        let p = SynthParams { n_frames: 3, ..SynthParams::default() };
        let seq = synth_sequence(&p).unwrap();
        let f = seq.load_frames((32, 32)).unwrap();
        let mean_abs = |a: &Frame, b: &Frame| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64;
        let far = synth_sequence(&SynthParams { n_frames: 60, ..p.clone() }).unwrap().frames[59].load((32, 32)).unwrap();
        assert!(mean_abs(&f[0], &f[1]) < mean_abs(&f[0], &far));
    }

    #[test]
    fn window_counts() {
        let spec = make_pair_spec(5).unwrap();
        let seq = synth_sequence(&SynthParams { n_frames: 10, ..SynthParams::default() }).unwrap();
        assert_eq!(window_iter(&seq, 5, 1, &spec).unwrap().count(), 6);
        assert_eq!(window_iter(&seq, 5, 5, &spec).unwrap().count(), 2);
        let short = seq.slice(0, 5);
        assert_eq!(window_iter(&short, 5, 1, &spec).unwrap().count(), 1);
        let err = window_iter(&seq.slice(0, 4), 5, 1, &spec).err().unwrap();
        assert!(matches!(err, Error::SequenceTooShort { len: 4, k: 5 }));
    }

    #[test]
    fn window_targets_are_chain_consistent() {
        let spec = make_pair_spec(5).unwrap();
        let seq = synth_sequence(&SynthParams { n_frames: 40, ..SynthParams::default() }).unwrap();
        for item in window_iter(&seq, 5, 3, &spec).unwrap() {
            let (w, t) = item.unwrap();
            let g = &t.gt_global;
            for (&(i, j), pair) in spec.pairs().iter().zip(&t.gt_pairs) {
                let mut chain = relative(&g[i], &g[i + 1]);
                for m in i + 1..j {
                    chain = compose(&relative(&g[m], &g[m + 1]), &chain);
                }
                assert!(chain.max_abs_diff(pair) < 1e-9, "window {} pair ({i},{j})", w.start);
            }
        }
    }

    #[test]
    fn kitti_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seq = synth_sequence(&SynthParams { n_frames: 6, yaw_rate_range: (20.0, 40.0), ..SynthParams::default() }).unwrap();
        write_kitti_sequence(dir.path(), "00", &seq, (32, 32)).unwrap();
        let back = load_kitti_sequence(dir.path(), "00").unwrap();
        assert_eq!(back.len(), 6);
        for (a, b) in seq.gt.iter().zip(&back.gt) {
            assert!(a.max_abs_diff(b) < 1e-9);
        }
        assert_eq!(back.gt[0], Pose::IDENTITY);
        let img = back.frames[3].load((32, 32)).unwrap();
        let orig = seq.frames[3].load((32, 32)).unwrap();
        assert!(img.data.iter().zip(&orig.data).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    }

    #[test]
    fn kitti_token_count_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        fs::write(&path, "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n").unwrap();
        let err = read_kitti_poses(&path).unwrap_err();
        assert!(matches!(err, Error::PoseParse { line: 2, .. }), "{err}");
        assert!(matches!(read_kitti_poses(&dir.path().join("none.txt")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn sevenscenes_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let seq = synth_sequence(&SynthParams { n_frames: 4, yaw_rate_range: (10.0, 10.0), ..SynthParams::default() }).unwrap();
        write_sevenscenes_sequence(dir.path(), "chess", "01", &seq, (32, 32)).unwrap();
        let back = load_sevenscenes_sequence(dir.path(), "chess", "seq-01").unwrap();
        for (a, b) in seq.gt.iter().zip(&back.gt) {
            assert!(a.max_abs_diff(b) < 1e-9);
        }
        fs::remove_file(dir.path().join("chess/seq-01/frame-000002.color.png")).unwrap();
        let err = load_sevenscenes_sequence(dir.path(), "chess", "01").unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { left: 3, right: 4 }));
    }

    #[test]
    fn sevenscenes_identity_and_split() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        fs::write(&path, "1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n").unwrap();
        assert_eq!(read_sevenscenes_pose(&path).unwrap(), Pose::IDENTITY);
        fs::create_dir_all(dir.path().join("fire")).unwrap();
        fs::write(dir.path().join("fire/TrainSplit.txt"), "sequence1\nsequence2\n").unwrap();
        assert_eq!(sevenscenes_split(dir.path(), "fire", true).unwrap(), vec!["seq-01", "seq-02"]);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = SynthManifest { sequences: vec![("00".into(), SynthParams::default())] };
        let path = dir.path().join("manifest.json");
        m.write(&path).unwrap();
        assert_eq!(SynthManifest::read(&path).unwrap(), m);
    }

    #[test]
    fn norm_stats_standardize() {
        let seq = synth_sequence(&SynthParams { n_frames: 20, ..SynthParams::default() }).unwrap();
        let frames = seq.load_frames((32, 32)).unwrap();
        let norm = estimate_norm_stats(&frames, &seq.gt);
        let refs: Vec<&Frame> = frames.iter().collect();
        let t = stack_frames(&refs, &norm);
        let plane = 32 * 32;
        let red: Vec<f64> = t.data().chunks(plane).step_by(3).flatten().copied().collect();
        let mean = red.iter().sum::<f64>() / red.len() as f64;
        let var = red.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / red.len() as f64;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn circuit_stays_on_its_circle_and_revisits_ground() {
        let p = SynthParams { n_frames: 300, route: Route::Circuit, circuit_radius: 40.0, ..SynthParams::default() };
        let gt = synth_trajectory(&p);
        for pose in &gt {
            let t = pose.t();
            assert!((t[0].hypot(t[1] - 40.0) - 40.0).abs() < 1e-9);
        }
        let lap = 2.0 * std::f64::consts::PI * 40.0;
        assert!(gt.windows(2).map(|w| crate::pose::translation_distance(&w[0], &w[1])).sum::<f64>() > 2.0 * lap);
        let far = gt.iter().skip(150).map(|q| q.t()).map(|t| t[0].hypot(t[1])).fold(f64::INFINITY, f64::min);
        assert!(far < 2.0);
    }

}
