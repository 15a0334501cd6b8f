//! Synthetic point cloud videos, depth back-projection, downsampling and
//! the PCVS sequence file format (layout in `docs/formats.md`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::binio::{ByteReader, ByteWriter};
use crate::encoder::PointCloudFrame;
use crate::engine::rng::RandomSource;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const PCVS_MAGIC: &[u8; 4] = b"PCVS";
pub const PCVS_VERSION: u32 = 1;
pub const PCVS_EXTENSION: &str = "pcvs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AnomalyKind {
    VelocityJump,
    Teleport,
    ShapeCollapse,
    ExtraObject,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [
        AnomalyKind::VelocityJump,
        AnomalyKind::Teleport,
        AnomalyKind::ShapeCollapse,
        AnomalyKind::ExtraObject,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::VelocityJump => "velocity-jump",
            AnomalyKind::Teleport => "teleport",
            AnomalyKind::ShapeCollapse => "shape-collapse",
            AnomalyKind::ExtraObject => "extra-object",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown anomaly type {s:?}")))
    }
}

/// Scene and motion parameters of one synthetic video. Lengths are in
/// meters and speeds in meters per frame. Actors move on the `x`-`z`
/// floor inside `arena`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub frames: usize,
    pub points: usize,
    pub actors: (usize, usize),
    pub speed: (f64, f64),
    /// Horizontal blob radius; the vertical radius is 2.5 times larger.
    pub spread: (f64, f64),
    pub anomaly: Option<AnomalyKind>,
    /// Inclusive range of the zero-based first anomalous frame.
    pub onset: (usize, usize),
    pub noise: f64,
    /// `(x_min, x_max, z_min, z_max)`.
    pub arena: (f64, f64, f64, f64),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            frames: 32,
            points: 256,
            actors: (1, 3),
            speed: (0.02, 0.06),
            spread: (0.1, 0.2),
            anomaly: None,
            onset: (8, 20),
            noise: 0.005,
            arena: (-2.0, 2.0, 2.0, 5.0),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.frames < 2 || self.points < 1 {
            return bad("need at least 2 frames and 1 point");
        }
        if self.actors.0 < 1 || self.actors.0 > self.actors.1 || self.actors.1 > self.points {
            return bad("actor range");
        }
        if self.onset.0 < 1 || self.onset.0 > self.onset.1 || self.onset.1 >= self.frames {
            return bad("onset range must lie within the video after its first frame");
        }
        if !(self.noise >= 0.0) || !(self.speed.0 >= 0.0 && self.speed.0 <= self.speed.1) {
            return bad("noise and speeds must be non-negative");
        }
        if !(self.spread.0 > 0.0 && self.spread.0 <= self.spread.1) {
            return bad("spread range");
        }
        let (x0, x1, z0, z1) = self.arena;
        if !(x0 < x1 && z0 < z1) {
            return bad("arena bounds");
        }
        Ok(())
    }

    /// `key=value` lines for metadata echoes.
    pub fn echo(&self) -> Vec<(String, String)> {
        let anomaly = self.anomaly.map_or("none".to_string(), |a| a.name().to_string());
        vec![
            ("frames".into(), self.frames.to_string()),
            ("points".into(), self.points.to_string()),
            ("actors".into(), format!("{}..{}", self.actors.0, self.actors.1)),
            ("speed".into(), format!("{:?}..{:?}", self.speed.0, self.speed.1)),
            ("spread".into(), format!("{:?}..{:?}", self.spread.0, self.spread.1)),
            ("anomaly".into(), anomaly),
            ("onset".into(), format!("{}..{}", self.onset.0, self.onset.1)),
            ("noise".into(), format!("{:?}", self.noise)),
            (
                "arena".into(),
                format!("{:?},{:?},{:?},{:?}", self.arena.0, self.arena.1, self.arena.2, self.arena.3),
            ),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

/// A labelled point cloud video.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub video_id: String,
    pub frames: Vec<PointCloudFrame>,
    pub labels: Vec<u8>,
    /// Free-form `key=value` metadata; `source` and `category` are standard.
    pub metadata: BTreeMap<String, String>,
}

impl SequenceRecord {
    pub fn new(video_id: impl Into<String>, frames: Vec<PointCloudFrame>, labels: Vec<u8>) -> Result<Self> {
        let video_id = video_id.into();
        if labels.len() != frames.len() {
            return Err(Error::InvalidDimension(format!(
                "{} labels for {} frames",
                labels.len(),
                frames.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidFrame("labels must be 0 or 1".into()));
        }
        if video_id.is_empty() || video_id.contains([',', '\n', '=', '/', '\\']) {
            return Err(Error::InvalidConfig(format!("video id {video_id:?}")));
        }
        Ok(Self {
            video_id,
            frames,
            labels,
            metadata: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn category(&self) -> Option<&str> {
        self.metadata.get("category").map(String::as_str)
    }
}

struct Actor {
    center: [f64; 3],
    velocity: [f64; 2],
    radius: f64,
}

fn reflect(pos: &mut f64, vel: &mut f64, lo: f64, hi: f64) {
    if *pos < lo {
        *pos = 2.0 * lo - *pos;
        *vel = vel.abs();
    } else if *pos > hi {
        *pos = 2.0 * hi - *pos;
        *vel = -vel.abs();
    }
    *pos = pos.clamp(lo, hi);
}

fn centroid_shift(a: &[[f64; 3]], b: &[[f64; 3]], weights: &[f64]) -> f64 {
    let mut d = [0.0; 3];
    for ((pa, pb), w) in a.iter().zip(b).zip(weights) {
        for k in 0..3 {
            d[k] += w * (pb[k] - pa[k]);
        }
    }
    d.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Generates one video. Normal motion is constant velocity with wall
/// reflections; from the onset frame the first actor follows the configured
/// anomaly. Every anomalous frame is individually plausible, so anomalies
/// show up in the temporal pattern rather than in single frames.
pub fn generate_synthetic_video(config: &SyntheticConfig, video_id: &str) -> Result<SequenceRecord> {
    config.validate()?;
    let (x0, x1, z0, z1) = config.arena;
    let mut rng = RandomSource::with_stream(config.seed, 0);
    let n_actors = config.actors.0 + rng.below(config.actors.1 - config.actors.0 + 1);
    let mut actors: Vec<Actor> = (0..n_actors)
        .map(|_| {
            let angle = rng.uniform(0.0, std::f64::consts::TAU);
            let speed = rng.uniform(config.speed.0, config.speed.1);
            Actor {
                center: [rng.uniform(x0, x1), rng.uniform(-0.3, 0.3), rng.uniform(z0, z1)],
                velocity: [speed * angle.cos(), speed * angle.sin()],
                radius: rng.uniform(config.spread.0, config.spread.1),
            }
        })
        .collect();
    let t_total = config.frames;

    // Normal trajectories for every frame.
    let mut centers = vec![vec![[0.0; 3]; n_actors]; t_total];
    let mut radii = vec![vec![[0.0; 3]; n_actors]; t_total];
    for t in 0..t_total {
        for (a, actor) in actors.iter_mut().enumerate() {
            centers[t][a] = actor.center;
            radii[t][a] = [actor.radius, 2.5 * actor.radius, actor.radius];
            let [vx, vz] = &mut actor.velocity;
            actor.center[0] += *vx;
            actor.center[2] += *vz;
            reflect(&mut actor.center[0], vx, x0, x1);
            reflect(&mut actor.center[2], vz, z0, z1);
        }
    }

    // Fixed point-to-actor assignment; per-point unit offsets and noise.
    let owner: Vec<usize> = (0..config.points).map(|i| i * n_actors / config.points).collect();
    let offsets: Vec<Vec<[f64; 3]>> = (0..t_total)
        .map(|_| {
            (0..config.points)
                .map(|_| {
                    let o = [rng.normal(), rng.normal(), rng.normal()];
                    let e = [rng.normal(), rng.normal(), rng.normal()];
                    [o[0] + config.noise * e[0], o[1] + config.noise * e[1], o[2] + config.noise * e[2]]
                })
                .collect()
        })
        .collect();
    let weights: Vec<f64> = (0..n_actors)
        .map(|a| owner.iter().filter(|&&o| o == a).count() as f64 / config.points as f64)
        .collect();

    let mut labels = vec![0u8; t_total];
    let mut extra: Option<([f64; 3], Vec<bool>)> = None;
    let mut onset = None;
    if let Some(kind) = config.anomaly {
        let mut arng = RandomSource::with_stream(config.seed, 1);
        let o = config.onset.0 + arng.below(config.onset.1 - config.onset.0 + 1);
        onset = Some(o);
        labels[o..].iter_mut().for_each(|l| *l = 1);
        match kind {
            AnomalyKind::Teleport => {
                let max_normal = (1..t_total)
                    .map(|t| centroid_shift(&centers[t - 1], &centers[t], &weights))
                    .fold(0.0, f64::max);
                for t in o..t_total {
                    let prev = centers[t - 1].clone();
                    let mut best = centers[t][0];
                    let mut best_shift = -1.0;
                    for _ in 0..64 {
                        let cand = [arng.uniform(x0, x1), centers[t][0][1], arng.uniform(z0, z1)];
                        let mut row = centers[t].clone();
                        row[0] = cand;
                        let shift = centroid_shift(&prev, &row, &weights);
                        if shift > best_shift {
                            best = cand;
                            best_shift = shift;
                        }
                        if t > o || shift > 6.0 * max_normal.max(1e-3) {
                            break;
                        }
                    }
                    centers[t][0] = best;
                }
            }
            AnomalyKind::VelocityJump => {
                let mut pos = centers[o - 1][0];
                for t in o..t_total {
                    let angle = arng.uniform(0.0, std::f64::consts::TAU);
                    let speed = arng.uniform(6.0 * config.speed.1, 10.0 * config.speed.1);
                    let (mut vx, mut vz) = (speed * angle.cos(), speed * angle.sin());
                    pos[0] += vx;
                    pos[2] += vz;
                    reflect(&mut pos[0], &mut vx, x0, x1);
                    reflect(&mut pos[2], &mut vz, z0, z1);
                    centers[t][0] = pos;
                }
            }
            AnomalyKind::ShapeCollapse => {
                for t in o..t_total {
                    let r = radii[t][0][0];
                    radii[t][0] = if (t - o) % 2 == 0 || arng.bernoulli(0.3) {
                        [2.2 * r, 0.8 * r, 2.2 * r]
                    } else {
                        [0.6 * r, 3.5 * r, 0.6 * r]
                    };
                }
            }
            AnomalyKind::ExtraObject => {
                let pos = [arng.uniform(x0, x1), arng.uniform(-0.3, 0.3), arng.uniform(z0, z1)];
                let on: Vec<bool> = (0..t_total).map(|t| t == o || (t > o && arng.bernoulli(0.5))).collect();
                extra = Some((pos, on));
            }
        }
    }

    let extra_start = config.points - config.points / 4;
    let frames = (0..t_total)
        .map(|t| {
            let pts = (0..config.points)
                .map(|i| {
                    let off = offsets[t][i];
                    match &extra {
                        Some((pos, on)) if on[t] && i >= extra_start => {
                            [pos[0] + 0.12 * off[0], pos[1] + 0.12 * off[1], pos[2] + 0.12 * off[2]]
                        }
                        _ => {
                            let (c, r) = (centers[t][owner[i]], radii[t][owner[i]]);
                            [c[0] + r[0] * off[0], c[1] + r[1] * off[1], c[2] + r[2] * off[2]]
                        }
                    }
                })
                .collect();
            PointCloudFrame::new(pts)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rec = SequenceRecord::new(video_id, frames, labels)?;
    rec.metadata.insert("source".into(), "synthetic".into());
    rec.metadata.insert(
        "category".into(),
        config.anomaly.map_or("normal".into(), |a| a.name().into()),
    );
    rec.metadata.insert("actors".into(), n_actors.to_string());
    if let Some(o) = onset {
        rec.metadata.insert("onset".into(), o.to_string());
    }
    for (k, v) in config.echo() {
        rec.metadata.insert(format!("config.{k}"), v);
    }
    Ok(rec)
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let ok = fx > 0.0
            && fy > 0.0
            && fx.is_finite()
            && fy.is_finite()
            && (0.0..width as f64).contains(&cx)
            && (0.0..height as f64).contains(&cy);
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "intrinsics fx={fx} fy={fy} cx={cx} cy={cy} for {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Pixel coordinates `(u, v)` of a camera-space point with `z > 0`.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (p[0] * self.fx / p[2] + self.cx, p[1] * self.fy / p[2] + self.cy)
    }

    /// Parses `key = value` lines with keys `fx fy cx cy width height`.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |k: &str| -> Result<&str> {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::InvalidConfig(format!("intrinsics missing {k}")))
        };
        let f = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("intrinsics {k} is not a number")))
        };
        let u = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("intrinsics {k} is not an integer")))
        };
        Self::new(f("fx")?, f("fy")?, f("cx")?, f("cy")?, u("width")?, u("height")?)
    }
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub(crate) fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Back-projects every pixel with finite depth `z > 0`; row index is `v`,
/// column index is `u`.
pub fn backproject_depth(depth: &Mat, intr: &CameraIntrinsics) -> Result<PointCloudFrame> {
    if depth.rows() != intr.height || depth.cols() != intr.width {
        return Err(Error::InvalidDimension(format!(
            "depth {}x{} for a {}x{} camera",
            depth.rows(),
            depth.cols(),
            intr.height,
            intr.width
        )));
    }
    let mut pts = Vec::new();
    for v in 0..depth.rows() {
        for (u, &z) in depth.row(v).iter().enumerate() {
            if z.is_finite() && z > 0.0 {
                pts.push([(u as f64 - intr.cx) * z / intr.fx, (v as f64 - intr.cy) * z / intr.fy, z]);
            }
        }
    }
    PointCloudFrame::new(pts)
}

/// Exactly `target` points: a uniform subsample without replacement when
/// the frame is larger, otherwise all points plus duplicates drawn with
/// replacement.
pub fn downsample_frame(frame: &PointCloudFrame, target: usize, seed: u64) -> Result<PointCloudFrame> {
    if target < 1 {
        return Err(Error::InvalidConfig("downsample target must be at least 1".into()));
    }
    let pts = frame.points();
    let n = pts.len();
    if n == target {
        return Ok(frame.clone());
    }
    let mut rng = RandomSource::new(seed);
    let out = if n > target {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..target {
            let j = i + rng.below(n - i);
            idx.swap(i, j);
        }
        idx[..target].iter().map(|&i| pts[i]).collect()
    } else {
        let mut v = pts.to_vec();
        v.extend((0..target - n).map(|_| pts[rng.below(n)]));
        v
    };
    PointCloudFrame::new(out)
}

fn metadata_text(rec: &SequenceRecord) -> Result<String> {
    let mut s = format!("video_id={}\n", rec.video_id);
    for (k, v) in &rec.metadata {
        if k == "video_id" || k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::InvalidConfig(format!("metadata entry {k:?}")));
        }
        s.push_str(&format!("{k}={v}\n"));
    }
    Ok(s)
}

pub fn sequence_to_bytes(rec: &SequenceRecord) -> Result<Vec<u8>> {
    let meta = metadata_text(rec)?;
    let mut w = ByteWriter::new();
    w.bytes(PCVS_MAGIC);
    w.u32(PCVS_VERSION);
    w.u32(rec.frames.len() as u32);
    for f in &rec.frames {
        w.u32(f.len() as u32);
    }
    for f in &rec.frames {
        for p in f.points() {
            w.f64s(p);
        }
    }
    w.bytes(&rec.labels);
    w.str32(&meta);
    Ok(w.into_inner())
}

pub fn sequence_from_bytes(bytes: &[u8]) -> Result<SequenceRecord> {
    let mut r = ByteReader::new(bytes, "sequence");
    if r.take(4)? != PCVS_MAGIC {
        return Err(r.corrupt("bad magic bytes"));
    }
    let version = r.u32()?;
    if version != PCVS_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: PCVS_VERSION,
        });
    }
    let count = r.u32()? as usize;
    let sizes = (0..count).map(|_| r.u32().map(|n| n as usize)).collect::<Result<Vec<_>>>()?;
    let mut frames = Vec::with_capacity(count);
    for &n in &sizes {
        let flat = r.f64s(3 * n)?;
        let pts = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        frames.push(PointCloudFrame::new(pts)?);
    }
    let labels = r.take(count)?.to_vec();
    let meta = r.str32()?;
    r.finish()?;
    let mut kv = parse_key_values(&meta).map_err(|_| r.corrupt("malformed metadata"))?;
    let id = kv.remove("video_id").ok_or_else(|| r.corrupt("metadata lacks video_id"))?;
    let mut rec = SequenceRecord::new(id, frames, labels).map_err(|e| r.corrupt(&e.to_string()))?;
    rec.metadata = kv;
    Ok(rec)
}

pub fn write_sequence(rec: &SequenceRecord, path: &Path) -> Result<()> {
    std::fs::write(path, sequence_to_bytes(rec)?)?;
    Ok(())
}

pub fn read_sequence(path: &Path) -> Result<SequenceRecord> {
    sequence_from_bytes(&std::fs::read(path)?)
}

/// All `.pcvs` files of `dir`, sorted by file name.
pub fn list_sequences(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::DataNotFound(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == PCVS_EXTENSION))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::DataNotFound(dir.to_path_buf()));
    }
    Ok(files)
}

pub fn load_split(dir: &Path) -> Result<Vec<SequenceRecord>> {
    list_sequences(dir)?.iter().map(|p| read_sequence(p)).collect()
}

/// Start indices of every stride-1 window of `len` frames.
pub fn window_starts(frames: usize, len: usize) -> Vec<usize> {
    if len == 0 || frames < len {
        return Vec::new();
    }
    (0..=frames - len).collect()
}

/// Reads a directory of depth frames and back-projects it into a sequence.
///
/// The directory holds `intrinsics.txt`, one `*.depth` file per frame
/// (row-major little-endian `f64`, `height x width`, sorted by name) and an
/// optional `labels.txt` with one `0`/`1` per line.
pub fn ingest_depth_dir(dir: &Path, video_id: &str, points: usize, seed: u64) -> Result<SequenceRecord> {
    let intr_path = dir.join("intrinsics.txt");
    if !intr_path.is_file() {
        return Err(Error::DataNotFound(intr_path));
    }
    let intr = CameraIntrinsics::parse(&std::fs::read_to_string(&intr_path)?)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "depth"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::DataNotFound(dir.to_path_buf()));
    }
    let mut frames = Vec::with_capacity(files.len());
    for (i, f) in files.iter().enumerate() {
        let bytes = std::fs::read(f)?;
        let mut r = ByteReader::new(&bytes, "depth frame");
        let depth = Mat::from_vec(intr.height, intr.width, r.f64s(intr.width * intr.height)?);
        r.finish()?;
        let frame = backproject_depth(&depth, &intr)?;
        frames.push(downsample_frame(&frame, points, seed.wrapping_add(i as u64))?);
    }
    let labels_path = dir.join("labels.txt");
    let labels = if labels_path.is_file() {
        std::fs::read_to_string(&labels_path)?
            .split_whitespace()
            .map(|s| match s {
                "0" => Ok(0),
                "1" => Ok(1),
                _ => Err(Error::CorruptFile(format!("label {s:?} in {}", labels_path.display()))),
            })
            .collect::<Result<Vec<u8>>>()?
    } else {
        vec![0; frames.len()]
    };
    let mut rec = SequenceRecord::new(video_id, frames, labels)?;
    rec.metadata.insert("source".into(), "backprojected".into());
    for (k, v) in [
        ("fx", intr.fx.to_string()),
        ("fy", intr.fy.to_string()),
        ("cx", intr.cx.to_string()),
        ("cy", intr.cy.to_string()),
        ("width", intr.width.to_string()),
        ("height", intr.height.to_string()),
    ] {
        rec.metadata.insert(format!("intrinsics.{k}"), v);
    }
    Ok(rec)
}

/// Parameters of the external depth foreground segmenter, carried as
/// configuration only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForegroundParams {
    pub k: f64,
    pub k_kinect: f64,
    pub delta_p_max: f64,
    pub alpha: f64,
    pub t_w: usize,
    pub n_h: usize,
}

impl Default for ForegroundParams {
    fn default() -> Self {
        Self {
            k: 1.25,
            k_kinect: 5e-4,
            delta_p_max: 100.0,
            alpha: 0.4,
            t_w: 300,
            n_h: 90,
        }
    }
}

/// Train/test split layout of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub train_sequences: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    pub train_frames: usize,
    pub test_frames: usize,
    /// Base scene settings; `frames`, `anomaly` and `seed` are set per video.
    pub scene: SyntheticConfig,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            train_sequences: 200,
            test_normal: 40,
            test_anomalous: 40,
            train_frames: 12,
            test_frames: 32,
            scene: SyntheticConfig::default(),
            seed: 42,
        }
    }
}

impl DatasetSpec {
    /// Normal training videos followed by test videos; anomalous test
    /// videos cycle through every anomaly type.
    pub fn generate(&self) -> Result<(Vec<SequenceRecord>, Vec<SequenceRecord>)> {
        let mut train = Vec::with_capacity(self.train_sequences);
        for i in 0..self.train_sequences {
            let cfg = SyntheticConfig {
                frames: self.train_frames,
                onset: (1, 1),
                anomaly: None,
                seed: derive_seed(self.seed, 0, i),
                ..self.scene.clone()
            };
            train.push(generate_synthetic_video(&cfg, &format!("train_{i:04}"))?);
        }
        let mut test = Vec::with_capacity(self.test_normal + self.test_anomalous);
        for i in 0..self.test_normal + self.test_anomalous {
            let anomaly = (i >= self.test_normal).then(|| AnomalyKind::ALL[(i - self.test_normal) % 4]);
            let cfg = SyntheticConfig {
                frames: self.test_frames,
                anomaly,
                seed: derive_seed(self.seed, 1, i),
                ..self.scene.clone()
            };
            test.push(generate_synthetic_video(&cfg, &format!("test_{i:04}"))?);
        }
        Ok((train, test))
    }

    /// Writes `train/` and `test/` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(usize, usize)> {
        let (train, test) = self.generate()?;
        for (name, split) in [("train", &train), ("test", &test)] {
            let sub = dir.join(name);
            std::fs::create_dir_all(&sub)?;
            for rec in split {
                write_sequence(rec, &sub.join(format!("{}.{PCVS_EXTENSION}", rec.video_id)))?;
            }
        }
        Ok((train.len(), test.len()))
    }
}

fn derive_seed(seed: u64, split: u64, index: usize) -> u64 {
    RandomSource::with_stream(seed, (split << 32) | index as u64).below(usize::MAX) as u64
}
