//! Synthetic clip generation, the `.nst` tensor container, dataset
//! layout, and checkpoints.
//!
//! Everything on disk goes through one container format so ingestion
//! stays single-pathed. A dataset is a directory of clip directories,
//! each holding `frames.nst`, `gt.nst`, `fix.nst`, and `teacher_0.nst`
//! through `teacher_4.nst`. A checkpoint is a directory holding a UTF-8
//! manifest and one raw weight blob.
//!
//! All writes go to a temporary file first and are renamed into place,
//! so a crash mid-write never leaves a readable-but-corrupt artifact.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distill::{GroundTruthMap, TeacherOutputs, TrainSample};
use crate::model::{Mode, ModelConfig, SaliencyNet, Width};
use crate::tensor::Tensor;
use crate::{Error, Result};

const NST_MAGIC: &[u8; 4] = b"NST1";
const DTYPE_F32: u8 = 1;
const CKPT_FORMAT: &str = "format nst-ckpt 1";

/// Synthetic teacher blur levels in pixels at the reference 48x64 grid,
/// coarse to fine, one per teacher slot.
pub const TEACHER_SIGMAS: [f32; 5] = [8.0, 4.0, 2.0, 1.0, 1.0];

// ---------------------------------------------------------------------------
// .nst container

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Serializes a tensor into the container layout: magic, rank and dims
/// as little-endian u64, a dtype byte, then the raw little-endian f32
/// payload.
pub fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let shape = t.shape();
    let mut out = Vec::with_capacity(4 + 8 + 8 * shape.len() + 1 + 4 * t.numel());
    out.extend_from_slice(NST_MAGIC);
    out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(DTYPE_F32);
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &tensor_bytes(t))
}

fn data_err(path: &Path, what: &str) -> Error {
    Error::Data(format!("{}: {what}", path.display()))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != NST_MAGIC {
        return Err(data_err(path, "bad magic, not an .nst tensor"));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)
        .map_err(|_| data_err(path, "truncated header"))?;
    let rank = u64::from_le_bytes(u64buf) as usize;
    if rank > 8 {
        return Err(data_err(path, "implausible rank"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u64buf)
            .map_err(|_| data_err(path, "truncated dims"))?;
        shape.push(u64::from_le_bytes(u64buf) as usize);
    }
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)
        .map_err(|_| data_err(path, "truncated header"))?;
    if dtype[0] != DTYPE_F32 {
        return Err(data_err(path, "unsupported dtype code"));
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload)
        .map_err(|_| data_err(path, "truncated payload"))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(data_err(path, "trailing bytes after payload"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

// ---------------------------------------------------------------------------
// Synthetic scenes

/// Everything needed to render one deterministic clip: blob population,
/// motion and size ranges, background texture strength, and how many
/// fixation samples to draw per frame.
#[derive(Debug, Clone)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub n_blobs: usize,
    pub sigma_range: (f32, f32),
    pub velocity_range: (f32, f32),
    pub texture_amplitude: f32,
    pub t_frames: usize,
    pub spatial: (usize, usize),
    pub fixations_per_frame: usize,
}

impl SyntheticSceneSpec {
    pub fn desk(seed: u64) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            seed,
            n_blobs: 2,
            sigma_range: (2.5, 6.0),
            velocity_range: (0.5, 2.0),
            texture_amplitude: 0.25,
            t_frames: 16,
            spatial: (48, 64),
            fixations_per_frame: 12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.n_blobs) {
            return Err(Error::Param(format!(
                "blob count {} outside 1..=3",
                self.n_blobs
            )));
        }
        if !(self.sigma_range.0 > 0.0 && self.sigma_range.0 <= self.sigma_range.1) {
            return Err(Error::Param(format!(
                "sigma range {:?} must be positive and ordered",
                self.sigma_range
            )));
        }
        if !(self.velocity_range.0 >= 0.0 && self.velocity_range.0 <= self.velocity_range.1) {
            return Err(Error::Param(format!(
                "velocity range {:?} must be nonnegative and ordered",
                self.velocity_range
            )));
        }
        if self.texture_amplitude < 0.0 {
            return Err(Error::Param("texture amplitude must be nonnegative".into()));
        }
        if self.t_frames == 0 || self.spatial.0 < 4 || self.spatial.1 < 4 {
            return Err(Error::Param(format!(
                "degenerate geometry: {} frames at {:?}",
                self.t_frames, self.spatial
            )));
        }
        if self.fixations_per_frame == 0 {
            return Err(Error::Param("need at least one fixation per frame".into()));
        }
        Ok(())
    }
}

/// One rendered clip with its supervision and synthetic teacher maps.
#[derive(Debug, Clone)]
pub struct ClipData {
    /// RGB frames, [3, T, H, W], values in [0, 1].
    pub frames: Tensor,
    pub gt: GroundTruthMap,
    pub teacher: TeacherOutputs,
}

struct Blob {
    cy: f32,
    cx: f32,
    vy: f32,
    vx: f32,
    sigma: f32,
    color: [f32; 3],
}

fn reflect(p: f32, max: f32) -> (f32, bool) {
    let mut p = p;
    let mut flipped = false;
    loop {
        if p < 0.0 {
            p = -p;
            flipped = !flipped;
        } else if p > max {
            p = 2.0 * max - p;
            flipped = !flipped;
        } else {
            return (p, flipped);
        }
    }
}

impl Blob {
    fn advance(&mut self, h: usize, w: usize) {
        let (cy, fy) = reflect(self.cy + self.vy, (h - 1) as f32);
        let (cx, fx) = reflect(self.cx + self.vx, (w - 1) as f32);
        self.cy = cy;
        self.cx = cx;
        if fy {
            self.vy = -self.vy;
        }
        if fx {
            self.vx = -self.vx;
        }
    }
}

fn sample_range(r: &mut ChaCha8Rng, range: (f32, f32)) -> f32 {
    if range.0 == range.1 {
        range.0
    } else {
        r.gen_range(range.0..range.1)
    }
}

/// Draws seeded categorical samples from each frame's density and marks
/// them in a binary map of the same shape. A delta density puts every
/// sample on its single pixel.
pub fn sample_fixations(density: &Tensor, per_frame: usize, r: &mut ChaCha8Rng) -> Tensor {
    let shape = density.shape();
    let hw = shape[shape.len() - 2] * shape[shape.len() - 1];
    let mut fix = vec![0.0f32; density.numel()];
    for (slice, out) in density.data().chunks(hw).zip(fix.chunks_mut(hw)) {
        let mut cdf = Vec::with_capacity(hw);
        let mut acc = 0.0f64;
        for &v in slice {
            acc += v as f64;
            cdf.push(acc);
        }
        for _ in 0..per_frame {
            let u = r.gen::<f64>() * acc;
            let idx = cdf.partition_point(|&c| c <= u).min(hw - 1);
            out[idx] = 1.0;
        }
    }
    Tensor::new(shape.to_vec(), fix).unwrap()
}

/// Separable Gaussian blur over the trailing two axes with mirrored
/// borders.
fn blur_hw(map: &Tensor, sigma: f32) -> Tensor {
    let shape = map.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let mut sum = 0.0f32;
    for i in -radius..=radius {
        let v = (-((i * i) as f32) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    kernel.iter_mut().for_each(|v| *v /= sum);
    let mirror = |i: isize, n: usize| -> usize {
        let (m, _) = reflect(i as f32, (n - 1) as f32);
        m.round() as usize
    };
    let mut out = map.data().to_vec();
    for slice in out.chunks_mut(h * w) {
        let mut tmp = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for (k, kv) in kernel.iter().enumerate() {
                    let sx = mirror(x as isize + k as isize - radius, w);
                    acc += kv * slice[y * w + sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for (k, kv) in kernel.iter().enumerate() {
                    let sy = mirror(y as isize + k as isize - radius, h);
                    acc += kv * tmp[sy * w + x];
                }
                slice[y * w + x] = acc;
            }
        }
    }
    Tensor::new(shape.to_vec(), out).unwrap()
}

fn normalize_slices(map: &mut Tensor) {
    let shape = map.shape();
    let hw = shape[shape.len() - 2] * shape[shape.len() - 1];
    for slice in map.data_mut().chunks_mut(hw) {
        let sum: f64 = slice.iter().map(|&v| v as f64).sum();
        for v in slice.iter_mut() {
            *v = (*v as f64 / sum) as f32;
        }
    }
}

/// Renders a clip: Gaussian blobs drift over a static texture with
/// reflective boundaries, the normalized blob mixture is the ground
/// truth, fixations are sampled from it, and the teacher maps are
/// level-dependent blurs of it. Deterministic per seed.
pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<ClipData> {
    spec.validate()?;
    let (h, w) = spec.spatial;
    let t = spec.t_frames;
    let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut blobs: Vec<Blob> = (0..spec.n_blobs)
        .map(|_| {
            let cy = r.gen_range(0.0..(h - 1) as f32);
            let cx = r.gen_range(0.0..(w - 1) as f32);
            let speed = sample_range(&mut r, spec.velocity_range);
            let angle = r.gen_range(0.0..std::f32::consts::TAU);
            Blob {
                cy,
                cx,
                vy: speed * angle.sin(),
                vx: speed * angle.cos(),
                sigma: sample_range(&mut r, spec.sigma_range),
                color: [(); 3].map(|_| r.gen_range(0.3..1.0f32)),
            }
        })
        .collect();
    let texture: Vec<f32> = (0..3 * h * w)
        .map(|_| r.gen_range(0.0..1.0f32) * spec.texture_amplitude)
        .collect();

    let mut frames = vec![0.0f32; 3 * t * h * w];
    let mut density = vec![0.0f32; t * h * w];
    for f in 0..t {
        if f > 0 {
            for b in &mut blobs {
                b.advance(h, w);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut mass = 0.0f32;
                let mut rgb = [0.0f32; 3];
                for b in &blobs {
                    let dy = y as f32 - b.cy;
                    let dx = x as f32 - b.cx;
                    let g = (-(dy * dy + dx * dx) / (2.0 * b.sigma * b.sigma)).exp();
                    mass += g;
                    for (c, col) in rgb.iter_mut().zip(b.color) {
                        *c += col * g;
                    }
                }
                density[(f * h + y) * w + x] = mass;
                for (c, &v) in rgb.iter().enumerate() {
                    let px = texture[(c * h + y) * w + x] + v;
                    frames[((c * t + f) * h + y) * w + x] = px.min(1.0);
                }
            }
        }
    }
    let mut density = Tensor::new(vec![t, h, w], density)?;
    normalize_slices(&mut density);
    let fixations = sample_fixations(&density, spec.fixations_per_frame, &mut r);

    let scale = ((h * w) as f32 / (48.0 * 64.0)).sqrt();
    let maps = TEACHER_SIGMAS
        .iter()
        .map(|&sigma| {
            let mut m = blur_hw(&density, (sigma * scale).max(0.3));
            normalize_slices(&mut m);
            m
        })
        .collect();

    let clip = ClipData {
        frames: Tensor::new(vec![3, t, h, w], frames)?,
        gt: GroundTruthMap { density, fixations },
        teacher: TeacherOutputs { maps },
    };
    clip.gt.validate()?;
    clip.teacher.validate()?;
    Ok(clip)
}

// ---------------------------------------------------------------------------
// Dataset layout

pub fn write_clip(dir: &Path, clip: &ClipData) -> Result<()> {
    write_tensor(&dir.join("frames.nst"), &clip.frames)?;
    write_tensor(&dir.join("gt.nst"), &clip.gt.density)?;
    write_tensor(&dir.join("fix.nst"), &clip.gt.fixations)?;
    for (k, map) in clip.teacher.maps.iter().enumerate() {
        write_tensor(&dir.join(format!("teacher_{k}.nst")), map)?;
    }
    Ok(())
}

pub fn read_clip(dir: &Path) -> Result<ClipData> {
    let frames = read_tensor(&dir.join("frames.nst"))?;
    let density = read_tensor(&dir.join("gt.nst"))?;
    let fixations = read_tensor(&dir.join("fix.nst"))?;
    let maps = (0..TeacherOutputs::N_MAPS)
        .map(|k| read_tensor(&dir.join(format!("teacher_{k}.nst"))))
        .collect::<Result<_>>()?;
    Ok(ClipData {
        frames,
        gt: GroundTruthMap { density, fixations },
        teacher: TeacherOutputs { maps },
    })
}

/// Clip directory names under a dataset root, sorted for determinism.
pub fn clip_ids(root: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Data(format!(
            "dataset {} holds no clip directories",
            root.display()
        )));
    }
    Ok(ids)
}

fn read_sample(root: &Path, id: &str) -> Result<TrainSample> {
    let dir = root.join(id);
    let clip = read_tensor(&dir.join("frames.nst"))?;
    let density = read_tensor(&dir.join("gt.nst"))?;
    let fixations = read_tensor(&dir.join("fix.nst"))?;
    Ok(TrainSample {
        id: id.to_string(),
        clip,
        gt: GroundTruthMap { density, fixations },
    })
}

/// Loads every clip's frames and supervision (teacher maps are read
/// lazily by the file-backed teacher instead).
pub fn load_dataset(root: &Path) -> Result<Vec<TrainSample>> {
    clip_ids(root)?
        .iter()
        .map(|id| read_sample(root, id))
        .collect()
}

/// Streams a dataset through a bounded queue filled from a reader
/// thread. Iteration order matches `load_dataset`.
pub struct Prefetcher {
    rx: mpsc::Receiver<Result<TrainSample>>,
}

pub fn prefetch_dataset(root: &Path, capacity: usize) -> Result<Prefetcher> {
    if capacity == 0 {
        return Err(Error::Param("prefetch queue needs capacity >= 1".into()));
    }
    let ids = clip_ids(root)?;
    let root: PathBuf = root.to_path_buf();
    let (tx, rx) = mpsc::sync_channel(capacity);
    std::thread::spawn(move || {
        for id in ids {
            if tx.send(read_sample(&root, &id)).is_err() {
                break;
            }
        }
    });
    Ok(Prefetcher { rx })
}

impl Iterator for Prefetcher {
    type Item = Result<TrainSample>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.recv().ok()
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

fn shape_token(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".to_string()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape_token(s: &str) -> Result<Vec<usize>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| {
            d.parse::<usize>()
                .map_err(|_| Error::Data(format!("bad shape token {s}")))
        })
        .collect()
}

/// Serializes a model configuration as space-separated key=value tokens.
pub fn config_tokens(cfg: &ModelConfig) -> String {
    let join = |v: &[usize]| {
        v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
    };
    format!(
        "mode={} width={} t_clip={} spatial={}x{} stem={} taps={} blocks={} \
         expansion={} temporal_kernel={} d1_hidden={} d2={} d3={}",
        cfg.mode.label(),
        cfg.width.label(),
        cfg.t_clip,
        cfg.spatial.0,
        cfg.spatial.1,
        cfg.stem_channels,
        join(&cfg.tap_channels),
        join(&cfg.blocks),
        cfg.expansion,
        cfg.temporal_kernel,
        cfg.d1_hidden,
        join(&cfg.d2_channels),
        join(&cfg.d3_channels),
    )
}

/// Parses the key=value form produced by `config_tokens`. Every key is
/// required; unknown keys are rejected.
pub fn parse_config_tokens(s: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::desk();
    let mut seen = Vec::new();
    let bad = |k: &str, v: &str| Error::Data(format!("config token {k}={v} is invalid"));
    for token in s.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("config token {token} lacks '='")))?;
        let list = || -> Result<Vec<usize>> {
            value
                .split(',')
                .map(|d| d.parse::<usize>().map_err(|_| bad(key, value)))
                .collect()
        };
        match key {
            "mode" => cfg.mode = Mode::parse(value).ok_or_else(|| bad(key, value))?,
            "width" => cfg.width = Width::parse(value).ok_or_else(|| bad(key, value))?,
            "t_clip" => cfg.t_clip = value.parse().map_err(|_| bad(key, value))?,
            "spatial" => {
                let (h, w) = value.split_once('x').ok_or_else(|| bad(key, value))?;
                cfg.spatial = (
                    h.parse().map_err(|_| bad(key, value))?,
                    w.parse().map_err(|_| bad(key, value))?,
                );
            }
            "stem" => cfg.stem_channels = value.parse().map_err(|_| bad(key, value))?,
            "taps" => {
                cfg.tap_channels =
                    list()?.try_into().map_err(|_| bad(key, value))?;
            }
            "blocks" => {
                cfg.blocks = list()?.try_into().map_err(|_| bad(key, value))?;
            }
            "expansion" => cfg.expansion = value.parse().map_err(|_| bad(key, value))?,
            "temporal_kernel" => {
                cfg.temporal_kernel = value.parse().map_err(|_| bad(key, value))?;
            }
            "d1_hidden" => cfg.d1_hidden = value.parse().map_err(|_| bad(key, value))?,
            "d2" => cfg.d2_channels = list()?.try_into().map_err(|_| bad(key, value))?,
            "d3" => cfg.d3_channels = list()?.try_into().map_err(|_| bad(key, value))?,
            _ => return Err(Error::Data(format!("unknown config key {key}"))),
        }
        seen.push(key.to_string());
    }
    const KEYS: [&str; 13] = [
        "mode", "width", "t_clip", "spatial", "stem", "taps", "blocks",
        "expansion", "temporal_kernel", "d1_hidden", "d2", "d3",
        "",
    ];
    for key in KEYS.iter().filter(|k| !k.is_empty()) {
        if !seen.iter().any(|s| s == key) {
            return Err(Error::Data(format!("config lacks key {key}")));
        }
    }
    Ok(cfg)
}

/// Writes a checkpoint directory: a text manifest listing the format
/// version, the config echo, and one record per state tensor, plus one
/// raw little-endian f32 blob.
pub fn save_checkpoint(dir: &Path, net: &SaliencyNet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let state = net.state();
    let mut manifest = String::new();
    manifest.push_str(CKPT_FORMAT);
    manifest.push('\n');
    manifest.push_str(&format!("config {}\n", config_tokens(&net.config)));
    let mut blob = Vec::new();
    for (name, tensor) in &state {
        manifest.push_str(&format!(
            "param {name} {} {}\n",
            shape_token(tensor.shape()),
            blob.len()
        ));
        for &v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(&dir.join("weights.bin"), &blob)?;
    write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())
}

struct Manifest {
    config: ModelConfig,
    records: Vec<(String, Vec<usize>, usize)>,
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(line) if line == CKPT_FORMAT => {}
        Some(line) => {
            return Err(data_err(&path, &format!("unsupported format line: {line}")))
        }
        None => return Err(data_err(&path, "empty manifest")),
    }
    let config = match lines.next().and_then(|l| l.strip_prefix("config ")) {
        Some(tokens) => parse_config_tokens(tokens)?,
        None => return Err(data_err(&path, "missing config line")),
    };
    let mut records = Vec::new();
    for line in lines {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some("param"), Some(name), Some(shape), Some(offset), None) => {
                let shape = parse_shape_token(shape)?;
                let offset = offset
                    .parse::<usize>()
                    .map_err(|_| data_err(&path, &format!("bad offset for {name}")))?;
                records.push((name.to_string(), shape, offset));
            }
            _ => return Err(data_err(&path, &format!("malformed record: {line}"))),
        }
    }
    Ok(Manifest { config, records })
}

/// The configuration echoed into a checkpoint, without touching weights.
pub fn read_checkpoint_config(dir: &Path) -> Result<ModelConfig> {
    Ok(read_manifest(dir)?.config)
}

/// Loads checkpoint weights into an already-constructed model. Every
/// manifest record is validated against the model's state; the first
/// mismatched parameter is named in the error.
pub fn load_checkpoint(dir: &Path, net: &SaliencyNet) -> Result<()> {
    let manifest = read_manifest(dir)?;
    let state = net.state();
    let shapes: std::collections::HashMap<&str, &[usize]> = state
        .iter()
        .map(|(name, t)| (name.as_str(), t.shape()))
        .collect();
    if manifest.records.len() != state.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {} tensors, model expects {}",
            manifest.records.len(),
            state.len()
        )));
    }
    for (name, shape, _) in &manifest.records {
        let want = shapes
            .get(name.as_str())
            .ok_or_else(|| Error::Data(format!("model has no parameter {name}")))?;
        if want != shape {
            return Err(Error::Data(format!(
                "parameter {name}: checkpoint shape {shape:?}, model expects {want:?}"
            )));
        }
    }
    let blob_path = dir.join("weights.bin");
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut entries = Vec::with_capacity(manifest.records.len());
    for (name, shape, offset) in manifest.records {
        let numel: usize = shape.iter().product();
        let end = offset + numel * 4;
        if end > blob.len() {
            return Err(data_err(&blob_path, &format!("truncated payload at {name}")));
        }
        let data = blob[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    net.load_state(&entries)
}

/// Rebuilds a model from its checkpoint alone: the echoed config drives
/// construction, then the weights are loaded.
pub fn load_model(dir: &Path) -> Result<SaliencyNet> {
    let config = read_checkpoint_config(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = SaliencyNet::new(config, &mut rng)?;
    load_checkpoint(dir, &net)?;
    Ok(net)
}
