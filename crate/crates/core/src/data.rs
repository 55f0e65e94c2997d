//! Synthetic benchmark: a sprite sweeping in one of four directions over
//! noise (the action), plus up to three planted markers (privacy flags).
//!
//! The frame is divided into a 4x4 grid of cells. The sprite stays inside
//! the central 2x2 cells. Marker 0 is a colour patch in cell (0, 0), marker
//! 1 a stripe texture in cell (0, 3) and marker 2 a blue tint over the
//! bottom row of cells.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use vidpriv_tensor::{RngState, Tensor};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::tokenizer::VideoClip;

pub const ACTION_NAMES: [&str; 4] = ["left", "right", "up", "down"];
pub const MARKER_NAMES: [&str; 3] = ["corner-patch", "stripe-texture", "border-tint"];

const NOISE_LO: f64 = 0.1;
const NOISE_HI: f64 = 0.4;
const SPRITE: [f64; 3] = [0.95, 0.95, 0.95];
const PATCH: [f64; 3] = [0.9, 0.15, 0.15];
const TINT: [f64; 3] = [0.15, 0.2, 0.9];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Everything needed to render one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub action: usize,
    pub privacy: Vec<bool>,
    /// Top-left sprite corner in the first frame, `(row, col)`.
    pub start: (usize, usize),
    pub stream: u64,
}

struct Geometry {
    cell_h: usize,
    cell_w: usize,
    sprite: usize,
}

impl Geometry {
    fn of(c: &DataConfig) -> Result<Self> {
        if c.height % 4 != 0 || c.width % 4 != 0 || c.height < 16 || c.width < 16 {
            return Err(Error::Config(format!("frame {}x{} must be a multiple of 4, at least 16", c.height, c.width)));
        }
        let (cell_h, cell_w) = (c.height / 4, c.width / 4);
        let sprite = (3 * cell_h.min(cell_w) / 4).max(2);
        Ok(Geometry { cell_h, cell_w, sprite })
    }

    /// Free travel inside the central region along rows and columns.
    fn slack(&self) -> (usize, usize) {
        (2 * self.cell_h - self.sprite, 2 * self.cell_w - self.sprite)
    }
}

fn check_config(c: &DataConfig) -> Result<Geometry> {
    if c.classes == 0 || c.classes > ACTION_NAMES.len() {
        return Err(Error::Config(format!("synthetic data supports 1..=4 classes, got {}", c.classes)));
    }
    if c.attributes == 0 || c.attributes > MARKER_NAMES.len() {
        return Err(Error::Config(format!("synthetic data supports 1..=3 attributes, got {}", c.attributes)));
    }
    if c.frames < 2 {
        return Err(Error::Config("need at least two frames".into()));
    }
    let g = Geometry::of(c)?;
    let (sh, sw) = g.slack();
    if c.frames - 1 > sh.min(sw) {
        return Err(Error::Config(format!(
            "a {}-frame sweep leaves the central region ({} px of travel)",
            c.frames,
            sh.min(sw)
        )));
    }
    Ok(g)
}

/// Sprite offset per frame `(drow, dcol)` for each action.
fn velocity(action: usize) -> (isize, isize) {
    match action {
        0 => (0, -1),
        1 => (0, 1),
        2 => (-1, 0),
        _ => (1, 0),
    }
}

/// Draws a start position so the whole sweep stays in the central cells.
/// The coordinate along the motion starts near the side the sprite leaves
/// from; the other one is uniform.
pub fn draw_start(c: &DataConfig, action: usize, rng: &mut RngState) -> Result<(usize, usize)> {
    let g = check_config(c)?;
    let (sh, sw) = g.slack();
    let travel = c.frames - 1;
    let (dr, dc) = velocity(action);
    let along = |slack: usize, d: isize, rng: &mut RngState| -> usize {
        let jitter = rng.below(slack - travel + 1);
        if d > 0 {
            jitter
        } else {
            travel + jitter
        }
    };
    let row = if dr != 0 { along(sh, dr, rng) } else { rng.below(sh + 1) };
    let col = if dc != 0 { along(sw, dc, rng) } else { rng.below(sw + 1) };
    Ok((g.cell_h + row, g.cell_w + col))
}

fn quantize(x: f64) -> f32 {
    ((x.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Renders a `[T, H, W, 3]` clip. Pixels are quantised to 8 bits.
pub fn render_clip(spec: &SceneSpec, c: &DataConfig, seed: u64) -> Result<VideoClip> {
    let g = check_config(c)?;
    if spec.action >= c.classes || spec.privacy.len() != c.attributes {
        return Err(Error::Label(format!("scene {spec:?} does not fit the config")));
    }
    let (t_n, h_n, w_n) = (c.frames, c.height, c.width);
    let (dr, dc) = velocity(spec.action);
    let (r0, c0) = spec.start;
    let end_r = r0 as isize + dr * (t_n as isize - 1);
    let end_c = c0 as isize + dc * (t_n as isize - 1);
    let inside = |r: isize, col: isize| {
        r >= g.cell_h as isize
            && col >= g.cell_w as isize
            && r + g.sprite as isize <= 3 * g.cell_h as isize
            && col + g.sprite as isize <= 3 * g.cell_w as isize
    };
    if !inside(r0 as isize, c0 as isize) || !inside(end_r, end_c) {
        return Err(Error::Config(format!("sprite trajectory from {:?} leaves the central region", spec.start)));
    }
    let mut rng = RngState::with_stream(seed, spec.stream);
    let mut px = vec![0.0f32; t_n * h_n * w_n * 3];
    let flag = |i: usize| spec.privacy.get(i).copied().unwrap_or(false);
    for t in 0..t_n {
        let sr = (r0 as isize + dr * t as isize) as usize;
        let sc = (c0 as isize + dc * t as isize) as usize;
        for h in 0..h_n {
            for w in 0..w_n {
                let (cell_r, cell_c) = (h / g.cell_h, w / g.cell_w);
                let mut rgb = [0.0f64; 3];
                for v in &mut rgb {
                    *v = rng.uniform_range(NOISE_LO, NOISE_HI);
                }
                if flag(0) && cell_r == 0 && cell_c == 0 {
                    for (v, base) in rgb.iter_mut().zip(PATCH) {
                        *v = base + (*v - 0.25) * 0.2;
                    }
                }
                if flag(1) && cell_r == 0 && cell_c == 3 {
                    let level = if (w / 2) % 2 == 0 { 0.95 } else { 0.05 };
                    for v in &mut rgb {
                        *v = level + (*v - 0.25) * 0.2;
                    }
                }
                if flag(2) && cell_r == 3 {
                    for (v, base) in rgb.iter_mut().zip(TINT) {
                        *v = base + (*v - 0.25) * 0.2;
                    }
                }
                if h >= sr && h < sr + g.sprite && w >= sc && w < sc + g.sprite {
                    for (v, base) in rgb.iter_mut().zip(SPRITE) {
                        *v = base + (*v - 0.25) * 0.1;
                    }
                }
                let o = ((t * h_n + h) * w_n + w) * 3;
                for k in 0..3 {
                    px[o + k] = quantize(rgb[k]);
                }
            }
        }
    }
    Ok(VideoClip {
        pixels: Tensor::from_vec(&[t_n, h_n, w_n, 3], px)?,
        action: spec.action,
        privacy: spec.privacy.clone(),
    })
}

/// Per-sample record of the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub file: String,
    pub split: Split,
    pub action: usize,
    pub privacy: Vec<bool>,
    pub start: (usize, usize),
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config: DataConfig,
    pub samples: Vec<SampleEntry>,
    /// Count of each action class in the train and test splits.
    pub class_counts: [Vec<usize>; 2],
    /// Count of positive flags per attribute in the train and test splits.
    pub flag_counts: [Vec<usize>; 2],
}

/// A benchmark held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub seed: u64,
    pub train: Vec<VideoClip>,
    pub test: Vec<VideoClip>,
}

fn split_scenes(c: &DataConfig, count: usize, rng: &mut RngState) -> Result<Vec<(usize, Vec<bool>)>> {
    let mut actions: Vec<usize> = (0..count).map(|i| i % c.classes).collect();
    rng.shuffle(&mut actions);
    let mut flags = vec![vec![false; c.attributes]; count];
    for a in 0..c.attributes {
        let mut col: Vec<bool> = (0..count).map(|i| i < count / 2).collect();
        rng.shuffle(&mut col);
        for (row, v) in flags.iter_mut().zip(col) {
            row[a] = v;
        }
    }
    Ok(actions.into_iter().zip(flags).collect())
}

/// Scene specs for both splits: actions stratified, each flag set on exactly
/// half of every split (rounded down).
pub fn plan_scenes(c: &DataConfig, seed: u64) -> Result<Vec<(Split, SceneSpec)>> {
    check_config(c)?;
    let mut rng = RngState::with_stream(seed, u64::MAX);
    let mut out = Vec::with_capacity(c.train_count + c.test_count);
    for (split, count) in [(Split::Train, c.train_count), (Split::Test, c.test_count)] {
        for (action, privacy) in split_scenes(c, count, &mut rng)? {
            let stream = out.len() as u64;
            let start = draw_start(c, action, &mut rng)?;
            out.push((
                split,
                SceneSpec {
                    action,
                    privacy,
                    start,
                    stream,
                },
            ));
        }
    }
    Ok(out)
}

impl Dataset {
    pub fn generate(c: &DataConfig, seed: u64) -> Result<Self> {
        let mut ds = Dataset {
            config: c.clone(),
            seed,
            train: Vec::new(),
            test: Vec::new(),
        };
        for (split, spec) in plan_scenes(c, seed)? {
            let clip = render_clip(&spec, c, seed)?;
            match split {
                Split::Train => ds.train.push(clip),
                Split::Test => ds.test.push(clip),
            }
        }
        Ok(ds)
    }

    /// Writes `manifest.json` and `samples/NNNN.clip` under `dir`.
    pub fn write(c: &DataConfig, seed: u64, dir: &Path) -> Result<DatasetManifest> {
        let samples_dir = dir.join("samples");
        fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
        let mut samples = Vec::new();
        let mut class_counts = [vec![0; c.classes], vec![0; c.classes]];
        let mut flag_counts = [vec![0; c.attributes], vec![0; c.attributes]];
        for (i, (split, spec)) in plan_scenes(c, seed)?.into_iter().enumerate() {
            let clip = render_clip(&spec, c, seed)?;
            let file = format!("samples/{i:04}.clip");
            let path = dir.join(&file);
            let bytes = encode_clip(&clip.pixels);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            let s = split as usize;
            class_counts[s][spec.action] += 1;
            for (a, &f) in spec.privacy.iter().enumerate() {
                flag_counts[s][a] += f as usize;
            }
            samples.push(SampleEntry {
                file,
                split,
                action: spec.action,
                privacy: spec.privacy,
                start: spec.start,
                bytes: bytes.len() as u64,
            });
        }
        let manifest = DatasetManifest {
            seed,
            config: c.clone(),
            samples,
            class_counts,
            flag_counts,
        };
        let mpath = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        let mut f = fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&mpath, e))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let mut ds = Dataset {
            config: manifest.config.clone(),
            seed: manifest.seed,
            train: Vec::new(),
            test: Vec::new(),
        };
        for s in &manifest.samples {
            let path = dir.join(&s.file);
            let mut bytes = Vec::new();
            fs::File::open(&path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| Error::io(&path, e))?;
            let pixels = decode_clip(&bytes)?;
            let c = &manifest.config;
            if pixels.shape() != [c.frames, c.height, c.width, 3] {
                return Err(Error::Data(format!("{} has shape {:?}", s.file, pixels.shape())));
            }
            let clip = VideoClip {
                pixels,
                action: s.action,
                privacy: s.privacy.clone(),
            };
            match s.split {
                Split::Train => ds.train.push(clip),
                Split::Test => ds.test.push(clip),
            }
        }
        Ok(ds)
    }
}

/// `[u32 T, u32 H, u32 W]` little-endian header then 8-bit RGB frames.
pub fn encode_clip(pixels: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + pixels.numel());
    for &d in &pixels.shape()[..3] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend(pixels.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_clip(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 12 {
        return Err(Error::Data("clip header truncated".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
    let (t, h, w) = (dim(0), dim(1), dim(2));
    let n = t * h * w * 3;
    if bytes.len() != 12 + n {
        return Err(Error::Data(format!("clip payload has {} bytes, expected {n}", bytes.len() - 12)));
    }
    let data = bytes[12..].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::from_vec(&[t, h, w, 3], data)?)
}

/// A stacked batch of clips.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, T, H, W, 3]`.
    pub pixels: Tensor<f32>,
    pub actions: Vec<usize>,
    pub privacy: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_clips(clips: &[&VideoClip]) -> Result<Self> {
        let first = clips.first().ok_or(Error::EmptyData)?;
        let shape = first.pixels.shape().to_vec();
        let mut data = Vec::with_capacity(clips.len() * first.pixels.numel());
        for c in clips {
            if c.pixels.shape() != shape.as_slice() {
                return Err(Error::Layout("clips in a batch differ in shape".into()));
            }
            data.extend_from_slice(c.pixels.data());
        }
        let mut full = vec![clips.len()];
        full.extend(shape);
        Ok(Batch {
            pixels: Tensor::from_vec(&full, data)?,
            actions: clips.iter().map(|c| c.action).collect(),
            privacy: clips.iter().map(|c| c.privacy.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Shuffled mini-batches of indices for one epoch; the last batch may be short.
pub fn epoch_batches(count: usize, batch_size: usize, rng: &mut RngState) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..count).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Hand-coded marker detector used as a sanity floor for the benchmark.
pub fn probe_markers(pixels: &Tensor<f32>, attributes: usize) -> Vec<bool> {
    let s = pixels.shape();
    let (t_n, h_n, w_n) = (s[0], s[1], s[2]);
    let (ch, cw) = (h_n / 4, w_n / 4);
    let mean = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, k: usize| -> f64 {
        let mut acc = 0.0;
        let mut n = 0.0;
        for t in 0..t_n {
            for h in rows.clone() {
                for w in cols.clone() {
                    acc += pixels.at(&[t, h, w, k]) as f64;
                    n += 1.0;
                }
            }
        }
        acc / n
    };
    let patch = mean(0..ch, 0..cw, 0) > 0.6 && mean(0..ch, 0..cw, 1) < 0.3;
    let stripe = {
        let mut contrast = 0.0;
        let mut n = 0.0;
        for t in 0..t_n {
            for h in 0..ch {
                for w in 3 * cw..w_n - 1 {
                    contrast += (pixels.at(&[t, h, w, 1]) - pixels.at(&[t, h, w + 1, 1])).abs() as f64;
                    n += 1.0;
                }
            }
        }
        contrast / n > 0.3
    };
    let tint = mean(3 * ch..h_n, 0..w_n, 2) > 0.7 && mean(3 * ch..h_n, 0..w_n, 0) < 0.3;
    [patch, stripe, tint].into_iter().take(attributes).collect()
}

/// Column (or row) of the sprite centroid in every frame, found from the
/// bright pixels of the central region.
pub fn sprite_centroids(pixels: &Tensor<f32>) -> Vec<(f64, f64)> {
    let s = pixels.shape();
    let (t_n, h_n, w_n) = (s[0], s[1], s[2]);
    let (ch, cw) = (h_n / 4, w_n / 4);
    (0..t_n)
        .map(|t| {
            let (mut sr, mut sc, mut n) = (0.0, 0.0, 0.0);
            for h in ch..3 * ch {
                for w in cw..3 * cw {
                    if (0..3).all(|k| pixels.at(&[t, h, w, k]) > 0.8) {
                        sr += h as f64;
                        sc += w as f64;
                        n += 1.0;
                    }
                }
            }
            if n > 0.0 {
                (sr / n, sc / n)
            } else {
                (f64::NAN, f64::NAN)
            }
        })
        .collect()
}

/// Hand-coded action classifier: the dominant direction of centroid motion.
pub fn probe_action(pixels: &Tensor<f32>) -> usize {
    let c = sprite_centroids(pixels);
    let (first, last) = (c[0], c[c.len() - 1]);
    let (dr, dc) = (last.0 - first.0, last.1 - first.1);
    if dc.abs() >= dr.abs() {
        if dc < 0.0 {
            0
        } else {
            1
        }
    } else if dr < 0.0 {
        2
    } else {
        3
    }
}
