//! Deterministic synthetic video tasks with exact ground truth.
//!
//! EF analog: a bright ellipse whose axes scale sinusoidally over one full
//! cycle per clip. The label is `1 − s_min²`, the area ratio lost between the
//! largest (ED) and smallest (ES) frame.
//!
//! AS analog: a ring with a central gap. Severity class c raises the ring
//! brightness and speckle and narrows the gap, monotonically in c.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GemtError, Result};
use crate::model::{Task, VideoSample, VideoSupervision, AS_CLASSES};
use crate::tensor::{read_container, write_container, ParameterStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub k: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Standard deviation of the additive background noise, in [0, 0.2].
    pub noise: f64,
    pub task: Task,
}

impl SynthConfig {
    pub fn new(task: Task) -> Self {
        SynthConfig {
            seed: 0,
            train: 500,
            val: 100,
            test: 100,
            k: match task {
                Task::Ef => 1,
                Task::As => 2,
            },
            t: 8,
            h: 32,
            w: 32,
            noise: 0.05,
            task,
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(GemtError::Config(m));
        if !(0.0..=0.2).contains(&self.noise) {
            return err(format!("data.noise {} outside [0, 0.2]", self.noise));
        }
        if self.k == 0 || self.t < 2 {
            return err("data.k >= 1 and data.t >= 2 required".into());
        }
        if self.h < 16 || self.w < 16 {
            return err(format!("frames of {}x{} are too small (min 16x16)", self.h, self.w));
        }
        if self.task == Task::As && self.k > 2 {
            return err("the AS task renders at most two views".into());
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-sample seed: `seed ⊕ split-tag ⊕ index`, then mixed.
pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    splitmix64(seed ^ (split.tag() << 48) ^ index as u64)
}

pub fn sample_id(task: Task, split: Split, index: usize) -> String {
    format!("{}-{}-{index:05}", task.name(), split.name())
}

// ── EF analog ──────────────────────────────────────────────────────

/// Geometry of one ellipse view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axes at scale 1 (ED), in pixels.
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64, scale: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let u = (c * dx + s * dy) / (self.a * scale);
        let v = (-s * dx + c * dy) / (self.b * scale);
        u * u + v * v <= 1.0
    }

    pub fn area(&self, scale: f64) -> f64 {
        PI * self.a * self.b * scale * scale
    }

    /// Half-extents of the bounding box at scale 1.
    fn extent(&self) -> (f64, f64) {
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let ex = ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt();
        let ey = ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt();
        (ex, ey)
    }
}

/// Everything that determines an EF sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EfParams {
    pub s_min: f64,
    /// Frame of maximal scale.
    pub ed_phase: usize,
    pub views: Vec<Ellipse>,
    pub foreground: f64,
    pub background: f64,
}

/// Axis scale at frame `t`: 1 at `ed_phase`, `s_min` half a cycle later.
pub fn ef_scale(p: &EfParams, t: usize, frames: usize) -> f64 {
    let phase = 2.0 * PI * (t as f64 - p.ed_phase as f64) / frames as f64;
    p.s_min + (1.0 - p.s_min) * 0.5 * (1.0 + phase.cos())
}

/// ED = first frame of maximal analytic area. ES = frame of minimal area,
/// ties going to the frame circularly farthest from ED, then the lowest index.
pub fn ed_es_indices(areas: &[f64]) -> (usize, usize) {
    let t = areas.len();
    let mut ed = 0;
    for i in 1..t {
        if areas[i] > areas[ed] {
            ed = i;
        }
    }
    let dist = |i: usize| {
        let d = (i + t - ed) % t;
        d.min(t - d)
    };
    let mut es = usize::MAX;
    for i in 0..t {
        if i == ed {
            continue;
        }
        let better = es == usize::MAX || areas[i] < areas[es] || (areas[i] == areas[es] && dist(i) > dist(es));
        if better {
            es = i;
        }
    }
    (ed, es)
}

/// Rasterizes an EF sample from explicit parameters.
pub fn render_ef(cfg: &SynthConfig, params: &EfParams, sample_id: String, rng: &mut impl Rng) -> Result<VideoSample> {
    if !(params.s_min > 0.0 && params.s_min <= 1.0) {
        return Err(GemtError::Generation(format!("s_min {} outside (0,1]", params.s_min)));
    }
    if params.views.len() != cfg.k {
        return Err(GemtError::Generation(format!(
            "{} views for k = {}",
            params.views.len(),
            cfg.k
        )));
    }
    for e in &params.views {
        let (ex, ey) = e.extent();
        if e.cx - ex < 0.0 || e.cx + ex > cfg.w as f64 || e.cy - ey < 0.0 || e.cy + ey > cfg.h as f64 {
            return Err(GemtError::Generation(format!(
                "ellipse {e:?} does not fit in a {}x{} frame",
                cfg.h, cfg.w
            )));
        }
    }
    let (h, w, t_len) = (cfg.h, cfg.w, cfg.t);
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("valid std");
    let scales: Vec<f64> = (0..t_len).map(|t| ef_scale(params, t, t_len)).collect();
    let areas: Vec<f64> = scales.iter().map(|s| s * s).collect();
    let (ed, es) = ed_es_indices(&areas);

    const SS: usize = 4;
    let mut videos = Vec::with_capacity(cfg.k * t_len * h * w);
    let mut supervision = Vec::with_capacity(cfg.k);
    for view in &params.views {
        for &scale in &scales {
            for y in 0..h {
                for x in 0..w {
                    let mut inside = 0;
                    for sy in 0..SS {
                        for sx in 0..SS {
                            let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                            let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                            inside += usize::from(view.contains(px, py, scale));
                        }
                    }
                    let cover = inside as f64 / (SS * SS) as f64;
                    let mut v = params.background + (params.foreground - params.background) * cover;
                    if cfg.noise > 0.0 {
                        v += noise.sample(rng);
                    }
                    videos.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        let mask = |scale: f64| -> Vec<u8> {
            (0..h * w)
                .map(|i| {
                    let (y, x) = (i / w, i % w);
                    u8::from(view.contains(x as f64 + 0.5, y as f64 + 0.5, scale))
                })
                .collect()
        };
        supervision.push(VideoSupervision {
            ed_index: ed,
            es_index: es,
            ed_mask: mask(scales[ed]),
            es_mask: mask(scales[es]),
        });
    }
    let label = 1.0 - params.s_min * params.s_min;
    let sample = VideoSample {
        sample_id,
        k: cfg.k,
        t: t_len,
        h,
        w,
        videos,
        ef_label: Some(label as f32),
        as_label: None,
        supervision: Some(supervision),
    };
    sample.validate()?;
    Ok(sample)
}

/// Draws EF parameters for a sample. Labels are uniform on [0.05, 0.95].
pub fn draw_ef_params(cfg: &SynthConfig, rng: &mut impl Rng) -> EfParams {
    let ef: f64 = rng.gen_range(0.05..0.95);
    let (w, h) = (cfg.w as f64, cfg.h as f64);
    let base = 0.5 * w.min(h);
    let a = base * rng.gen_range(0.62..0.72);
    let b = base * rng.gen_range(0.48..0.58);
    let cx = w / 2.0 + rng.gen_range(-0.04..0.04) * w;
    let cy = h / 2.0 + rng.gen_range(-0.04..0.04) * h;
    let angle = rng.gen_range(-0.3..0.3);
    let mut views = vec![Ellipse { cx, cy, a, b, angle }];
    for _ in 1..cfg.k {
        // a different aspect ratio and orientation, same pulsation
        views.push(Ellipse {
            cx: w / 2.0,
            cy: h / 2.0,
            a: b * 1.05,
            b: a * 0.8,
            angle: rng.gen_range(0.5..1.0),
        });
    }
    EfParams {
        s_min: (1.0 - ef).sqrt(),
        ed_phase: rng.gen_range(0..cfg.t),
        views,
        foreground: rng.gen_range(0.75..0.9),
        background: rng.gen_range(0.05..0.15),
    }
}

pub fn gen_ef_sample(cfg: &SynthConfig, split: Split, index: usize) -> Result<VideoSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, split, index));
    let params = draw_ef_params(cfg, &mut rng);
    render_ef(cfg, &params, sample_id(Task::Ef, split, index), &mut rng)
}

// ── AS analog ──────────────────────────────────────────────────────

/// Ring appearance for a severity class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RingStyle {
    pub brightness: f64,
    pub gap_radius: f64,
    pub outer_radius: f64,
    pub speckle: f64,
}

/// Nominal ring style for class `c` on a frame whose short side is `size`.
pub fn ring_style(c: usize, size: usize) -> RingStyle {
    let r = size as f64 / 32.0;
    RingStyle {
        brightness: 0.35 + 0.17 * c as f64,
        gap_radius: r * (6.5 - 1.5 * c as f64),
        outer_radius: r * 10.0,
        speckle: 0.06 * c as f64,
    }
}

pub fn gen_as_sample(cfg: &SynthConfig, split: Split, index: usize) -> Result<VideoSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, split, index));
    let class = index % AS_CLASSES;
    let (h, w) = (cfg.h, cfg.w);
    let size = h.min(w);
    let nominal = ring_style(class, size);
    let style = RingStyle {
        brightness: nominal.brightness + rng.gen_range(-0.03..0.03),
        gap_radius: nominal.gap_radius + rng.gen_range(-0.4..0.4) * size as f64 / 32.0,
        ..nominal
    };
    if style.outer_radius * 2.0 + 2.0 > size as f64 {
        return Err(GemtError::Generation(format!("ring does not fit in {h}x{w}")));
    }
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("valid std");
    let background = rng.gen_range(0.05..0.12);
    let margin = style.outer_radius + 1.0;
    let centers: Vec<(f64, f64)> = (0..cfg.k)
        .map(|view| {
            // views sit in different halves of the frame
            let side = if view == 0 { -1.0 } else { 1.0 };
            let cx = (w as f64 / 2.0 + side * 0.12 * w as f64).clamp(margin, w as f64 - margin);
            let cy = (h as f64 / 2.0 + rng.gen_range(-0.08..0.08) * h as f64).clamp(margin, h as f64 - margin);
            (cx, cy)
        })
        .collect();
    let phase = rng.gen_range(0.0..2.0 * PI);
    let mut videos = Vec::with_capacity(cfg.k * cfg.t * h * w);
    for &(cx, cy) in &centers {
        for t in 0..cfg.t {
            // the leaflets open and close once per clip
            let gap = style.gap_radius * (1.0 + 0.12 * (2.0 * PI * t as f64 / cfg.t as f64 + phase).sin());
            for y in 0..h {
                for x in 0..w {
                    let r = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                    let mut v = background;
                    if r >= gap && r <= style.outer_radius {
                        v = style.brightness * (1.0 + style.speckle * rng.gen_range(-1.0..1.0));
                    }
                    if cfg.noise > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    videos.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    let sample = VideoSample {
        sample_id: sample_id(Task::As, split, index),
        k: cfg.k,
        t: cfg.t,
        h,
        w,
        videos,
        ef_label: None,
        as_label: Some(class),
        supervision: None,
    };
    sample.validate()?;
    Ok(sample)
}

pub fn gen_sample(cfg: &SynthConfig, split: Split, index: usize) -> Result<VideoSample> {
    match cfg.task {
        Task::Ef => gen_ef_sample(cfg, split, index),
        Task::As => gen_as_sample(cfg, split, index),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<VideoSample>,
    pub val: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[VideoSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn gen_split(cfg: &SynthConfig, split: Split) -> Result<Vec<VideoSample>> {
    (0..cfg.count(split)).map(|i| gen_sample(cfg, split, i)).collect()
}

pub fn make_splits(cfg: &SynthConfig) -> Result<Splits> {
    cfg.validate()?;
    Ok(Splits {
        train: gen_split(cfg, Split::Train)?,
        val: gen_split(cfg, Split::Val)?,
        test: gen_split(cfg, Split::Test)?,
    })
}

// ── export / import ────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub split: Split,
    pub file: String,
    pub k: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub ef_label: Option<f32>,
    pub as_label: Option<usize>,
    pub ed_index: Option<Vec<usize>>,
    pub es_index: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: Task,
    pub samples: Vec<ManifestEntry>,
}

/// Writes each sample as a container file (`videos`, and `masks.ed` /
/// `masks.es` when supervised) plus `manifest.json` with ids and labels.
pub fn export_dataset(dir: &Path, task: Task, splits: &Splits) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for split in Split::ALL {
        for s in splits.get(split) {
            let mut store = ParameterStore::<f32>::new();
            store.insert("videos", Tensor::new(&[s.k, s.t, s.h, s.w], s.videos.clone())?)?;
            if let Some(sup) = &s.supervision {
                let stack = |f: &dyn Fn(&VideoSupervision) -> &Vec<u8>| -> Result<Tensor<f32>> {
                    let data = sup.iter().flat_map(|v| f(v).iter().map(|&b| b as f32)).collect();
                    Tensor::new(&[s.k, s.h, s.w], data)
                };
                store.insert("masks.ed", stack(&|v| &v.ed_mask)?)?;
                store.insert("masks.es", stack(&|v| &v.es_mask)?)?;
            }
            let file = format!("{}.gemt", s.sample_id);
            write_container(fs::File::create(dir.join(&file))?, &store)?;
            entries.push(ManifestEntry {
                sample_id: s.sample_id.clone(),
                split,
                file,
                k: s.k,
                t: s.t,
                h: s.h,
                w: s.w,
                ef_label: s.ef_label,
                as_label: s.as_label,
                ed_index: s.supervision.as_ref().map(|v| v.iter().map(|x| x.ed_index).collect()),
                es_index: s.supervision.as_ref().map(|v| v.iter().map(|x| x.es_index).collect()),
            });
        }
    }
    let manifest = Manifest { task, samples: entries };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn import_dataset(dir: &Path) -> Result<(Task, Splits)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut splits = Splits {
        train: vec![],
        val: vec![],
        test: vec![],
    };
    for e in manifest.samples {
        let store = read_container(fs::File::open(dir.join(&e.file))?)?;
        let videos = store.get("videos")?.data().to_vec();
        let supervision = match (&e.ed_index, &e.es_index) {
            (Some(ed), Some(es)) => {
                let n = e.h * e.w;
                let bits =
                    |name: &str| -> Result<Vec<u8>> { Ok(store.get(name)?.data().iter().map(|&v| v as u8).collect()) };
                let (ed_m, es_m) = (bits("masks.ed")?, bits("masks.es")?);
                Some(
                    (0..e.k)
                        .map(|k| VideoSupervision {
                            ed_index: ed[k],
                            es_index: es[k],
                            ed_mask: ed_m[k * n..(k + 1) * n].to_vec(),
                            es_mask: es_m[k * n..(k + 1) * n].to_vec(),
                        })
                        .collect(),
                )
            }
            _ => None,
        };
        let sample = VideoSample {
            sample_id: e.sample_id,
            k: e.k,
            t: e.t,
            h: e.h,
            w: e.w,
            videos,
            ef_label: e.ef_label,
            as_label: e.as_label,
            supervision,
        };
        sample.validate()?;
        match e.split {
            Split::Train => splits.train.push(sample),
            Split::Val => splits.val.push(sample),
            Split::Test => splits.test.push(sample),
        }
    }
    Ok((manifest.task, splits))
}
