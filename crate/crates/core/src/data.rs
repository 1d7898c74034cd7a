//! Synthetic segmentation scenes and their prototype feature pyramids.
//!
//! Every pixel's base feature is the prototype of the category covering it
//! (or the background prototype) plus isotropic Gaussian noise. Coarser
//! scales are 2×2 mean pools of the finer one. Only the masks are stored on
//! disk; features are regenerated from the embedded configuration.

use crate::maskops::{BinaryMask, MaskError};
use crate::seeds;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

pub const DATASET_MAGIC: &str = "mpseg-dataset";
pub const DATASET_VERSION: u32 = 1;
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

const TAG_SCENE: u64 = 1;
const TAG_FEATURES: u64 = 2;
const TAG_PROTOTYPES: u64 = 3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error("scene {index}: could not place instance {instance} after {attempts} attempts")]
    Placement {
        index: usize,
        instance: usize,
        attempts: usize,
    },
    #[error("dataset schema version {found}, expected {expected}")]
    Version { found: String, expected: u32 },
    #[error("malformed dataset at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Disk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeKind {
    /// Standard basis vectors; the background takes the axis after the last
    /// category.
    Orthonormal,
    /// Seeded Gaussian directions normalized to unit length.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub num_categories: usize,
    pub feature_dim: usize,
    pub shapes: Vec<ShapeKind>,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub prototypes: PrototypeKind,
    pub feature_noise: f64,
    pub num_scenes: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            num_categories: 4,
            feature_dim: 32,
            shapes: vec![ShapeKind::Rectangle, ShapeKind::Disk],
            min_instances: 1,
            max_instances: 6,
            min_size: 5,
            max_size: 12,
            prototypes: PrototypeKind::Orthonormal,
            feature_noise: 0.1,
            num_scenes: 200,
            seed: 0,
        }
    }
}

fn config_err(field: &'static str, message: impl Into<String>) -> DataError {
    DataError::Config {
        field,
        message: message.into(),
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_categories == 0 {
            return Err(config_err("num_categories", "must be at least 1"));
        }
        if self.height == 0 || !self.height.is_multiple_of(4) {
            return Err(config_err("height", "must be a positive multiple of 4"));
        }
        if self.width == 0 || !self.width.is_multiple_of(4) {
            return Err(config_err("width", "must be a positive multiple of 4"));
        }
        if self.feature_dim == 0 {
            return Err(config_err("feature_dim", "must be positive"));
        }
        if self.prototypes == PrototypeKind::Orthonormal && self.feature_dim < self.num_categories + 1 {
            return Err(config_err(
                "feature_dim",
                "orthonormal prototypes need feature_dim >= num_categories + 1",
            ));
        }
        if self.shapes.is_empty() {
            return Err(config_err("shapes", "at least one shape kind"));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(config_err("min_instances", "need 1 <= min_instances <= max_instances"));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(config_err("min_size", "need 1 <= min_size <= max_size"));
        }
        if self.max_size > self.height.min(self.width) {
            return Err(config_err("max_size", "larger than the image"));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(config_err("feature_noise", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Extents of the three pyramid levels, coarse to fine.
    pub fn scale_extents(&self) -> [(usize, usize); 3] {
        scale_extents(self.height, self.width)
    }
}

pub fn scale_extents(height: usize, width: usize) -> [(usize, usize); 3] {
    [
        (height / 4, width / 4),
        (height / 2, width / 2),
        (height, width),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub category: usize,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub index: usize,
    pub height: usize,
    pub width: usize,
    pub instances: Vec<Instance>,
}

impl Scene {
    /// Category covering each pixel, `None` for background.
    pub fn category_map(&self) -> Vec<Option<usize>> {
        let mut map = vec![None; self.height * self.width];
        for inst in &self.instances {
            for (slot, &b) in map.iter_mut().zip(inst.mask.bits()) {
                if b {
                    *slot = Some(inst.category);
                }
            }
        }
        map
    }
}

/// Features on a `height × width` grid, `dim` values per cell, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    fn mean_pool2(&self) -> FeatureMap {
        let (h, w, d) = (self.height / 2, self.width / 2, self.dim);
        let mut data = vec![0.0; h * w * d];
        for y in 0..h {
            for x in 0..w {
                let out = &mut data[(y * w + x) * d..(y * w + x + 1) * d];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    for (o, v) in out.iter_mut().zip(self.cell(2 * y + dy, 2 * x + dx)) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|v| *v *= 0.25);
            }
        }
        FeatureMap {
            height: h,
            width: w,
            dim: d,
            data,
        }
    }
}

/// Three feature scales (coarse to fine) plus the per-pixel embedding grid
/// used by the mask head.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub scales: [FeatureMap; 3],
}

impl FeaturePyramid {
    pub fn pixel_embed(&self) -> &FeatureMap {
        &self.scales[2]
    }

    pub fn dim(&self) -> usize {
        self.scales[2].dim
    }
}

/// `K + 1` unit prototypes; the last one is the background.
pub fn prototypes(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let (k, d) = (cfg.num_categories, cfg.feature_dim);
    match cfg.prototypes {
        PrototypeKind::Orthonormal => (0..=k)
            .map(|c| {
                let mut v = vec![0.0; d];
                v[c] = 1.0;
                v
            })
            .collect(),
        PrototypeKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(&[cfg.seed, TAG_PROTOTYPES]));
            (0..=k)
                .map(|_| {
                    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / n).collect()
                })
                .collect()
        }
    }
}

fn sample_shape(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> BinaryMask {
    let kind = cfg.shapes[rng.gen_range(0..cfg.shapes.len())];
    let (h, w) = (cfg.height, cfg.width);
    match kind {
        ShapeKind::Rectangle => {
            let sh = rng.gen_range(cfg.min_size..=cfg.max_size);
            let sw = rng.gen_range(cfg.min_size..=cfg.max_size);
            let y0 = rng.gen_range(0..=h - sh);
            let x0 = rng.gen_range(0..=w - sw);
            BinaryMask::from_fn(h, w, |y, x| {
                (y0..y0 + sh).contains(&y) && (x0..x0 + sw).contains(&x)
            })
        }
        ShapeKind::Disk => {
            let diameter = rng.gen_range(cfg.min_size..=cfg.max_size);
            let y0 = rng.gen_range(0..=h - diameter);
            let x0 = rng.gen_range(0..=w - diameter);
            let half = (diameter as f64 - 1.0) / 2.0;
            let (cy, cx) = (y0 as f64 + half, x0 as f64 + half);
            let r2 = (diameter as f64 / 2.0).powi(2);
            BinaryMask::from_fn(h, w, |y, x| {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                dy * dy + dx * dx <= r2
            })
        }
    }
}

/// Deterministic in `(cfg.seed, index)`.
pub fn generate_scene(cfg: &SynthConfig, index: usize) -> Result<Scene, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(&[cfg.seed, TAG_SCENE, index as u64]));
    let count = rng.gen_range(cfg.min_instances..=cfg.max_instances);
    let mut instances: Vec<Instance> = Vec::with_capacity(count);
    for inst in 0..count {
        let category = rng.gen_range(0..cfg.num_categories);
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let m = sample_shape(&mut rng, cfg);
            if instances.iter().all(|o| !o.mask.intersects(&m)) {
                placed = Some(m);
                break;
            }
        }
        let mask = placed.ok_or(DataError::Placement {
            index,
            instance: inst,
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })?;
        instances.push(Instance { category, mask });
    }
    Ok(Scene {
        index,
        height: cfg.height,
        width: cfg.width,
        instances,
    })
}

/// Prototype features plus `N(0, σ²I)` noise at base resolution, pooled to
/// the coarser scales. Deterministic in `(cfg.seed, scene.index)`.
pub fn synth_features(scene: &Scene, cfg: &SynthConfig) -> FeaturePyramid {
    let protos = prototypes(cfg);
    let d = cfg.feature_dim;
    let background = cfg.num_categories;
    let cats = scene.category_map();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(&[
        cfg.seed,
        TAG_FEATURES,
        scene.index as u64,
    ]));
    let mut data = Vec::with_capacity(cats.len() * d);
    for c in &cats {
        let p = &protos[c.unwrap_or(background)];
        if cfg.feature_noise > 0.0 {
            for v in p {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(v + cfg.feature_noise * z);
            }
        } else {
            data.extend_from_slice(p);
        }
    }
    let fine = FeatureMap {
        height: scene.height,
        width: scene.width,
        dim: d,
        data,
    };
    let mid = fine.mean_pool2();
    let coarse = mid.mean_pool2();
    FeaturePyramid {
        scales: [coarse, mid, fine],
    }
}

/// Scenes plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn generate(cfg: &SynthConfig) -> Result<Self, DataError> {
        cfg.validate()?;
        let scenes = (0..cfg.num_scenes)
            .into_par_iter()
            .map(|i| generate_scene(cfg, i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            config: cfg.clone(),
            scenes,
        })
    }

    pub fn features(&self, scene: &Scene) -> FeaturePyramid {
        synth_features(scene, &self.config)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{DATASET_MAGIC} v{DATASET_VERSION} {}\n",
            serde_json::to_string(&self.config).expect("config serializes")
        );
        for s in &self.scenes {
            out.push_str(&s.index.to_string());
            for inst in &s.instances {
                out.push('\t');
                out.push_str(&format!("{}:{}", inst.category, inst.mask.to_rle_string()));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let f = fs::File::open(path)?;
        Self::read(BufReader::new(f))
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self, DataError> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or(DataError::Format {
            line: 1,
            message: "empty file".into(),
        })??;
        let mut parts = header.splitn(3, ' ');
        if parts.next() != Some(DATASET_MAGIC) {
            return Err(DataError::Format {
                line: 1,
                message: "missing dataset magic".into(),
            });
        }
        let version = parts.next().unwrap_or_default();
        if version != format!("v{DATASET_VERSION}") {
            return Err(DataError::Version {
                found: version.to_string(),
                expected: DATASET_VERSION,
            });
        }
        let config: SynthConfig =
            serde_json::from_str(parts.next().unwrap_or_default()).map_err(|e| DataError::Format {
                line: 1,
                message: e.to_string(),
            })?;
        config.validate()?;
        let mut scenes = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            if line.is_empty() {
                continue;
            }
            let fmt_err = |message: String| DataError::Format {
                line: lineno,
                message,
            };
            let mut fields = line.split('\t');
            let index = fields
                .next()
                .unwrap_or_default()
                .parse::<usize>()
                .map_err(|e| fmt_err(e.to_string()))?;
            let mut instances = Vec::new();
            for field in fields {
                let (cat, rle) = field
                    .split_once(':')
                    .ok_or_else(|| fmt_err(format!("bad instance {field:?}")))?;
                let category = cat.parse::<usize>().map_err(|e| fmt_err(e.to_string()))?;
                if category >= config.num_categories {
                    return Err(fmt_err(format!("category {category} out of range")));
                }
                let mask = BinaryMask::parse_rle(rle)?;
                if mask.height() != config.height || mask.width() != config.width {
                    return Err(fmt_err("mask extents differ from config".into()));
                }
                instances.push(Instance { category, mask });
            }
            scenes.push(Scene {
                index,
                height: config.height,
                width: config.width,
                instances,
            });
        }
        Ok(Self { config, scenes })
    }
}
