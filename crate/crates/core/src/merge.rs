//! DARE-linear merging over named tensor maps.
//!
//! For each tensor with depth fraction `f`:
//! `merged = base + Σ wᵢ(f)·dareᵢ(modelᵢ − base)`, divided by `Σ wᵢ(f)` when
//! normalizing. `dare` keeps each delta element with probability `density`
//! and rescales survivors by `1/density`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{derive_seed, hash_str};

pub const DEFAULT_LAYER_PATTERN: &str = r"layers\.(\d+)\.";
const MAGIC: &[u8; 4] = b"TMAP";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("tensor file: {0}")]
    Format(String),
    #[error("tensor {name:?}: shape {got:?} does not match base {want:?}")]
    ShapeMismatch {
        name: String,
        want: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tensor {name:?} missing from model {model}")]
    MissingTensor { name: String, model: usize },
    #[error("tensor {name:?}: {len} values for shape {shape:?}")]
    DataLength { name: String, shape: Vec<usize>, len: usize },
    #[error("density {0} not in (0, 1]")]
    Density(f64),
    #[error("empty anchor list")]
    EmptyAnchors,
    #[error("non-finite weight")]
    NonFiniteWeight,
    #[error("recipe: {0}")]
    Recipe(String),
    #[error("layer pattern: {0}")]
    Pattern(#[from] regex::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Tensor { shape, data }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TensorMap {
    pub tensors: BTreeMap<String, Tensor>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MergeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| MergeError::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, MergeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, MergeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl TensorMap {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn validate(&self) -> Result<(), MergeError> {
        for (name, t) in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(MergeError::DataLength {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    len: t.data.len(),
                });
            }
        }
        Ok(())
    }

    /// Layout (all little-endian): `TMAP`, u32 version, u32 tensor count, then
    /// per tensor in name order: u32 name length, UTF-8 name, u32 rank,
    /// u64 per dimension, f32 per element.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, MergeError> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(MergeError::Format("bad magic".into()));
        }
        let version = c.u32()?;
        if version != FORMAT_VERSION {
            return Err(MergeError::Format(format!("unsupported version {version}")));
        }
        let count = c.u32()?;
        let mut map = TensorMap::default();
        for _ in 0..count {
            let len = c.u32()? as usize;
            let name = std::str::from_utf8(c.take(len)?)
                .map_err(|_| MergeError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = c.u32()? as usize;
            let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = c.take(n.checked_mul(4).ok_or_else(|| MergeError::Format("shape overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            if map.tensors.insert(name.clone(), Tensor { shape, data }).is_some() {
                return Err(MergeError::Format(format!("duplicate tensor {name:?}")));
            }
        }
        if c.pos != buf.len() {
            return Err(MergeError::Format("trailing bytes".into()));
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<(), MergeError> {
        let io = |source| MergeError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, MergeError> {
        let buf = fs::read(path).map_err(|source| MergeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&buf)
    }
}

/// A constant weight, or anchors spread evenly over depth `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightSpec {
    Scalar(f64),
    Anchors(Vec<f64>),
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec::Scalar(1.0)
    }
}

impl WeightSpec {
    pub fn validate(&self) -> Result<(), MergeError> {
        let vals: &[f64] = match self {
            WeightSpec::Scalar(w) => std::slice::from_ref(w),
            WeightSpec::Anchors(a) if a.is_empty() => return Err(MergeError::EmptyAnchors),
            WeightSpec::Anchors(a) => a,
        };
        if vals.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(MergeError::NonFiniteWeight)
        }
    }

    /// `None` for tensors outside the layer stack: they get the anchor mean.
    pub fn at(&self, depth: Option<f64>) -> f64 {
        match (self, depth) {
            (WeightSpec::Scalar(w), _) => *w,
            (WeightSpec::Anchors(a), Some(f)) => resolve_weight(a, f),
            (WeightSpec::Anchors(a), None) => a.iter().sum::<f64>() / a.len() as f64,
        }
    }
}

/// Piecewise-linear interpolation through anchors placed at `i/(n−1)`.
pub fn resolve_weight(anchors: &[f64], fraction: f64) -> f64 {
    match anchors.len() {
        0 => 0.0,
        1 => anchors[0],
        n => {
            let pos = fraction.clamp(0.0, 1.0) * (n - 1) as f64;
            let i = (pos.floor() as usize).min(n - 2);
            let t = pos - i as f64;
            anchors[i] + t * (anchors[i + 1] - anchors[i])
        }
    }
}

/// Maps tensor names to depth fractions `idx / (layers − 1)`, where the
/// layer count is one more than the largest index seen.
pub struct DepthResolver {
    pattern: Regex,
    layers: usize,
}

impl DepthResolver {
    pub fn new<'a>(pattern: &str, names: impl IntoIterator<Item = &'a str>) -> Result<Self, MergeError> {
        let pattern = Regex::new(pattern)?;
        let layers = names
            .into_iter()
            .filter_map(|n| Self::index_with(&pattern, n))
            .max()
            .map_or(0, |m| m + 1);
        Ok(DepthResolver { pattern, layers })
    }

    fn index_with(re: &Regex, name: &str) -> Option<usize> {
        re.captures(name)?.get(1)?.as_str().parse().ok()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn depth(&self, name: &str) -> Option<f64> {
        let idx = Self::index_with(&self.pattern, name)?;
        Some(if self.layers <= 1 {
            0.0
        } else {
            idx as f64 / (self.layers - 1) as f64
        })
    }
}

pub struct MergeInput<'a> {
    pub map: &'a TensorMap,
    pub density: f64,
    pub weight: WeightSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeOptions {
    pub normalize: bool,
    pub seed: u64,
    pub layer_pattern: String,
}

impl Default for MergeOptions {
    fn default() -> Self {
        MergeOptions {
            normalize: true,
            seed: 0,
            layer_pattern: DEFAULT_LAYER_PATTERN.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub merged: TensorMap,
    /// Tensors whose weights summed to zero under normalization; they were
    /// returned unchanged from the base.
    pub zero_weight_tensors: Vec<String>,
}

fn tensor_seed(seed: u64, name: &str, model: usize) -> u64 {
    derive_seed(seed ^ hash_str(name, 0), &format!("dare.{model}"))
}

/// Drop-and-rescale applied to one delta. Density 1 consumes no randomness.
pub fn dare(delta: &[f64], density: f64, seed: u64) -> Vec<f64> {
    if density >= 1.0 {
        return delta.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    delta
        .iter()
        .map(|d| if rng.random_bool(density) { d / density } else { 0.0 })
        .collect()
}

fn merge_tensor(
    name: &str,
    base: &Tensor,
    models: &[MergeInput<'_>],
    depth: Option<f64>,
    opts: &MergeOptions,
) -> Result<(Tensor, bool), MergeError> {
    let weights: Vec<f64> = models.iter().map(|m| m.weight.at(depth)).collect();
    let total: f64 = weights.iter().sum();
    if opts.normalize && total == 0.0 || weights.iter().all(|w| *w == 0.0) {
        return Ok((base.clone(), opts.normalize && total == 0.0));
    }
    let mut acc = vec![0.0f64; base.data.len()];
    for (i, (m, w)) in models.iter().zip(&weights).enumerate() {
        let t = m.map.get(name).ok_or_else(|| MergeError::MissingTensor {
            name: name.to_string(),
            model: i,
        })?;
        if t.shape != base.shape || t.data.len() != base.data.len() {
            return Err(MergeError::ShapeMismatch {
                name: name.to_string(),
                want: base.shape.clone(),
                got: t.shape.clone(),
            });
        }
        if *w == 0.0 {
            continue;
        }
        let delta: Vec<f64> = t.data.iter().zip(&base.data).map(|(a, b)| *a as f64 - *b as f64).collect();
        for (a, d) in acc.iter_mut().zip(dare(&delta, m.density, tensor_seed(opts.seed, name, i))) {
            *a += w * d;
        }
    }
    let div = if opts.normalize { total } else { 1.0 };
    let data = base.data.iter().zip(&acc).map(|(b, a)| (*b as f64 + a / div) as f32).collect();
    Ok((
        Tensor {
            shape: base.shape.clone(),
            data,
        },
        false,
    ))
}

pub fn dare_linear_merge(
    base: &TensorMap,
    models: &[MergeInput<'_>],
    opts: &MergeOptions,
) -> Result<MergeOutcome, MergeError> {
    base.validate()?;
    for m in models {
        if !(m.density > 0.0 && m.density <= 1.0) {
            return Err(MergeError::Density(m.density));
        }
        m.weight.validate()?;
        m.map.validate()?;
    }
    let depths = DepthResolver::new(&opts.layer_pattern, base.tensors.keys().map(String::as_str))?;
    let merged: Vec<(String, Tensor, bool)> = base
        .tensors
        .par_iter()
        .map(|(name, t)| {
            merge_tensor(name, t, models, depths.depth(name), opts).map(|(m, zero)| (name.clone(), m, zero))
        })
        .collect::<Result<_, _>>()?;
    let mut out = MergeOutcome {
        merged: TensorMap::default(),
        zero_weight_tensors: Vec::new(),
    };
    for (name, t, zero) in merged {
        if zero {
            out.zero_weight_tensors.push(name.clone());
        }
        out.merged.insert(name, t);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParameters {
    #[serde(default = "one")]
    pub density: f64,
    pub weight: WeightSpec,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameters: Option<ModelParameters>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeParameters {
    #[serde(default)]
    pub normalize: bool,
}

/// A merge recipe in the familiar mergekit layout. `dtype` is accepted for
/// compatibility; outputs are always 32-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub models: Vec<ModelEntry>,
    pub merge_method: String,
    pub base_model: String,
    #[serde(default)]
    pub parameters: RecipeParameters,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_pattern")]
    pub layer_pattern: String,
}

fn default_pattern() -> String {
    DEFAULT_LAYER_PATTERN.to_string()
}

impl MergeRecipe {
    /// YAML is a superset of JSON, so one parser covers both.
    pub fn parse(text: &str) -> Result<Self, MergeError> {
        let r: MergeRecipe = serde_yaml::from_str(text).map_err(|e| MergeError::Recipe(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), MergeError> {
        if self.merge_method != "dare_linear" {
            return Err(MergeError::Recipe(format!(
                "unsupported merge_method {:?}",
                self.merge_method
            )));
        }
        let entries = self.entries();
        if entries.is_empty() {
            return Err(MergeError::Recipe("no models besides the base".into()));
        }
        for e in &self.models {
            if e.parameters.is_none() && e.model != self.base_model {
                return Err(MergeError::Recipe(format!("model {:?} has no parameters", e.model)));
            }
        }
        for (_, p) in entries {
            if !(p.density > 0.0 && p.density <= 1.0) {
                return Err(MergeError::Density(p.density));
            }
            p.weight.validate()?;
        }
        Regex::new(&self.layer_pattern)?;
        Ok(())
    }

    /// Models with parameters, in listed order.
    pub fn entries(&self) -> Vec<(&str, &ModelParameters)> {
        self.models
            .iter()
            .filter_map(|e| e.parameters.as_ref().map(|p| (e.model.as_str(), p)))
            .collect()
    }

    pub fn options(&self) -> MergeOptions {
        MergeOptions {
            normalize: self.parameters.normalize,
            seed: self.seed,
            layer_pattern: self.layer_pattern.clone(),
        }
    }
}

/// Model ids resolve to `<dir>/<id>.tmap`, or `<dir>/<id>` when that exists.
pub fn resolve_model_path(dir: &Path, id: &str) -> PathBuf {
    let direct = dir.join(id);
    if direct.is_file() {
        direct
    } else {
        dir.join(format!("{id}.tmap"))
    }
}

/// Loads every referenced map relative to the recipe file and merges.
pub fn merge_from_recipe(path: &Path) -> Result<MergeOutcome, MergeError> {
    let text = fs::read_to_string(path).map_err(|source| MergeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let recipe = MergeRecipe::parse(&text)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let base = TensorMap::load(&resolve_model_path(dir, &recipe.base_model))?;
    let maps = recipe
        .entries()
        .iter()
        .map(|(id, _)| TensorMap::load(&resolve_model_path(dir, id)))
        .collect::<Result<Vec<_>, _>>()?;
    let inputs: Vec<MergeInput> = recipe
        .entries()
        .iter()
        .zip(&maps)
        .map(|((_, p), map)| MergeInput {
            map,
            density: p.density,
            weight: p.weight.clone(),
        })
        .collect();
    dare_linear_merge(&base, &inputs, &recipe.options())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LISTING: &str = "\
models:
  - model: meta-llama/Llama-3.1-70B
  - model: Typhoon2-70b-SFT
    parameters:
      density: 1.0
      weight: 0.6
  - model: meta-llama/Llama-3.3-70B-Instruct
    parameters:
      density: 0.2
      weight: [0.4, 0.4, 0.0, 0.0]
merge_method: dare_linear
base_model: meta-llama/Llama-3.1-70B
parameters:
  normalize: true
dtype: bfloat16
";

    fn stack(layers: usize, width: usize, offset: f32) -> TensorMap {
        let mut m = TensorMap::default();
        for l in 0..layers {
            let data = (0..width).map(|i| offset + (l * width + i) as f32 * 0.37 - 3.0).collect();
            m.insert(format!("model.layers.{l}.mlp.weight"), Tensor::new(vec![width], data));
        }
        m.insert("embed.weight", Tensor::new(vec![2, 2], vec![offset, 1.0, -2.0, 0.5]));
        m
    }

    #[test]
    fn anchor_interpolation() {
        let a = [0.4, 0.4, 0.0, 0.0];
        assert_eq!(resolve_weight(&a, 0.0), 0.4);
        assert_eq!(resolve_weight(&a, 1.0), 0.0);
        assert!((resolve_weight(&a, 0.5) - 0.2).abs() < 1e-15);
        assert!((resolve_weight(&a, 1.0 / 3.0) - 0.4).abs() < 1e-15);
        assert_eq!(resolve_weight(&[0.7], 0.3), 0.7);
        assert!((WeightSpec::Anchors(a.to_vec()).at(None) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn listing_recipe_parses() {
        let r = MergeRecipe::parse(LISTING).unwrap();
        let e = r.entries();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].1.weight, WeightSpec::Scalar(0.6));
        assert_eq!(e[1].1.density, 0.2);
        assert_eq!(e[1].1.weight, WeightSpec::Anchors(vec![0.4, 0.4, 0.0, 0.0]));
        assert!(r.parameters.normalize);
        assert_eq!(r.dtype.as_deref(), Some("bfloat16"));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(MergeRecipe::parse(&json).unwrap(), r);
        assert!(MergeRecipe::parse(&LISTING.replace("dare_linear", "ties")).is_err());
        assert!(MergeRecipe::parse(&LISTING.replace("density: 0.2", "density: 0.0")).is_err());
    }

    #[test]
    fn density_one_single_model_identity() {
        let base = stack(4, 64, 0.0);
        let model = stack(4, 64, 1.25);
        for w in [1.0, 0.6] {
            let out = dare_linear_merge(
                &base,
                &[MergeInput {
                    map: &model,
                    density: 1.0,
                    weight: WeightSpec::Scalar(w),
                }],
                &MergeOptions::default(),
            )
            .unwrap();
            assert_eq!(out.merged.to_bytes(), model.to_bytes());
        }
    }

    #[test]
    fn zero_weight_depths_return_base() {
        let base = stack(5, 16, 0.0);
        let model = stack(5, 16, 2.0);
        let out = dare_linear_merge(
            &base,
            &[MergeInput {
                map: &model,
                density: 0.2,
                weight: WeightSpec::Anchors(vec![0.4, 0.4, 0.0, 0.0]),
            }],
            &MergeOptions::default(),
        )
        .unwrap();
        // Depths 0.75 and 1 sit in the all-zero final segment.
        let zero = ["model.layers.3.mlp.weight", "model.layers.4.mlp.weight"];
        for name in zero {
            assert_eq!(out.merged.get(name), base.get(name));
        }
        assert_eq!(out.zero_weight_tensors, zero);
        assert_ne!(out.merged.get("model.layers.0.mlp.weight"), base.get("model.layers.0.mlp.weight"));
    }

    #[test]
    fn depth_resolution() {
        let m = stack(5, 2, 0.0);
        let d = DepthResolver::new(DEFAULT_LAYER_PATTERN, m.tensors.keys().map(String::as_str)).unwrap();
        assert_eq!(d.layers(), 5);
        assert_eq!(d.depth("model.layers.0.mlp.weight"), Some(0.0));
        assert_eq!(d.depth("model.layers.2.mlp.weight"), Some(0.5));
        assert_eq!(d.depth("embed.weight"), None);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let base = stack(3, 256, 0.0);
        let model = stack(3, 256, 1.0);
        let run = |seed| {
            dare_linear_merge(
                &base,
                &[MergeInput {
                    map: &model,
                    density: 0.2,
                    weight: WeightSpec::Scalar(1.0),
                }],
                &MergeOptions {
                    seed,
                    ..MergeOptions::default()
                },
            )
            .unwrap()
            .merged
            .to_bytes()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let base = stack(2, 8, 0.0);
        let mut model = stack(2, 8, 1.0);
        model.insert("embed.weight", Tensor::new(vec![4], vec![0.0; 4]));
        let err = dare_linear_merge(
            &base,
            &[MergeInput {
                map: &model,
                density: 1.0,
                weight: WeightSpec::Scalar(1.0),
            }],
            &MergeOptions::default(),
        );
        assert!(matches!(err, Err(MergeError::ShapeMismatch { .. })));
    }

    #[test]
    fn dare_mean_is_unbiased_within_sampling_error() {
        // Each element's mean over n draws has sd |d|·sqrt((1−p)/(p·n)).
        let delta: Vec<f64> = (1..=32).map(|i| i as f64 * 0.1).collect();
        let (p, n) = (0.2, 20_000);
        let mut sum = vec![0.0; delta.len()];
        for s in 0..n {
            for (a, v) in sum.iter_mut().zip(dare(&delta, p, s)) {
                *a += v;
            }
        }
        for (d, s) in delta.iter().zip(&sum) {
            let sd = d * ((1.0 - p) / (p * n as f64)).sqrt();
            assert!((s / n as f64 - d).abs() < 5.0 * sd);
        }
    }

    #[test]
    fn file_format_round_trip_and_errors() {
        let m = stack(2, 3, 0.5);
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"TMAP");
        assert_eq!(TensorMap::from_bytes(&bytes).unwrap(), m);
        assert!(TensorMap::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(TensorMap::from_bytes(&extra).is_err());
        assert!(TensorMap::from_bytes(b"NOPE").is_err());
    }

    #[test]
    fn recipe_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("meta-llama");
        fs::create_dir_all(&sub).unwrap();
        stack(4, 8, 0.0).save(&sub.join("Llama-3.1-70B.tmap")).unwrap();
        stack(4, 8, 1.0).save(&dir.path().join("Typhoon2-70b-SFT.tmap")).unwrap();
        stack(4, 8, -1.0).save(&sub.join("Llama-3.3-70B-Instruct.tmap")).unwrap();
        let path = dir.path().join("recipe.yaml");
        fs::write(&path, LISTING).unwrap();
        let a = merge_from_recipe(&path).unwrap();
        let b = merge_from_recipe(&path).unwrap();
        assert_eq!(a.merged.to_bytes(), b.merged.to_bytes());
        assert!(a.zero_weight_tensors.is_empty());
        // At the last layer only the SFT model carries weight, so with
        // normalization the result is that model exactly.
        let last = "model.layers.3.mlp.weight";
        assert_eq!(a.merged.get(last), stack(4, 8, 1.0).get(last));
    }

    proptest! {
        #[test]
        fn interpolation_stays_within_anchor_range(
            anchors in prop::collection::vec(-2.0f64..2.0, 1..6),
            f in 0.0f64..=1.0,
        ) {
            let w = resolve_weight(&anchors, f);
            let lo = anchors.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = anchors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(w >= lo - 1e-12 && w <= hi + 1e-12);
        }

        #[test]
        fn density_one_ignores_seed(s1 in any::<u64>(), s2 in any::<u64>()) {
            let d = [0.5, -1.0, 2.0];
            prop_assert_eq!(dare(&d, 1.0, s1), dare(&d, 1.0, s2));
        }
    }
}
