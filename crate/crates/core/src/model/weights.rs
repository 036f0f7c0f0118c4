//! Named-tensor weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RWKT" | u32 version (1) | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 dtype (0 = f32) | u8 rank
//!             | rank x u32 dims | row-major data
//! ```

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{tensor_schema, ModelConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RWKT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data length mismatch");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Validated parameter set for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

fn get_dims<'a>(map: &'a HashMap<&str, &Tensor>, name: &str) -> Result<&'a [usize]> {
    map.get(name)
        .map(|t| t.shape.as_slice())
        .ok_or_else(|| Error::MissingTensor(name.to_string()))
}

fn dim(map: &HashMap<&str, &Tensor>, name: &str, axis: usize, rank: usize) -> Result<usize> {
    let shape = get_dims(map, name)?;
    if shape.len() != rank {
        return Err(Error::Config(format!("tensor `{name}` should have rank {rank}, has {}", shape.len())));
    }
    Ok(shape[axis])
}

/// Reads the architecture off tensor shapes.
fn infer_config(map: &HashMap<&str, &Tensor>) -> Result<ModelConfig> {
    let vocab_size = dim(map, "emb.weight", 0, 2)?;
    let d_model = dim(map, "emb.weight", 1, 2)?;
    let n_layers = (0..).take_while(|l| map.contains_key(format!("blocks.{l}.ln1.weight").as_str())).count();
    if n_layers == 0 {
        return Err(Error::MissingTensor("blocks.0.ln1.weight".into()));
    }
    let cfg = ModelConfig {
        n_layers,
        d_model,
        d_ffn: dim(map, "blocks.0.ffn.key.weight", 1, 2)?,
        vocab_size,
        n_heads: dim(map, "blocks.0.att.r_k", 0, 2)?,
        decay_rank: dim(map, "blocks.0.att.w1", 1, 2)?,
        iclr_rank: dim(map, "blocks.0.att.a1", 1, 2)?,
        value_rank: dim(map, "blocks.0.att.v1", 1, 2)?,
        gate_rank: dim(map, "blocks.0.att.g1", 1, 2)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl WeightSet {
    /// Checks names, shapes and finiteness, inferring the config from shapes.
    pub fn from_tensors(named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut map: HashMap<&str, &Tensor> = HashMap::with_capacity(named.len());
        for (name, t) in &named {
            if map.insert(name.as_str(), t).is_some() {
                return Err(Error::DuplicateTensor(name.clone()));
            }
        }
        let config = infer_config(&map)?;
        Self::check(&config, &map)?;
        let mut by_name: HashMap<String, Tensor> = named.into_iter().collect();
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, _) in tensor_schema(&config) {
            tensors.push(by_name.remove(&name).expect("checked against schema"));
            names.push(name);
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self { config, names, tensors, index })
    }

    fn check(config: &ModelConfig, map: &HashMap<&str, &Tensor>) -> Result<()> {
        let schema = tensor_schema(config);
        for (name, shape) in &schema {
            let t = map.get(name.as_str()).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if &t.shape != shape {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape.clone(),
                });
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        if map.len() != schema.len() {
            let known: std::collections::HashSet<&str> = schema.iter().map(|(n, _)| n.as_str()).collect();
            let mut extra: Vec<&&str> = map.keys().filter(|n| !known.contains(**n)).collect();
            extra.sort();
            return Err(Error::UnexpectedTensor(extra[0].to_string()));
        }
        Ok(())
    }

    /// Builds a weight set from a per-tensor initializer.
    pub fn init_with(config: &ModelConfig, mut f: impl FnMut(&str, &[usize]) -> Vec<f32>) -> Result<Self> {
        config.validate()?;
        let named = tensor_schema(config)
            .into_iter()
            .map(|(name, shape)| {
                let data = f(&name, &shape);
                let t = Tensor::new(shape, data);
                (name, t)
            })
            .collect();
        Self::from_tensors(named)
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Self::init_with(config, |_, shape| vec![0.0; shape.iter().product()])
    }

    /// Every entry uniform in `[-scale, scale]`.
    pub fn random_uniform(config: &ModelConfig, scale: f32, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(config, |_, shape| {
            (0..shape.iter().product::<usize>()).map(|_| rng.random_range(-scale..=scale)).collect()
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    /// Panics if `name` is not part of the schema.
    pub fn tensor(&self, name: &str) -> &Tensor {
        self.get(name).unwrap_or_else(|| panic!("no tensor `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.param_count() * 4 + self.names.len() * 48);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// One entry of a container's manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: u8,
    pub shape: Vec<usize>,
    pub offset: usize,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remain = self.buf.len() - self.pos;
        if remain < n {
            return Err(Error::Container {
                offset: self.pos,
                message: format!("truncated while reading {what}: need {n} bytes, {remain} remain"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn parse_container(bytes: &[u8], with_data: bool) -> Result<Vec<(TensorInfo, Option<Tensor>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Container { offset: 0, message: "bad magic, expected RWKT".into() });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Container { offset: 4, message: format!("unsupported version {version}") });
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_at = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Container { offset: name_at, message: "tensor name is not UTF-8".into() })?
            .to_string();
        let dtype_at = r.pos;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Container { offset: dtype_at, message: format!("unknown dtype code {dtype}") });
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Container { offset: r.pos, message: format!("tensor `{name}` is too large") })?;
        let offset = r.pos;
        let raw = r.take(n, &format!("data of `{name}`"))?;
        let tensor = with_data.then(|| {
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            Tensor { shape: shape.clone(), data }
        });
        out.push((TensorInfo { name, dtype, shape, offset }, tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::Container {
            offset: r.pos,
            message: format!("{} trailing bytes after last tensor", bytes.len() - r.pos),
        });
    }
    Ok(out)
}

/// Parses and validates a container.
pub fn load_weights(bytes: &[u8]) -> Result<WeightSet> {
    let named = parse_container(bytes, true)?
        .into_iter()
        .map(|(info, t)| (info.name, t.expect("requested data")))
        .collect();
    WeightSet::from_tensors(named)
}

/// Lists the tensors in a container without validating them against a model.
pub fn read_manifest(bytes: &[u8]) -> Result<Vec<TensorInfo>> {
    Ok(parse_container(bytes, false)?.into_iter().map(|(info, _)| info).collect())
}
