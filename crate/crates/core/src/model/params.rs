use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ComputationGraph, ModelConfig, ModelError, Result};
use crate::numerics::Tensor;

const CHECKPOINT_MAGIC: &[u8; 8] = b"PLCHKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug)]
pub(crate) struct HeadParams {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerParams {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub heads: Vec<HeadParams>,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_in: usize,
    pub b_in: usize,
    pub w_out: usize,
    pub b_out: usize,
}

/// Index layout of the flat parameter list.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub tok: usize,
    pub pos: usize,
    pub layers: Vec<LayerParams>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub w_u: usize,
    pub b_u: usize,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            names.push(name);
            shapes.push(shape);
            names.len() - 1
        };
        let (d, dh) = (c.d_model, c.d_head);
        let tok = add("embed.tok".into(), vec![c.vocab_size, d]);
        let pos = add("embed.pos".into(), vec![c.max_seq_len, d]);
        let mut layers = Vec::new();
        for l in 0..c.n_layers {
            let ln1_g = add(format!("blocks.{l}.ln1.g"), vec![d]);
            let ln1_b = add(format!("blocks.{l}.ln1.b"), vec![d]);
            let heads = (0..c.n_heads)
                .map(|h| HeadParams {
                    wq: add(format!("blocks.{l}.attn.h{h}.wq"), vec![d, dh]),
                    bq: add(format!("blocks.{l}.attn.h{h}.bq"), vec![dh]),
                    wk: add(format!("blocks.{l}.attn.h{h}.wk"), vec![d, dh]),
                    bk: add(format!("blocks.{l}.attn.h{h}.bk"), vec![dh]),
                    wv: add(format!("blocks.{l}.attn.h{h}.wv"), vec![d, dh]),
                    bv: add(format!("blocks.{l}.attn.h{h}.bv"), vec![dh]),
                    wo: add(format!("blocks.{l}.attn.h{h}.wo"), vec![dh, d]),
                })
                .collect();
            let ln2_g = add(format!("blocks.{l}.ln2.g"), vec![d]);
            let ln2_b = add(format!("blocks.{l}.ln2.b"), vec![d]);
            let w_in = add(format!("blocks.{l}.mlp.w_in"), vec![d, c.d_mlp]);
            let b_in = add(format!("blocks.{l}.mlp.b_in"), vec![c.d_mlp]);
            let w_out = add(format!("blocks.{l}.mlp.w_out"), vec![c.d_mlp, d]);
            let b_out = add(format!("blocks.{l}.mlp.b_out"), vec![d]);
            layers.push(LayerParams { ln1_g, ln1_b, heads, ln2_g, ln2_b, w_in, b_in, w_out, b_out });
        }
        let lnf_g = add("final.ln.g".into(), vec![d]);
        let lnf_b = add("final.ln.b".into(), vec![d]);
        let w_u = add("unembed.w".into(), vec![d, c.vocab_size]);
        let b_u = add("unembed.b".into(), vec![c.vocab_size]);
        Self { tok, pos, layers, lnf_g, lnf_b, w_u, b_u, names, shapes }
    }
}

/// Transformer weights plus the graph they induce. Immutable once built;
/// training produces new parameter lists via [`Model::with_params`].
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    graph: Arc<ComputationGraph>,
    pub(crate) layout: Arc<Layout>,
    params: Vec<Arc<Tensor>>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl Model {
    /// Randomly initialized model, deterministic in `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        let graph = Arc::new(ComputationGraph::build(config)?);
        let layout = Layout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let resid_scale = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        let params = layout
            .names
            .iter()
            .zip(&layout.shapes)
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = if name.ends_with(".g") {
                    vec![1.0; n]
                } else if shape.len() == 1 {
                    vec![0.0; n]
                } else {
                    let s = if name.ends_with(".wo") || name.ends_with(".w_out") { resid_scale } else { 1.0 };
                    (0..n).map(|_| normal.sample(&mut rng) * s).collect()
                };
                Arc::new(Tensor::new(shape.clone(), data).expect("layout shape"))
            })
            .collect();
        Ok(Self { config: config.clone(), graph, layout: Arc::new(layout), params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &ComputationGraph {
        &self.graph
    }

    pub fn params(&self) -> &[Arc<Tensor>] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.layout.names
    }

    pub(crate) fn param(&self, i: usize) -> &Tensor {
        &self.params[i]
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Same architecture with a new parameter list (shapes must match).
    pub fn with_params(&self, params: Vec<Tensor>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(ModelError::Checkpoint(format!("expected {} tensors, got {}", self.params.len(), params.len())));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != self.layout.shapes[i].as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "{}: expected shape {:?}, got {:?}",
                    self.layout.names[i],
                    self.layout.shapes[i],
                    p.shape()
                )));
            }
        }
        Ok(Self {
            config: self.config.clone(),
            graph: Arc::clone(&self.graph),
            layout: Arc::clone(&self.layout),
            params: params.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            format: "patchlab.checkpoint".into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: self
                .layout
                .names
                .iter()
                .zip(&self.layout.shapes)
                .map(|(name, shape)| TensorEntry { name: name.clone(), shape: shape.clone() })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(24 + header.len() + 8 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a patchlab checkpoint"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated header"))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&r[..len]).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        r = &r[len..];
        let skeleton = Self::init(&ModelConfig { seed: header.config.seed, ..header.config.clone() })?;
        if header.tensors.len() != skeleton.layout.names.len() {
            return Err(bad("tensor count does not match config"));
        }
        let mut params = Vec::with_capacity(header.tensors.len());
        for (entry, (name, shape)) in header.tensors.iter().zip(skeleton.layout.names.iter().zip(&skeleton.layout.shapes)) {
            if &entry.name != name || &entry.shape != shape {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    entry.name, entry.shape, name, shape
                )));
            }
            let n: usize = shape.iter().product();
            if r.len() < 8 * n {
                return Err(bad("truncated tensor data"));
            }
            let data: Vec<f64> =
                r[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            r = &r[8 * n..];
            params.push(Tensor::new(shape.clone(), data)?);
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        skeleton.with_params(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Content hash of config plus weights (first 16 hex digits of SHA-256).
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        hex::encode(&digest[..8])
    }
}
