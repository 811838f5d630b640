//! Decoder-only transformer with one attention head and no layer
//! normalization, kept in a single flat `f64` parameter vector so that the
//! optimizer, finite-difference checks and checkpoints all see the same
//! layout.

mod backward;
mod forward;
mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, streams};

pub use backward::{batch_gradient, batch_gradient_scaled, Gradient};
pub use forward::{CaptureSpec, HiddenStateCapture, Patch, RunOutput};
pub use train::{
    evaluate, loss, mse_by_context, train, AdamSettings, EpochMode, TrainHyper, TrainReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub token_dim: usize,
    pub max_seq_len: usize,
    pub mlp_mult: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(layers: usize, hidden: usize, token_dim: usize, max_seq_len: usize, seed: u64) -> Self {
        Self {
            layers,
            hidden,
            token_dim,
            max_seq_len,
            mlp_mult: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.token_dim == 0 || self.mlp_mult == 0 {
            return Err(Error::usage(format!("degenerate model config {self:?}")));
        }
        if self.max_seq_len == 0 {
            return Err(Error::usage("max_seq_len must be positive"));
        }
        Ok(())
    }

    pub fn mlp_width(&self) -> usize {
        self.mlp_mult * self.hidden
    }

    /// Sites in capture order: embed, then attn, attn-res, mlp, mlp-res per layer.
    pub fn sites(&self) -> Vec<Site> {
        let mut out = vec![Site::EMBED];
        for layer in 0..self.layers {
            for pos in InLayerPos::LAYER {
                out.push(Site { layer, pos });
            }
        }
        out
    }
}

/// Where in a layer an activation is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InLayerPos {
    Embed,
    Attn,
    AttnRes,
    Mlp,
    MlpRes,
}

impl InLayerPos {
    pub const LAYER: [InLayerPos; 4] = [
        InLayerPos::Attn,
        InLayerPos::AttnRes,
        InLayerPos::Mlp,
        InLayerPos::MlpRes,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            InLayerPos::Embed => "embed",
            InLayerPos::Attn => "attn",
            InLayerPos::AttnRes => "attn-res",
            InLayerPos::Mlp => "mlp",
            InLayerPos::MlpRes => "mlp-res",
        }
    }
}

impl FromStr for InLayerPos {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embed" => Ok(InLayerPos::Embed),
            "attn" => Ok(InLayerPos::Attn),
            "attn-res" => Ok(InLayerPos::AttnRes),
            "mlp" => Ok(InLayerPos::Mlp),
            "mlp-res" => Ok(InLayerPos::MlpRes),
            _ => Err(Error::Parse(format!("unknown in-layer position `{s}`"))),
        }
    }
}

/// A probe site. The embedding is recorded as layer 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub layer: usize,
    pub pos: InLayerPos,
}

impl Site {
    pub const EMBED: Site = Site {
        layer: 0,
        pos: InLayerPos::Embed,
    };

    pub fn new(layer: usize, pos: InLayerPos) -> Self {
        Self { layer, pos }
    }

    /// Position of this site in [`ModelConfig::sites`] order.
    pub fn index(&self) -> usize {
        match self.pos {
            InLayerPos::Embed => 0,
            p => 1 + 4 * self.layer + InLayerPos::LAYER.iter().position(|q| *q == p).unwrap(),
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.pos {
            InLayerPos::Embed => f.write_str("embed"),
            p => write!(f, "{}:{}", self.layer, p.as_str()),
        }
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "embed" {
            return Ok(Site::EMBED);
        }
        let (layer, pos) = s
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("site `{s}` is not `embed` or `LAYER:POS`")))?;
        let layer = layer
            .parse()
            .map_err(|_| Error::Parse(format!("bad layer in site `{s}`")))?;
        Ok(Site::new(layer, pos.parse()?))
    }
}

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LinearIdx {
    pub w: usize,
    pub b: usize,
    pub out: usize,
    pub inp: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerIdx {
    pub q: LinearIdx,
    pub k: LinearIdx,
    pub v: LinearIdx,
    pub o: LinearIdx,
    pub mlp_in: LinearIdx,
    pub mlp_out: LinearIdx,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub(crate) embed: LinearIdx,
    pub(crate) pos: usize,
    pub(crate) layers: Vec<LayerIdx>,
    pub(crate) readout: LinearIdx,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, rows: usize, cols: usize| {
            let start = offset;
            tensors.push(TensorSpec {
                name,
                offset: start,
                rows,
                cols,
            });
            offset += rows * cols;
            start
        };
        let linear = |prefix: String, out: usize, inp: usize, add: &mut dyn FnMut(String, usize, usize) -> usize| {
            let w = add(format!("{prefix}.w"), out, inp);
            let b = add(format!("{prefix}.b"), 1, out);
            LinearIdx { w, b, out, inp }
        };
        let (h, d, m) = (cfg.hidden, cfg.token_dim, cfg.mlp_width());
        let embed = linear("embed".into(), h, d, &mut add);
        let pos = add("pos".into(), cfg.max_seq_len, h);
        let layers = (0..cfg.layers)
            .map(|l| LayerIdx {
                q: linear(format!("layers.{l}.attn.q"), h, h, &mut add),
                k: linear(format!("layers.{l}.attn.k"), h, h, &mut add),
                v: linear(format!("layers.{l}.attn.v"), h, h, &mut add),
                o: linear(format!("layers.{l}.attn.o"), h, h, &mut add),
                mlp_in: linear(format!("layers.{l}.mlp.in"), m, h, &mut add),
                mlp_out: linear(format!("layers.{l}.mlp.out"), h, m, &mut add),
            })
            .collect();
        let readout = linear("readout".into(), d, h, &mut add);
        Self {
            tensors,
            embed,
            pos,
            layers,
            readout,
            total: offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub(crate) layout: Layout,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    epoch: usize,
    tensors: BTreeMap<String, Vec<f64>>,
}

const CHECKPOINT_FORMAT: &str = "oscilloprobe-checkpoint";

impl Model {
    /// Weights `U(±1/√fan_in)`, biases zero, positional rows `N(0, 0.02²)`.
    /// Each tensor draws from its own seed stream.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        for (i, t) in layout.tensors.iter().enumerate() {
            let mut rng = seed::rng_for(config.seed, streams::INIT, i as u64, 0);
            let slice = &mut params[t.range()];
            if t.name == "pos" {
                slice.iter_mut().for_each(|p| *p = normal.sample(&mut rng));
            } else if t.name.ends_with(".w") {
                let bound = 1.0 / (t.cols as f64).sqrt();
                slice
                    .iter_mut()
                    .for_each(|p| *p = rng.random_range(-bound..bound));
            }
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::usage(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.params[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.tensors.iter().find(|t| t.name == name)?.range();
        Some(&mut self.params[range])
    }

    pub fn save(&self, path: &Path, epoch: usize) -> Result<()> {
        let tensors = self
            .layout
            .tensors
            .iter()
            .map(|t| (t.name.clone(), self.params[t.range()].to_vec()))
            .collect();
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            config: self.config,
            epoch,
            tensors,
        };
        crate::io::write_atomic(path, serde_json::to_string(&ck)?.as_bytes())
    }

    /// Load a checkpoint, returning the model and the epoch it was saved at.
    pub fn load(path: &Path) -> Result<(Self, usize)> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != 1 {
            return Err(Error::Schema {
                path: path.into(),
                detail: format!("unsupported checkpoint {} v{}", ck.format, ck.version),
            });
        }
        let layout = Layout::new(&ck.config);
        let mut params = vec![0.0; layout.total];
        for t in &layout.tensors {
            let values = ck.tensors.get(&t.name).ok_or_else(|| Error::Schema {
                path: path.into(),
                detail: format!("missing tensor {}", t.name),
            })?;
            if values.len() != t.len() {
                return Err(Error::Schema {
                    path: path.into(),
                    detail: format!("tensor {} has {} values, want {}", t.name, values.len(), t.len()),
                });
            }
            params[t.range()].copy_from_slice(values);
        }
        Ok((Self::from_params(ck.config, params)?, ck.epoch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Count parameters by walking the architecture description.
    fn count_by_walking(cfg: &ModelConfig) -> usize {
        let linear = |out: usize, inp: usize| out * inp + out;
        let (h, d, m) = (cfg.hidden, cfg.token_dim, cfg.mlp_width());
        let mut n = linear(h, d) + cfg.max_seq_len * h + linear(d, h);
        for _ in 0..cfg.layers {
            n += 4 * linear(h, h) + linear(m, h) + linear(h, m);
        }
        n
    }

    #[test]
    fn parameter_count_matches_enumeration() {
        let cfg = ModelConfig::new(1, 2, 1, 8, 0);
        let model = Model::init(cfg).unwrap();
        // embed 2+2, pos 16, attn 4·6, mlp 8·2+8 + 2·8+2, readout 2+1
        assert_eq!(model.n_params(), 4 + 16 + 24 + 24 + 18 + 3);
        assert_eq!(model.n_params(), count_by_walking(&cfg));
        for (l, h) in [(2, 16), (4, 4), (5, 32)] {
            let cfg = ModelConfig::new(l, h, 2, 65, 1);
            assert_eq!(Model::init(cfg).unwrap().n_params(), count_by_walking(&cfg));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::new(2, 4, 2, 10, 42);
        assert_eq!(Model::init(cfg).unwrap().params, Model::init(cfg).unwrap().params);
        let other = Model::init(ModelConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(Model::init(cfg).unwrap().params, other.params);
    }

    #[test]
    fn site_indexing() {
        let cfg = ModelConfig::new(3, 4, 1, 4, 0);
        let sites = cfg.sites();
        assert_eq!(sites.len(), 4 * 3 + 1);
        for (i, s) in sites.iter().enumerate() {
            assert_eq!(s.index(), i);
            assert_eq!(s.to_string().parse::<Site>().unwrap(), *s);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let model = Model::init(ModelConfig::new(2, 4, 2, 12, 9)).unwrap();
        model.save(&path, 17).unwrap();
        let (back, epoch) = Model::load(&path).unwrap();
        assert_eq!(epoch, 17);
        assert_eq!(back, model);
    }
}
