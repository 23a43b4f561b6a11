use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamSet, Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Architecture and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub d: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub n_items: usize,
    pub max_timesteps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub bottleneck_enabled: bool,
    pub layernorm_enabled: bool,
    pub dropout: f64,
    pub seed: u64,
    /// Fraction of sequences held out for best-model selection.
    pub val_fraction: f64,
    /// Stddev of the Gaussian used for every weight matrix and embedding.
    pub init_std: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            d: 128,
            n_blocks: 2,
            n_heads: 4,
            ffn_mult: 4,
            n_items: 100,
            max_timesteps: 50,
            lr: 1e-3,
            weight_decay: 1e-5,
            clip_norm: 1.0,
            batch_size: 32,
            epochs: 20,
            bottleneck_enabled: true,
            layernorm_enabled: false,
            dropout: 0.0,
            seed: 0,
            val_fraction: 0.1,
            init_std: 0.1,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return fail(format!("d = {} must be a positive multiple of n_heads = {}", self.d, self.n_heads));
        }
        if self.n_items == 0 || self.max_timesteps == 0 || self.ffn_mult == 0 {
            return fail("n_items, max_timesteps and ffn_mult must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.clip_norm > 0.0) || !(self.lr > 0.0) || self.batch_size == 0 {
            return fail("clip_norm, lr and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d * self.ffn_mult
    }
}

/// Parameter indices of one transformer block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockIdx {
    pub q: (usize, usize),
    pub k: (usize, usize),
    pub v: (usize, usize),
    pub o: (usize, usize),
    pub ffn_in: (usize, usize),
    pub ffn_out: (usize, usize),
    pub ln: Option<[usize; 4]>,
}

/// Where each named tensor lives inside the [`ParamSet`].
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub item_embedding: usize,
    pub rating_weight: usize,
    pub rating_bias: usize,
    pub position_embedding: usize,
    pub blocks: Vec<BlockIdx>,
    pub decoder: usize,
    pub bottleneck: usize,
}

/// Tensor names and shapes in storage order; the single source of truth
/// for both initialization and checkpoint loading.
pub(crate) fn tensor_specs(hp: &HyperParams) -> Vec<(String, Vec<usize>, bool)> {
    let (d, f) = (hp.d, hp.ffn_dim());
    let mut specs: Vec<(String, Vec<usize>, bool)> = vec![
        ("item_embedding".into(), vec![hp.n_items, d], true),
        ("rating_projection.weight".into(), vec![1, d], true),
        ("rating_projection.bias".into(), vec![d], false),
        ("position_embedding".into(), vec![hp.max_timesteps, d], true),
    ];
    for b in 0..hp.n_blocks {
        for p in ["query", "key", "value", "output"] {
            specs.push((format!("blocks.{b}.attn.{p}.weight"), vec![d, d], true));
            specs.push((format!("blocks.{b}.attn.{p}.bias"), vec![d], false));
        }
        specs.push((format!("blocks.{b}.ffn.in.weight"), vec![d, f], true));
        specs.push((format!("blocks.{b}.ffn.in.bias"), vec![f], false));
        specs.push((format!("blocks.{b}.ffn.out.weight"), vec![f, d], true));
        specs.push((format!("blocks.{b}.ffn.out.bias"), vec![d], false));
        if hp.layernorm_enabled {
            for ln in ["ln_attn", "ln_ffn"] {
                specs.push((format!("blocks.{b}.{ln}.gamma"), vec![d], false));
                specs.push((format!("blocks.{b}.{ln}.beta"), vec![d], false));
            }
        }
    }
    specs.push(("decoder".into(), vec![hp.n_items, d], true));
    specs.push(("bottleneck".into(), vec![d, d], true));
    specs
}

pub(crate) fn layout(hp: &HyperParams) -> Layout {
    let mut i = 4;
    let mut next = || {
        let r = i;
        i += 1;
        r
    };
    let mut blocks = Vec::with_capacity(hp.n_blocks);
    for _ in 0..hp.n_blocks {
        let q = (next(), next());
        let k = (next(), next());
        let v = (next(), next());
        let o = (next(), next());
        let ffn_in = (next(), next());
        let ffn_out = (next(), next());
        let ln = hp.layernorm_enabled.then(|| [next(), next(), next(), next()]);
        blocks.push(BlockIdx {
            q,
            k,
            v,
            o,
            ffn_in,
            ffn_out,
            ln,
        });
    }
    let decoder = next();
    let bottleneck = next();
    Layout {
        item_embedding: 0,
        rating_weight: 1,
        rating_bias: 2,
        position_embedding: 3,
        blocks,
        decoder,
        bottleneck,
    }
}

/// All learned tensors of the recommender plus its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub hp: HyperParams,
    pub tensors: ParamSet<T>,
}

impl<T: Real> ModelParams<T> {
    /// Gaussian initialization (`init_std`) of every matrix and embedding;
    /// biases zero, layer-norm gains one. Deterministic in `hp.seed`.
    pub fn init(hp: &HyperParams) -> Result<Self> {
        hp.validate()?;
        let mut rng = stream(hp.seed, 0x1A17);
        let mut tensors = ParamSet::new();
        for (name, shape, random) in tensor_specs(hp) {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if random {
                (0..n)
                    .map(|_| T::from_f(hp.init_std * rng.sample::<f64, _>(StandardNormal)))
                    .collect()
            } else if name.ends_with(".gamma") {
                vec![T::one(); n]
            } else {
                vec![T::zero(); n]
            };
            tensors.push(name, Tensor::new(shape, data)?.with_grad());
        }
        Ok(Self {
            hp: hp.clone(),
            tensors,
        })
    }

    pub(crate) fn layout(&self) -> Layout {
        layout(&self.hp)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.by_name(name)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            hp: self.hp.clone(),
            tensors: self.tensors.cast(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.tensors().iter().all(Tensor::all_finite)
    }

    pub(crate) fn check_shapes(&self) -> Result<()> {
        let specs = tensor_specs(&self.hp);
        if specs.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for (i, (name, shape, _)) in specs.iter().enumerate() {
            let t = self.tensors.get(i);
            if self.tensors.name(i) != name || t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {i}: expected {name} {:?}, found {} {:?}",
                    shape,
                    self.tensors.name(i),
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}
