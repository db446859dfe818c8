use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::float::Float;
use super::ModelError;
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Layers per stack (encoder and decoder each).
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl ModelConfig {
    /// Default desk-scale shape: 2 layers, d_model 64, 4 heads, d_ff 128,
    /// max_len 128.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 2,
            d_model: 64,
            num_heads: 4,
            d_ff: 128,
            vocab_size,
            max_len: 128,
        }
    }

    /// One layer, d_model 8: small enough for exhaustive gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 1,
            d_model: 8,
            num_heads: 2,
            d_ff: 16,
            vocab_size,
            max_len: 16,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!(
                "{name} must be positive"
            )));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIds {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncLayerIds {
    pub ln1: usize,
    pub attn: AttnIds,
    pub ln2: usize,
    pub w1: usize,
    pub w2: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecLayerIds {
    pub ln1: usize,
    pub self_attn: AttnIds,
    pub ln_cross: usize,
    pub cross: AttnIds,
    pub ln2: usize,
    pub w1: usize,
    pub w2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamIds {
    pub tok_emb: usize,
    pub enc_pos: usize,
    pub dec_pos: usize,
    pub enc: Vec<EncLayerIds>,
    pub enc_final: usize,
    pub dec: Vec<DecLayerIds>,
    pub dec_final: usize,
}

/// Named tensor table over one flat buffer. Weight matrices are stored
/// `[in, out]` so a layer computes `x · W`.
#[derive(Debug, Clone)]
pub struct Layout {
    config: ModelConfig,
    tensors: Vec<TensorSpec>,
    by_name: HashMap<String, usize>,
    pub(crate) ids: ParamIds,
    total: usize,
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

struct Builder {
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize]) -> usize {
        let len = shape.iter().product();
        self.tensors.push(TensorSpec {
            name,
            shape: shape.to_vec(),
            offset: self.total,
            len,
        });
        self.total += len;
        self.tensors.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            q: self.add(format!("{prefix}.wq"), &[d, d]),
            k: self.add(format!("{prefix}.wk"), &[d, d]),
            v: self.add(format!("{prefix}.wv"), &[d, d]),
            o: self.add(format!("{prefix}.wo"), &[d, d]),
        }
    }
}

impl Layout {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let (d, f) = (config.d_model, config.d_ff);
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
        };
        let tok_emb = b.add("tok_emb".into(), &[config.vocab_size, d]);
        let enc_pos = b.add("enc_pos".into(), &[config.max_len, d]);
        let dec_pos = b.add("dec_pos".into(), &[config.max_len, d]);
        let enc = (0..config.num_layers)
            .map(|l| EncLayerIds {
                ln1: b.add(format!("enc.{l}.ln1"), &[d]),
                attn: b.attn(&format!("enc.{l}.attn"), d),
                ln2: b.add(format!("enc.{l}.ln2"), &[d]),
                w1: b.add(format!("enc.{l}.ff.w1"), &[d, f]),
                w2: b.add(format!("enc.{l}.ff.w2"), &[f, d]),
            })
            .collect();
        let enc_final = b.add("enc.final_ln".into(), &[d]);
        let dec = (0..config.num_layers)
            .map(|l| DecLayerIds {
                ln1: b.add(format!("dec.{l}.ln1"), &[d]),
                self_attn: b.attn(&format!("dec.{l}.self"), d),
                ln_cross: b.add(format!("dec.{l}.ln_cross"), &[d]),
                cross: b.attn(&format!("dec.{l}.cross"), d),
                ln2: b.add(format!("dec.{l}.ln2"), &[d]),
                w1: b.add(format!("dec.{l}.ff.w1"), &[d, f]),
                w2: b.add(format!("dec.{l}.ff.w2"), &[f, d]),
            })
            .collect();
        let dec_final = b.add("dec.final_ln".into(), &[d]);
        let by_name = b
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
        Ok(Layout {
            config,
            tensors: b.tensors,
            by_name,
            ids: ParamIds {
                tok_emb,
                enc_pos,
                dec_pos,
                enc,
                enc_final,
                dec,
                dec_final,
            },
            total: b.total,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Tensor owning flat coordinate `i`.
    pub fn tensor_at(&self, i: usize) -> Option<&TensorSpec> {
        let pos = self.tensors.partition_point(|t| t.offset + t.len <= i);
        self.tensors.get(pos)
    }
}

/// Flat parameter (or gradient, or moment) buffer addressed by a shared
/// [`Layout`].
#[derive(Debug, Clone)]
pub struct Params<T> {
    layout: Arc<Layout>,
    data: Vec<T>,
}

impl<T: Float> Params<T> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![T::zero(); layout.len()];
        Params { layout, data }
    }

    pub fn from_vec(layout: Arc<Layout>, data: Vec<T>) -> Result<Self, ModelError> {
        if data.len() != layout.len() {
            return Err(ModelError::Shape(format!(
                "buffer has {} values, layout needs {}",
                data.len(),
                layout.len()
            )));
        }
        Ok(Params { layout, data })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn config(&self) -> &ModelConfig {
        self.layout.config()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn tensor(&self, id: usize) -> &[T] {
        let t = &self.layout.tensors[id];
        &self.data[t.offset..t.offset + t.len]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut [T] {
        let t = &self.layout.tensors[id];
        &mut self.data[t.offset..t.offset + t.len]
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.layout.index_of(name).map(|i| self.tensor(i))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let i = self.layout.index_of(name)?;
        Some(self.tensor_mut(i))
    }

    pub fn cast<U: Float>(&self) -> Params<U> {
        Params {
            layout: self.layout.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.layout
            .tensors
            .iter()
            .find(|t| {
                self.data[t.offset..t.offset + t.len]
                    .iter()
                    .any(|x| !x.is_finite())
            })
            .map(|t| t.name.as_str())
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        *self.layout == *other.layout
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

/// Fresh parameters: matrices `U(±1/√fan_in)`, embeddings `U(±1/√d_model)`,
/// norm gains zero (the norm scale is `1 + gain`).
pub fn init_model<T: Float>(config: ModelConfig, rng: &mut Rng) -> Result<Params<T>, ModelError> {
    let layout = Arc::new(Layout::new(config)?);
    let mut p = Params::zeros(layout.clone());
    let emb_scale = 1.0 / (config.d_model as f64).sqrt();
    for t in layout.tensors() {
        let bound = match t.shape.as_slice() {
            [_] => continue,
            _ if t.name.ends_with("emb") || t.name.ends_with("pos") => emb_scale,
            [fan_in, _] => 1.0 / (*fan_in as f64).sqrt(),
            _ => unreachable!("only vectors and matrices in the layout"),
        };
        for x in &mut p.data[t.offset..t.offset + t.len] {
            *x = T::of(rng.gen_range(-bound..bound));
        }
    }
    Ok(p)
}
