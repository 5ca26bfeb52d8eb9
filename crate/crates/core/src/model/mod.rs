//! Small decoder-only transformer used as the quantization test bed.
//!
//! Pre-LayerNorm blocks: `x += Attn(LN₁(x))·W_o`, `x += GELU(LN₂(x)·W₁)·W₂`, followed by a final
//! LayerNorm and an untied output projection. Only the six attention/MLP matrices of each
//! block are quantizable; embeddings, norms and the output head stay at full precision.

mod backward;
mod eval;
mod forward;
mod layers;
mod tasks;
mod train;

pub use backward::Grads;
pub use eval::{evaluate, greedy_decode, score_prediction, EvalResult, DEFAULT_MAX_NEW_TOKENS};
pub use forward::{CaptureFn, ForwardCache};
pub(crate) use forward::PackedState;
pub use tasks::{
    gen_task, modadd_answer, training_sequence, Item, TaskKind, BOS, EOS, FIRST_DATA, PAD, SEP,
};
pub use train::{train_toy, Optimizer, TrainConfig, TrainReport};

use crate::alloc::LayerBits;
use crate::error::{Result, TaqError};
use crate::linalg::{Matrix, SeededRng};
use crate::quant::{quantize_tensor, QTensor};
use crate::scalar::Scalar;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    /// MLP hidden width.
    pub d_ff: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            vocab: 64,
            max_seq: 32,
            d_ff: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TaqError::InvalidConfig(m));
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.max_seq == 0
        {
            return bad(format!("zero dimension in {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab <= FIRST_DATA as usize || self.vocab > u16::MAX as usize {
            return bad(format!(
                "vocab {} must exceed the {FIRST_DATA} reserved ids",
                self.vocab
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Quantizable weights per block.
    pub fn weights_per_layer(&self) -> u64 {
        (4 * self.d_model * self.d_model + 2 * self.d_model * self.d_ff) as u64
    }
}

/// The quantizable matrices of a block, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Query,
    Key,
    Value,
    AttnOut,
    MlpIn,
    MlpOut,
}

impl WeightKind {
    pub const ALL: [WeightKind; 6] = [
        WeightKind::Query,
        WeightKind::Key,
        WeightKind::Value,
        WeightKind::AttnOut,
        WeightKind::MlpIn,
        WeightKind::MlpOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightKind::Query => "attn.wq",
            WeightKind::Key => "attn.wk",
            WeightKind::Value => "attn.wv",
            WeightKind::AttnOut => "attn.wo",
            WeightKind::MlpIn => "mlp.w1",
            WeightKind::MlpOut => "mlp.w2",
        }
    }
}

/// A quantizable matrix: either the original values or a quantized tensor executed through
/// its dequantization cache.
#[derive(Debug, Clone, PartialEq)]
pub enum Weight<T: Scalar> {
    Dense(Matrix<T>),
    Quantized(QTensor<T>),
}

impl<T: Scalar> Weight<T> {
    pub fn effective(&self) -> &Matrix<T> {
        match self {
            Weight::Dense(m) => m,
            Weight::Quantized(q) => q
                .cached()
                .expect("quantized weights in a model always carry a cache"),
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, Weight::Dense(_))
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Weight::Dense(m) => m.shape(),
            Weight::Quantized(q) => q.shape(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Scalar> {
    pub ln1_gain: Vec<T>,
    pub ln1_bias: Vec<T>,
    pub wq: Weight<T>,
    pub wk: Weight<T>,
    pub wv: Weight<T>,
    pub wo: Weight<T>,
    pub ln2_gain: Vec<T>,
    pub ln2_bias: Vec<T>,
    pub w1: Weight<T>,
    pub w2: Weight<T>,
}

impl<T: Scalar> Block<T> {
    pub fn weight(&self, kind: WeightKind) -> &Weight<T> {
        match kind {
            WeightKind::Query => &self.wq,
            WeightKind::Key => &self.wk,
            WeightKind::Value => &self.wv,
            WeightKind::AttnOut => &self.wo,
            WeightKind::MlpIn => &self.w1,
            WeightKind::MlpOut => &self.w2,
        }
    }

    pub fn weight_mut(&mut self, kind: WeightKind) -> &mut Weight<T> {
        match kind {
            WeightKind::Query => &mut self.wq,
            WeightKind::Key => &mut self.wk,
            WeightKind::Value => &mut self.wv,
            WeightKind::AttnOut => &mut self.wo,
            WeightKind::MlpIn => &mut self.w1,
            WeightKind::MlpOut => &mut self.w2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T: Scalar = f64> {
    pub cfg: ModelConfig,
    /// `vocab × d_model`
    pub tok_emb: Matrix<T>,
    /// `max_seq × d_model`
    pub pos_emb: Matrix<T>,
    pub blocks: Vec<Block<T>>,
    pub lnf_gain: Vec<T>,
    pub lnf_bias: Vec<T>,
    /// `d_model × vocab`
    pub head: Matrix<T>,
}

/// Seeded initialization: every matrix from `N(0, 0.02²)`, norms at identity.
pub fn init_model<T: Scalar>(cfg: &ModelConfig) -> Result<ToyModel<T>> {
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.seed);
    let d = cfg.d_model;
    let mut normal = |r: usize, c: usize| -> Matrix<T> {
        let data = (0..r * c).map(|_| T::of(rng.normal() * INIT_STD)).collect();
        Matrix::from_vec(r, c, data).expect("sized")
    };
    let tok_emb = normal(cfg.vocab, d);
    let pos_emb = normal(cfg.max_seq, d);
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        blocks.push(Block {
            ln1_gain: vec![T::one(); d],
            ln1_bias: vec![T::zero(); d],
            wq: Weight::Dense(normal(d, d)),
            wk: Weight::Dense(normal(d, d)),
            wv: Weight::Dense(normal(d, d)),
            wo: Weight::Dense(normal(d, d)),
            ln2_gain: vec![T::one(); d],
            ln2_bias: vec![T::zero(); d],
            w1: Weight::Dense(normal(d, cfg.d_ff)),
            w2: Weight::Dense(normal(cfg.d_ff, d)),
        });
    }
    let head = normal(d, cfg.vocab);
    Ok(ToyModel {
        cfg: cfg.clone(),
        tok_emb,
        pos_emb,
        blocks,
        lnf_gain: vec![T::one(); d],
        lnf_bias: vec![T::zero(); d],
        head,
    })
}

impl<T: Scalar> ToyModel<T> {
    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_dense(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| WeightKind::ALL.iter().all(|&k| b.weight(k).is_dense()))
    }

    /// Whether every quantizable matrix of `layer` is stored dense.
    pub fn layer_is_dense(&self, layer: usize) -> bool {
        WeightKind::ALL
            .iter()
            .all(|&k| self.blocks[layer].weight(k).is_dense())
    }

    pub fn weight(&self, layer: usize, kind: WeightKind) -> &Weight<T> {
        self.blocks[layer].weight(kind)
    }

    /// Replaces one quantizable matrix; quantized tensors get their cache populated.
    pub fn set_weight(&mut self, layer: usize, kind: WeightKind, w: Weight<T>) -> Result<()> {
        let slot = self.blocks[layer].weight_mut(kind);
        if slot.shape() != w.shape() {
            return Err(TaqError::InvalidShape(format!(
                "layer {layer} {}: {:?} vs {:?}",
                kind.name(),
                slot.shape(),
                w.shape()
            )));
        }
        *slot = match w {
            Weight::Quantized(mut q) => {
                q.enable_cache();
                Weight::Quantized(q)
            }
            dense => dense,
        };
        Ok(())
    }

    /// Replaces every matrix of `layer` with its min-max quantization of the current weights.
    pub fn quantize_layer(&mut self, layer: usize, bits: u8, group_size: usize) -> Result<()> {
        if layer >= self.n_layers() {
            return Err(TaqError::InvalidInput(format!(
                "layer {layer} out of range"
            )));
        }
        for kind in WeightKind::ALL {
            let q = quantize_tensor(self.weight(layer, kind).effective(), bits, group_size)?;
            self.set_weight(layer, kind, Weight::Quantized(q))?;
        }
        Ok(())
    }

    /// A copy with every layer quantized per `bits` (min-max); full-precision layers stay dense.
    pub fn quantized(&self, bits: &[LayerBits], group_size: usize) -> Result<Self> {
        if bits.len() != self.n_layers() {
            return Err(TaqError::InvalidPlan(format!(
                "plan has {} layers, model has {}",
                bits.len(),
                self.n_layers()
            )));
        }
        let mut out = self.clone();
        for (l, b) in bits.iter().enumerate() {
            if let LayerBits::Quantized(b) = *b {
                out.quantize_layer(l, b, group_size)?;
            }
        }
        Ok(out)
    }

    /// All parameters as named matrices (vectors as `1 × n`), in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, NamedTensor<'_, T>)> {
        let vec_row = |v: &Vec<T>| Matrix::from_vec(1, v.len(), v.clone()).expect("row");
        let mut out = vec![
            (
                "tok_emb".to_string(),
                NamedTensor::Dense(self.tok_emb.clone()),
            ),
            (
                "pos_emb".to_string(),
                NamedTensor::Dense(self.pos_emb.clone()),
            ),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((
                format!("blocks.{l}.ln1.gain"),
                NamedTensor::Dense(vec_row(&b.ln1_gain)),
            ));
            out.push((
                format!("blocks.{l}.ln1.bias"),
                NamedTensor::Dense(vec_row(&b.ln1_bias)),
            ));
            out.push((
                format!("blocks.{l}.ln2.gain"),
                NamedTensor::Dense(vec_row(&b.ln2_gain)),
            ));
            out.push((
                format!("blocks.{l}.ln2.bias"),
                NamedTensor::Dense(vec_row(&b.ln2_bias)),
            ));
            for kind in WeightKind::ALL {
                let name = format!("blocks.{l}.{}", kind.name());
                out.push((name, NamedTensor::Weight(b.weight(kind))));
            }
        }
        out.push((
            "lnf.gain".to_string(),
            NamedTensor::Dense(vec_row(&self.lnf_gain)),
        ));
        out.push((
            "lnf.bias".to_string(),
            NamedTensor::Dense(vec_row(&self.lnf_bias)),
        ));
        out.push(("head".to_string(), NamedTensor::Dense(self.head.clone())));
        out
    }

    /// Mutable views of every trainable parameter in [`Grads`] order. Fails on quantized models.
    pub fn param_slices_mut(&mut self) -> Result<Vec<&mut [T]>> {
        let mut out: Vec<&mut [T]> = vec![self.tok_emb.as_mut_slice(), self.pos_emb.as_mut_slice()];
        for b in self.blocks.iter_mut() {
            out.push(&mut b.ln1_gain);
            out.push(&mut b.ln1_bias);
            for w in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo] {
                match w {
                    Weight::Dense(m) => out.push(m.as_mut_slice()),
                    Weight::Quantized(_) => {
                        return Err(TaqError::InvalidInput(
                            "cannot train a quantized model".into(),
                        ))
                    }
                }
            }
            out.push(&mut b.ln2_gain);
            out.push(&mut b.ln2_bias);
            for w in [&mut b.w1, &mut b.w2] {
                match w {
                    Weight::Dense(m) => out.push(m.as_mut_slice()),
                    Weight::Quantized(_) => {
                        return Err(TaqError::InvalidInput(
                            "cannot train a quantized model".into(),
                        ))
                    }
                }
            }
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(self.head.as_mut_slice());
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> ToyModel<U> {
        let v = |x: &Vec<T>| x.iter().map(|&a| U::of(a.as_f64())).collect::<Vec<U>>();
        let w = |x: &Weight<T>| match x {
            Weight::Dense(m) => Weight::Dense(m.cast()),
            Weight::Quantized(q) => {
                let mut q = QTensor::<U>::from_parts(
                    q.shape().0,
                    q.shape().1,
                    q.group_size(),
                    q.codes().to_vec(),
                    q.params().to_vec(),
                    true,
                )
                .expect("valid quantized tensor");
                q.enable_cache();
                Weight::Quantized(q)
            }
        };
        ToyModel {
            cfg: self.cfg.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_gain: v(&b.ln1_gain),
                    ln1_bias: v(&b.ln1_bias),
                    wq: w(&b.wq),
                    wk: w(&b.wk),
                    wv: w(&b.wv),
                    wo: w(&b.wo),
                    ln2_gain: v(&b.ln2_gain),
                    ln2_bias: v(&b.ln2_bias),
                    w1: w(&b.w1),
                    w2: w(&b.w2),
                })
                .collect(),
            lnf_gain: v(&self.lnf_gain),
            lnf_bias: v(&self.lnf_bias),
            head: self.head.cast(),
        }
    }
}

/// A checkpoint entry: plain matrix or a quantizable weight.
#[derive(Debug)]
pub enum NamedTensor<'a, T: Scalar> {
    Dense(Matrix<T>),
    Weight(&'a Weight<T>),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig {
            seed: 5,
            ..ModelConfig::default()
        };
        let a: ToyModel = init_model(&cfg).unwrap();
        let b: ToyModel = init_model(&cfg).unwrap();
        assert_eq!(a, b);
        let c: ToyModel = init_model(&ModelConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_std() {
        let cfg = ModelConfig::default();
        let m: ToyModel = init_model(&cfg).unwrap();
        let mut xs = Vec::new();
        for b in &m.blocks {
            for k in WeightKind::ALL {
                xs.extend_from_slice(b.weight(k).effective().as_slice());
            }
        }
        assert!(xs.len() >= 100_000);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.02).abs() < 0.002, "std {std}");
        assert!(m
            .blocks
            .iter()
            .all(|b| b.ln1_gain.iter().all(|&g| g == 1.0)));
    }

    #[test]
    fn invalid_dims() {
        let bad = ModelConfig {
            d_model: 30,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert!(matches!(
            init_model::<f64>(&bad),
            Err(TaqError::InvalidConfig(_))
        ));
        let bad = ModelConfig {
            vocab: 4,
            ..ModelConfig::default()
        };
        assert!(init_model::<f64>(&bad).is_err());
    }
}
