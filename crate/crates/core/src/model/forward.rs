use crate::error::{Result, TaqError};
use crate::linalg::{kernels, Matrix};
use crate::scalar::Scalar;

use super::layers::{causal_attention, gelu, layer_norm, LnCache};
use super::{ToyModel, WeightKind};

/// Intermediate values of one block, retained for backpropagation.
#[derive(Debug, Clone, Default)]
pub(crate) struct BlockCache<T> {
    pub ln1: LnCache<T>,
    pub a: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub probs: Vec<T>,
    pub attn: Vec<T>,
    pub ln2: LnCache<T>,
    pub m: Vec<T>,
    pub u: Vec<T>,
    pub g: Vec<T>,
}

/// Intermediates of one block over packed sequences.
#[derive(Debug, Clone, Default)]
pub(crate) struct PackedState<T> {
    pub x: Vec<T>,
    pub a: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub attn: Vec<T>,
    pub h1: Vec<T>,
    pub m: Vec<T>,
    pub u: Vec<T>,
    pub g: Vec<T>,
    /// Block output.
    pub h2: Vec<T>,
}

/// Everything the backward pass needs from a forward pass over one sequence.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub(crate) tokens: Vec<u32>,
    pub(crate) blocks: Vec<BlockCache<T>>,
    pub(crate) lnf: LnCache<T>,
    pub(crate) y: Vec<T>,
}

/// Callback that sees each block's post-residual output with its layer index.
pub type CaptureFn<'a, T> = &'a mut dyn FnMut(usize, &Matrix<T>);

impl<T: Scalar> ToyModel<T> {
    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(TaqError::InvalidInput("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_seq {
            return Err(TaqError::InvalidInput(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                self.cfg.max_seq
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab) {
            return Err(TaqError::InvalidInput(format!(
                "token {bad} outside vocab {}",
                self.cfg.vocab
            )));
        }
        Ok(())
    }

    /// Token plus position embeddings, `t × d`.
    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix<T>> {
        self.check_tokens(tokens)?;
        let d = self.cfg.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, &tok) in tokens.iter().enumerate() {
            let e = self.tok_emb.row(tok as usize);
            let p = self.pos_emb.row(i);
            for ((o, &a), &b) in x.row_mut(i).iter_mut().zip(e).zip(p) {
                *o = a + b;
            }
        }
        Ok(x)
    }

    pub(crate) fn block_impl(
        &self,
        layer: usize,
        x: &[T],
        t: usize,
        cache: Option<&mut BlockCache<T>>,
    ) -> Vec<T> {
        let cfg = &self.cfg;
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let b = &self.blocks[layer];
        let (a, ln1) = layer_norm(x, d, &b.ln1_gain, &b.ln1_bias);
        let q = kernels::matmul(&a, b.wq.effective().as_slice(), t, d, d);
        let k = kernels::matmul(&a, b.wk.effective().as_slice(), t, d, d);
        let v = kernels::matmul(&a, b.wv.effective().as_slice(), t, d, d);
        let (attn, probs) = causal_attention(&q, &k, &v, t, d, cfg.n_heads);
        let mut h = x.to_vec();
        kernels::matmul_acc(&attn, b.wo.effective().as_slice(), &mut h, t, d, d);
        let (m, ln2) = layer_norm(&h, d, &b.ln2_gain, &b.ln2_bias);
        let u = kernels::matmul(&m, b.w1.effective().as_slice(), t, d, f);
        let g: Vec<T> = u.iter().map(|&x| gelu(x)).collect();
        kernels::matmul_acc(&g, b.w2.effective().as_slice(), &mut h, t, f, d);
        if let Some(c) = cache {
            *c = BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                attn,
                ln2,
                m,
                u,
                g,
            };
        }
        h
    }

    /// One block over several sequences stacked row-wise (`lens` rows each); attention stays
    /// within each sequence.
    pub fn block_packed(&self, layer: usize, x: &[T], lens: &[usize]) -> Vec<T> {
        let cfg = &self.cfg;
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let rows = x.len() / d;
        let b = &self.blocks[layer];
        let (a, _) = layer_norm(x, d, &b.ln1_gain, &b.ln1_bias);
        let q = kernels::matmul(&a, b.wq.effective().as_slice(), rows, d, d);
        let k = kernels::matmul(&a, b.wk.effective().as_slice(), rows, d, d);
        let v = kernels::matmul(&a, b.wv.effective().as_slice(), rows, d, d);
        let mut attn = Vec::with_capacity(rows * d);
        let mut start = 0;
        for &t in lens {
            let r = start * d..(start + t) * d;
            let (o, _) = causal_attention(&q[r.clone()], &k[r.clone()], &v[r], t, d, cfg.n_heads);
            attn.extend(o);
            start += t;
        }
        let mut h = x.to_vec();
        kernels::matmul_acc(&attn, b.wo.effective().as_slice(), &mut h, rows, d, d);
        let (m, _) = layer_norm(&h, d, &b.ln2_gain, &b.ln2_bias);
        let mut g = kernels::matmul(&m, b.w1.effective().as_slice(), rows, d, f);
        g.iter_mut().for_each(|x| *x = gelu(*x));
        kernels::matmul_acc(&g, b.w2.effective().as_slice(), &mut h, rows, f, d);
        h
    }

    /// Packed block pass keeping every intermediate, for incremental re-evaluation.
    pub(crate) fn block_packed_state(
        &self,
        layer: usize,
        x: &[T],
        lens: &[usize],
    ) -> PackedState<T> {
        let d = self.cfg.d_model;
        let rows = x.len() / d;
        let b = &self.blocks[layer];
        let (a, _) = layer_norm(x, d, &b.ln1_gain, &b.ln1_bias);
        let q = kernels::matmul(&a, b.wq.effective().as_slice(), rows, d, d);
        let k = kernels::matmul(&a, b.wk.effective().as_slice(), rows, d, d);
        let v = kernels::matmul(&a, b.wv.effective().as_slice(), rows, d, d);
        let mut st = PackedState {
            x: x.to_vec(),
            a,
            q,
            k,
            v,
            ..PackedState::default()
        };
        self.finish_from_qkv(layer, &mut st, lens);
        st
    }

    fn finish_from_qkv(&self, layer: usize, st: &mut PackedState<T>, lens: &[usize]) {
        let d = self.cfg.d_model;
        let mut attn = Vec::with_capacity(st.q.len());
        let mut start = 0;
        for &t in lens {
            let r = start * d..(start + t) * d;
            let (o, _) = causal_attention(
                &st.q[r.clone()],
                &st.k[r.clone()],
                &st.v[r],
                t,
                d,
                self.cfg.n_heads,
            );
            attn.extend(o);
            start += t;
        }
        st.attn = attn;
        let mut h1 = st.x.clone();
        kernels::matmul_acc(
            &st.attn,
            self.blocks[layer].wo.effective().as_slice(),
            &mut h1,
            st.x.len() / d,
            d,
            d,
        );
        st.h1 = h1;
        self.finish_from_h1(layer, st);
    }

    fn finish_from_h1(&self, layer: usize, st: &mut PackedState<T>) {
        let (d, f) = (self.cfg.d_model, self.cfg.d_ff);
        let b = &self.blocks[layer];
        let (m, _) = layer_norm(&st.h1, d, &b.ln2_gain, &b.ln2_bias);
        st.u = kernels::matmul(&m, b.w1.effective().as_slice(), st.h1.len() / d, d, f);
        st.m = m;
        self.finish_from_u(layer, st);
    }

    fn finish_from_u(&self, layer: usize, st: &mut PackedState<T>) {
        let (d, f) = (self.cfg.d_model, self.cfg.d_ff);
        st.g = st.u.iter().map(|&x| gelu(x)).collect();
        let mut h2 = st.h1.clone();
        kernels::matmul_acc(
            &st.g,
            self.blocks[layer].w2.effective().as_slice(),
            &mut h2,
            st.h1.len() / d,
            f,
            d,
        );
        st.h2 = h2;
    }

    /// The state `st` would have if weight `kind` of `layer` changed by the sparse `delta`
    /// (`(flat index, change)` pairs). The other weights are read from `self`.
    pub(crate) fn block_packed_delta(
        &self,
        layer: usize,
        st: &PackedState<T>,
        lens: &[usize],
        kind: WeightKind,
        delta: &[(usize, T)],
    ) -> PackedState<T> {
        let cols = self.weight(layer, kind).shape().1;
        // out (rows × cols) += input (rows × in) · Δ, touching only the changed entries
        let apply = |input: &[T], in_dim: usize, out: &mut [T]| {
            let rows = input.len() / in_dim;
            for &(idx, dv) in delta {
                let (r, c) = (idx / cols, idx % cols);
                for i in 0..rows {
                    out[i * cols + c] += input[i * in_dim + r] * dv;
                }
            }
        };
        let d = self.cfg.d_model;
        let f = self.cfg.d_ff;
        let mut next = st.clone();
        match kind {
            WeightKind::Query | WeightKind::Key | WeightKind::Value => {
                let target = match kind {
                    WeightKind::Query => &mut next.q,
                    WeightKind::Key => &mut next.k,
                    _ => &mut next.v,
                };
                apply(&st.a, d, target);
                self.finish_from_qkv(layer, &mut next, lens);
            }
            WeightKind::AttnOut => {
                apply(&st.attn, d, &mut next.h1);
                self.finish_from_h1(layer, &mut next);
            }
            WeightKind::MlpIn => {
                apply(&st.m, d, &mut next.u);
                self.finish_from_u(layer, &mut next);
            }
            WeightKind::MlpOut => apply(&st.g, f, &mut next.h2),
        }
        next
    }

    /// Packed logits for stacked hidden states entering block `layer`.
    pub fn forward_packed_from(&self, layer: usize, hidden: &[T], lens: &[usize]) -> Vec<T> {
        let d = self.cfg.d_model;
        let mut x = hidden.to_vec();
        for l in layer..self.n_layers() {
            x = self.block_packed(l, &x, lens);
        }
        let rows = x.len() / d;
        let (y, _) = layer_norm(&x, d, &self.lnf_gain, &self.lnf_bias);
        kernels::matmul(&y, self.head.as_slice(), rows, d, self.cfg.vocab)
    }

    /// Stacked hidden states entering block `layer` for every sequence.
    pub fn hidden_packed(&self, layer: usize, seqs: &[Vec<u32>]) -> Result<(Vec<T>, Vec<usize>)> {
        let mut x = Vec::new();
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            x.extend_from_slice(self.embed(s)?.as_slice());
            lens.push(s.len());
        }
        for l in 0..layer {
            x = self.block_packed(l, &x, &lens);
        }
        Ok((x, lens))
    }

    /// One block applied to a `t × d` hidden state; the result is the post-residual output.
    pub fn block_forward(&self, layer: usize, x: &Matrix<T>) -> Matrix<T> {
        let t = x.rows();
        Matrix::from_vec(
            t,
            self.cfg.d_model,
            self.block_impl(layer, x.as_slice(), t, None),
        )
        .expect("sized")
    }

    /// Final norm and output projection, `t × vocab` logits.
    pub fn head_forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let (t, d) = x.shape();
        let (y, _) = layer_norm(x.as_slice(), d, &self.lnf_gain, &self.lnf_bias);
        let logits = kernels::matmul(&y, self.head.as_slice(), t, d, self.cfg.vocab);
        Matrix::from_vec(t, self.cfg.vocab, logits).expect("sized")
    }

    /// Runs blocks `layer..` on a hidden state entering `layer`, then the head.
    pub fn forward_from(&self, layer: usize, hidden: &Matrix<T>) -> Matrix<T> {
        let mut x = hidden.clone();
        for l in layer..self.n_layers() {
            x = self.block_forward(l, &x);
        }
        self.head_forward(&x)
    }

    /// Hidden state entering block `layer` (the embeddings when `layer == 0`).
    pub fn hidden_before(&self, layer: usize, tokens: &[u32]) -> Result<Matrix<T>> {
        let mut x = self.embed(tokens)?;
        for l in 0..layer {
            x = self.block_forward(l, &x);
        }
        Ok(x)
    }

    /// Logits for every position. `capture`, when given, sees each block's post-residual output.
    pub fn forward(
        &self,
        tokens: &[u32],
        mut capture: Option<CaptureFn<'_, T>>,
    ) -> Result<Matrix<T>> {
        let mut x = self.embed(tokens)?;
        for l in 0..self.n_layers() {
            x = self.block_forward(l, &x);
            if let Some(sink) = capture.as_mut() {
                sink(l, &x);
            }
        }
        Ok(self.head_forward(&x))
    }

    pub(crate) fn forward_train(&self, tokens: &[u32]) -> Result<(Matrix<T>, ForwardCache<T>)> {
        let x0 = self.embed(tokens)?;
        let t = tokens.len();
        let d = self.cfg.d_model;
        let mut x = x0.into_vec();
        let mut blocks = Vec::with_capacity(self.n_layers());
        for l in 0..self.n_layers() {
            let mut c = BlockCache::default();
            x = self.block_impl(l, &x, t, Some(&mut c));
            blocks.push(c);
        }
        let (y, lnf) = layer_norm(&x, d, &self.lnf_gain, &self.lnf_bias);
        let logits = kernels::matmul(&y, self.head.as_slice(), t, d, self.cfg.vocab);
        let logits = Matrix::from_vec(t, self.cfg.vocab, logits).expect("sized");
        Ok((
            logits,
            ForwardCache {
                tokens: tokens.to_vec(),
                blocks,
                lnf,
                y,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{init_model, ModelConfig, Weight, WeightKind};
    use super::*;
    use crate::quant::quantize_tensor;

    fn small() -> ToyModel {
        init_model(&ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            vocab: 20,
            max_seq: 12,
            d_ff: 32,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn packed_matches_per_sequence() {
        let m = small();
        let seqs = vec![vec![1, 5, 7], vec![1, 9, 2, 4, 4, 3], vec![6]];
        for layer in [0, 2] {
            let (h, lens) = m.hidden_packed(layer, &seqs).unwrap();
            let packed = m.forward_packed_from(layer, &h, &lens);
            let mut expect = Vec::new();
            for s in &seqs {
                expect.extend_from_slice(m.forward(s, None).unwrap().as_slice());
            }
            assert_eq!(packed.len(), expect.len());
            let diff = packed
                .iter()
                .zip(&expect)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "{diff}");
        }
    }

    #[test]
    fn delta_state_matches_recompute() {
        let m = small();
        let seqs = vec![vec![1, 5, 7, 3], vec![1, 9, 2]];
        let (x, lens) = m.hidden_packed(1, &seqs).unwrap();
        let st = m.block_packed_state(1, &x, &lens);
        assert_eq!(st.h2, m.block_packed(1, &x, &lens));
        for kind in WeightKind::ALL {
            let mut changed = m.clone();
            let w = changed.weight(1, kind).effective().clone();
            let mut w2 = w.clone();
            let delta: Vec<(usize, f64)> = [3usize, 17, 40]
                .iter()
                .map(|&i| (i, 0.05 * (i as f64 - 20.0)))
                .collect();
            for &(i, dv) in &delta {
                w2.as_mut_slice()[i] += dv;
            }
            changed.set_weight(1, kind, Weight::Dense(w2)).unwrap();
            let fast = changed.block_packed_delta(1, &st, &lens, kind, &delta);
            let full = changed.block_packed(1, &x, &lens);
            let diff = fast
                .h2
                .iter()
                .zip(&full)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "{}: {diff}", kind.name());
        }
    }

    #[test]
    fn capture_is_observation_only() {
        let m = small();
        let toks = [1, 5, 7, 9, 2];
        let plain = m.forward(&toks, None).unwrap();
        let mut seen = Vec::new();
        let mut sink = |l: usize, x: &Matrix<f64>| seen.push((l, x.clone()));
        let captured = m.forward(&toks, Some(&mut sink)).unwrap();
        assert_eq!(plain, captured);
        assert_eq!(seen.len(), 3);
        assert_eq!(seen[2].1, m.hidden_before(3, &toks).unwrap());
        assert!(plain.is_finite());
    }

    #[test]
    fn composed_forward_matches() {
        let m = small();
        let toks = [1, 4, 4, 8];
        let h = m.hidden_before(1, &toks).unwrap();
        assert_eq!(m.forward_from(1, &h), m.forward(&toks, None).unwrap());
    }

    #[test]
    fn zero_weights_give_uniform_logits() {
        let mut m = small();
        m.tok_emb = Matrix::zeros(20, 16);
        m.pos_emb = Matrix::zeros(12, 16);
        m.head = Matrix::zeros(16, 20);
        for l in 0..3 {
            for k in WeightKind::ALL {
                let (r, c) = m.weight(l, k).shape();
                m.set_weight(l, k, Weight::Dense(Matrix::zeros(r, c)))
                    .unwrap();
            }
        }
        let logits = m.forward(&[1, 2, 3], None).unwrap();
        for r in 0..3 {
            let row = logits.row(r);
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn bad_inputs() {
        let m = small();
        assert!(m.forward(&[1; 13], None).is_err());
        assert!(m.forward(&[25], None).is_err());
        assert!(m.forward(&[], None).is_err());
    }

    fn quantized(m: &ToyModel, bits: u8) -> ToyModel {
        let mut q = m.clone();
        for l in 0..m.n_layers() {
            for k in WeightKind::ALL {
                let w = m.weight(l, k).effective();
                q.set_weight(
                    l,
                    k,
                    Weight::Quantized(quantize_tensor(w, bits, 128).unwrap()),
                )
                .unwrap();
            }
        }
        q
    }

    #[test]
    fn logit_deviation_shrinks_with_bits() {
        let m = small();
        let toks = [1, 6, 11, 3, 2, 9];
        let base = m.forward(&toks, None).unwrap();
        let dev = |bits| {
            let l = quantized(&m, bits).forward(&toks, None).unwrap();
            let d: Vec<f64> = l
                .as_slice()
                .iter()
                .zip(base.as_slice())
                .map(|(a, b)| (a - b).abs())
                .collect();
            (
                d.iter().cloned().fold(0.0, f64::max),
                d.iter().sum::<f64>() / d.len() as f64,
            )
        };
        let (max4, mean4) = dev(4);
        let (max8, mean8) = dev(8);
        let (max16, mean16) = dev(16);
        assert!(max16 < max4 && max16 < 1e-4);
        assert!(mean4 >= mean8 && mean8 >= mean16);
        let _ = max8;
    }
}
