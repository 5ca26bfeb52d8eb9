use crate::error::{Result, TaqError};
use crate::linalg::kernels;
use crate::scalar::Scalar;

use super::layers::{causal_attention_backward, gelu_grad, layer_norm_backward, log_softmax_row};
use super::ToyModel;

const PER_BLOCK: usize = 10;

/// Parameter gradients, one flat buffer per parameter tensor in the model's fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub slices: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(model: &ToyModel<T>) -> Self {
        let cfg = &model.cfg;
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab);
        let mut slices = vec![vec![T::zero(); v * d], vec![T::zero(); cfg.max_seq * d]];
        for _ in 0..model.n_layers() {
            slices.extend([
                vec![T::zero(); d],
                vec![T::zero(); d],
                vec![T::zero(); d * d],
                vec![T::zero(); d * d],
                vec![T::zero(); d * d],
                vec![T::zero(); d * d],
                vec![T::zero(); d],
                vec![T::zero(); d],
                vec![T::zero(); d * f],
                vec![T::zero(); f * d],
            ]);
        }
        slices.extend([
            vec![T::zero(); d],
            vec![T::zero(); d],
            vec![T::zero(); d * v],
        ]);
        Self { slices }
    }

    pub fn add_scaled(&mut self, other: &Self, s: T) {
        for (a, b) in self.slices.iter_mut().zip(&other.slices) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    pub fn norm(&self) -> T {
        self.slices
            .iter()
            .flat_map(|s| s.iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        self.slices
            .iter_mut()
            .flat_map(|v| v.iter_mut())
            .for_each(|x| *x *= s);
    }
}

impl<T: Scalar> ToyModel<T> {
    /// Mean cross-entropy over `targets` (`(position, next token)` pairs) and its gradient.
    pub fn loss_and_grad(
        &self,
        tokens: &[u32],
        targets: &[(usize, u32)],
    ) -> Result<(f64, Grads<T>)> {
        let mut grads = Grads::zeros_like(self);
        let loss = self.accumulate_grad(tokens, targets, T::one(), &mut grads)?;
        Ok((loss, grads))
    }

    /// Adds `weight` times the loss gradient into `grads` and returns the unweighted loss.
    pub fn accumulate_grad(
        &self,
        tokens: &[u32],
        targets: &[(usize, u32)],
        weight: T,
        grads: &mut Grads<T>,
    ) -> Result<f64> {
        if !self.is_dense() {
            return Err(TaqError::InvalidInput(
                "gradients need a full-precision model".into(),
            ));
        }
        if targets.is_empty() {
            return Err(TaqError::InvalidInput("no loss positions".into()));
        }
        if grads.slices.len() != 2 + self.n_layers() * PER_BLOCK + 3 {
            return Err(TaqError::InvalidShape(
                "gradient buffer does not match the model".into(),
            ));
        }
        let (logits, cache) = self.forward_train(tokens)?;
        let cfg = &self.cfg;
        let (t, d, f, vocab) = (tokens.len(), cfg.d_model, cfg.d_ff, cfg.vocab);
        let inv_n = weight / T::of(targets.len() as f64);

        let mut loss = 0.0;
        let mut dlogits = vec![T::zero(); t * vocab];
        for &(pos, tgt) in targets {
            if pos >= t || tgt as usize >= vocab {
                return Err(TaqError::InvalidInput(format!(
                    "target ({pos}, {tgt}) out of range"
                )));
            }
            let lp = log_softmax_row(logits.row(pos));
            loss -= lp[tgt as usize].as_f64();
            let row = &mut dlogits[pos * vocab..(pos + 1) * vocab];
            for (g, l) in row.iter_mut().zip(&lp) {
                *g += l.exp() * inv_n;
            }
            row[tgt as usize] -= inv_n;
        }
        loss /= targets.len() as f64;

        let nb = self.n_layers();
        let head_i = 2 + nb * PER_BLOCK;
        kernels::matmul_at_b_acc(
            &cache.y,
            &dlogits,
            &mut grads.slices[head_i + 2],
            t,
            d,
            vocab,
        );
        let mut dy = vec![T::zero(); t * d];
        kernels::matmul_a_bt_acc(&dlogits, self.head.as_slice(), &mut dy, t, vocab, d);
        let (gl, rest) = grads.slices[head_i..].split_at_mut(1);
        let mut dx =
            layer_norm_backward(&dy, d, &self.lnf_gain, &cache.lnf, &mut gl[0], &mut rest[0]);

        for l in (0..nb).rev() {
            let b = &self.blocks[l];
            let c = &cache.blocks[l];
            let base = 2 + l * PER_BLOCK;
            let g = &mut grads.slices[base..base + PER_BLOCK];
            // MLP: h_out = h + gelu(m W1) W2
            kernels::matmul_at_b_acc(&c.g, &dx, &mut g[9], t, f, d);
            let mut dg = vec![T::zero(); t * f];
            kernels::matmul_a_bt_acc(&dx, b.w2.effective().as_slice(), &mut dg, t, d, f);
            for (x, &u) in dg.iter_mut().zip(&c.u) {
                *x *= gelu_grad(u);
            }
            kernels::matmul_at_b_acc(&c.m, &dg, &mut g[8], t, d, f);
            let mut dm = vec![T::zero(); t * d];
            kernels::matmul_a_bt_acc(&dg, b.w1.effective().as_slice(), &mut dm, t, f, d);
            let dh = {
                let (left, right) = g.split_at_mut(7);
                layer_norm_backward(&dm, d, &b.ln2_gain, &c.ln2, &mut left[6], &mut right[0])
            };
            for (x, &y) in dx.iter_mut().zip(&dh) {
                *x += y;
            }
            // Attention: h = x + attn(LN1(x)) Wo
            let g = &mut grads.slices[base..base + PER_BLOCK];
            kernels::matmul_at_b_acc(&c.attn, &dx, &mut g[5], t, d, d);
            let mut dattn = vec![T::zero(); t * d];
            kernels::matmul_a_bt_acc(&dx, b.wo.effective().as_slice(), &mut dattn, t, d, d);
            let (dq, dk, dv) =
                causal_attention_backward(&dattn, &c.q, &c.k, &c.v, &c.probs, t, d, cfg.n_heads);
            kernels::matmul_at_b_acc(&c.a, &dq, &mut g[2], t, d, d);
            kernels::matmul_at_b_acc(&c.a, &dk, &mut g[3], t, d, d);
            kernels::matmul_at_b_acc(&c.a, &dv, &mut g[4], t, d, d);
            let mut da = vec![T::zero(); t * d];
            kernels::matmul_a_bt_acc(&dq, b.wq.effective().as_slice(), &mut da, t, d, d);
            kernels::matmul_a_bt_acc(&dk, b.wk.effective().as_slice(), &mut da, t, d, d);
            kernels::matmul_a_bt_acc(&dv, b.wv.effective().as_slice(), &mut da, t, d, d);
            let dxa = {
                let (left, right) = g.split_at_mut(1);
                layer_norm_backward(&da, d, &b.ln1_gain, &c.ln1, &mut left[0], &mut right[0])
            };
            for (x, &y) in dx.iter_mut().zip(&dxa) {
                *x += y;
            }
        }

        let (emb, pos) = grads.slices.split_at_mut(1);
        for (i, &tok) in cache.tokens.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            for (e, &v) in emb[0][tok as usize * d..(tok as usize + 1) * d]
                .iter_mut()
                .zip(row)
            {
                *e += v;
            }
            for (p, &v) in pos[0][i * d..(i + 1) * d].iter_mut().zip(row) {
                *p += v;
            }
        }
        Ok(loss)
    }

    /// Mean cross-entropy over `targets` without gradients.
    pub fn loss(&self, tokens: &[u32], targets: &[(usize, u32)]) -> Result<f64> {
        let logits = self.forward(tokens, None)?;
        let mut loss = 0.0;
        for &(pos, tgt) in targets {
            loss -= log_softmax_row(logits.row(pos))[tgt as usize].as_f64();
        }
        Ok(loss / targets.len().max(1) as f64)
    }
}
