//! Reverse-mode gradients of the sequence loss, hand-derived per operation.

use crate::error::{CrdError, Result};
use crate::tinyformer::config::{Activation, NormKind, PosEncoding};
use crate::tinyformer::forward::{Logits, RopePhase, Tape};
use crate::tinyformer::ops::{self, Scalar};
use crate::tinyformer::params::{ModelParams, NormParams};
use crate::tinyformer::tokenizer::TokenSeq;

/// Summed next-token negative log-likelihood (natural log) of `tokens` under
/// `logits`: row `i` is scored against token `i + 1`, so a sequence of `T`
/// tokens contributes `T − 1` terms.
pub fn nll_loss<T: Scalar>(logits: &Logits<T>, tokens: &TokenSeq) -> Result<T> {
    if logits.rows != tokens.len() {
        return Err(CrdError::Shape(format!(
            "{} logit rows for {} tokens",
            logits.rows,
            tokens.len()
        )));
    }
    let ids = tokens.ids();
    let mut loss = T::zero();
    for i in 0..ids.len().saturating_sub(1) {
        let row = logits.row(i);
        loss = loss + ops::log_sum_exp(row) - row[ids[i + 1] as usize];
    }
    Ok(loss)
}

/// Gradient of the summed loss with respect to the logits.
fn dlogits<T: Scalar>(logits: &Logits<T>, ids: &[u32], scale: T) -> Vec<T> {
    let mut d = logits.data.clone();
    for i in 0..logits.rows {
        let row = &mut d[i * logits.vocab..(i + 1) * logits.vocab];
        if i + 1 < ids.len() {
            ops::softmax_in_place(row);
            row[ids[i + 1] as usize] = row[ids[i + 1] as usize] - T::one();
            for v in row.iter_mut() {
                *v = *v * scale;
            }
        } else {
            row.fill(T::zero());
        }
    }
    d
}

/// Backward through a norm given its saved normalized input. Accumulates
/// gain/bias gradients and adds the input gradient into `dx`.
fn norm_backward<T: Scalar>(
    kind: NormKind,
    p: &NormParams<T>,
    g: &mut NormParams<T>,
    xhat: &[T],
    inv: T,
    dy: &[T],
    dx: &mut [T],
) {
    let d = xhat.len();
    let n = T::lit(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..d {
        g.gain[i] = g.gain[i] + dy[i] * xhat[i];
        if kind == NormKind::Layer {
            g.bias[i] = g.bias[i] + dy[i];
        }
        dxhat[i] = dy[i] * p.gain[i];
    }
    let proj = ops::dot(&dxhat, xhat) / n;
    match kind {
        NormKind::Rms => {
            for i in 0..d {
                dx[i] = dx[i] + inv * (dxhat[i] - xhat[i] * proj);
            }
        }
        NormKind::Layer => {
            let mean = dxhat.iter().copied().sum::<T>() / n;
            for i in 0..d {
                dx[i] = dx[i] + inv * (dxhat[i] - mean - xhat[i] * proj);
            }
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Summed sequence loss and its gradient with respect to every parameter,
    /// with the gradient scaled by `scale`.
    pub fn loss_and_grad(&self, tokens: &TokenSeq, scale: T) -> Result<(T, ModelParams<T>)> {
        let mut grads = ModelParams::zeros(&self.config);
        let loss = self.accumulate_grad(tokens, scale, &mut grads)?;
        Ok((loss, grads))
    }

    /// Like [`Self::loss_and_grad`] but adds into an existing gradient buffer.
    pub fn accumulate_grad(&self, tokens: &TokenSeq, scale: T, grads: &mut ModelParams<T>) -> Result<T> {
        let (logits, tape) = self.forward_taped(tokens.ids(), true)?;
        let loss = nll_loss(&logits, tokens)?;
        let tape = tape.expect("tape requested");
        let dl = dlogits(&logits, tokens.ids(), scale);
        self.backward(&tape, &dl, grads);
        Ok(loss)
    }

    fn backward(&self, tape: &Tape<T>, dlogits: &[T], g: &mut ModelParams<T>) {
        let cfg = &self.config;
        let t = tape.tokens.len();
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let (dh, kv, qd) = (cfg.d_head(), cfg.kv_dim(), cfg.q_dim());
        let hidden = cfg.ffn_hidden();
        let group = cfg.group_size();
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let ropes: Vec<Option<RopePhase<T>>> = (0..t).map(|i| self.rope(i)).collect();

        // Head and final norm.
        let mut dhid = vec![T::zero(); t * d];
        let mut dxf = vec![T::zero(); d];
        for i in 0..t {
            let dl = &dlogits[i * v..(i + 1) * v];
            if dl.iter().all(|x| x.is_zero()) {
                continue;
            }
            dxf.fill(T::zero());
            ops::vec_mat_backward(&tape.xf[i * d..(i + 1) * d], &self.lm_head, dl, &mut dxf, &mut g.lm_head);
            norm_backward(
                cfg.norm,
                &self.final_norm,
                &mut g.final_norm,
                &tape.xhatf[i * d..(i + 1) * d],
                tape.invf[i],
                &dxf,
                &mut dhid[i * d..(i + 1) * d],
            );
        }

        let mut dx2 = vec![T::zero(); d];
        let mut dact = vec![T::zero(); hidden];
        let mut dup = vec![T::zero(); hidden];
        let mut dgate = vec![T::zero(); hidden];
        let mut dq = vec![T::zero(); t * qd];
        let mut dk = vec![T::zero(); t * kv];
        let mut dv = vec![T::zero(); t * kv];
        let mut do_ = vec![T::zero(); qd];
        let mut dx1 = vec![T::zero(); d];

        for l in (0..cfg.n_layers).rev() {
            let lp = &self.layers[l];
            let lt = &tape.layers[l];
            let gl = &mut g.layers[l];

            // Feed-forward residual branch: dhid becomes the gradient at the
            // attention-block output.
            for i in 0..t {
                let dout = &mut dhid[i * d..(i + 1) * d];
                let act = &lt.act[i * hidden..(i + 1) * hidden];
                let up = &lt.up[i * hidden..(i + 1) * hidden];
                let x2 = &lt.x2[i * d..(i + 1) * d];
                dact.fill(T::zero());
                ops::vec_mat_backward(act, &lp.w_down, dout, &mut dact, &mut gl.w_down);
                dx2.fill(T::zero());
                match cfg.activation {
                    Activation::Gelu => {
                        for j in 0..hidden {
                            dup[j] = dact[j] * ops::gelu_grad(up[j]);
                        }
                    }
                    Activation::Swiglu => {
                        let gate = &lt.gate[i * hidden..(i + 1) * hidden];
                        for j in 0..hidden {
                            dup[j] = dact[j] * ops::silu(gate[j]);
                            dgate[j] = dact[j] * up[j] * ops::silu_grad(gate[j]);
                        }
                        ops::vec_mat_backward(x2, &lp.w_gate, &dgate, &mut dx2, &mut gl.w_gate);
                    }
                }
                ops::vec_mat_backward(x2, &lp.w_up, &dup, &mut dx2, &mut gl.w_up);
                norm_backward(
                    cfg.norm,
                    &lp.ffn_norm,
                    &mut gl.ffn_norm,
                    &lt.xhat2[i * d..(i + 1) * d],
                    lt.inv2[i],
                    &dx2,
                    dout,
                );
            }

            // Attention residual branch.
            dq.fill(T::zero());
            dk.fill(T::zero());
            dv.fill(T::zero());
            for i in 0..t {
                let dout = &dhid[i * d..(i + 1) * d];
                do_.fill(T::zero());
                ops::vec_mat_backward(&lt.o[i * qd..(i + 1) * qd], &lp.wo, dout, &mut do_, &mut gl.wo);
                let n = i + 1;
                let probs = &lt.probs[i];
                for head in 0..cfg.n_heads {
                    let gk = head / group;
                    let p = &probs[head * n..(head + 1) * n];
                    let doh = &do_[head * dh..(head + 1) * dh];
                    let qh = &lt.q[i * qd + head * dh..i * qd + (head + 1) * dh];
                    let mut dp = vec![T::zero(); n];
                    for j in 0..n {
                        let off = j * kv + gk * dh;
                        dp[j] = ops::dot(doh, &lt.values[off..off + dh]);
                        ops::axpy(p[j], doh, &mut dv[off..off + dh]);
                    }
                    let pdp = ops::dot(p, &dp);
                    for j in 0..n {
                        let ds = p[j] * (dp[j] - pdp) * scale;
                        let off = j * kv + gk * dh;
                        ops::axpy(ds, &lt.keys[off..off + dh], &mut dq[i * qd + head * dh..i * qd + (head + 1) * dh]);
                        ops::axpy(ds, qh, &mut dk[off..off + dh]);
                    }
                }
            }
            for i in 0..t {
                if let Some(r) = ropes[i].as_ref() {
                    r.apply_inverse(&mut dq[i * qd..(i + 1) * qd], dh);
                    r.apply_inverse(&mut dk[i * kv..(i + 1) * kv], dh);
                }
                let x1 = &lt.x1[i * d..(i + 1) * d];
                dx1.fill(T::zero());
                ops::vec_mat_backward(x1, &lp.wq, &dq[i * qd..(i + 1) * qd], &mut dx1, &mut gl.wq);
                ops::vec_mat_backward(x1, &lp.wk, &dk[i * kv..(i + 1) * kv], &mut dx1, &mut gl.wk);
                ops::vec_mat_backward(x1, &lp.wv, &dv[i * kv..(i + 1) * kv], &mut dx1, &mut gl.wv);
                norm_backward(
                    cfg.norm,
                    &lp.attn_norm,
                    &mut gl.attn_norm,
                    &lt.xhat1[i * d..(i + 1) * d],
                    lt.inv1[i],
                    &dx1,
                    &mut dhid[i * d..(i + 1) * d],
                );
            }
        }

        for (i, &tok) in tape.tokens.iter().enumerate() {
            let tok = tok as usize;
            let dhi = &dhid[i * d..(i + 1) * d];
            ops::add_assign(&mut g.tok_embed[tok * d..(tok + 1) * d], dhi);
            if cfg.pos_encoding == PosEncoding::LearnedAbsolute {
                ops::add_assign(&mut g.pos_embed[i * d..(i + 1) * d], dhi);
            }
        }
    }
}
