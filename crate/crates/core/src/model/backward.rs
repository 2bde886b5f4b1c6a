use super::forward::ForwardCache;
use super::{CausalLM, ModelError};
use crate::dataset::PackedSequence;
use crate::linalg::{axpy, dot, log_softmax, matmul_acc, matmul_tn_acc, Matrix};

fn bias_acc(dy: &[f64], n: usize, db: &mut [f64]) {
    for row in dy.chunks_exact(n) {
        for (b, g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
}

/// LayerNorm backward over `rows`; accumulates gain/bias grads and adds the
/// input gradient into `dx`.
fn layer_norm_back(dy: &[f64], xhat: &[f64], rstd: &[f64], gain: &[f64], d: usize, dg: &mut [f64], db: &mut [f64], dx: &mut [f64]) {
    let mut dxhat = vec![0.0; d];
    for t in 0..rstd.len() {
        let dyt = &dy[t * d..(t + 1) * d];
        let xt = &xhat[t * d..(t + 1) * d];
        for i in 0..d {
            dxhat[i] = dyt[i] * gain[i];
            dg[i] += dyt[i] * xt[i];
            db[i] += dyt[i];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xt) / d as f64;
        let dxt = &mut dx[t * d..(t + 1) * d];
        for i in 0..d {
            dxt[i] += rstd[t] * (dxhat[i] - mean_d - xt[i] * mean_dx);
        }
    }
}

impl CausalLM {
    /// Accumulates into `grads` the parameter gradient of
    /// `Σ dlogits ⊙ logits + Σ dhidden ⊙ hidden` for the pass in `cache`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: Option<&Matrix>, dhidden: Option<&Matrix>, grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let cfg = &self.config;
        let (t_len, d, f, nh, v) = (cache.len(), cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.vocab_size);
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let p = &self.params;
        let lay = &self.layout;

        let mut d_hidden = match dhidden {
            Some(m) => m.data.clone(),
            None => vec![0.0; t_len * d],
        };
        if let Some(dl) = dlogits {
            matmul_acc(&dl.data, &p[lay.tok_emb.clone()], t_len, v, d, &mut d_hidden);
            matmul_tn_acc(&dl.data, &cache.hidden.data, t_len, v, d, &mut grads[lay.tok_emb.clone()], None);
        }

        let mut dx = vec![0.0; t_len * d];
        {
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            layer_norm_back(&d_hidden, &cache.lnf_xhat, &cache.lnf_rstd, &p[lay.lnf_g.clone()], d, &mut dg, &mut db, &mut dx);
            axpy(1.0, &dg, &mut grads[lay.lnf_g.clone()]);
            axpy(1.0, &db, &mut grads[lay.lnf_b.clone()]);
        }

        for (slots, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // MLP branch.
            let mut d_act = vec![0.0; t_len * f];
            matmul_acc(&dx, &p[slots.proj_w.clone()], t_len, d, f, &mut d_act);
            matmul_tn_acc(&dx, &lc.fc_act, t_len, d, f, &mut grads[slots.proj_w.clone()], None);
            bias_acc(&dx, d, &mut grads[slots.proj_b.clone()]);
            for (g, &pre) in d_act.iter_mut().zip(&lc.fc_pre) {
                *g *= super::forward::gelu_grad(pre);
            }
            let mut d_ln2 = vec![0.0; t_len * d];
            matmul_acc(&d_act, &p[slots.fc_w.clone()], t_len, f, d, &mut d_ln2);
            matmul_tn_acc(&d_act, &lc.ln2_out, t_len, f, d, &mut grads[slots.fc_w.clone()], None);
            bias_acc(&d_act, f, &mut grads[slots.fc_b.clone()]);
            {
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                layer_norm_back(&d_ln2, &lc.ln2_xhat, &lc.ln2_rstd, &p[slots.ln2_g.clone()], d, &mut dg, &mut db, &mut dx);
                axpy(1.0, &dg, &mut grads[slots.ln2_g.clone()]);
                axpy(1.0, &db, &mut grads[slots.ln2_b.clone()]);
            }

            // Attention branch.
            let mut d_att = vec![0.0; t_len * d];
            matmul_acc(&dx, &p[slots.out_w.clone()], t_len, d, d, &mut d_att);
            matmul_tn_acc(&dx, &lc.att, t_len, d, d, &mut grads[slots.out_w.clone()], None);
            bias_acc(&dx, d, &mut grads[slots.out_b.clone()]);

            let stride = 3 * d;
            let mut d_qkv = vec![0.0; t_len * stride];
            let mut dp = vec![0.0; t_len];
            for t in 0..t_len {
                for h in 0..nh {
                    let probs = &lc.probs[(t * nh + h) * t_len..][..t + 1];
                    let da = &d_att[t * d + h * dh..t * d + (h + 1) * dh];
                    for j in 0..=t {
                        let vj = &lc.qkv[j * stride + 2 * d + h * dh..][..dh];
                        dp[j] = dot(da, vj);
                    }
                    let weighted: f64 = (0..=t).map(|j| probs[j] * dp[j]).sum();
                    let q = lc.qkv[t * stride + h * dh..][..dh].to_vec();
                    let mut dq = vec![0.0; dh];
                    for j in 0..=t {
                        let ds = probs[j] * (dp[j] - weighted) * scale;
                        let kj = &lc.qkv[j * stride + d + h * dh..][..dh];
                        axpy(ds, kj, &mut dq);
                        axpy(ds, &q, &mut d_qkv[j * stride + d + h * dh..][..dh]);
                        axpy(probs[j], da, &mut d_qkv[j * stride + 2 * d + h * dh..][..dh]);
                    }
                    axpy(1.0, &dq, &mut d_qkv[t * stride + h * dh..][..dh]);
                }
            }
            let mut d_ln1 = vec![0.0; t_len * d];
            matmul_acc(&d_qkv, &p[slots.qkv_w.clone()], t_len, stride, d, &mut d_ln1);
            matmul_tn_acc(&d_qkv, &lc.ln1_out, t_len, stride, d, &mut grads[slots.qkv_w.clone()], None);
            bias_acc(&d_qkv, stride, &mut grads[slots.qkv_b.clone()]);
            {
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                layer_norm_back(&d_ln1, &lc.ln1_xhat, &lc.ln1_rstd, &p[slots.ln1_g.clone()], d, &mut dg, &mut db, &mut dx);
                axpy(1.0, &dg, &mut grads[slots.ln1_g.clone()]);
                axpy(1.0, &db, &mut grads[slots.ln1_b.clone()]);
            }
            debug_assert_eq!(lc.x_in.len(), dx.len());
        }

        for (t, &id) in cache.ids.iter().enumerate() {
            let row = &dx[t * d..(t + 1) * d];
            axpy(1.0, row, &mut grads[lay.tok_emb.start + id as usize * d..][..d]);
            axpy(1.0, row, &mut grads[lay.pos_emb.start + t * d..][..d]);
        }
    }

    /// Sum of next-token negative log-likelihoods over masked targets and the
    /// number of targets. `mask[j]` scores `ids[j]` given `ids[..j]`.
    pub fn masked_nll(&self, ids: &[u32], mask: &[bool]) -> Result<(f64, usize), ModelError> {
        let cache = self.forward(ids)?;
        Ok(nll_from_logits(&cache.logits, ids, mask, None))
    }

    /// Like [`CausalLM::masked_nll`], and adds `scale ×` its gradient to `grads`.
    pub fn accumulate_nll_grad(&self, ids: &[u32], mask: &[bool], scale: f64, grads: &mut [f64]) -> Result<(f64, usize), ModelError> {
        let cache = self.forward(ids)?;
        let mut dlogits = Matrix::zeros(cache.logits.rows, cache.logits.cols);
        let out = nll_from_logits(&cache.logits, ids, mask, Some((scale, &mut dlogits)));
        if out.1 > 0 {
            self.backward(&cache, Some(&dlogits), None, grads);
        }
        Ok(out)
    }

    /// Mean cross-entropy over the packed sequence's scored positions, with
    /// the exact gradient for every parameter.
    pub fn lm_loss(&self, packed: &PackedSequence) -> Result<(f64, Vec<f64>), ModelError> {
        let count = scored_targets(&packed.loss_mask);
        if count == 0 {
            return Err(ModelError::EmptyMask);
        }
        let mut grads = vec![0.0; self.params.len()];
        let (sum, _) = self.accumulate_nll_grad(&packed.ids, &packed.loss_mask, 1.0 / count as f64, &mut grads)?;
        Ok((sum / count as f64, grads))
    }
}

/// Number of targets a loss mask scores (position 0 has no predictor).
pub fn scored_targets(mask: &[bool]) -> usize {
    mask.iter().skip(1).filter(|&&m| m).count()
}

fn nll_from_logits(logits: &Matrix, ids: &[u32], mask: &[bool], mut grad: Option<(f64, &mut Matrix)>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for j in 1..ids.len() {
        if !mask.get(j).copied().unwrap_or(false) {
            continue;
        }
        let lp = log_softmax(logits.row(j - 1), 1.0);
        let target = ids[j] as usize;
        sum -= lp[target];
        count += 1;
        if let Some((scale, dl)) = grad.as_mut() {
            let row = dl.row_mut(j - 1);
            for (g, l) in row.iter_mut().zip(&lp) {
                *g += *scale * l.exp();
            }
            row[target] -= *scale;
        }
    }
    (sum, count)
}
