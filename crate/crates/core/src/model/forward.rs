use super::{CausalLM, ModelError};
use crate::linalg::{axpy, dot, matmul_wt, Matrix};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Normalizes one row; writes `xhat` and `y = g * xhat + b`, returns `1/std`.
pub(crate) fn layer_norm_row(x: &[f64], g: &[f64], b: &[f64], xhat: &mut [f64], y: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        y[i] = g[i] * xhat[i] + b[i];
    }
    rstd
}

/// Causal attention output for row `t` given the packed `[q|k|v]` rows
/// `0..=t`. Optionally records the per-head probabilities (`n_heads × (t+1)`).
pub(crate) fn attend_row(qkv: &[f64], t: usize, d: usize, n_heads: usize, out: &mut [f64], mut probs: Option<&mut [f64]>) {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let stride = 3 * d;
    let mut scores = vec![0.0; t + 1];
    out.fill(0.0);
    for h in 0..n_heads {
        let q = &qkv[t * stride + h * dh..t * stride + (h + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            let k = &qkv[j * stride + d + h * dh..j * stride + d + (h + 1) * dh];
            *s = dot(q, k) * scale;
        }
        crate::linalg::softmax_in_place(&mut scores);
        let oh = &mut out[h * dh..(h + 1) * dh];
        for (j, &p) in scores.iter().enumerate() {
            let v = &qkv[j * stride + 2 * d + h * dh..j * stride + 2 * d + (h + 1) * dh];
            axpy(p, v, oh);
        }
        if let Some(pr) = probs.as_deref_mut() {
            pr[h * (t + 1)..(h + 1) * (t + 1)].copy_from_slice(&scores);
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub x_in: Vec<f64>,
    pub ln1_xhat: Vec<f64>,
    pub ln1_rstd: Vec<f64>,
    pub ln1_out: Vec<f64>,
    pub qkv: Vec<f64>,
    /// `[t][h][j]` flattened with stride `T` per head, zero above the diagonal.
    pub probs: Vec<f64>,
    pub att: Vec<f64>,
    pub ln2_xhat: Vec<f64>,
    pub ln2_rstd: Vec<f64>,
    pub ln2_out: Vec<f64>,
    pub fc_pre: Vec<f64>,
    pub fc_act: Vec<f64>,
}

/// Activations of one full forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) ids: Vec<u32>,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) lnf_xhat: Vec<f64>,
    pub(crate) lnf_rstd: Vec<f64>,
    /// Final-LayerNorm outputs `[T × d_model]`.
    pub hidden: Matrix,
    /// Next-token scores `[T × vocab]`.
    pub logits: Matrix,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }
}

impl CausalLM {
    fn embed_row(&self, id: u32, pos: usize, out: &mut [f64]) {
        let d = self.config.d_model;
        let te = &self.params[self.layout.tok_emb.start + id as usize * d..][..d];
        let pe = &self.params[self.layout.pos_emb.start + pos * d..][..d];
        for i in 0..d {
            out[i] = te[i] + pe[i];
        }
    }

    /// Full forward pass with everything backward needs.
    pub fn forward(&self, ids: &[u32]) -> Result<ForwardCache, ModelError> {
        self.check_ids(ids)?;
        let cfg = &self.config;
        let (t_len, d, f, nh) = (ids.len(), cfg.d_model, cfg.d_ff, cfg.n_heads);
        let p = &self.params;

        let mut x = vec![0.0; t_len * d];
        for (t, &id) in ids.iter().enumerate() {
            self.embed_row(id, t, &mut x[t * d..(t + 1) * d]);
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for slots in &self.layout.layers {
            let x_in = x.clone();
            let mut ln1_xhat = vec![0.0; t_len * d];
            let mut ln1_out = vec![0.0; t_len * d];
            let mut ln1_rstd = vec![0.0; t_len];
            for t in 0..t_len {
                ln1_rstd[t] = layer_norm_row(
                    &x[t * d..(t + 1) * d],
                    &p[slots.ln1_g.clone()],
                    &p[slots.ln1_b.clone()],
                    &mut ln1_xhat[t * d..(t + 1) * d],
                    &mut ln1_out[t * d..(t + 1) * d],
                );
            }
            let mut qkv = vec![0.0; t_len * 3 * d];
            matmul_wt(&ln1_out, &p[slots.qkv_w.clone()], Some(&p[slots.qkv_b.clone()]), t_len, d, 3 * d, &mut qkv);

            let mut att = vec![0.0; t_len * d];
            let mut probs = vec![0.0; t_len * nh * t_len];
            let mut row_probs = vec![0.0; nh * t_len];
            for t in 0..t_len {
                attend_row(&qkv, t, d, nh, &mut att[t * d..(t + 1) * d], Some(&mut row_probs[..nh * (t + 1)]));
                for h in 0..nh {
                    let dst = &mut probs[(t * nh + h) * t_len..][..t + 1];
                    dst.copy_from_slice(&row_probs[h * (t + 1)..(h + 1) * (t + 1)]);
                }
            }
            let mut proj = vec![0.0; t_len * d];
            matmul_wt(&att, &p[slots.out_w.clone()], Some(&p[slots.out_b.clone()]), t_len, d, d, &mut proj);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }

            let mut ln2_xhat = vec![0.0; t_len * d];
            let mut ln2_out = vec![0.0; t_len * d];
            let mut ln2_rstd = vec![0.0; t_len];
            for t in 0..t_len {
                ln2_rstd[t] = layer_norm_row(
                    &x[t * d..(t + 1) * d],
                    &p[slots.ln2_g.clone()],
                    &p[slots.ln2_b.clone()],
                    &mut ln2_xhat[t * d..(t + 1) * d],
                    &mut ln2_out[t * d..(t + 1) * d],
                );
            }
            let mut fc_pre = vec![0.0; t_len * f];
            matmul_wt(&ln2_out, &p[slots.fc_w.clone()], Some(&p[slots.fc_b.clone()]), t_len, d, f, &mut fc_pre);
            let fc_act: Vec<f64> = fc_pre.iter().map(|&v| gelu(v)).collect();
            let mut mlp = vec![0.0; t_len * d];
            matmul_wt(&fc_act, &p[slots.proj_w.clone()], Some(&p[slots.proj_b.clone()]), t_len, f, d, &mut mlp);
            for (xi, mi) in x.iter_mut().zip(&mlp) {
                *xi += mi;
            }

            layers.push(LayerCache {
                x_in,
                ln1_xhat,
                ln1_rstd,
                ln1_out,
                qkv,
                probs,
                att,
                ln2_xhat,
                ln2_rstd,
                ln2_out,
                fc_pre,
                fc_act,
            });
        }

        let mut lnf_xhat = vec![0.0; t_len * d];
        let mut hidden = Matrix::zeros(t_len, d);
        let mut lnf_rstd = vec![0.0; t_len];
        for t in 0..t_len {
            lnf_rstd[t] = layer_norm_row(
                &x[t * d..(t + 1) * d],
                &p[self.layout.lnf_g.clone()],
                &p[self.layout.lnf_b.clone()],
                &mut lnf_xhat[t * d..(t + 1) * d],
                hidden.row_mut(t),
            );
        }
        let mut logits = Matrix::zeros(t_len, cfg.vocab_size);
        matmul_wt(&hidden.data, &p[self.layout.tok_emb.clone()], None, t_len, d, cfg.vocab_size, &mut logits.data);

        Ok(ForwardCache { ids: ids.to_vec(), layers, lnf_xhat, lnf_rstd, hidden, logits })
    }

    /// Row `j` scores the token at position `j + 1`.
    pub fn forward_logits(&self, ids: &[u32]) -> Result<Matrix, ModelError> {
        Ok(self.forward(ids)?.logits)
    }

    /// Final-layer representations `[len × d_model]`.
    pub fn hidden_states(&self, ids: &[u32]) -> Result<Matrix, ModelError> {
        Ok(self.forward(ids)?.hidden)
    }

    /// Feeds `prompt` through a fresh incremental decoder.
    pub fn start_decode(&self, prompt: &[u32]) -> Result<(DecodeState, StepOutput), ModelError> {
        self.check_ids(prompt)?;
        let mut state = DecodeState { pos: 0, qkv: vec![Vec::new(); self.config.n_layers] };
        let mut last = None;
        for &id in prompt {
            last = Some(self.step(&mut state, id)?);
        }
        Ok((state, last.expect("prompt is non-empty")))
    }

    /// Appends one token and returns the scores for the next position.
    /// Bit-identical to the matching row of [`CausalLM::forward`].
    pub fn step(&self, state: &mut DecodeState, id: u32) -> Result<StepOutput, ModelError> {
        let cfg = &self.config;
        if id as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange { id, vocab_size: cfg.vocab_size });
        }
        if state.pos >= cfg.max_len {
            return Err(ModelError::TooLong { len: state.pos + 1, max_len: cfg.max_len });
        }
        let (d, f, nh, t) = (cfg.d_model, cfg.d_ff, cfg.n_heads, state.pos);
        let p = &self.params;
        let mut x = vec![0.0; d];
        self.embed_row(id, t, &mut x);
        let mut xhat = vec![0.0; d];
        let mut h = vec![0.0; d];
        let mut att = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        let mut fc = vec![0.0; f];
        for (slots, cache) in self.layout.layers.iter().zip(state.qkv.iter_mut()) {
            layer_norm_row(&x, &p[slots.ln1_g.clone()], &p[slots.ln1_b.clone()], &mut xhat, &mut h);
            let start = cache.len();
            cache.resize(start + 3 * d, 0.0);
            matmul_wt(&h, &p[slots.qkv_w.clone()], Some(&p[slots.qkv_b.clone()]), 1, d, 3 * d, &mut cache[start..]);
            attend_row(cache, t, d, nh, &mut att, None);
            matmul_wt(&att, &p[slots.out_w.clone()], Some(&p[slots.out_b.clone()]), 1, d, d, &mut tmp);
            for (xi, v) in x.iter_mut().zip(&tmp) {
                *xi += v;
            }
            layer_norm_row(&x, &p[slots.ln2_g.clone()], &p[slots.ln2_b.clone()], &mut xhat, &mut h);
            matmul_wt(&h, &p[slots.fc_w.clone()], Some(&p[slots.fc_b.clone()]), 1, d, f, &mut fc);
            for v in fc.iter_mut() {
                *v = gelu(*v);
            }
            matmul_wt(&fc, &p[slots.proj_w.clone()], Some(&p[slots.proj_b.clone()]), 1, f, d, &mut tmp);
            for (xi, v) in x.iter_mut().zip(&tmp) {
                *xi += v;
            }
        }
        let mut hidden = vec![0.0; d];
        layer_norm_row(&x, &p[self.layout.lnf_g.clone()], &p[self.layout.lnf_b.clone()], &mut xhat, &mut hidden);
        let mut logits = vec![0.0; cfg.vocab_size];
        matmul_wt(&hidden, &p[self.layout.tok_emb.clone()], None, 1, d, cfg.vocab_size, &mut logits);
        state.pos += 1;
        Ok(StepOutput { logits, hidden })
    }
}

/// Per-layer key/value cache of an incremental decode.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pos: usize,
    qkv: Vec<Vec<f64>>,
}

impl DecodeState {
    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub hidden: Vec<f64>,
}
