//! Parameters and forward pass.
//!
//! Pre-norm transformer blocks: RMSNorm → causal multi-head attention → residual,
//! RMSNorm → GELU feed-forward → residual, with learned absolute positions
//! and an untied final projection. The final projection starts at zero so a
//! fresh model scores every next token uniformly.

use serde::{Deserialize, Serialize};

use crate::rng::{stream_rng, Stream};

use super::config::LmConfig;
use super::tensor::{gelu, linear, linear_rows, rmsnorm_row, softmax_prefix_inplace, Mat};
use super::vocab::{TokenId, TokenSeq};
use super::LmError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub attn_wq: Mat,
    pub attn_wk: Mat,
    pub attn_wv: Mat,
    pub attn_wo: Mat,
    pub ff_w1: Mat,
    pub ff_w2: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmParams {
    pub config: LmConfig,
    pub tok_embed: Mat,
    pub pos_embed: Mat,
    pub layers: Vec<LayerParams>,
    pub lm_head: Mat,
}

/// Per-layer activations kept for the backward pass.
pub(crate) struct LayerCache {
    pub x_pre: Mat,
    pub a: Mat,
    pub ri_a: Vec<f64>,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// Rows this layer was evaluated at, in ascending order.
    pub active: Vec<usize>,
    /// Attention probabilities per head, `[active.len(), T]`; row `i` holds
    /// the causal softmax for sequence position `active[i]`.
    pub probs: Vec<Mat>,
    pub ho: Mat,
    pub x_mid: Mat,
    pub b: Mat,
    pub ri_b: Vec<f64>,
    pub h1: Mat,
    pub h2: Mat,
}

pub(crate) struct ForwardCache {
    pub layers: Vec<LayerCache>,
    pub hidden: Mat,
}

impl LmParams {
    /// Seeded init: every tensor N(0, 1/sqrt(d_model)) except the final
    /// projection, which is zero.
    pub fn init(config: LmConfig) -> Result<Self, LmError> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, Stream::ParamInit, 0);
        let d = config.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let mut gen = |rows, cols| Mat::randn(rows, cols, std, &mut rng);
        let tok_embed = gen(config.vocab_size, d);
        let pos_embed = gen(config.context_len, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_wq: gen(d, d),
                attn_wk: gen(d, d),
                attn_wv: gen(d, d),
                attn_wo: gen(d, d),
                ff_w1: gen(config.d_ff, d),
                ff_w2: gen(d, config.d_ff),
            })
            .collect();
        let lm_head = Mat::zeros(config.vocab_size, d);
        Ok(LmParams {
            config,
            tok_embed,
            pos_embed,
            layers,
            lm_head,
        })
    }

    /// Same shape tree, all zeros. Gradients use `LmParams` as their
    /// container so the optimizer can walk both trees in lockstep.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    /// All tensors in canonical order (the checkpoint/optimizer order).
    pub fn tensors(&self) -> Vec<&Mat> {
        let mut out = vec![&self.tok_embed, &self.pos_embed];
        for l in &self.layers {
            out.extend([
                &l.attn_wq, &l.attn_wk, &l.attn_wv, &l.attn_wo, &l.ff_w1, &l.ff_w2,
            ]);
        }
        out.push(&self.lm_head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = vec![&mut self.tok_embed, &mut self.pos_embed];
        for l in &mut self.layers {
            out.push(&mut l.attn_wq);
            out.push(&mut l.attn_wk);
            out.push(&mut l.attn_wv);
            out.push(&mut l.attn_wo);
            out.push(&mut l.ff_w1);
            out.push(&mut l.ff_w2);
        }
        out.push(&mut self.lm_head);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["tok_embed".to_string(), "pos_embed".to_string()];
        for i in 0..self.layers.len() {
            for name in ["attn_wq", "attn_wk", "attn_wv", "attn_wo", "ff_w1", "ff_w2"] {
                out.push(format!("layer{i}.{name}"));
            }
        }
        out.push("lm_head".to_string());
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Shape consistency against the embedded config; run on checkpoint load.
    pub fn validate_shapes(&self) -> Result<(), LmError> {
        self.config.validate()?;
        let c = &self.config;
        let check = |name: &str, m: &Mat, rows: usize, cols: usize| {
            if m.rows == rows && m.cols == cols && m.data.len() == rows * cols {
                Ok(())
            } else {
                Err(LmError::InvalidConfig(format!(
                    "tensor {name} has shape {}x{}, expected {rows}x{cols}",
                    m.rows, m.cols
                )))
            }
        };
        check("tok_embed", &self.tok_embed, c.vocab_size, c.d_model)?;
        check("pos_embed", &self.pos_embed, c.context_len, c.d_model)?;
        if self.layers.len() != c.n_layers {
            return Err(LmError::InvalidConfig(format!(
                "{} layers found, config says {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (name, m) in [
                ("attn_wq", &l.attn_wq),
                ("attn_wk", &l.attn_wk),
                ("attn_wv", &l.attn_wv),
                ("attn_wo", &l.attn_wo),
            ] {
                check(&format!("layer{i}.{name}"), m, c.d_model, c.d_model)?;
            }
            check(&format!("layer{i}.ff_w1"), &l.ff_w1, c.d_ff, c.d_model)?;
            check(&format!("layer{i}.ff_w2"), &l.ff_w2, c.d_model, c.d_ff)?;
        }
        check("lm_head", &self.lm_head, c.vocab_size, c.d_model)?;
        Ok(())
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<(), LmError> {
        if ids.len() > self.config.context_len {
            return Err(LmError::SeqTooLong {
                len: ids.len(),
                context_len: self.config.context_len,
            });
        }
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(LmError::TokenOutOfRange {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn embed(&self, ids: &[TokenId]) -> Mat {
        let d = self.config.d_model;
        let mut x = Mat::zeros(ids.len(), d);
        for (t, &id) in ids.iter().enumerate() {
            let tok = self.tok_embed.row(id as usize);
            let pos = self.pos_embed.row(t);
            let xr = x.row_mut(t);
            for i in 0..d {
                xr[i] = tok[i] + pos[i];
            }
        }
        x
    }

    /// Causal attention for one layer, computed at `rows` only (keys and
    /// values always span the whole prefix). When `probs_out` is given, the
    /// per-head attention rows are kept for backprop; rows not in `rows` stay
    /// zero there and carry no gradient.
    fn attention(
        &self,
        q: &Mat,
        k: &Mat,
        v: &Mat,
        ho: &mut Mat,
        rows: &[usize],
        mut probs_out: Option<&mut Vec<Mat>>,
    ) {
        let t_len = k.rows;
        let n_heads = self.config.n_heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut scratch = vec![0.0; t_len];
        for h in 0..n_heads {
            let off = h * hd;
            let mut p = probs_out
                .as_ref()
                .map(|_| Mat::zeros(rows.len(), t_len));
            for (slot, &t) in rows.iter().enumerate() {
                let qr = &q.row(t)[off..off + hd];
                let pr: &mut [f64] = match p.as_mut() {
                    Some(m) => m.row_mut(slot),
                    None => &mut scratch,
                };
                for j in 0..=t {
                    let kr = &k.row(j)[off..off + hd];
                    pr[j] = qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_prefix_inplace(pr, t + 1);
                let out = &mut ho.row_mut(t)[off..off + hd];
                out.iter_mut().for_each(|o| *o = 0.0);
                for j in 0..=t {
                    let w = pr[j];
                    if w == 0.0 {
                        continue;
                    }
                    let vr = &v.row(j)[off..off + hd];
                    for (o, &vv) in out.iter_mut().zip(vr) {
                        *o += w * vv;
                    }
                }
            }
            if let Some(ref mut store) = probs_out {
                store.push(p.expect("probs allocated when caching"));
            }
        }
    }

    /// One transformer block. `active` restricts the query/output side of
    /// attention and the whole feed-forward to those rows; keys and values
    /// still cover every row, so restricted rows are computed exactly. Only
    /// the final layer may be restricted, since inactive rows of the output
    /// are not valid inputs for a further layer.
    fn layer_forward(
        &self,
        li: usize,
        x: Mat,
        active: Option<&[usize]>,
        cache: Option<&mut Vec<LayerCache>>,
    ) -> Mat {
        let layer = &self.layers[li];
        let t_len = x.rows;
        let d = self.config.d_model;
        let all_rows: Vec<usize>;
        let rows: &[usize] = match active {
            Some(rows) => rows,
            None => {
                all_rows = (0..t_len).collect();
                &all_rows
            }
        };

        let mut a = Mat::zeros(t_len, d);
        let mut ri_a = vec![0.0; t_len];
        for t in 0..t_len {
            ri_a[t] = rmsnorm_row(x.row(t), a.row_mut(t));
        }
        let q = linear_rows(&a, &layer.attn_wq, rows);
        let k = linear(&a, &layer.attn_wk);
        let v = linear(&a, &layer.attn_wv);
        let mut ho = Mat::zeros(t_len, d);
        let mut probs: Vec<Mat> = Vec::new();
        self.attention(&q, &k, &v, &mut ho, rows, cache.is_some().then_some(&mut probs));
        let attn_out = linear_rows(&ho, &layer.attn_wo, rows);
        let mut x_mid = x.clone();
        for (xm, ao) in x_mid.data.iter_mut().zip(&attn_out.data) {
            *xm += ao;
        }

        let mut b = Mat::zeros(t_len, d);
        let mut ri_b = vec![0.0; t_len];
        for &t in rows {
            ri_b[t] = rmsnorm_row(x_mid.row(t), b.row_mut(t));
        }
        let h1 = linear_rows(&b, &layer.ff_w1, rows);
        let mut h2 = h1.clone();
        for &t in rows {
            h2.row_mut(t).iter_mut().for_each(|v| *v = gelu(*v));
        }
        let ff = linear_rows(&h2, &layer.ff_w2, rows);
        let mut x_out = x_mid.clone();
        for (xo, f) in x_out.data.iter_mut().zip(&ff.data) {
            *xo += f;
        }

        if let Some(store) = cache {
            store.push(LayerCache {
                x_pre: x,
                a,
                ri_a,
                q,
                k,
                v,
                active: rows.to_vec(),
                probs,
                ho,
                x_mid,
                b,
                ri_b,
                h1,
                h2,
            });
        }
        x_out
    }

    fn forward_layers(
        &self,
        ids: &[TokenId],
        active: Option<&[usize]>,
        mut cache: Option<&mut Vec<LayerCache>>,
    ) -> Mat {
        let mut x = self.embed(ids);
        let last = self.layers.len() - 1;
        for li in 0..self.layers.len() {
            let rows = if li == last { active } else { None };
            x = self.layer_forward(li, x, rows, cache.as_deref_mut());
        }
        x
    }

    /// Hidden states `[T, d_model]` for a token prefix; no cache.
    pub(crate) fn forward_hidden(&self, ids: &[TokenId]) -> Result<Mat, LmError> {
        self.check_ids(ids)?;
        Ok(self.forward_layers(ids, None, None))
    }

    /// Hidden states with only `rows` valid in the output (final layer
    /// restricted); the cheap path for sampling and loss evaluation.
    pub(crate) fn forward_hidden_rows(
        &self,
        ids: &[TokenId],
        rows: &[usize],
    ) -> Result<Mat, LmError> {
        self.check_ids(ids)?;
        Ok(self.forward_layers(ids, Some(rows), None))
    }

    pub(crate) fn forward_cached(
        &self,
        ids: &[TokenId],
        active: Option<&[usize]>,
    ) -> Result<ForwardCache, LmError> {
        self.check_ids(ids)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        let hidden = self.forward_layers(ids, active, Some(&mut layers));
        Ok(ForwardCache { layers, hidden })
    }

    /// Projects selected hidden rows through the final projection.
    pub(crate) fn project_rows(&self, hidden: &Mat, rows: &[usize]) -> Mat {
        let d = self.config.d_model;
        let mut out = Mat::zeros(rows.len(), self.config.vocab_size);
        for (ri, &r) in rows.iter().enumerate() {
            let hr = hidden.row(r);
            let or = out.row_mut(ri);
            for (o, dst) in or.iter_mut().enumerate() {
                let wr = self.lm_head.row(o);
                let mut acc = 0.0;
                for i in 0..d {
                    acc += hr[i] * wr[i];
                }
                *dst = acc;
            }
        }
        out
    }

    /// Next-token logits matrix: row `t` scores the token at position `t+1`
    /// given positions `0..=t`. Deterministic in `(params, seq)`.
    pub fn forward_logits(&self, seq: &TokenSeq) -> Result<Mat, LmError> {
        let hidden = self.forward_hidden(&seq.ids)?;
        let rows: Vec<usize> = (0..seq.len()).collect();
        Ok(self.project_rows(&hidden, &rows))
    }

    /// Logits for the continuation of `ids` (last row only).
    pub fn next_token_logits(&self, ids: &[TokenId]) -> Result<Vec<f64>, LmError> {
        if ids.is_empty() {
            return Err(LmError::EmptyPrompt);
        }
        let last = ids.len() - 1;
        let hidden = self.forward_hidden_rows(ids, &[last])?;
        Ok(self.project_rows(&hidden, &[last]).data)
    }
}

#[cfg(test)]
pub(crate) fn init_rng_for_tests(seed: u64) -> rand_chacha::ChaCha8Rng {
    stream_rng(seed, Stream::ParamInit, 1)
}
