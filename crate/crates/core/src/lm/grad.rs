//! Reverse-mode gradients of sequence log-probability.
//!
//! Both training losses reduce to weighted sums of completion-token
//! log-probabilities, so one backward routine serves SFT and DPO: it
//! accumulates `scale * d(log pi(completion | prompt)) / d(params)` into a
//! gradient tree shaped like `LmParams`.

use super::model::{ForwardCache, LmParams};
use super::tensor::{gelu_prime, linear_backward, log_sum_exp, rmsnorm_backward_row, Mat};
use super::vocab::TokenSeq;
use super::LmError;

/// A cached forward pass of one sequence, ready for value reads and backprop.
pub struct SeqForward {
    cache: ForwardCache,
    /// Logit rows that predict completion tokens: `boundary-1 ..= len-2`.
    rows: Vec<usize>,
    /// Softmax over the vocabulary at each of those rows.
    probs: Mat,
    /// Total log-probability of the completion region.
    pub logprob: f64,
}

impl LmParams {
    /// Forward pass retaining what the backward pass needs. Fails on an
    /// empty completion or an empty prompt prefix.
    pub fn forward_for_loss(&self, seq: &TokenSeq) -> Result<SeqForward, LmError> {
        if seq.boundary == seq.len() {
            return Err(LmError::EmptyCompletion);
        }
        if seq.boundary == 0 {
            return Err(LmError::EmptyPrompt);
        }
        let rows: Vec<usize> = (seq.boundary - 1..seq.len() - 1).collect();
        let cache = self.forward_cached(&seq.ids, Some(&rows))?;
        let logits = self.project_rows(&cache.hidden, &rows);
        let mut probs = Mat::zeros(rows.len(), self.config.vocab_size);
        let mut logprob = 0.0;
        for (ri, &row) in rows.iter().enumerate() {
            let target = seq.ids[row + 1] as usize;
            let lr = logits.row(ri);
            let lse = log_sum_exp(lr);
            logprob += lr[target] - lse;
            let pr = probs.row_mut(ri);
            for (p, &l) in pr.iter_mut().zip(lr) {
                *p = (l - lse).exp();
            }
        }
        Ok(SeqForward {
            cache,
            rows,
            probs,
            logprob,
        })
    }

    /// Sum over completion positions of `log softmax(logits[t-1])[id_t]`.
    /// Always `<= 0`.
    pub fn sequence_logprob(&self, seq: &TokenSeq) -> Result<f64, LmError> {
        Ok(self.forward_for_loss(seq)?.logprob)
    }

    /// Mean negative log-likelihood over the completion region only; prompt
    /// positions carry no loss.
    pub fn sft_loss(&self, seq: &TokenSeq) -> Result<f64, LmError> {
        Ok(-self.sequence_logprob(seq)? / seq.completion_len() as f64)
    }

    /// Accumulates `scale * d(logprob)/d(params)` into `grads`.
    pub fn backward_logprob(&self, seq: &TokenSeq, fwd: &SeqForward, scale: f64, grads: &mut LmParams) {
        let t_len = seq.len();
        let d = self.config.d_model;
        let n_heads = self.config.n_heads;
        let hd = self.config.head_dim();
        let att_scale = 1.0 / (hd as f64).sqrt();

        // d(logprob)/d(logits[row]) = scale * (onehot(target) - softmax)
        let n_rows = fwd.rows.len();
        let mut d_logits = Mat::zeros(n_rows, self.config.vocab_size);
        for (ri, &row) in fwd.rows.iter().enumerate() {
            let target = seq.ids[row + 1] as usize;
            let pr = fwd.probs.row(ri);
            let dr = d_logits.row_mut(ri);
            for (o, dst) in dr.iter_mut().enumerate() {
                *dst = scale * (((o == target) as u8 as f64) - pr[o]);
            }
        }

        // final projection
        let mut h_rows = Mat::zeros(n_rows, d);
        for (ri, &row) in fwd.rows.iter().enumerate() {
            h_rows.row_mut(ri).copy_from_slice(fwd.cache.hidden.row(row));
        }
        let dh_rows = linear_backward(&h_rows, &self.lm_head, &d_logits, &mut grads.lm_head);
        let mut dx = Mat::zeros(t_len, d);
        for (ri, &row) in fwd.rows.iter().enumerate() {
            dx.row_mut(row).copy_from_slice(dh_rows.row(ri));
        }

        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let lg = &mut grads.layers[li];
            let lc = &fwd.cache.layers[li];

            // feed-forward block: x_out = x_mid + W2 gelu(W1 rmsnorm(x_mid))
            let d_h2 = linear_backward(&lc.h2, &layer.ff_w2, &dx, &mut lg.ff_w2);
            let mut d_h1 = d_h2;
            for (g, &pre) in d_h1.data.iter_mut().zip(&lc.h1.data) {
                *g *= gelu_prime(pre);
            }
            let d_b = linear_backward(&lc.b, &layer.ff_w1, &d_h1, &mut lg.ff_w1);
            let mut d_x_mid = dx; // residual branch
            for t in 0..t_len {
                rmsnorm_backward_row(d_b.row(t), lc.x_mid.row(t), lc.ri_b[t], d_x_mid.row_mut(t));
            }

            // attention block: x_mid = x_pre + Wo heads(rmsnorm(x_pre))
            let d_ho = linear_backward(&lc.ho, &layer.attn_wo, &d_x_mid, &mut lg.attn_wo);
            let mut d_q = Mat::zeros(t_len, d);
            let mut d_k = Mat::zeros(t_len, d);
            let mut d_v = Mat::zeros(t_len, d);
            let mut d_probs = vec![0.0; t_len];
            for h in 0..n_heads {
                let off = h * hd;
                let p = &lc.probs[h];
                for (slot, &t) in lc.active.iter().enumerate() {
                    let d_ho_t = &d_ho.row(t)[off..off + hd];
                    if d_ho_t.iter().all(|&g| g == 0.0) {
                        // every term below is scaled by d_ho_t; gradient into
                        // earlier k/v rows arrives only through rows whose own
                        // d_ho is nonzero, so this row contributes nothing
                        continue;
                    }
                    let pr = p.row(slot);
                    // d_probs[j] = d_ho_t . v[j]; then softmax backward
                    let d_probs = &mut d_probs[..=t];
                    for (j, dp) in d_probs.iter_mut().enumerate() {
                        let vr = &lc.v.row(j)[off..off + hd];
                        *dp = d_ho_t.iter().zip(vr).map(|(a, b)| a * b).sum();
                    }
                    let dot: f64 = d_probs
                        .iter()
                        .enumerate()
                        .map(|(j, dp)| pr[j] * dp)
                        .sum();
                    let q_t = &lc.q.row(t)[off..off + hd];
                    let dq_t = &mut d_q.row_mut(t)[off..off + hd];
                    for j in 0..=t {
                        let d_att = pr[j] * (d_probs[j] - dot) * att_scale;
                        let kr = &lc.k.row(j)[off..off + hd];
                        let dk_j = &mut d_k.row_mut(j)[off..off + hd];
                        for i in 0..hd {
                            dq_t[i] += d_att * kr[i];
                            dk_j[i] += d_att * q_t[i];
                        }
                        if pr[j] != 0.0 {
                            let dv_j = &mut d_v.row_mut(j)[off..off + hd];
                            for i in 0..hd {
                                dv_j[i] += pr[j] * d_ho_t[i];
                            }
                        }
                    }
                }
            }
            let mut d_a = linear_backward(&lc.a, &layer.attn_wq, &d_q, &mut lg.attn_wq);
            let d_a_k = linear_backward(&lc.a, &layer.attn_wk, &d_k, &mut lg.attn_wk);
            let d_a_v = linear_backward(&lc.a, &layer.attn_wv, &d_v, &mut lg.attn_wv);
            for (a, (bk, bv)) in d_a.data.iter_mut().zip(d_a_k.data.iter().zip(&d_a_v.data)) {
                *a += bk + bv;
            }
            let mut d_x_pre = d_x_mid;
            for t in 0..t_len {
                rmsnorm_backward_row(d_a.row(t), lc.x_pre.row(t), lc.ri_a[t], d_x_pre.row_mut(t));
            }
            dx = d_x_pre;
        }

        // embeddings
        for (t, &id) in seq.ids.iter().enumerate() {
            let src = dx.row(t);
            let tok = grads.tok_embed.row_mut(id as usize);
            for i in 0..d {
                tok[i] += src[i];
            }
            let pos = grads.pos_embed.row_mut(t);
            for i in 0..d {
                pos[i] += src[i];
            }
        }
    }

    /// SFT loss and its gradient in one pass.
    pub fn sft_loss_with_grad(&self, seq: &TokenSeq) -> Result<(f64, LmParams), LmError> {
        let mut grads = self.zeros_like();
        let loss = self.accumulate_sft_grad(seq, 1.0, &mut grads)?;
        Ok((loss, grads))
    }

    /// Adds `weight * d(sft_loss)/d(params)` into `grads`; returns the loss.
    pub fn accumulate_sft_grad(
        &self,
        seq: &TokenSeq,
        weight: f64,
        grads: &mut LmParams,
    ) -> Result<f64, LmError> {
        let fwd = self.forward_for_loss(seq)?;
        let n = seq.completion_len() as f64;
        self.backward_logprob(seq, &fwd, -weight / n, grads);
        Ok(-fwd.logprob / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::config::LmConfig;
    use crate::lm::model::init_rng_for_tests;
    use crate::lm::vocab::TokenSeq;
    use rand::Rng;

    fn tiny_params(seed: u64) -> LmParams {
        let cfg = LmConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            context_len: 16,
            vocab_size: 9,
            seed,
        };
        let mut p = LmParams::init(cfg).unwrap();
        let mut rng = init_rng_for_tests(seed ^ 0xbeef);
        p.lm_head = Mat::randn(9, 8, 0.4, &mut rng);
        p
    }

    fn random_seq(rng: &mut impl Rng, vocab: u32, len: usize, boundary: usize) -> TokenSeq {
        let ids = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        TokenSeq::new(ids, boundary).unwrap()
    }

    #[test]
    fn uniform_model_logprob_is_log_inv_vocab() {
        let cfg = LmConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            context_len: 16,
            vocab_size: 4,
            seed: 0,
        };
        let p = LmParams::init(cfg).unwrap(); // zero head => uniform
        let one = TokenSeq::new(vec![0, 2], 1).unwrap();
        let lp = p.sequence_logprob(&one).unwrap();
        assert!((lp - (0.25f64).ln()).abs() < 1e-12);

        let three = TokenSeq::new(vec![0, 2, 1, 3], 1).unwrap();
        let lp3 = p.sequence_logprob(&three).unwrap();
        assert!((lp3 - 3.0 * (0.25f64).ln()).abs() < 1e-12);
        assert!(lp3 <= 0.0);
    }

    #[test]
    fn uniform_model_sft_loss_is_ln_vocab() {
        let cfg = LmConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            context_len: 16,
            vocab_size: 50,
            seed: 0,
        };
        let p = LmParams::init(cfg).unwrap();
        let seq = TokenSeq::new(vec![0, 7, 21, 49], 1).unwrap();
        let loss = p.sft_loss(&seq).unwrap();
        assert!((loss - (50f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn logprob_chain_rule_additivity() {
        let p = tiny_params(2);
        let mut rng = init_rng_for_tests(77);
        for _ in 0..20 {
            let len = rng.gen_range(4..12usize);
            let boundary = rng.gen_range(1..len - 1);
            let split = rng.gen_range(boundary + 1..len);
            let seq = random_seq(&mut rng, 9, len, boundary);
            let whole = p.sequence_logprob(&seq).unwrap();
            let first = p
                .sequence_logprob(&TokenSeq::new(seq.ids[..split].to_vec(), boundary).unwrap())
                .unwrap();
            let second = p
                .sequence_logprob(&TokenSeq::new(seq.ids.clone(), split).unwrap())
                .unwrap();
            assert!(
                (whole - (first + second)).abs() < 1e-9,
                "chain rule violated: {whole} vs {}",
                first + second
            );
        }
    }

    #[test]
    fn empty_completion_is_rejected() {
        let p = tiny_params(3);
        let seq = TokenSeq::new(vec![1, 2, 3], 3).unwrap();
        assert!(matches!(
            p.sequence_logprob(&seq),
            Err(LmError::EmptyCompletion)
        ));
        assert!(matches!(p.sft_loss(&seq), Err(LmError::EmptyCompletion)));
    }

    #[test]
    fn loss_ignores_prompt_predictions() {
        // An independent accumulation from full logits over completion rows
        // must agree with sft_loss, and growing the prompt region must drop
        // exactly the newly-masked terms.
        let p = tiny_params(4);
        let seq = TokenSeq::new(vec![0, 3, 5, 1, 7, 2], 2).unwrap();
        let logits = p.forward_logits(&seq).unwrap();
        let mut oracle = 0.0;
        for t in seq.boundary..seq.len() {
            let row = logits.row(t - 1);
            oracle += row[seq.ids[t] as usize] - log_sum_exp(row);
        }
        let n = seq.completion_len() as f64;
        assert!((p.sft_loss(&seq).unwrap() - (-oracle / n)).abs() < 1e-12);

        // on the uniform model, rewriting prompt tokens leaves the loss at ln|V|
        let uniform = LmParams::init(LmConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            context_len: 16,
            vocab_size: 9,
            seed: 0,
        })
        .unwrap();
        let a = TokenSeq::new(vec![0, 3, 5, 1, 7, 2], 4).unwrap();
        let b = TokenSeq::new(vec![0, 8, 6, 4, 7, 2], 4).unwrap();
        assert_eq!(
            uniform.sft_loss(&a).unwrap(),
            uniform.sft_loss(&b).unwrap()
        );
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let p = tiny_params(5);
        let mut rng = init_rng_for_tests(55);
        let seq = random_seq(&mut rng, 9, 8, 3);
        let (_, grads) = p.sft_loss_with_grad(&seq).unwrap();

        let mut worst = 0.0f64;
        let mut probe = p.clone();
        let h = 1e-5;
        let n_tensors = probe.tensors().len();
        for ti in 0..n_tensors {
            for i in 0..probe.tensors()[ti].data.len() {
                let orig = probe.tensors()[ti].data[i];
                probe.tensors_mut()[ti].data[i] = orig + h;
                let up = probe.sft_loss(&seq).unwrap();
                probe.tensors_mut()[ti].data[i] = orig - h;
                let down = probe.sft_loss(&seq).unwrap();
                probe.tensors_mut()[ti].data[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let g = grads.tensors()[ti].data[i];
                let denom = fd.abs().max(g.abs()).max(1e-8);
                worst = worst.max((fd - g).abs() / denom);
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn gradient_scales_linearly() {
        let p = tiny_params(6);
        let seq = TokenSeq::new(vec![0, 4, 2, 8, 1], 2).unwrap();
        let fwd = p.forward_for_loss(&seq).unwrap();
        let mut g1 = p.zeros_like();
        p.backward_logprob(&seq, &fwd, 1.0, &mut g1);
        let mut g2 = p.zeros_like();
        p.backward_logprob(&seq, &fwd, 2.0, &mut g2);
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((2.0 * x - y).abs() < 1e-12);
            }
        }
    }
}
