//! Completion sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::model::LmParams;
use super::tensor::softmax_temperature;
use super::vocab::{TokenId, TokenSeq};
use super::LmError;

/// Decoding mode. Greedy is an explicit variant rather than `temperature = 0`
/// so no division by zero can occur.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decode {
    Greedy,
    Sample { temperature: f64 },
}

/// Lowest index wins ties, which makes greedy decoding fully deterministic.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

impl LmParams {
    /// Appends up to `max_new` tokens drawn from `softmax(logits / tau)`
    /// (or argmax in greedy mode), stopping after the end-of-sequence marker.
    /// The returned sequence has its boundary at the prompt length.
    pub fn sample_completion(
        &self,
        prompt: &TokenSeq,
        decode: Decode,
        max_new: usize,
        eos: TokenId,
        rng: &mut ChaCha8Rng,
    ) -> Result<TokenSeq, LmError> {
        if let Decode::Sample { temperature } = decode {
            if !(temperature > 0.0) {
                return Err(LmError::InvalidConfig(format!(
                    "sampling temperature must be positive, got {temperature}"
                )));
            }
        }
        if max_new == 0 {
            return Err(LmError::InvalidConfig("max_new must be >= 1".into()));
        }
        if prompt.len() + max_new > self.config.context_len {
            return Err(LmError::SeqTooLong {
                len: prompt.len() + max_new,
                context_len: self.config.context_len,
            });
        }
        if prompt.is_empty() {
            return Err(LmError::EmptyPrompt);
        }
        let mut ids = prompt.ids.clone();
        for _ in 0..max_new {
            let logits = self.next_token_logits(&ids)?;
            let next = match decode {
                Decode::Greedy => argmax(&logits) as TokenId,
                Decode::Sample { temperature } => {
                    let probs = softmax_temperature(&logits, temperature);
                    draw(&probs, rng) as TokenId
                }
            };
            ids.push(next);
            if next == eos {
                break;
            }
        }
        TokenSeq::new(ids, prompt.len())
    }

    /// Greedy decoding; consumes no randomness.
    pub fn greedy_completion(
        &self,
        prompt: &TokenSeq,
        max_new: usize,
        eos: TokenId,
    ) -> Result<TokenSeq, LmError> {
        let mut rng = crate::rng::stream_rng(0, crate::rng::Stream::Stage2Sampling, u64::MAX);
        self.sample_completion(prompt, Decode::Greedy, max_new, eos, &mut rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::config::LmConfig;
    use crate::lm::tensor::{entropy, softmax_temperature};
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    fn uniform_params(vocab: usize) -> LmParams {
        LmParams::init(LmConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            context_len: 64,
            vocab_size: vocab,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn zero_logits_sample_uniformly() {
        // chi-square over 10k draws, 2 degrees of freedom, p > 0.001
        let mut rng = stream_rng(1, Stream::Stage2Sampling, 0);
        let probs = softmax_temperature(&[0.0, 0.0, 0.0], 1.2);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            counts[draw(&probs, &mut rng)] += 1;
        }
        let expected = 10_000.0 / 3.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 13.816, "chi-square {chi2} exceeds p=0.001 cutoff");
    }

    #[test]
    fn two_logit_probabilities_match_closed_form() {
        let probs = softmax_temperature(&[1.0, 0.0], 1.0);
        let e = std::f64::consts::E;
        assert!((probs[0] - e / (1.0 + e)).abs() < 1e-12);
        assert!((probs[1] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((probs[0] - 0.731059).abs() < 1e-6);
        assert!((probs[1] - 0.268941).abs() < 1e-6);
    }

    #[test]
    fn greedy_mode_always_takes_argmax() {
        // the zero-initialized head gives all-zero logits; argmax tie-breaks
        // to token 0 every step
        let p = uniform_params(5);
        let prompt = TokenSeq::new(vec![3, 1], 2).unwrap();
        let mut rng = stream_rng(2, Stream::Stage2Sampling, 0);
        let out = p
            .sample_completion(&prompt, Decode::Greedy, 6, 1, &mut rng)
            .unwrap();
        assert_eq!(out.boundary, 2);
        assert_eq!(out.completion(), &[0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn sampling_is_deterministic_per_rng_stream() {
        let p = uniform_params(7);
        let prompt = TokenSeq::new(vec![4], 1).unwrap();
        let decode = Decode::Sample { temperature: 1.2 };
        let mut r1 = stream_rng(9, Stream::Stage2Sampling, 5);
        let mut r2 = stream_rng(9, Stream::Stage2Sampling, 5);
        let a = p.sample_completion(&prompt, decode, 20, 1, &mut r1).unwrap();
        let b = p.sample_completion(&prompt, decode, 20, 1, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stops_at_eos_and_respects_context() {
        let p = uniform_params(4);
        let prompt = TokenSeq::new(vec![2], 1).unwrap();
        let mut rng = stream_rng(3, Stream::Stage2Sampling, 1);
        // eos = 0 is also the greedy pick of the uniform model
        let out = p
            .sample_completion(&prompt, Decode::Greedy, 10, 0, &mut rng)
            .unwrap();
        assert_eq!(out.completion(), &[0]);

        let long = TokenSeq::new(vec![2; 60], 60).unwrap();
        assert!(matches!(
            p.sample_completion(&long, Decode::Greedy, 10, 0, &mut rng),
            Err(LmError::SeqTooLong { .. })
        ));
    }

    #[test]
    fn entropy_increases_with_temperature() {
        let mut rng = stream_rng(4, Stream::Stage2Sampling, 2);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let spread = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - logits.iter().cloned().fold(f64::INFINITY, f64::min);
            if spread < 1e-6 {
                continue; // effectively uniform; entropy is flat in tau
            }
            let mut last = -1.0;
            for tau in [0.5, 1.0, 1.2, 2.0] {
                let h = entropy(&softmax_temperature(&logits, tau));
                assert!(h > last, "entropy not increasing at tau={tau}");
                last = h;
            }
        }
    }
}
