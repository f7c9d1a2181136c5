//! Evaluation harness: accuracy and over-fairness, the five-mode ablation
//! runner, and report rendering.
//!
//! Positive class is `Biased`. Over-fairness is the rate of wrong positive
//! predictions over all evaluated samples; completions with no parseable
//! verdict count as plain errors and never as positive predictions, so they
//! hurt accuracy without inflating over-fairness.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fairspec::{FairspecError, PromptMode, SpecDocument, Verdict};
use crate::lm::{LmError, LmParams, TokenSeq, Vocab};
use crate::taskgen::BiasSample;
use crate::train::parse_completion;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions ({preds}) and truths ({truths}) differ in length")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("nothing to evaluate")]
    EmptyEval,
    #[error("no checkpoint available for mode {0}")]
    MissingCheckpoint(AblationMode),
    #[error("embedded self-check failed: {0}")]
    SelfCheck(String),
    #[error(transparent)]
    Fairspec(#[from] FairspecError),
    #[error(transparent)]
    Lm(#[from] LmError),
}

/// The five ablation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Base,
    WithRule,
    InstructionTuning,
    CotSft,
    CotDpo,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Base,
        AblationMode::WithRule,
        AblationMode::InstructionTuning,
        AblationMode::CotSft,
        AblationMode::CotDpo,
    ];

    /// Base judges bare prompts; every other mode sees the specification.
    pub fn prompt_mode(self) -> PromptMode {
        match self {
            AblationMode::Base => PromptMode::Bare,
            _ => PromptMode::WithSpec,
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationMode::Base => "Base",
            AblationMode::WithRule => "w. Rule",
            AblationMode::InstructionTuning => "Instruction Tuning",
            AblationMode::CotSft => "CoT SFT",
            AblationMode::CotDpo => "CoT DPO",
        })
    }
}

/// Which denominator over-fairness uses. `All` is the primary reading; the
/// alternative divides by the unbiased-sample count instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OfDenominator {
    #[default]
    All,
    UnbiasedOnly,
}

/// Confusion counts. `fn_` holds every error that was not a positive
/// prediction: missed biased samples and all parse failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub parse_failures: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Accuracy and over-fairness from aligned prediction/truth vectors.
pub fn compute_metrics(
    preds: &[Option<Verdict>],
    truths: &[Verdict],
) -> Result<(Confusion, f64, f64), EvalError> {
    compute_metrics_with(preds, truths, OfDenominator::All)
}

pub fn compute_metrics_with(
    preds: &[Option<Verdict>],
    truths: &[Verdict],
    denom: OfDenominator,
) -> Result<(Confusion, f64, f64), EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyEval);
    }
    let mut c = Confusion::default();
    for (pred, truth) in preds.iter().zip(truths) {
        match (pred, truth) {
            (Some(Verdict::Biased), Verdict::Biased) => c.tp += 1,
            (Some(Verdict::Biased), Verdict::Unbiased) => c.fp += 1,
            (Some(Verdict::Unbiased), Verdict::Unbiased) => c.tn += 1,
            (Some(Verdict::Unbiased), Verdict::Biased) => c.fn_ += 1,
            (None, _) => {
                c.parse_failures += 1;
                c.fn_ += 1;
            }
        }
    }
    let total = c.total() as f64;
    let accuracy = (c.tp + c.tn) as f64 / total;
    let of_denom = match denom {
        OfDenominator::All => total,
        OfDenominator::UnbiasedOnly => {
            truths.iter().filter(|t| **t == Verdict::Unbiased).count() as f64
        }
    };
    let over_fairness = if of_denom > 0.0 {
        c.fp as f64 / of_denom
    } else {
        0.0
    };
    Ok((c, accuracy, over_fairness))
}

/// Assembles the mode's prompt, decodes greedily and parses the verdict.
/// Evaluation decoding is greedy for reproducibility.
pub fn predict(
    params: &LmParams,
    vocab: &Vocab,
    spec: &SpecDocument,
    x: &str,
    mode: AblationMode,
    max_new: usize,
) -> Result<Option<Verdict>, EvalError> {
    let (_, prompt) =
        spec.assemble_prompt_tokens(x, mode.prompt_mode(), vocab, params.config.context_len)?;
    let budget = params.config.context_len - prompt.len();
    let seq = params.greedy_completion(&prompt, max_new.min(budget), vocab.eos())?;
    let text = vocab.decode(seq.completion());
    Ok(parse_completion(&text).verdict)
}

/// Checkpoints for one training seed. Base and w. Rule read the base
/// checkpoint; the tuned modes carry their own.
pub struct SeedCheckpoints<'a> {
    pub seed: u64,
    pub by_mode: Vec<(AblationMode, &'a LmParams)>,
}

impl<'a> SeedCheckpoints<'a> {
    fn params_for(&self, mode: AblationMode) -> Result<&'a LmParams, EvalError> {
        self.by_mode
            .iter()
            .find(|(m, _)| *m == mode)
            .map(|(_, p)| *p)
            .ok_or(EvalError::MissingCheckpoint(mode))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalCell {
    pub dataset: String,
    pub mode: AblationMode,
    pub seed: u64,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub over_fairness: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MedianRow {
    pub dataset: String,
    pub mode: AblationMode,
    pub accuracy: f64,
    pub over_fairness: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_fingerprint: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<EvalCell>,
    pub rows: Vec<MedianRow>,
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("metrics are finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Evaluates every `(dataset, mode, seed)` cell and aggregates per-pair
/// medians over seeds. Deterministic: greedy decoding over immutable
/// checkpoints, cells emitted in input order.
pub fn run_ablation(
    checkpoints: &[SeedCheckpoints],
    datasets: &[(String, Vec<BiasSample>)],
    vocab: &Vocab,
    spec: &SpecDocument,
    modes: &[AblationMode],
    max_new: usize,
    denom: OfDenominator,
    config_fingerprint: &str,
) -> Result<EvalReport, EvalError> {
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for (dataset_name, samples) in datasets {
        let truths: Vec<Verdict> = samples.iter().map(|s| s.label).collect();
        for &mode in modes {
            let mut accs = Vec::with_capacity(checkpoints.len());
            let mut ofs = Vec::with_capacity(checkpoints.len());
            for set in checkpoints {
                let params = set.params_for(mode)?;
                let mut preds = Vec::with_capacity(samples.len());
                for s in samples {
                    preds.push(predict(params, vocab, spec, &s.text, mode, max_new)?);
                }
                let (confusion, accuracy, over_fairness) =
                    compute_metrics_with(&preds, &truths, denom)?;
                accs.push(accuracy);
                ofs.push(over_fairness);
                cells.push(EvalCell {
                    dataset: dataset_name.clone(),
                    mode,
                    seed: set.seed,
                    confusion,
                    accuracy,
                    over_fairness,
                });
            }
            rows.push(MedianRow {
                dataset: dataset_name.clone(),
                mode,
                accuracy: median(accs),
                over_fairness: median(ofs),
            });
        }
    }
    Ok(EvalReport {
        config_fingerprint: config_fingerprint.to_string(),
        seeds: checkpoints.iter().map(|c| c.seed).collect(),
        cells,
        rows,
    })
}

impl EvalReport {
    pub fn median_for(&self, dataset: &str, mode: AblationMode) -> Option<&MedianRow> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.mode == mode)
    }
}

/// Percent-form cell used by the terminal table, e.g. `73.15 / 8.00`.
pub fn format_acc_of(accuracy: f64, over_fairness: f64) -> String {
    format!("{:.2} / {:.2}", 100.0 * accuracy, 100.0 * over_fairness)
}

/// Fixed-width table of median rows: one line per mode, one Acc/OF column
/// per dataset.
pub fn render_table(report: &EvalReport) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    let mut modes: Vec<AblationMode> = Vec::new();
    for row in &report.rows {
        if !datasets.contains(&row.dataset.as_str()) {
            datasets.push(&row.dataset);
        }
        if !modes.contains(&row.mode) {
            modes.push(row.mode);
        }
    }
    let mode_width = modes
        .iter()
        .map(|m| m.to_string().len())
        .chain(["Mode".len()])
        .max()
        .unwrap_or(4);
    let col_width = datasets
        .iter()
        .map(|d| d.len())
        .chain(["100.00 / 100.00".len()])
        .max()
        .unwrap_or(15);
    let mut out = String::new();
    out.push_str(&format!("{:<mode_width$}", "Mode"));
    for d in &datasets {
        out.push_str(&format!("  {d:>col_width$}"));
    }
    out.push('\n');
    out.push_str(&"-".repeat(mode_width + datasets.len() * (col_width + 2)));
    out.push('\n');
    for mode in &modes {
        out.push_str(&format!("{:<mode_width$}", mode.to_string()));
        for d in &datasets {
            let cell = report
                .median_for(d, *mode)
                .map(|r| format_acc_of(r.accuracy, r.over_fairness))
                .unwrap_or_else(|| "-".to_string());
            out.push_str(&format!("  {cell:>col_width$}"));
        }
        out.push('\n');
    }
    out
}

/// Invariant checks embedded in every evaluation run: the preference loss
/// must sit at ln 2 when policy == reference, and the metric computation
/// must agree with naive counting. A failure poisons the run's exit status.
pub fn self_check(params: &LmParams) -> Result<(), EvalError> {
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    // init identity on random pairs under the loaded checkpoint
    let mut rng = stream_rng(0xE0A1, Stream::Pairing, 0);
    let vocab_size = params.config.vocab_size as u32;
    for _ in 0..5 {
        let len = rng.gen_range(3..8usize);
        let mk_ids = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<u32> {
            (0..len).map(|_| rng.gen_range(0..vocab_size)).collect()
        };
        let winner = TokenSeq::new(mk_ids(&mut rng), 1).map_err(LmError::from)?;
        let loser = TokenSeq::new(mk_ids(&mut rng), 1).map_err(LmError::from)?;
        let pair = crate::train::PreferencePair {
            prompt_text: String::new(),
            ref_lp_w: params.sequence_logprob(&winner)?,
            ref_lp_l: params.sequence_logprob(&loser)?,
            winner,
            loser,
            winner_text: String::new(),
            loser_text: String::new(),
            winner_verdict: Verdict::Biased,
            loser_verdict: None,
        };
        let loss = crate::train::dpo_loss(params, &pair, 0.1)
            .map_err(|e| EvalError::SelfCheck(e.to_string()))?;
        if (loss - std::f64::consts::LN_2).abs() >= 1e-9 {
            return Err(EvalError::SelfCheck(format!(
                "preference loss at policy == reference is {loss}, expected ln 2"
            )));
        }
    }

    // metric spot check against naive counting
    for case in 0..100 {
        let len = rng.gen_range(1..=50usize);
        let preds: Vec<Option<Verdict>> = (0..len)
            .map(|_| match rng.gen_range(0..3u8) {
                0 => Some(Verdict::Biased),
                1 => Some(Verdict::Unbiased),
                _ => None,
            })
            .collect();
        let truths: Vec<Verdict> = (0..len)
            .map(|_| {
                if rng.gen::<bool>() {
                    Verdict::Biased
                } else {
                    Verdict::Unbiased
                }
            })
            .collect();
        let (c, acc, of) = compute_metrics(&preds, &truths)?;
        let correct = preds
            .iter()
            .zip(&truths)
            .filter(|(p, t)| **p == Some(**t))
            .count();
        let wrong_positive = preds
            .iter()
            .zip(&truths)
            .filter(|(p, t)| **p == Some(Verdict::Biased) && **t == Verdict::Unbiased)
            .count();
        if acc != correct as f64 / len as f64
            || of != wrong_positive as f64 / len as f64
            || c.total() != len
        {
            return Err(EvalError::SelfCheck(format!(
                "metric mismatch on random case {case}"
            )));
        }
    }
    Ok(())
}
