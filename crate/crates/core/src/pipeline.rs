//! End-to-end orchestration: one flat config, deterministic seeding, and
//! append-only artifact persistence under a directory named by the config
//! hash. Reruns with the same config reproduce every artifact byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{
    run_ablation, self_check, render_table, AblationMode, EvalError, EvalReport, OfDenominator,
    SeedCheckpoints,
};
use crate::fairspec::{FairspecError, PromptMode, SpecDocument};
use crate::lm::{Checkpoint, LmConfig, LmError, LmParams, Vocab};
use crate::taskgen::{
    ingest_external, load_corpus, save_corpus, BiasSample, Split, TaskgenError, TemplateTable,
};
use crate::train::{
    run_instruction_tuning, run_stage1, run_stage2, save_pairs, StageOutcome, TrainConfig,
    TrainError, TrainLog,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {stage} is missing its prerequisite: {missing}")]
    MissingPrerequisite { stage: String, missing: String },
    #[error("invalid config: {0}")]
    Validation(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Taskgen(#[from] TaskgenError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Fairspec(#[from] FairspecError),
    #[error(transparent)]
    Lm(#[from] LmError),
}

impl PipelineError {
    /// Process exit code: 2 for validation-class failures, 3 for runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::MissingPrerequisite { .. } | PipelineError::Validation(_) => 2,
            PipelineError::Eval(EvalError::MissingCheckpoint(_)) => 2,
            PipelineError::Eval(EvalError::SelfCheck(_)) => 2,
            _ => 3,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSettings {
    pub n_train: usize,
    pub n_heldout: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub k: usize,
    pub n_samples: usize,
    pub tau: f64,
    pub max_new: usize,
    pub beta: f64,
    pub sft_lr: f64,
    pub sft_epochs: usize,
    pub sft_batch: usize,
    pub dpo_lr: f64,
    pub dpo_epochs: usize,
    pub dpo_batch: usize,
    pub pair_cap_per_prompt: usize,
    pub stage2_prompt_mode: PromptMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model: ModelSettings,
    pub corpus: CorpusSettings,
    pub train: TrainSettings,
    /// Custom fairness specification file; the built-in document when absent.
    pub spec_file: Option<PathBuf>,
    /// Extra evaluation datasets in the shared record format.
    pub external_datasets: Vec<PathBuf>,
    pub output_dir: PathBuf,
    /// One full training run per seed; evaluation reports medians over them.
    pub seeds: Vec<u64>,
    pub modes: Vec<AblationMode>,
    pub of_denominator: OfDenominator,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelSettings {
                n_layers: 1,
                d_model: 32,
                n_heads: 4,
                d_ff: 128,
                context_len: 256,
            },
            corpus: CorpusSettings {
                n_train: 200,
                n_heldout: 100,
                noise_rate: 0.1,
                seed: 20240,
            },
            train: TrainSettings {
                k: 4,
                n_samples: 8,
                tau: 1.2,
                max_new: 40,
                beta: 0.1,
                sft_lr: 1e-3,
                sft_epochs: 12,
                sft_batch: 8,
                dpo_lr: 2e-4,
                dpo_epochs: 2,
                dpo_batch: 8,
                pair_cap_per_prompt: 4,
                stage2_prompt_mode: PromptMode::WithSpec,
            },
            spec_file: None,
            external_datasets: Vec::new(),
            output_dir: PathBuf::from("runs"),
            seeds: vec![1, 2, 3, 4, 5],
            modes: AblationMode::ALL.to_vec(),
            of_denominator: OfDenominator::All,
        }
    }
}

/// Training stage selector for `cmd_train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    Sft,
    Dpo,
    Instruction,
}

impl TrainStage {
    pub fn name(self) -> &'static str {
        match self {
            TrainStage::Sft => "sft",
            TrainStage::Dpo => "dpo",
            TrainStage::Instruction => "instruction",
        }
    }
}

/// Resolved per-run context: active spec document, template table, closed
/// vocabulary.
pub struct RunContext {
    pub spec: SpecDocument,
    pub table: TemplateTable,
    pub vocab: Vocab,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let mut text = serde_json::to_string_pretty(self).expect("config serialization");
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.seeds.is_empty() {
            return Err(PipelineError::Validation("seed list is empty".into()));
        }
        if self.modes.is_empty() {
            return Err(PipelineError::Validation("mode list is empty".into()));
        }
        if self.corpus.n_train < 1 || self.corpus.n_heldout < 1 {
            return Err(PipelineError::Validation(
                "corpus splits must be non-empty".into(),
            ));
        }
        // model shape sanity (vocab size is filled in later)
        LmConfig {
            n_layers: self.model.n_layers,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            context_len: self.model.context_len,
            vocab_size: 1,
            seed: 0,
        }
        .validate()
        .map_err(|e| PipelineError::Validation(e.to_string()))?;
        self.to_train_config(0).validate().map_err(|e| match e {
            TrainError::Lm(inner) => PipelineError::Validation(inner.to_string()),
            other => PipelineError::Train(other),
        })?;
        if let Some(path) = &self.spec_file {
            if !path.exists() {
                return Err(PipelineError::Validation(format!(
                    "spec file {} does not exist",
                    path.display()
                )));
            }
        }
        for path in &self.external_datasets {
            if !path.exists() {
                return Err(PipelineError::Validation(format!(
                    "external dataset {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            k: self.train.k,
            n_samples: self.train.n_samples,
            tau: self.train.tau,
            max_new: self.train.max_new,
            beta: self.train.beta,
            noise_rate: self.corpus.noise_rate,
            sft_lr: self.train.sft_lr,
            sft_epochs: self.train.sft_epochs,
            sft_batch: self.train.sft_batch,
            dpo_lr: self.train.dpo_lr,
            dpo_epochs: self.train.dpo_epochs,
            dpo_batch: self.train.dpo_batch,
            pair_cap_per_prompt: self.train.pair_cap_per_prompt,
            stage2_prompt_mode: self.train.stage2_prompt_mode,
            seed,
        }
    }

    /// SHA-256 over the canonical JSON serialization; embedded in every
    /// artifact this config produces.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialization");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Run directory: named by the config hash so identical configs share
    /// artifacts and nothing is silently overwritten with different content.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(format!("run-{}", &self.fingerprint()[..12]))
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.run_dir().join("seeds").join(seed.to_string())
    }

    pub fn corpus_path(&self, split: Split) -> PathBuf {
        self.run_dir().join(format!("corpus_{split}.jsonl"))
    }

    pub fn checkpoint_path(&self, seed: u64, stage: &str) -> PathBuf {
        self.seed_dir(seed).join(format!("{stage}.ckpt"))
    }

    pub fn spec_document(&self) -> Result<SpecDocument, PipelineError> {
        let doc = match &self.spec_file {
            Some(path) => SpecDocument::load(path)?,
            None => SpecDocument::default_document(),
        };
        doc.validate()?;
        Ok(doc)
    }

    /// Builds the run context. The vocabulary closes over every assembled
    /// prompt and every teacher trace the table and specification can
    /// produce, so it is a pure function of the config, independent of the
    /// corpus draw.
    pub fn context(&self) -> Result<RunContext, PipelineError> {
        let spec = self.spec_document()?;
        let table = TemplateTable::default_table();
        let texts = table.vocab_texts(&spec);
        let vocab = Vocab::build(texts.iter().map(|s| s.as_str()));
        Ok(RunContext { spec, table, vocab })
    }

    fn base_params(&self, vocab: &Vocab, seed: u64) -> Result<LmParams, PipelineError> {
        Ok(LmParams::init(LmConfig {
            n_layers: self.model.n_layers,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            context_len: self.model.context_len,
            vocab_size: vocab.len(),
            seed,
        })?)
    }

    fn write_run_manifest(&self, ctx: &RunContext) -> Result<(), PipelineError> {
        let dir = self.run_dir();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let manifest_path = dir.join("config.json");
        let mut manifest = serde_json::to_string_pretty(&serde_json::json!({
            "fingerprint": self.fingerprint(),
            "config": self,
        }))
        .expect("manifest serialization");
        manifest.push('\n');
        write_atomic(&manifest_path, manifest.as_bytes())?;
        ctx.spec.save(&dir.join("spec.jsonl"))?;
        Ok(())
    }

    /// Generates and persists the synthetic corpus; idempotent per seed.
    pub fn cmd_gen(&self) -> Result<Vec<BiasSample>, PipelineError> {
        self.validate()?;
        let ctx = self.context()?;
        let corpus =
            ctx.table
                .generate_corpus(self.corpus.n_train, self.corpus.n_heldout, self.corpus.seed)?;
        // every prompt must fit the context with room for a completion
        for sample in &corpus {
            ctx.spec.assemble_prompt_tokens(
                &sample.text,
                PromptMode::WithSpec,
                &ctx.vocab,
                self.model.context_len,
            )?;
        }
        self.write_run_manifest(&ctx)?;
        let train: Vec<BiasSample> = corpus
            .iter()
            .filter(|s| s.split == Split::Train)
            .cloned()
            .collect();
        let heldout: Vec<BiasSample> = corpus
            .iter()
            .filter(|s| s.split == Split::HeldOut)
            .cloned()
            .collect();
        save_corpus(&self.corpus_path(Split::Train), &train)?;
        save_corpus(&self.corpus_path(Split::HeldOut), &heldout)?;
        Ok(corpus)
    }

    fn load_train_corpus(&self, stage: TrainStage) -> Result<Vec<BiasSample>, PipelineError> {
        let path = self.corpus_path(Split::Train);
        if !path.exists() {
            return Err(PipelineError::MissingPrerequisite {
                stage: stage.name().into(),
                missing: format!("corpus file {} (run gen first)", path.display()),
            });
        }
        Ok(load_corpus(&path)?)
    }

    fn save_stage(
        &self,
        seed: u64,
        stage: &str,
        outcome: &StageOutcome,
        vocab: &Vocab,
    ) -> Result<(), PipelineError> {
        let dir = self.seed_dir(seed);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Checkpoint {
            params: outcome.params.clone(),
            vocab: vocab.clone(),
            adam: Some(outcome.adam.clone()),
            rng: outcome.final_rng.clone(),
            stage: stage.to_string(),
            config_fingerprint: self.fingerprint(),
            train_seed: seed,
        }
        .save(&self.checkpoint_path(seed, stage))?;
        let log_path = dir.join(format!("{stage}_log.json"));
        let mut log = serde_json::to_string_pretty(&outcome.log).expect("log serialization");
        log.push('\n');
        write_atomic(&log_path, log.as_bytes())?;
        Ok(())
    }

    fn save_base(&self, seed: u64, params: &LmParams, vocab: &Vocab) -> Result<(), PipelineError> {
        let dir = self.seed_dir(seed);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Checkpoint {
            params: params.clone(),
            vocab: vocab.clone(),
            adam: None,
            rng: None,
            stage: "base".to_string(),
            config_fingerprint: self.fingerprint(),
            train_seed: seed,
        }
        .save(&self.checkpoint_path(seed, "base"))
        .map_err(PipelineError::from)
    }

    /// Runs one training stage for every configured seed, writing checkpoints
    /// and per-epoch logs.
    pub fn cmd_train(&self, stage: TrainStage) -> Result<Vec<TrainLog>, PipelineError> {
        self.validate()?;
        let ctx = self.context()?;
        self.write_run_manifest(&ctx)?;
        let corpus = self.load_train_corpus(stage)?;
        let mut logs = Vec::new();
        for &seed in &self.seeds {
            let cfg = self.to_train_config(seed);
            let outcome = match stage {
                TrainStage::Sft => {
                    let base = self.base_params(&ctx.vocab, seed)?;
                    self.save_base(seed, &base, &ctx.vocab)?;
                    run_stage1(&base, &corpus, &ctx.table, &ctx.spec, &ctx.vocab, &cfg)?
                }
                TrainStage::Instruction => {
                    let base = self.base_params(&ctx.vocab, seed)?;
                    self.save_base(seed, &base, &ctx.vocab)?;
                    run_instruction_tuning(&base, &corpus, &ctx.spec, &ctx.vocab, &cfg)?
                }
                TrainStage::Dpo => {
                    let sft_path = self.checkpoint_path(seed, "sft");
                    if !sft_path.exists() {
                        return Err(PipelineError::MissingPrerequisite {
                            stage: "dpo".into(),
                            missing: format!("sft checkpoint {}", sft_path.display()),
                        });
                    }
                    let sft = Checkpoint::load(&sft_path)?;
                    self.check_checkpoint(&sft, seed, &sft_path)?;
                    let outcome =
                        run_stage2(&sft.params, &corpus, &ctx.spec, &ctx.vocab, &cfg)?;
                    save_pairs(&self.seed_dir(seed).join("pairs.jsonl"), &outcome.pairs)?;
                    outcome
                }
            };
            self.save_stage(seed, stage.name(), &outcome, &ctx.vocab)?;
            logs.push(outcome.log);
        }
        Ok(logs)
    }

    fn check_checkpoint(
        &self,
        ckpt: &Checkpoint,
        seed: u64,
        path: &Path,
    ) -> Result<(), PipelineError> {
        let mismatch = |message: String| PipelineError::Validation(format!(
            "checkpoint {}: {message}",
            path.display()
        ));
        if ckpt.config_fingerprint != self.fingerprint() {
            return Err(mismatch(format!(
                "config fingerprint {} does not match current config {}",
                ckpt.config_fingerprint,
                self.fingerprint()
            )));
        }
        if ckpt.train_seed != seed {
            return Err(mismatch(format!(
                "trained with seed {}, expected {seed}",
                ckpt.train_seed
            )));
        }
        let c = &ckpt.params.config;
        if c.n_layers != self.model.n_layers
            || c.d_model != self.model.d_model
            || c.n_heads != self.model.n_heads
            || c.d_ff != self.model.d_ff
            || c.context_len != self.model.context_len
        {
            return Err(mismatch("embedded model config differs from current config".into()));
        }
        Ok(())
    }

    fn stage_for_mode(mode: AblationMode) -> &'static str {
        match mode {
            AblationMode::Base | AblationMode::WithRule => "base",
            AblationMode::InstructionTuning => "instruction",
            AblationMode::CotSft => "sft",
            AblationMode::CotDpo => "dpo",
        }
    }

    /// Evaluates every configured (dataset, mode, seed) cell and writes the
    /// structured report plus the fixed-width table. The embedded self-checks
    /// gate the result: a failure surfaces as an error (nonzero exit).
    pub fn cmd_eval(&self) -> Result<EvalReport, PipelineError> {
        self.validate()?;
        let ctx = self.context()?;
        let heldout_path = self.corpus_path(Split::HeldOut);
        if !heldout_path.exists() {
            return Err(PipelineError::MissingPrerequisite {
                stage: "eval".into(),
                missing: format!("corpus file {} (run gen first)", heldout_path.display()),
            });
        }
        let mut datasets = vec![("synthetic_heldout".to_string(), load_corpus(&heldout_path)?)];
        for path in &self.external_datasets {
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            datasets.push((name, ingest_external(path)?));
        }

        // load the needed checkpoints for every seed
        let mut loaded: Vec<(u64, Vec<(AblationMode, LmParams)>)> = Vec::new();
        for &seed in &self.seeds {
            let mut by_mode = Vec::new();
            for &mode in &self.modes {
                let stage = Self::stage_for_mode(mode);
                let path = self.checkpoint_path(seed, stage);
                if !path.exists() {
                    return Err(EvalError::MissingCheckpoint(mode).into());
                }
                let ckpt = Checkpoint::load(&path)?;
                self.check_checkpoint(&ckpt, seed, &path)?;
                by_mode.push((mode, ckpt.params));
            }
            loaded.push((seed, by_mode));
        }

        // embedded invariant checks gate the run
        let first = &loaded[0].1[0].1;
        self_check(first)?;

        let sets: Vec<SeedCheckpoints> = loaded
            .iter()
            .map(|(seed, by_mode)| SeedCheckpoints {
                seed: *seed,
                by_mode: by_mode.iter().map(|(m, p)| (*m, p)).collect(),
            })
            .collect();
        let report = run_ablation(
            &sets,
            &datasets,
            &ctx.vocab,
            &ctx.spec,
            &self.modes,
            self.train.max_new,
            self.of_denominator,
            &self.fingerprint(),
        )?;

        let dir = self.run_dir();
        let mut json = serde_json::to_string_pretty(&report).expect("report serialization");
        json.push('\n');
        write_atomic(&dir.join("report.json"), json.as_bytes())?;
        let table = format!(
            "config {}\nseeds {:?}\n\n{}",
            &self.fingerprint()[..12],
            self.seeds,
            render_table(&report)
        );
        write_atomic(&dir.join("report.txt"), table.as_bytes())?;
        Ok(report)
    }

    /// gen -> sft -> dpo -> instruction -> eval, in one call.
    pub fn run_full(&self) -> Result<EvalReport, PipelineError> {
        self.cmd_gen()?;
        self.cmd_train(TrainStage::Sft)?;
        self.cmd_train(TrainStage::Dpo)?;
        self.cmd_train(TrainStage::Instruction)?;
        self.cmd_eval()
    }
}

/// Temp-file-and-rename write; concurrent readers never see a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let a = PipelineConfig::default();
        let b = PipelineConfig::default();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let mut c = PipelineConfig::default();
        c.train.tau = 1.3;
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn config_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let cfg = PipelineConfig::default();
        cfg.save(&path).unwrap();
        let loaded = PipelineConfig::load(&path).unwrap();
        assert_eq!(loaded, cfg);
        assert_eq!(loaded.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = PipelineConfig::default();
        cfg.seeds.clear();
        assert!(matches!(cfg.validate(), Err(PipelineError::Validation(_))));

        let mut cfg = PipelineConfig::default();
        cfg.model.n_heads = 5;
        assert!(cfg.validate().is_err());

        let mut cfg = PipelineConfig::default();
        cfg.spec_file = Some(PathBuf::from("/nonexistent/spec.jsonl"));
        assert!(cfg.validate().is_err());

        let mut cfg = PipelineConfig::default();
        cfg.train.tau = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn run_dir_is_named_by_config_hash() {
        let cfg = PipelineConfig::default();
        let dir = cfg.run_dir();
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        assert!(name.starts_with("run-"));
        assert_eq!(name.len(), 4 + 12);
    }
}
