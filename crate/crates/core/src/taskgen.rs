//! Synthetic bias micro-benchmark: a template table with a rule-based
//! labeling oracle, an oracle teacher that emits Step-structured reasoning
//! traces, and ingestion of external datasets in the shared record format.
//!
//! The implicit-difficulty subset is built so that surface word statistics
//! cannot settle the label: negative trait words appear in biased and
//! unbiased templates alike (counter-speech, quotation), and two template
//! pairs are word-for-word anagrams of each other with opposite labels, so
//! any bag-of-words shortcut is forced below perfect accuracy while the
//! structural oracle stays exact.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fairspec::{parse_trace, render_trace, ReasoningTrace, SpecDocument, Verdict};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error)]
pub enum TaskgenError {
    #[error("template space exhausted: needed {needed} distinct samples, produced {produced}")]
    InsufficientTemplates { needed: usize, produced: usize },
    #[error("text does not match any template: {0:?}")]
    UnknownTemplate(String),
    #[error("{path}: {}", format_issues(.issues))]
    Schema {
        path: String,
        issues: Vec<(usize, String)>,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn format_issues(issues: &[(usize, String)]) -> String {
    issues
        .iter()
        .map(|(line, msg)| format!("line {line}: {msg}"))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::HeldOut => "heldout",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Explicit,
    Implicit,
}

/// One labeled input. `template_id` is present for synthetic samples and
/// ties the label to the rule table; ingested external records may omit it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasSample {
    pub text: String,
    pub label: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<String>,
    pub group: String,
    pub source: String,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotKind {
    Group,
    Neg,
    Pos,
    Activity,
}

#[derive(Debug, Clone)]
enum Part {
    Lit(String),
    Slot(SlotKind),
}

/// A sentence pattern with slots, its fixed label, difficulty tag and the
/// specification standard the teacher cites for it.
#[derive(Debug, Clone)]
pub struct BiasTemplate {
    pub id: &'static str,
    pub pattern: &'static str,
    pub label: Verdict,
    pub difficulty: Difficulty,
    pub standard_id: u32,
    /// Step-1 phrasings the teacher draws from (structure + intent reading).
    pub observations: [&'static str; 4],
}

pub struct TemplateTable {
    pub templates: Vec<BiasTemplate>,
    pub groups: Vec<&'static str>,
    pub neg_traits: Vec<&'static str>,
    pub pos_traits: Vec<&'static str>,
    pub activities: Vec<&'static str>,
}

const RULE_PHRASINGS: [&str; 4] = [
    "Standard {id} applies, so the text is {label}.",
    "Under Standard {id} the text counts as {label}.",
    "Standard {id} settles it: the text is {label}.",
    "Applying Standard {id}, the verdict is {label}.",
];

impl Default for TemplateTable {
    fn default() -> Self {
        Self::default_table()
    }
}

impl TemplateTable {
    pub fn default_table() -> Self {
        let t = |id, pattern, label, difficulty, standard_id, observations| BiasTemplate {
            id,
            pattern,
            label,
            difficulty,
            standard_id,
            observations,
        };
        use Difficulty::{Explicit, Implicit};
        use Verdict::{Biased, Unbiased};
        TemplateTable {
            templates: vec![
                t(
                    "gen_all",
                    "All {group} are {neg}.",
                    Biased,
                    Explicit,
                    1,
                    [
                        "The text puts a negative label on every member of the group.",
                        "It claims a bad trait for all members without exception.",
                        "The sentence sweeps the whole group under one negative label.",
                        "A universal negative claim targets the entire group.",
                    ],
                ),
                t(
                    "gen_always",
                    "Those {group} are always {neg}.",
                    Biased,
                    Explicit,
                    1,
                    [
                        "The word always extends the negative claim to every member.",
                        "It treats the bad trait as permanent for the whole group.",
                        "The sentence allows no exception to the negative claim.",
                        "A blanket negative claim covers the group at all times.",
                    ],
                ),
                t(
                    "gen_most",
                    "Most {group} are {neg}.",
                    Biased,
                    Explicit,
                    2,
                    [
                        "The text assigns a bad trait to the majority of the group.",
                        "It condemns most members of the group at once.",
                        "A majority claim spreads the negative trait over the group.",
                        "The sentence faults most of the group with one word.",
                    ],
                ),
                t(
                    "fake_counter",
                    "Not all {group} are {pos}, they are {neg}.",
                    Biased,
                    Implicit,
                    1,
                    [
                        "The text denies the group a good trait and then assigns a bad one.",
                        "After rejecting praise it pins a negative label on the group.",
                        "The second clause turns the sentence into a group insult.",
                        "It ends by claiming the members themselves are the bad trait.",
                    ],
                ),
                t(
                    "some_most_neg",
                    "Some {group} are {pos} but most are {neg}.",
                    Biased,
                    Implicit,
                    2,
                    [
                        "The text concedes a few exceptions but condemns the majority.",
                        "Praise for some is used to fault most of the group.",
                        "The sentence grants little and then blames the majority.",
                        "Its main claim is that most members carry the bad trait.",
                    ],
                ),
                t(
                    "endorse_quote",
                    "He said \"{group} are {neg}\" and I agree.",
                    Biased,
                    Implicit,
                    5,
                    [
                        "The speaker quotes an insult and then agrees with it.",
                        "Agreement with the quoted insult adopts it as a claim.",
                        "The quotation is repeated only to endorse it.",
                        "By agreeing, the speaker makes the insult their own.",
                    ],
                ),
                t(
                    "endorse_claim",
                    "Saying {group} are {neg} is wrong, but honestly it is true.",
                    Biased,
                    Implicit,
                    5,
                    [
                        "The text pretends to reject the insult yet calls it true.",
                        "The second clause endorses the very claim it disowned.",
                        "Calling the insult true cancels the earlier rejection.",
                        "It defends the insult behind a show of disapproval.",
                    ],
                ),
                t(
                    "rhet_question",
                    "Why are {group} always so {neg}?",
                    Biased,
                    Implicit,
                    1,
                    [
                        "The question presumes the whole group has the bad trait.",
                        "It asks for a cause while asserting the negative claim.",
                        "The premise of the question is a blanket insult.",
                        "A loaded question smuggles in the negative generalization.",
                    ],
                ),
                t(
                    "counter_anagram",
                    "Not all {group} are {neg}, they are {pos}.",
                    Unbiased,
                    Implicit,
                    3,
                    [
                        "The text rejects a negative label and offers a positive one.",
                        "It pushes back on the insult and praises the group instead.",
                        "The sentence corrects a bad claim about the group.",
                        "Denying the insult, it credits the members with a good trait.",
                    ],
                ),
                t(
                    "some_most_pos",
                    "Some {group} are {neg} but most are {pos}.",
                    Unbiased,
                    Implicit,
                    6,
                    [
                        "The text admits a few bad cases but credits the majority.",
                        "Its main claim is positive and limited to no one unfairly.",
                        "A qualified concession is followed by praise for most.",
                        "The sentence keeps the negative claim to a small part.",
                    ],
                ),
                t(
                    "quote_disagree",
                    "He said \"{group} are {neg}\" and I disagree.",
                    Unbiased,
                    Implicit,
                    4,
                    [
                        "The speaker quotes an insult and then rejects it.",
                        "The quotation is repeated only to be disputed.",
                        "Disagreement distances the speaker from the quoted claim.",
                        "The insult appears solely inside a rejected quotation.",
                    ],
                ),
                t(
                    "counter_wrong",
                    "Saying {group} are {neg} is wrong and unfair.",
                    Unbiased,
                    Implicit,
                    3,
                    [
                        "The text calls the insult wrong, which is counter speech.",
                        "It condemns the negative claim rather than the group.",
                        "The sentence defends the group against the insult.",
                        "Naming the claim unfair rejects the bias outright.",
                    ],
                ),
                t(
                    "quote_report",
                    "The report quoted \"{group} are {neg}\" and criticized it.",
                    Unbiased,
                    Implicit,
                    4,
                    [
                        "The insult is quoted only to report and criticize it.",
                        "A report repeats the claim in order to fault it.",
                        "The quotation serves documentation, not endorsement.",
                        "Criticism of the quoted insult marks this as reporting.",
                    ],
                ),
                t(
                    "rhet_defense",
                    "Why do people say {group} are {neg} when it is not fair?",
                    Unbiased,
                    Implicit,
                    3,
                    [
                        "The question challenges the insult as unfair.",
                        "It objects to the negative claim rather than making it.",
                        "The speaker questions why the unfair claim persists.",
                        "The question sides with the group against the insult.",
                    ],
                ),
                t(
                    "some_neg",
                    "Some {group} are {neg}.",
                    Unbiased,
                    Explicit,
                    6,
                    [
                        "The claim is limited to some members, not the whole group.",
                        "A qualified statement stops short of a generalization.",
                        "The sentence leaves most of the group out of the claim.",
                        "Restricting the claim to some keeps it from being a label.",
                    ],
                ),
                t(
                    "neutral",
                    "Many {group} enjoy {activity} after work.",
                    Unbiased,
                    Explicit,
                    7,
                    [
                        "The text states a neutral fact about the group.",
                        "Nothing negative is claimed about the members.",
                        "The sentence reports a pastime, not a judgment.",
                        "A positive everyday observation carries no bias.",
                    ],
                ),
            ],
            groups: vec![
                "accountants",
                "architects",
                "bakers",
                "cyclists",
                "drummers",
                "engineers",
                "farmers",
                "gamers",
                "lawyers",
                "nurses",
                "painters",
                "plumbers",
            ],
            neg_traits: vec![
                "lazy",
                "careless",
                "selfish",
                "rude",
                "dishonest",
                "sloppy",
                "arrogant",
                "unreliable",
            ],
            pos_traits: vec![
                "hardworking",
                "careful",
                "generous",
                "polite",
                "honest",
                "tidy",
                "humble",
                "reliable",
            ],
            activities: vec!["chess", "hiking", "reading", "gardening", "swimming", "music"],
        }
    }

    pub fn by_id(&self, id: &str) -> Option<&BiasTemplate> {
        self.templates.iter().find(|t| t.id == id)
    }

    fn lexicon(&self, kind: SlotKind) -> &[&'static str] {
        match kind {
            SlotKind::Group => &self.groups,
            SlotKind::Neg => &self.neg_traits,
            SlotKind::Pos => &self.pos_traits,
            SlotKind::Activity => &self.activities,
        }
    }

    fn parts(pattern: &str) -> Vec<Part> {
        let mut parts = Vec::new();
        let mut rest = pattern;
        while let Some(open) = rest.find('{') {
            if open > 0 {
                parts.push(Part::Lit(rest[..open].to_string()));
            }
            let close = rest[open..].find('}').expect("unterminated slot") + open;
            let kind = match &rest[open + 1..close] {
                "group" => SlotKind::Group,
                "neg" => SlotKind::Neg,
                "pos" => SlotKind::Pos,
                "activity" => SlotKind::Activity,
                other => panic!("unknown slot {other:?}"),
            };
            parts.push(Part::Slot(kind));
            rest = &rest[close + 1..];
        }
        if !rest.is_empty() {
            parts.push(Part::Lit(rest.to_string()));
        }
        parts
    }

    fn instantiate(&self, template: &BiasTemplate, picks: &[usize]) -> (String, String) {
        let mut text = String::new();
        let mut group = String::new();
        let mut slot_no = 0;
        for part in Self::parts(template.pattern) {
            match part {
                Part::Lit(s) => text.push_str(&s),
                Part::Slot(kind) => {
                    let lex = self.lexicon(kind);
                    let value = lex[picks[slot_no] % lex.len()];
                    if kind == SlotKind::Group {
                        group = value.to_string();
                    }
                    text.push_str(value);
                    slot_no += 1;
                }
            }
        }
        (text, group)
    }

    fn slot_kinds(pattern: &str) -> Vec<SlotKind> {
        Self::parts(pattern)
            .into_iter()
            .filter_map(|p| match p {
                Part::Slot(k) => Some(k),
                Part::Lit(_) => None,
            })
            .collect()
    }

    /// Structural match of `x` against one pattern: literals must align and
    /// every captured slot word must belong to the slot's lexicon.
    fn match_pattern(&self, pattern: &str, x: &str) -> Option<Vec<String>> {
        let mut captures = Vec::new();
        let mut rest = x;
        for part in Self::parts(pattern) {
            match part {
                Part::Lit(lit) => {
                    rest = rest.strip_prefix(&lit)?;
                }
                Part::Slot(kind) => {
                    let end = rest
                        .char_indices()
                        .find(|(_, c)| !c.is_alphanumeric())
                        .map(|(i, _)| i)
                        .unwrap_or(rest.len());
                    let word = &rest[..end];
                    if !self.lexicon(kind).contains(&word) {
                        return None;
                    }
                    captures.push(word.to_string());
                    rest = &rest[end..];
                }
            }
        }
        rest.is_empty().then_some(captures)
    }

    /// The template that generated `x`, if any.
    pub fn match_template(&self, x: &str) -> Option<&BiasTemplate> {
        self.templates
            .iter()
            .find(|t| self.match_pattern(t.pattern, x).is_some())
    }

    /// Rule-table label for a generated string.
    pub fn oracle_label(&self, x: &str) -> Result<Verdict, TaskgenError> {
        self.match_template(x)
            .map(|t| t.label)
            .ok_or_else(|| TaskgenError::UnknownTemplate(x.to_string()))
    }

    fn distinct_instantiations(&self, template: &BiasTemplate) -> usize {
        Self::slot_kinds(template.pattern)
            .iter()
            .map(|&k| self.lexicon(k).len())
            .product()
    }

    fn generate_split(
        &self,
        n: usize,
        split: Split,
        rng: &mut rand_chacha::ChaCha8Rng,
        used: &mut HashSet<String>,
        out: &mut Vec<BiasSample>,
    ) -> Result<(), TaskgenError> {
        let biased: Vec<&BiasTemplate> = self
            .templates
            .iter()
            .filter(|t| t.label == Verdict::Biased)
            .collect();
        let unbiased: Vec<&BiasTemplate> = self
            .templates
            .iter()
            .filter(|t| t.label == Verdict::Unbiased)
            .collect();
        for i in 0..n {
            let pool = if i % 2 == 0 { &biased } else { &unbiased };
            let mut attempts = 0;
            loop {
                attempts += 1;
                if attempts > 200 + 20 * n {
                    return Err(TaskgenError::InsufficientTemplates {
                        needed: n,
                        produced: out.len(),
                    });
                }
                let template = pool[rng.gen_range(0..pool.len())];
                let n_slots = Self::slot_kinds(template.pattern).len();
                let picks: Vec<usize> = (0..n_slots).map(|_| rng.gen_range(0..usize::MAX)).collect();
                let (text, group) = self.instantiate(template, &picks);
                if used.insert(text.clone()) {
                    out.push(BiasSample {
                        text,
                        label: template.label,
                        template_id: Some(template.id.to_string()),
                        group,
                        source: "synthetic".to_string(),
                        split,
                    });
                    break;
                }
            }
        }
        Ok(())
    }

    /// Generates `n_train + n_heldout` distinct samples, each split balanced
    /// to within one sample of 50/50, deterministically per seed.
    pub fn generate_corpus(
        &self,
        n_train: usize,
        n_heldout: usize,
        seed: u64,
    ) -> Result<Vec<BiasSample>, TaskgenError> {
        assert!(n_train >= 1 && n_heldout >= 1, "both splits must be non-empty");
        let space: usize = self
            .templates
            .iter()
            .map(|t| self.distinct_instantiations(t))
            .sum();
        if n_train + n_heldout > space {
            return Err(TaskgenError::InsufficientTemplates {
                needed: n_train + n_heldout,
                produced: 0,
            });
        }
        let mut rng = stream_rng(seed, Stream::CorpusGen, 0);
        let mut used = HashSet::new();
        let mut out = Vec::with_capacity(n_train + n_heldout);
        self.generate_split(n_train, Split::Train, &mut rng, &mut used, &mut out)?;
        self.generate_split(n_heldout, Split::HeldOut, &mut rng, &mut used, &mut out)?;
        Ok(out)
    }

    /// Emits `k` reasoning traces for one sample: per-template observation
    /// phrasings plus a rule step citing the template's standard, with
    /// distinct phrasing combinations drawn from a seeded pool. Each trace is
    /// independently corrupted with probability `noise_rate` (verdict flip or
    /// step swap); uncorrupted traces carry the ground-truth verdict.
    pub fn teacher_generate(
        &self,
        sample: &BiasSample,
        spec: &SpecDocument,
        k: usize,
        noise_rate: f64,
        seed: u64,
    ) -> Result<Vec<ReasoningTrace>, TaskgenError> {
        assert!(k >= 1, "k must be >= 1");
        assert!((0.0..1.0).contains(&noise_rate), "noise_rate must be in [0, 1)");
        let template = match &sample.template_id {
            Some(id) => self
                .by_id(id)
                .ok_or_else(|| TaskgenError::UnknownTemplate(id.clone()))?,
            None => self
                .match_template(&sample.text)
                .ok_or_else(|| TaskgenError::UnknownTemplate(sample.text.clone()))?,
        };
        // the standard must exist in the active specification; default table
        // and default document are designed together
        debug_assert!(
            spec.standards.iter().any(|s| s.id == template.standard_id),
            "template {} cites missing standard {}",
            template.id,
            template.standard_id
        );
        let mut content_rng = stream_rng(seed, Stream::TeacherTrace, 0);
        // corruption draws come from a separate stream so the underlying
        // traces are identical across noise settings for the same seed
        let mut noise_rng = stream_rng(seed, Stream::TeacherNoise, 0);

        let mut combos: Vec<(usize, usize)> = (0..template.observations.len())
            .flat_map(|o| (0..RULE_PHRASINGS.len()).map(move |r| (o, r)))
            .collect();
        combos.shuffle(&mut content_rng);

        let mut traces = Vec::with_capacity(k);
        for i in 0..k {
            let (obs_idx, rule_idx) = combos[i % combos.len()];
            let mut verdict = sample.label;
            let mut steps = vec![
                template.observations[obs_idx].to_string(),
                RULE_PHRASINGS[rule_idx]
                    .replace("{id}", &template.standard_id.to_string())
                    .replace("{label}", sample.label.as_str()),
            ];
            if noise_rng.gen::<f64>() < noise_rate {
                if noise_rng.gen::<bool>() {
                    verdict = verdict.flipped();
                } else {
                    steps.swap(0, 1);
                }
            }
            let raw = render_trace(&steps, verdict).expect("teacher phrasings are marker-free");
            traces.push(parse_trace(&raw));
        }
        Ok(traces)
    }

    /// Keeps drawing teacher traces until `k` correct ones exist or the retry
    /// budget of `5 * k` draws is spent, then returns what exists.
    pub fn collect_correct_traces(
        &self,
        sample: &BiasSample,
        spec: &SpecDocument,
        k: usize,
        noise_rate: f64,
        seed: u64,
    ) -> Result<Vec<ReasoningTrace>, TaskgenError> {
        let mut correct = Vec::new();
        let mut drawn = 0;
        let mut round = 0;
        while correct.len() < k && drawn < 5 * k {
            let batch = k.min(5 * k - drawn);
            let traces = self.teacher_generate(
                sample,
                spec,
                batch,
                noise_rate,
                crate::rng::derive_seed(seed, Stream::TeacherTrace, round),
            )?;
            drawn += batch;
            round += 1;
            let (mut good, _) = filter_correct(traces, sample.label);
            correct.append(&mut good);
        }
        correct.truncate(k);
        Ok(correct)
    }

    /// Closes the vocabulary over everything the pipeline will tokenize, in
    /// the exact contexts it will be tokenized in: full assembled prompts for
    /// every slot value in every template, and fully rendered teacher traces
    /// (the piece for a word differs depending on whether a space precedes
    /// it, so context matters).
    pub fn vocab_texts(&self, spec: &SpecDocument) -> Vec<String> {
        let mut out = Vec::new();
        for template in &self.templates {
            let n_slots = Self::slot_kinds(template.pattern).len();
            let max_lex = [
                self.groups.len(),
                self.neg_traits.len(),
                self.pos_traits.len(),
                self.activities.len(),
            ]
            .into_iter()
            .max()
            .unwrap();
            for i in 0..max_lex {
                let picks = vec![i; n_slots];
                let (x, _) = self.instantiate(template, &picks);
                out.push(
                    spec.assemble_prompt(&x, crate::fairspec::PromptMode::WithSpec)
                        .expect("template instantiations are non-empty"),
                );
            }
            for obs in template.observations {
                for rule in RULE_PHRASINGS {
                    for label in [Verdict::Biased, Verdict::Unbiased] {
                        let rule_text = rule
                            .replace("{id}", &template.standard_id.to_string())
                            .replace("{label}", label.as_str());
                        out.push(
                            render_trace(&[obs.to_string(), rule_text], label)
                                .expect("teacher phrasings are marker-free"),
                        );
                    }
                }
            }
        }
        out
    }
}

/// Partitions traces into (verdict == truth, everything else). Traces whose
/// verdict failed to parse land on the incorrect side.
pub fn filter_correct(
    traces: Vec<ReasoningTrace>,
    y_star: Verdict,
) -> (Vec<ReasoningTrace>, Vec<ReasoningTrace>) {
    traces
        .into_iter()
        .partition(|t| t.verdict == Some(y_star))
}

/// Record layout shared by corpus files and external datasets.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    text: String,
    label: String,
    #[serde(default)]
    template_id: Option<String>,
    #[serde(default)]
    group: String,
    #[serde(default)]
    source: String,
    #[serde(default)]
    split: Option<Split>,
}

pub fn save_corpus(path: &Path, samples: &[BiasSample]) -> Result<(), TaskgenError> {
    let mut out = String::new();
    for s in samples {
        let record = Record {
            text: s.text.clone(),
            label: s.label.as_str().to_string(),
            template_id: s.template_id.clone(),
            group: s.group.clone(),
            source: s.source.clone(),
            split: Some(s.split),
        };
        out.push_str(&serde_json::to_string(&record).expect("record serialization"));
        out.push('\n');
    }
    let tmp = path.with_extension("tmp");
    let io_err = |e: std::io::Error| TaskgenError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    fs::write(&tmp, out).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

fn parse_records(path: &Path, force_split: Option<Split>) -> Result<Vec<BiasSample>, TaskgenError> {
    let text = fs::read_to_string(path).map_err(|e| TaskgenError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut samples = Vec::new();
    let mut issues = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line_no = no + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                issues.push((line_no, e.to_string()));
                continue;
            }
        };
        let label = match record.label.parse::<Verdict>() {
            Ok(v) => v,
            Err(()) => {
                issues.push((
                    line_no,
                    format!("label {:?} is not \"biased\" or \"unbiased\"", record.label),
                ));
                continue;
            }
        };
        if record.text.is_empty() {
            issues.push((line_no, "empty text".to_string()));
            continue;
        }
        samples.push(BiasSample {
            text: record.text,
            label,
            template_id: record.template_id,
            group: record.group,
            source: if record.source.is_empty() {
                path.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            } else {
                record.source
            },
            split: force_split.or(record.split).unwrap_or(Split::HeldOut),
        });
    }
    if issues.is_empty() {
        Ok(samples)
    } else {
        Err(TaskgenError::Schema {
            path: path.display().to_string(),
            issues,
        })
    }
}

/// Loads a corpus file produced by `save_corpus`, keeping recorded splits.
pub fn load_corpus(path: &Path) -> Result<Vec<BiasSample>, TaskgenError> {
    parse_records(path, None)
}

/// Ingests an external dataset for evaluation. All records become held-out
/// samples; any malformed line fails the whole file, with line numbers.
pub fn ingest_external(path: &Path) -> Result<Vec<BiasSample>, TaskgenError> {
    parse_records(path, Some(Split::HeldOut))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn table() -> TemplateTable {
        TemplateTable::default_table()
    }

    fn spec() -> SpecDocument {
        SpecDocument::default_document()
    }

    #[test]
    fn corpus_is_balanced_distinct_and_deterministic() {
        let samples = table().generate_corpus(200, 100, 7).unwrap();
        assert_eq!(samples.len(), 300);
        let texts: HashSet<&str> = samples.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts.len(), 300, "samples must be pairwise distinct");
        for split in [Split::Train, Split::HeldOut] {
            let in_split: Vec<_> = samples.iter().filter(|s| s.split == split).collect();
            let biased = in_split.iter().filter(|s| s.label == Verdict::Biased).count();
            let frac = biased as f64 / in_split.len() as f64;
            assert!((0.45..=0.55).contains(&frac), "{split}: biased fraction {frac}");
        }
        let again = table().generate_corpus(200, 100, 7).unwrap();
        assert_eq!(samples, again);
        let other_seed = table().generate_corpus(200, 100, 8).unwrap();
        assert_ne!(samples, other_seed);
    }

    #[test]
    fn exhausted_template_space_is_an_error() {
        match table().generate_corpus(100_000, 1, 3) {
            Err(TaskgenError::InsufficientTemplates { .. }) => {}
            other => panic!("expected InsufficientTemplates, got {other:?}"),
        }
    }

    #[test]
    fn oracle_labels_match_rule_table() {
        let t = table();
        assert_eq!(t.oracle_label("All nurses are lazy.").unwrap(), Verdict::Biased);
        assert_eq!(
            t.oracle_label("Saying nurses are lazy is wrong and unfair.").unwrap(),
            Verdict::Unbiased
        );
        assert!(matches!(
            t.oracle_label("completely free-form text"),
            Err(TaskgenError::UnknownTemplate(_))
        ));
        // lexicon membership is part of the match
        assert!(t.oracle_label("All wizards are lazy.").is_err());
    }

    #[test]
    fn oracle_is_consistent_with_every_generated_sample() {
        let t = table();
        for sample in t.generate_corpus(120, 60, 11).unwrap() {
            assert_eq!(t.oracle_label(&sample.text).unwrap(), sample.label, "{}", sample.text);
        }
    }

    #[test]
    fn anagram_pairs_share_their_word_bags() {
        // the property that defeats unigram shortcuts
        let t = table();
        for (a, b) in [("fake_counter", "counter_anagram"), ("some_most_neg", "some_most_pos")] {
            let ta = t.by_id(a).unwrap();
            let tb = t.by_id(b).unwrap();
            assert_ne!(ta.label, tb.label);
            // same slot values in swapped positions => same sorted word list
            let (text_a, _) = t.instantiate(ta, &[0, 1, 2]);
            let (text_b, _) = t.instantiate(tb, &[0, 2, 1]);
            let sorted = |s: &str| {
                let mut w: Vec<String> =
                    crate::lm::segment(s).iter().map(|p| p.trim().to_string()).collect();
                w.sort();
                w
            };
            assert_eq!(sorted(&text_a), sorted(&text_b), "{text_a} vs {text_b}");
        }
    }

    #[test]
    fn teacher_noiseless_traces_are_sound_and_diverse() {
        let t = table();
        let sample = &t.generate_corpus(4, 1, 5).unwrap()[0];
        let traces = t.teacher_generate(sample, &spec(), 4, 0.0, 99).unwrap();
        assert_eq!(traces.len(), 4);
        let mut firsts = HashSet::new();
        for trace in &traces {
            assert_eq!(trace.verdict, Some(sample.label));
            assert_eq!(trace.steps.len(), 2);
            firsts.insert((trace.steps[0].clone(), trace.steps[1].clone()));
        }
        assert_eq!(firsts.len(), 4, "phrasing combinations must be distinct");
        let again = t.teacher_generate(sample, &spec(), 4, 0.0, 99).unwrap();
        assert_eq!(traces, again);
        // traces cite the template's standard
        let std_id = t.by_id(sample.template_id.as_deref().unwrap()).unwrap().standard_id;
        assert!(traces[0].steps[1].contains(&format!("Standard {std_id}")));
    }

    #[test]
    fn teacher_corruption_rate_is_binomial() {
        let t = table();
        let sample = &t.generate_corpus(2, 1, 6).unwrap()[0];
        let clean = t.teacher_generate(sample, &spec(), 1000, 0.0, 123).unwrap();
        let noisy = t.teacher_generate(sample, &spec(), 1000, 0.999, 123).unwrap();
        let corrupted = clean
            .iter()
            .zip(&noisy)
            .filter(|(a, b)| a.raw_text != b.raw_text)
            .count();
        // 99% binomial band for Bin(1000, 0.999), computed from the exact
        // pmf of the failure count
        let (lo, hi) = binomial_99_band(1000, 0.999);
        assert!(
            corrupted >= lo && corrupted <= hi,
            "corrupted {corrupted} outside [{lo}, {hi}]"
        );
    }

    /// 99% band for the corrupted count under Bin(n, p): failures follow
    /// Bin(n, 1-p), so find the smallest y with P(failures <= y) >= 0.995.
    /// The upper end is n because P(zero failures) is far above 0.5%.
    fn binomial_99_band(n: usize, p: f64) -> (usize, usize) {
        let q = 1.0 - p;
        let mut pmf = (1.0 - q).powi(n as i32);
        let mut cdf = pmf;
        let mut y = 0usize;
        while y < n && cdf < 0.995 {
            y += 1;
            pmf *= (n - y + 1) as f64 / y as f64 * q / (1.0 - q);
            cdf += pmf;
        }
        (n - y, n)
    }

    #[test]
    fn filter_correct_partitions_exhaustively() {
        let biased = parse_trace("Final Answer: biased");
        let unbiased = parse_trace("Final Answer: unbiased");
        let broken = parse_trace("no verdict");
        let (good, bad) = filter_correct(
            vec![biased.clone(), biased.clone(), biased.clone(), unbiased],
            Verdict::Biased,
        );
        assert_eq!((good.len(), bad.len()), (3, 1));

        let (good, bad) = filter_correct(vec![broken.clone(), broken], Verdict::Biased);
        assert_eq!((good.len(), bad.len()), (0, 2));

        let (good, bad) = filter_correct(vec![], Verdict::Biased);
        assert!(good.is_empty() && bad.is_empty());
    }

    #[test]
    fn collect_correct_traces_retries_under_noise() {
        let t = table();
        let sample = &t.generate_corpus(2, 1, 14).unwrap()[0];
        let traces = t.collect_correct_traces(sample, &spec(), 4, 0.5, 77).unwrap();
        assert!(traces.len() <= 4);
        assert!(!traces.is_empty());
        for trace in &traces {
            assert_eq!(trace.verdict, Some(sample.label));
        }
        // noiseless path always fills k exactly
        let full = t.collect_correct_traces(sample, &spec(), 4, 0.0, 77).unwrap();
        assert_eq!(full.len(), 4);
    }

    #[test]
    fn ingest_accepts_well_formed_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("external.jsonl");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"text":"All nurses are lazy.","label":"biased","group":"nurses"}}"#).unwrap();
        writeln!(f, r#"{{"text":"Some nurses are lazy.","label":"unbiased"}}"#).unwrap();
        writeln!(f, r#"{{"text":"Many nurses enjoy chess after work.","label":"unbiased","source":"survey"}}"#).unwrap();
        drop(f);
        let samples = ingest_external(&path).unwrap();
        assert_eq!(samples.len(), 3);
        assert!(samples.iter().all(|s| s.split == Split::HeldOut));
        assert_eq!(samples[2].source, "survey");
        assert_eq!(samples[0].source, "external");
    }

    #[test]
    fn ingest_rejects_unknown_labels_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"text":"fine","label":"biased"}}"#).unwrap();
        writeln!(f, r#"{{"text":"bad","label":"toxic"}}"#).unwrap();
        drop(f);
        match ingest_external(&path) {
            Err(TaskgenError::Schema { issues, .. }) => {
                assert_eq!(issues.len(), 1);
                assert_eq!(issues[0].0, 2);
            }
            other => panic!("expected Schema error, got {other:?}"),
        }
    }

    #[test]
    fn ingest_empty_file_yields_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(ingest_external(&path).unwrap().is_empty());
    }

    #[test]
    fn corpus_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let samples = table().generate_corpus(10, 4, 2).unwrap();
        save_corpus(&path, &samples).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded, samples);
    }
}
