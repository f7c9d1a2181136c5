//! Fairness specification, prompt assembly and fixed-format verdict parsing.
//!
//! A specification is an ordered list of numbered standards rendered into the
//! prompt ahead of the text under judgment. Reasoning is scaffolded by
//! "Step 1.", "Step 2.", … prefixes and must end with exactly one line of the
//! form `Final Answer: biased` or `Final Answer: unbiased`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{TokenSeq, Vocab};

/// Marker that opens the verdict line. Exact match; the label after it is
/// case-insensitive.
pub const FINAL_ANSWER_MARKER: &str = "Final Answer:";
/// Reasoning cue appended to every prompt.
pub const STEP_CUE: &str = "Step 1.";
/// Tokens reserved for the completion when checking prompt length.
pub const MIN_COMPLETION_BUDGET: usize = 16;

#[derive(Debug, Error)]
pub enum FairspecError {
    #[error("prompt needs {needed} tokens but only {available} fit in the context")]
    PromptTooLong { needed: usize, available: usize },
    #[error("step {index} contains a reserved marker: {text:?}")]
    StepContainsMarker { index: usize, text: String },
    #[error("specification {path}: {message}")]
    SpecFile { path: String, message: String },
    #[error("input text must be non-empty")]
    EmptyInput,
    #[error(transparent)]
    Lm(#[from] crate::lm::LmError),
}

/// Binary judgment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Biased,
    Unbiased,
}

impl Verdict {
    pub fn flipped(self) -> Self {
        match self {
            Verdict::Biased => Verdict::Unbiased,
            Verdict::Unbiased => Verdict::Biased,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Biased => "biased",
            Verdict::Unbiased => "unbiased",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verdict {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "biased" => Ok(Verdict::Biased),
            "unbiased" => Ok(Verdict::Unbiased),
            _ => Err(()),
        }
    }
}

/// One numbered judgment rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Standard {
    pub id: u32,
    pub title: String,
    pub rule_text: String,
}

/// The loadable fairness specification document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecDocument {
    pub preamble: String,
    pub answer_format_instruction: String,
    pub standards: Vec<Standard>,
}

/// Prompt flavor: with the rendered standards block or without.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    WithSpec,
    Bare,
}

impl SpecDocument {
    /// The shipped default: seven standards covering sentence-structure
    /// analysis, intent, counter-speech and quotation handling, group
    /// generalizations and judgment criteria. Replaceable via file.
    pub fn default_document() -> Self {
        let std = |id, title: &str, rule: &str| Standard {
            id,
            title: title.to_string(),
            rule_text: rule.to_string(),
        };
        SpecDocument {
            preamble: "Judge whether the text below is biased against a group.".to_string(),
            answer_format_instruction:
                "Reason step by step, then end with one line: Final Answer: biased or Final Answer: unbiased."
                    .to_string(),
            standards: vec![
                std(1, "Sweeping claims", "A negative claim about all members of a group is biased."),
                std(2, "Majority claims", "Claiming most of a group has a bad trait is biased."),
                std(3, "Counter speech", "Rejecting or correcting an insult about a group is unbiased."),
                std(4, "Quotation", "Quoting an insult in order to report or dispute it is unbiased."),
                std(5, "Endorsement", "Agreeing with or defending an insult is biased."),
                std(6, "Qualified claims", "A claim about only some members of a group is unbiased."),
                std(7, "Neutral statements", "Neutral or positive statements about a group are unbiased."),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), FairspecError> {
        let fail = |message: String| FairspecError::SpecFile {
            path: "<memory>".into(),
            message,
        };
        if self.standards.is_empty() {
            return Err(fail("at least one standard is required".into()));
        }
        let mut last = 0;
        for s in &self.standards {
            if s.id <= last {
                return Err(fail(format!(
                    "standard ids must be unique and increasing; saw {} after {last}",
                    s.id
                )));
            }
            last = s.id;
        }
        Ok(())
    }

    fn standards_block(&self) -> String {
        let mut out = String::new();
        for s in &self.standards {
            out.push_str(&format!("Standard {}. {}: {}\n", s.id, s.title, s.rule_text));
        }
        out
    }

    /// Deterministic prompt assembly; injective in `x` for a fixed document
    /// because `x` appears verbatim between fixed delimiters.
    pub fn assemble_prompt(&self, x: &str, mode: PromptMode) -> Result<String, FairspecError> {
        if x.is_empty() {
            return Err(FairspecError::EmptyInput);
        }
        let mut prompt = String::new();
        prompt.push_str(&self.preamble);
        prompt.push('\n');
        if mode == PromptMode::WithSpec {
            prompt.push_str(&self.standards_block());
        }
        prompt.push_str("Text: ");
        prompt.push_str(x);
        prompt.push('\n');
        prompt.push_str(&self.answer_format_instruction);
        prompt.push('\n');
        prompt.push_str(STEP_CUE);
        Ok(prompt)
    }

    /// Assembles and tokenizes, enforcing the completion budget. The returned
    /// sequence starts with the begin-of-sequence marker.
    pub fn assemble_prompt_tokens(
        &self,
        x: &str,
        mode: PromptMode,
        vocab: &Vocab,
        context_len: usize,
    ) -> Result<(String, TokenSeq), FairspecError> {
        let text = self.assemble_prompt(x, mode)?;
        let encoded = vocab.encode(&text)?;
        let needed = encoded.len() + 1; // plus <bos>
        let available = context_len.saturating_sub(MIN_COMPLETION_BUDGET);
        if needed > available {
            return Err(FairspecError::PromptTooLong { needed, available });
        }
        let mut ids = Vec::with_capacity(needed);
        ids.push(vocab.bos());
        ids.extend_from_slice(&encoded.ids);
        let boundary = ids.len();
        Ok((text, TokenSeq::new(ids, boundary)?))
    }

    /// Every piece of text the document can contribute to a prompt; used to
    /// close the vocabulary over the specification.
    pub fn all_text(&self) -> Vec<String> {
        let mut out = vec![
            self.preamble.clone(),
            self.answer_format_instruction.clone(),
            self.standards_block(),
            format!("\nText: x\n{STEP_CUE}"),
        ];
        out.push(format!("{FINAL_ANSWER_MARKER} biased"));
        out.push(format!("{FINAL_ANSWER_MARKER} unbiased"));
        out
    }

    /// Loads a document from line-delimited JSON: one header object with
    /// `preamble` and `answer_format_instruction`, then one object per
    /// standard with `id`, `title`, `rule_text`. Duplicate or unordered ids
    /// are rejected.
    pub fn load(path: &Path) -> Result<Self, FairspecError> {
        let err = |message: String| FairspecError::SpecFile {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header_line) = lines.next().ok_or_else(|| err("empty file".into()))?;

        #[derive(Deserialize)]
        struct HeaderRec {
            preamble: String,
            answer_format_instruction: String,
        }
        let header: HeaderRec =
            serde_json::from_str(header_line).map_err(|e| err(format!("line 1: {e}")))?;
        let mut standards = Vec::new();
        for (no, line) in lines {
            let s: Standard = serde_json::from_str(line)
                .map_err(|e| err(format!("line {}: {e}", no + 1)))?;
            standards.push(s);
        }
        let doc = SpecDocument {
            preamble: header.preamble,
            answer_format_instruction: header.answer_format_instruction,
            standards,
        };
        doc.validate().map_err(|e| err(e.to_string()))?;
        Ok(doc)
    }

    pub fn save(&self, path: &Path) -> Result<(), FairspecError> {
        let err = |message: String| FairspecError::SpecFile {
            path: path.display().to_string(),
            message,
        };
        let mut out = serde_json::json!({
            "preamble": self.preamble,
            "answer_format_instruction": self.answer_format_instruction,
        })
        .to_string();
        out.push('\n');
        for s in &self.standards {
            out.push_str(&serde_json::to_string(s).map_err(|e| err(e.to_string()))?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| err(e.to_string()))
    }
}

/// A parsed reasoning trace. `verdict` is `None` when the raw text does not
/// contain exactly one well-formed final-answer line — an expected outcome
/// for sampled completions, recorded rather than thrown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub steps: Vec<String>,
    pub verdict: Option<Verdict>,
    pub raw_text: String,
}

impl ReasoningTrace {
    pub fn parse_failed(&self) -> bool {
        self.verdict.is_none()
    }
}

fn find_all(haystack: &str, needle: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(needle) {
        out.push(from + pos);
        from += pos + needle.len();
    }
    out
}

/// Extracts "Step i." segments (consecutive, starting at 1) and the verdict
/// from the single final-answer line. Never fails: malformed input yields
/// `verdict: None`.
pub fn parse_trace(raw: &str) -> ReasoningTrace {
    let marker_positions = find_all(raw, FINAL_ANSWER_MARKER);
    let verdict = if marker_positions.len() == 1 {
        let after = &raw[marker_positions[0] + FINAL_ANSWER_MARKER.len()..];
        let line = after.lines().next().unwrap_or("");
        Verdict::from_str(line.trim()).ok()
    } else {
        None
    };

    // step markers in increasing order, each found after the previous one
    let mut step_starts: Vec<(usize, usize)> = Vec::new(); // (marker start, content start)
    let mut from = 0;
    let mut i = 1;
    while let Some(pos) = raw[from..].find(&format!("Step {i}.")) {
        let start = from + pos;
        let content = start + format!("Step {i}.").len();
        step_starts.push((start, content));
        from = content;
        i += 1;
    }
    let content_end = marker_positions.first().copied().unwrap_or(raw.len());
    let mut steps = Vec::new();
    for (idx, &(_, content_start)) in step_starts.iter().enumerate() {
        let end = step_starts
            .get(idx + 1)
            .map(|&(next_start, _)| next_start)
            .unwrap_or(content_end)
            .max(content_start);
        steps.push(raw[content_start..end].trim().to_string());
    }
    ReasoningTrace {
        steps,
        verdict,
        raw_text: raw.to_string(),
    }
}

fn step_marker_in(text: &str) -> bool {
    let bytes = text.as_bytes();
    for pos in find_all(text, "Step ") {
        let mut i = pos + 5;
        let digits_start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if i > digits_start && i < bytes.len() && bytes[i] == b'.' {
            return true;
        }
    }
    false
}

/// Inverse of `parse_trace` for well-formed traces:
/// `parse_trace(render_trace(steps, v))` recovers `(steps, v)` exactly.
pub fn render_trace(steps: &[String], verdict: Verdict) -> Result<String, FairspecError> {
    for (index, step) in steps.iter().enumerate() {
        if step.contains(FINAL_ANSWER_MARKER) || step_marker_in(step) {
            return Err(FairspecError::StepContainsMarker {
                index: index + 1,
                text: step.clone(),
            });
        }
    }
    let mut out = String::new();
    for (i, step) in steps.iter().enumerate() {
        out.push_str(&format!("Step {}. {}\n", i + 1, step));
    }
    out.push_str(&format!("{FINAL_ANSWER_MARKER} {verdict}"));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_contains_rules_text_and_cue() {
        let doc = SpecDocument::default_document();
        let p = doc.assemble_prompt("sample", PromptMode::WithSpec).unwrap();
        for s in &doc.standards {
            assert!(p.contains(&s.rule_text), "missing rule {}", s.id);
        }
        assert!(p.contains("Text: sample\n"));
        assert!(p.ends_with(STEP_CUE));
    }

    #[test]
    fn bare_prompt_omits_standards() {
        let doc = SpecDocument::default_document();
        let p = doc.assemble_prompt("sample", PromptMode::Bare).unwrap();
        assert!(p.contains("sample"));
        for s in &doc.standards {
            assert!(!p.contains(&s.rule_text));
        }
        assert!(p.ends_with(STEP_CUE));
    }

    #[test]
    fn prompts_are_injective_in_input() {
        let doc = SpecDocument::default_document();
        let a = doc.assemble_prompt("first text", PromptMode::WithSpec).unwrap();
        let b = doc.assemble_prompt("second text", PromptMode::WithSpec).unwrap();
        assert_ne!(a, b);
        assert!(doc.assemble_prompt("", PromptMode::WithSpec).is_err());
    }

    #[test]
    fn prompt_too_long_is_reported() {
        let doc = SpecDocument::default_document();
        let vocab = Vocab::build(doc.all_text().iter().map(|s| s.as_str()));
        // "biased" is in-vocabulary in its with-space form via the answer line
        let err = doc.assemble_prompt_tokens("biased", PromptMode::WithSpec, &vocab, 32);
        assert!(matches!(err, Err(FairspecError::PromptTooLong { .. })));
    }

    #[test]
    fn parse_extracts_steps_and_verdict() {
        let t = parse_trace("Step 1. analyze the phrase. Step 2. check the rules. Final Answer: biased");
        assert_eq!(t.steps, vec!["analyze the phrase.", "check the rules."]);
        assert_eq!(t.verdict, Some(Verdict::Biased));
    }

    #[test]
    fn verdict_only_trace_is_accepted() {
        let t = parse_trace("Final Answer: unbiased");
        assert!(t.steps.is_empty());
        assert_eq!(t.verdict, Some(Verdict::Unbiased));
    }

    #[test]
    fn missing_or_duplicate_markers_fail_to_parse() {
        assert_eq!(parse_trace("no marker here").verdict, None);
        assert_eq!(
            parse_trace("Final Answer: biased\nFinal Answer: biased").verdict,
            None
        );
        assert_eq!(parse_trace("Final Answer: maybe").verdict, None);
        // label is case-insensitive, marker is not
        assert_eq!(parse_trace("Final Answer: BIASED").verdict, Some(Verdict::Biased));
        assert_eq!(parse_trace("final answer: biased").verdict, None);
    }

    #[test]
    fn render_round_trips() {
        let steps = vec!["a".to_string(), "b".to_string()];
        let raw = render_trace(&steps, Verdict::Unbiased).unwrap();
        let parsed = parse_trace(&raw);
        assert_eq!(parsed.steps, steps);
        assert_eq!(parsed.verdict, Some(Verdict::Unbiased));

        assert_eq!(
            render_trace(&[], Verdict::Biased).unwrap(),
            "Final Answer: biased"
        );
    }

    #[test]
    fn steps_containing_markers_are_rejected() {
        let bad = vec!["see Final Answer: below".to_string()];
        assert!(matches!(
            render_trace(&bad, Verdict::Biased),
            Err(FairspecError::StepContainsMarker { index: 1, .. })
        ));
        let sneaky = vec!["this hides Step 12. inside".to_string()];
        assert!(render_trace(&sneaky, Verdict::Biased).is_err());
        let fine = vec!["mentions Step but no digit".to_string()];
        assert!(render_trace(&fine, Verdict::Biased).is_ok());
    }

    #[test]
    fn spec_file_round_trip_and_duplicate_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.jsonl");
        let doc = SpecDocument::default_document();
        doc.save(&path).unwrap();
        let loaded = SpecDocument::load(&path).unwrap();
        assert_eq!(loaded, doc);

        let mut dup = doc.clone();
        dup.standards[1].id = 1;
        dup.save(&path).unwrap();
        assert!(SpecDocument::load(&path).is_err());
    }
}
