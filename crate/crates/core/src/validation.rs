//! The data-validation agent: sends an instance to a vision model and turns
//! its four-criterion report into a keep/filter verdict.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, ChatParams, ChatRequest};
use crate::image::RgbaImage;
use crate::prompts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Criterion {
    SingleObject,
    SingleView,
    IntactObject,
    PlainBackground,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [
        Criterion::SingleObject,
        Criterion::SingleView,
        Criterion::IntactObject,
        Criterion::PlainBackground,
    ];

    fn by_number(n: u32) -> Option<Criterion> {
        Self::ALL.get((n as usize).checked_sub(1)?).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Meet,
    Fail,
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Keep,
    FilterOut,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub name: Criterion,
    pub outcome: Outcome,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub category: String,
    /// Always four entries, in [`Criterion::ALL`] order.
    pub criteria: Vec<CriterionResult>,
    #[serde(rename = "final")]
    pub decision: Decision,
    pub description: String,
    #[serde(default)]
    pub conclusion: String,
    pub raw_transcript: String,
    /// Final decision agrees with the criteria (keep iff all four Meet) and
    /// with the polarity of the conclusion text, when it has one.
    pub consistent: bool,
    /// Set when no attempt produced a parseable report.
    #[serde(default)]
    pub unparseable: bool,
}

impl ValidationVerdict {
    pub fn outcome(&self, c: Criterion) -> Outcome {
        self.criteria
            .iter()
            .find(|r| r.name == c)
            .map(|r| r.outcome)
            .unwrap_or(Outcome::NotApplicable)
    }

    pub fn outcomes(&self) -> [Outcome; 4] {
        Criterion::ALL.map(|c| self.outcome(c))
    }

    pub fn is_keep(&self) -> bool {
        self.decision == Decision::Keep
    }

    pub fn sidecar_path(dir: &Path, asset_id: &str) -> PathBuf {
        dir.join(format!("{asset_id}.verdict.json"))
    }

    pub fn write_sidecar(&self, dir: &Path, asset_id: &str) -> std::io::Result<PathBuf> {
        let path = Self::sidecar_path(dir, asset_id);
        let json = serde_json::to_string_pretty(self).expect("verdict serializes");
        crate::fsutil::write_atomic(&path, (json + "\n").as_bytes())?;
        Ok(path)
    }

    pub fn read_sidecar(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("found results for {found} of 4 criteria")]
    MissingCriteria { found: usize },
    #[error("no final Keep/Filter Out result line")]
    NoFinalResult,
}

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Removes markdown emphasis, bullets and heading marks from one line.
fn clean_line(line: &str) -> String {
    let mut s = line.replace("**", "").replace("__", "");
    loop {
        let t = s.trim_start();
        let stripped = ["* ", "- ", "• ", "+ ", "#"]
            .iter()
            .find_map(|p| t.strip_prefix(p));
        match stripped {
            Some(rest) => s = rest.to_string(),
            None => return t.trim_end().to_string(),
        }
    }
}

/// Splits `label: rest` when the lowercased line starts with `label`.
fn labelled<'a>(line: &'a str, labels: &[&str]) -> Option<&'a str> {
    let lower = line.to_ascii_lowercase();
    for label in labels {
        if lower.starts_with(label) {
            let rest = line[label.len()..].trim_start();
            if let Some(r) = rest.strip_prefix(':').or_else(|| rest.strip_prefix(" -")) {
                return Some(r.trim());
            }
            if rest.is_empty() {
                return Some("");
            }
        }
    }
    None
}

fn normalize_value(v: &str) -> String {
    v.trim()
        .trim_matches(|c: char| {
            c == '[' || c == ']' || c == '(' || c == ')' || c == '.' || c == '*' || c == '`'
        })
        .trim()
        .to_ascii_lowercase()
}

fn parse_outcome(v: &str) -> Option<Outcome> {
    let v = normalize_value(v);
    if matches!(
        v.as_str(),
        "n/a" | "na" | "n.a" | "not applicable" | "notapplicable" | "not_applicable"
    ) || v.starts_with("n/a")
        || v.starts_with("not applicable")
    {
        return Some(Outcome::NotApplicable);
    }
    let first = v.split(|c: char| !c.is_alphabetic()).next().unwrap_or("");
    match first {
        "meet" | "meets" | "met" | "pass" | "passed" => Some(Outcome::Meet),
        "fail" | "fails" | "failed" => Some(Outcome::Fail),
        _ => None,
    }
}

fn parse_decision(v: &str) -> Option<Decision> {
    let v = normalize_value(v);
    let negative = ["filter", "reject", "discard", "remove"]
        .iter()
        .any(|w| v.contains(w));
    let positive = v.contains("keep") || v.contains("retain");
    match (positive, negative) {
        (true, false) => Some(Decision::Keep),
        (false, true) => Some(Decision::FilterOut),
        _ => None,
    }
}

/// Polarity of the conclusion prose, judged from its last sentence that
/// clearly leans one way.
pub fn conclusion_polarity(text: &str) -> Option<Decision> {
    const NEGATIVE: &[&str] = &[
        "not suitable",
        "unsuitable",
        "filtered out",
        "filter out",
        "does not meet",
        "doesn't meet",
        "fails",
        "fail to",
        "violates",
        "should not be kept",
        "should be rejected",
        "discard",
    ];
    const POSITIVE: &[&str] = &[
        "suitable",
        "should be kept",
        "meets all",
        "be retained",
        "acceptable",
    ];
    text.split(['.', '!', '?', '\n'])
        .rev()
        .map(|s| s.to_lowercase())
        .find_map(|s| {
            if NEGATIVE.iter().any(|m| s.contains(m)) {
                Some(Decision::FilterOut)
            } else if POSITIVE.iter().any(|m| s.contains(m)) {
                Some(Decision::Keep)
            } else {
                None
            }
        })
}

/// `(number, heading)` for lines like `1. Single orange:` or
/// `Criteria 2 - Single View:`.
fn numbered_heading(line: &str) -> Option<(u32, String)> {
    let lower = line.to_ascii_lowercase();
    let body = ["criteria ", "criterion "]
        .iter()
        .find_map(|p| lower.strip_prefix(p).map(|_| &line[p.len()..]))
        .unwrap_or(line);
    let digits: String = body.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        return None;
    }
    let rest = body[digits.len()..].trim_start();
    let rest = rest
        .strip_prefix('.')
        .or_else(|| rest.strip_prefix(')'))
        .or_else(|| rest.strip_prefix('-'))
        .or_else(|| rest.strip_prefix(':'))?;
    Some((digits.parse().ok()?, rest.trim().to_string()))
}

fn classify_heading(heading: &str, category: &str) -> Option<Criterion> {
    let mut t = heading.to_lowercase();
    let cat = category.trim().to_lowercase();
    if !cat.is_empty() {
        t = t.replace(&cat, " ");
    }
    if t.contains("background") {
        Some(Criterion::PlainBackground)
    } else if t.contains("intact") {
        Some(Criterion::IntactObject)
    } else if t.contains("view") || t.contains("angle") || t.contains("perspective") {
        Some(Criterion::SingleView)
    } else if t.contains("single") || t.contains("only one") {
        Some(Criterion::SingleObject)
    } else {
        None
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Preamble,
    Description,
    Criteria,
    InCriterion(Criterion),
    Conclusion,
    After,
}

fn push_text(buf: &mut String, line: &str) {
    if line.is_empty() {
        return;
    }
    if !buf.is_empty() {
        buf.push(' ');
    }
    buf.push_str(line);
}

/// Parses a validation transcript. Pure text function; tolerant of markdown
/// emphasis, bullets, numbering styles, letter case and the category name
/// appearing in criterion headings.
pub fn parse_verdict(transcript: &str, category: &str) -> Result<ValidationVerdict, ParseError> {
    let partial = scan(transcript, category);
    let found = partial.outcomes.len();
    if found < 4 {
        return Err(ParseError::MissingCriteria { found });
    }
    let decision = partial.decision.ok_or(ParseError::NoFinalResult)?;
    Ok(partial.finish(decision, transcript, category, false))
}

#[derive(Default)]
struct Partial {
    description: String,
    conclusion: String,
    outcomes: BTreeMap<Criterion, Outcome>,
    explanations: BTreeMap<Criterion, String>,
    decision: Option<Decision>,
}

impl Partial {
    fn finish(
        self,
        decision: Decision,
        transcript: &str,
        category: &str,
        unparseable: bool,
    ) -> ValidationVerdict {
        let criteria: Vec<CriterionResult> = Criterion::ALL
            .iter()
            .map(|&c| CriterionResult {
                name: c,
                outcome: self
                    .outcomes
                    .get(&c)
                    .copied()
                    .unwrap_or(Outcome::NotApplicable),
                explanation: self.explanations.get(&c).cloned().unwrap_or_else(|| {
                    if unparseable {
                        "no result parsed".into()
                    } else {
                        String::new()
                    }
                }),
            })
            .collect();
        let all_meet = criteria.iter().all(|r| r.outcome == Outcome::Meet);
        let structural = (decision == Decision::Keep) == all_meet;
        let prose = conclusion_polarity(&self.conclusion).is_none_or(|p| p == decision);
        if !structural || !prose {
            log::warn!(
                "inconsistent verdict for {category:?}: final {decision:?}, criteria {:?}, conclusion agrees: {prose}",
                criteria.iter().map(|r| r.outcome).collect::<Vec<_>>()
            );
        }
        ValidationVerdict {
            category: category.to_string(),
            criteria,
            decision,
            description: self.description,
            conclusion: self.conclusion,
            raw_transcript: transcript.to_string(),
            consistent: structural && prose && !unparseable,
            unparseable,
        }
    }
}

fn scan(transcript: &str, category: &str) -> Partial {
    let mut p = Partial::default();
    let mut section = Section::Preamble;

    for raw in transcript.lines() {
        let line = clean_line(raw);
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = labelled(&line, &["image description"]) {
            section = Section::Description;
            push_text(&mut p.description, rest);
            continue;
        }
        if labelled(&line, &["evaluation criteria"]).is_some() {
            section = Section::Criteria;
            continue;
        }
        if let Some(rest) = labelled(&line, &["conclusion"]) {
            section = Section::Conclusion;
            push_text(&mut p.conclusion, rest);
            continue;
        }
        if let Some(value) = labelled(&line, &["final result", "final decision", "result"]) {
            if let Some(d) = parse_decision(value) {
                p.decision = Some(d);
                section = Section::After;
            } else if let (Section::InCriterion(c), Some(o)) = (section, parse_outcome(value)) {
                p.outcomes.entry(c).or_insert(o);
            }
            continue;
        }
        if section != Section::Conclusion && section != Section::After {
            if let Some((number, heading)) = numbered_heading(&line) {
                let keyword = classify_heading(&heading, category);
                let in_criteria = matches!(section, Section::Criteria | Section::InCriterion(_));
                let criterion =
                    keyword.or_else(|| in_criteria.then(|| Criterion::by_number(number)).flatten());
                if let Some(c) = criterion {
                    section = Section::InCriterion(c);
                    // `1. Single orange: Meet`
                    if let Some((_, tail)) = heading.split_once(':') {
                        if let Some(o) = parse_outcome(tail) {
                            p.outcomes.entry(c).or_insert(o);
                        }
                    }
                    continue;
                }
            }
        }
        match section {
            Section::Description | Section::Preamble => push_text(&mut p.description, &line),
            Section::InCriterion(c) => push_text(p.explanations.entry(c).or_default(), &line),
            Section::Conclusion => push_text(&mut p.conclusion, &line),
            Section::Criteria | Section::After => {}
        }
    }
    p
}

fn default_user_template() -> String {
    "Category: {category}\nEvaluate the attached image against the criteria and answer in the output format."
        .into()
}

fn default_params() -> ChatParams {
    ChatParams {
        max_new_tokens: 1024,
        ..ChatParams::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidatorSettings {
    /// User message; `{category}` is substituted.
    pub user_template: String,
    pub params: ChatParams,
}

impl Default for ValidatorSettings {
    fn default() -> Self {
        Self {
            user_template: default_user_template(),
            params: default_params(),
        }
    }
}

/// Asks the vision agent about one instance.
///
/// The instance is flattened over opaque black first. An unparseable reply
/// is retried once; if the retry is unparseable too the verdict fails closed
/// (`FilterOut`, `consistent = false`) with every transcript preserved.
pub fn validate_instance(
    asset: &RgbaImage,
    category: &str,
    system_prompt: &str,
    vision: &Backend,
    settings: &ValidatorSettings,
) -> Result<ValidationVerdict, ValidationError> {
    if category.trim().is_empty() {
        return Err(ValidationError::Precondition(
            "category must be nonempty".into(),
        ));
    }
    if system_prompt.contains(prompts::CATEGORY_PLACEHOLDER) {
        return Err(ValidationError::Precondition(
            "system prompt still contains the category placeholder".into(),
        ));
    }
    let flat = asset.flatten_over_black();
    let user = prompts::fill(&settings.user_template, &[("category", category)]);
    let req = ChatRequest::new(system_prompt, user, settings.params);

    let mut transcripts = Vec::new();
    for attempt in 0..2 {
        let reply = vision.vision_chat(&flat, &req)?;
        match parse_verdict(&reply, category) {
            Ok(v) => return Ok(v),
            Err(e) => {
                log::warn!(
                    "unparseable verdict for {category:?} (attempt {}): {e}",
                    attempt + 1
                );
                transcripts.push(reply);
            }
        }
    }
    let last = transcripts.last().cloned().unwrap_or_default();
    let raw = transcripts.join("\n\n----- retry -----\n\n");
    Ok(scan(&last, category).finish(Decision::FilterOut, &raw, category, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Outcome::*;

    const MINIMAL: &str = "Image Description:\nA red ball.\n\nEvaluation Criteria:\n\
        1. Single ball:\n- Only one ball.\n- Result: Meet\n\
        2. Single View:\n- One view.\n- Result: Meet\n\
        3. Intact ball:\n- Whole.\n- Result: Meet\n\
        4. Plain Background:\n- Black.\n- Result: Meet\n\
        Conclusion:\nThe image meets all criteria.\n\nResult: Keep\n";

    #[test]
    fn minimal_keep() {
        let v = parse_verdict(MINIMAL, "ball").unwrap();
        assert_eq!(v.outcomes(), [Meet; 4]);
        assert_eq!(v.decision, Decision::Keep);
        assert!(v.consistent);
        assert_eq!(v.description, "A red ball.");
        assert_eq!(v.criteria[0].explanation, "Only one ball.");
    }

    #[test]
    fn missing_final_line() {
        let t = MINIMAL.replace("Result: Keep", "");
        assert_eq!(parse_verdict(&t, "ball"), Err(ParseError::NoFinalResult));
    }

    #[test]
    fn missing_criterion() {
        let t = MINIMAL.replace("- Result: Meet\n3.", "\n3.");
        assert_eq!(
            parse_verdict(&t, "ball"),
            Err(ParseError::MissingCriteria { found: 3 })
        );
    }

    #[test]
    fn garbage_is_unparseable() {
        assert!(parse_verdict("I like turtles.", "turtle").is_err());
        assert!(parse_verdict("", "turtle").is_err());
    }

    #[test]
    fn tolerates_case_and_variants() {
        let t = "## IMAGE DESCRIPTION: a vase\n\
            Criteria 1 - Single subject: \n* result: MEET\n\
            Criteria 2 - Single View:\n* RESULT: not applicable\n\
            Criteria 3 - Intact subject:\n* Result: [Fail]\n\
            Criteria 4 - Plain Background:\n* Result: Met.\n\
            **Final Result:** FILTER OUT";
        let v = parse_verdict(t, "vase").unwrap();
        assert_eq!(v.outcomes(), [Meet, NotApplicable, Fail, Meet]);
        assert_eq!(v.decision, Decision::FilterOut);
        assert!(v.consistent);
    }

    #[test]
    fn category_with_view_in_name() {
        let t = MINIMAL.replace("ball", "rear-view mirror");
        let v = parse_verdict(&t, "rear-view mirror").unwrap();
        assert_eq!(v.outcomes(), [Meet; 4]);
    }

    #[test]
    fn inline_outcome_in_heading() {
        let t = "1. Single cup: Fail\n2. Single View: Meet\n3. Intact cup: Meet\n4. Plain Background: Meet\nResult: Filter Out";
        let v = parse_verdict(t, "cup").unwrap();
        assert_eq!(v.outcomes(), [Fail, Meet, Meet, Meet]);
    }

    #[test]
    fn keep_with_a_failed_criterion_is_inconsistent() {
        let t = MINIMAL.replacen("Result: Meet", "Result: Fail", 1);
        let v = parse_verdict(&t, "ball").unwrap();
        assert_eq!(v.decision, Decision::Keep);
        assert!(!v.consistent);
    }

    #[test]
    fn template_echo_is_not_a_decision() {
        let t = MINIMAL.replace("Result: Keep", "Result: [Keep/Filter Out]");
        assert_eq!(parse_verdict(&t, "ball"), Err(ParseError::NoFinalResult));
    }

    #[test]
    fn polarity_of_conclusions() {
        assert_eq!(
            conclusion_polarity("Therefore it is not suitable."),
            Some(Decision::FilterOut)
        );
        assert_eq!(
            conclusion_polarity("It meets all the criteria."),
            Some(Decision::Keep)
        );
        assert_eq!(conclusion_polarity("Hmm. The final answer is:"), None);
    }
}
