//! Report labeling: decide whether a radiology report confirms aspiration.
//!
//! The default policy is rule based: a report is positive iff it contains a
//! phrase from the positive set outside of any negation pattern. An optional
//! remote policy delegates to an HTTP endpoint that answers `0`/`1` inside
//! `<answer></answer>` tags. Labeling failures are loud errors; the pipeline
//! never falls back to a default label.

use std::time::Duration;

use crate::domain::RadiologyReport;
use crate::error::{Error, Result};

/// Phrases that assert aspiration, and negation patterns that retract it.
/// Matching is case-insensitive; a positive phrase occurring inside a
/// negation pattern occurrence does not count.
#[derive(Debug, Clone)]
pub struct PhraseBank {
    pub positive: Vec<String>,
    pub negation: Vec<String>,
}

impl Default for PhraseBank {
    fn default() -> Self {
        PhraseBank {
            positive: vec!["aspiration".into()],
            negation: vec![
                "no evidence of aspiration".into(),
                "no signs of aspiration".into(),
                "no aspiration".into(),
                "without aspiration".into(),
                "negative for aspiration".into(),
            ],
        }
    }
}

impl PhraseBank {
    fn matches(&self, text: &str) -> bool {
        let text = text.to_lowercase();
        let mut negated_spans: Vec<(usize, usize)> = Vec::new();
        for pat in &self.negation {
            let pat = pat.to_lowercase();
            let mut from = 0;
            while let Some(pos) = text[from..].find(&pat) {
                let start = from + pos;
                negated_spans.push((start, start + pat.len()));
                from = start + 1;
            }
        }
        for phrase in &self.positive {
            let phrase = phrase.to_lowercase();
            let mut from = 0;
            while let Some(pos) = text[from..].find(&phrase) {
                let start = from + pos;
                let end = start + phrase.len();
                let negated = negated_spans.iter().any(|&(s, e)| start >= s && end <= e);
                if !negated {
                    return true;
                }
                from = start + 1;
            }
        }
        false
    }
}

/// Client for a remote labeling endpoint mirroring the report-review prompt
/// convention: POST the report text, receive `<answer>0</answer>` or
/// `<answer>1</answer>` somewhere in the response body.
#[derive(Debug, Clone)]
pub struct RemoteLabeler {
    pub endpoint: String,
    pub timeout: Duration,
}

impl RemoteLabeler {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        RemoteLabeler { endpoint: endpoint.into(), timeout }
    }

    fn label(&self, text: &str) -> Result<bool> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut response = agent
            .post(&self.endpoint)
            .content_type("text/plain; charset=utf-8")
            .send(text)
            .map_err(|e| Error::Labeling(format!("remote labeler request failed: {e}")))?;
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Labeling(format!("remote labeler response unreadable: {e}")))?;
        parse_answer_tag(&body)
    }
}

/// Extract the 0/1 answer from `<answer></answer>` tags.
pub fn parse_answer_tag(body: &str) -> Result<bool> {
    let start = body
        .find("<answer>")
        .ok_or_else(|| Error::Labeling(format!("no <answer> tag in response: {body:?}")))?;
    let rest = &body[start + "<answer>".len()..];
    let end = rest
        .find("</answer>")
        .ok_or_else(|| Error::Labeling(format!("unterminated <answer> tag in response: {body:?}")))?;
    match rest[..end].trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Labeling(format!("malformed answer {other:?}, expected 0 or 1"))),
    }
}

#[derive(Debug, Clone)]
pub enum LabelerPolicy {
    RuleBased(PhraseBank),
    Remote(RemoteLabeler),
}

impl Default for LabelerPolicy {
    fn default() -> Self {
        LabelerPolicy::RuleBased(PhraseBank::default())
    }
}

/// Label a report. A label already present on the report is reused (labels
/// are immutable for a run); otherwise the policy decides.
pub fn label_report(report: &RadiologyReport, labeler: &LabelerPolicy) -> Result<bool> {
    if let Some(label) = report.label {
        return Ok(label);
    }
    if report.text.trim().is_empty() {
        return Err(Error::Labeling("report text is empty".into()));
    }
    match labeler {
        LabelerPolicy::RuleBased(bank) => Ok(bank.matches(&report.text)),
        LabelerPolicy::Remote(remote) => remote.label(&report.text),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Timestamp;

    fn report(text: &str) -> RadiologyReport {
        RadiologyReport::new(Timestamp(0), text)
    }

    #[test]
    fn phrase_match_is_positive() {
        let policy = LabelerPolicy::default();
        assert!(label_report(&report("findings consistent with aspiration pneumonia"), &policy)
            .unwrap());
    }

    #[test]
    fn negation_wins() {
        let policy = LabelerPolicy::default();
        assert!(!label_report(&report("No evidence of aspiration."), &policy).unwrap());
    }

    #[test]
    fn absent_phrase_is_negative() {
        let policy = LabelerPolicy::default();
        assert!(!label_report(&report("no acute cardiopulmonary process"), &policy).unwrap());
    }

    #[test]
    fn positive_mention_beside_a_negated_one_counts() {
        let policy = LabelerPolicy::default();
        let text = "Prior film showed no aspiration. Today there is new aspiration pneumonia.";
        assert!(label_report(&report(text), &policy).unwrap());
    }

    #[test]
    fn empty_text_is_a_labeling_error() {
        let policy = LabelerPolicy::default();
        assert!(matches!(label_report(&report("  "), &policy), Err(Error::Labeling(_))));
    }

    #[test]
    fn preset_label_is_reused() {
        let mut r = report("ambiguous");
        r.set_label(true).unwrap();
        assert!(label_report(&r, &LabelerPolicy::default()).unwrap());
    }

    #[test]
    fn answer_tag_parsing() {
        assert!(parse_answer_tag("ok <answer>1</answer>").unwrap());
        assert!(!parse_answer_tag("<answer> 0 </answer> trailing").unwrap());
        assert!(parse_answer_tag("<answer>maybe</answer>").is_err());
        assert!(parse_answer_tag("no tags here").is_err());
        assert!(parse_answer_tag("<answer>1").is_err());
    }
}
