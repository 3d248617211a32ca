//! Knowledge bridge: decompose a flagged step into atomic claims, have the
//! domain model judge and correct each claim, and consolidate the
//! corrections into a block for the regeneration prompt.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::chain::ReasoningStep;
use crate::gateway::{ChatMessage, ModelBackend, ModelRole, SamplingConfig};
use crate::templates::{fill, PromptTemplates};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accurate,
    Inaccurate,
    Incomplete,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeUnit {
    pub claim: String,
    pub verdict: Verdict,
    /// Empty when the verdict is accurate.
    pub correction: String,
    pub source_step: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub text: String,
    pub source_claims: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBlock {
    pub entries: Vec<KnowledgeEntry>,
    pub iteration: u32,
}

impl KnowledgeBlock {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// How claims were obtained from a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecompositionPath {
    /// The general model listed the claims.
    Model,
    /// Sentence splitter keeping sentences with chemical content.
    Heuristic,
    /// Nothing matched; the whole step is one claim.
    WholeStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecompositionStrategy {
    /// Ask the general model first, fall back to the heuristic.
    #[default]
    Model,
    Heuristic,
}

impl std::str::FromStr for DecompositionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "model" => Ok(Self::Model),
            "heuristic" => Ok(Self::Heuristic),
            _ => Err(format!("unknown decomposition strategy {s:?} (model|heuristic)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decomposition {
    pub claims: Vec<String>,
    pub path: DecompositionPath,
    /// Why the model path was abandoned, if it was.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_reason: Option<String>,
}

fn formula_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[A-Z][a-z]?[0-9₀-₉]|\)[0-9₀-₉]|\[[A-Z][a-z]?").unwrap())
}

fn quantity_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"\d+(?:\.\d+)?\s*(?:g/mol|kJ/mol|J/mol|mol/L|kg|mg|g|mmol|mol|mL|L|mM|M|K|°C|atm|kPa|Pa|bar|kJ|J|eV|nm|pm|Å|%)(?:[^A-Za-z]|$)",
        )
        .unwrap()
    })
}

fn compound_name_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\b[A-Z][a-z]+(?:ide|ate|ite|ium|ine|one|ane|ene|yne|ol|ic|ogen)\b").unwrap()
    })
}

fn list_marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:\d+[.)]|[-*•]|\(\d+\))\s*").unwrap())
}

/// Splits on sentence-ending punctuation followed by whitespace, and on
/// newlines.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let mut start = 0;
        let mut chars = line.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            let ends = matches!(c, '.' | '!' | '?')
                && chars.peek().map_or(true, |(_, next)| next.is_whitespace());
            if ends {
                let end = i + c.len_utf8();
                out.push(line[start..end].trim().to_string());
                start = end;
            }
        }
        out.push(line[start..].trim().to_string());
    }
    out.retain(|s| !s.is_empty());
    out
}

pub fn has_chemical_content(sentence: &str) -> bool {
    formula_re().is_match(sentence)
        || quantity_re().is_match(sentence)
        || compound_name_re().is_match(sentence)
}

/// Deterministic decomposition used when the model path is unavailable.
pub fn split_claims_heuristic(text: &str) -> Decomposition {
    let claims: Vec<String> = split_sentences(text)
        .into_iter()
        .filter(|s| has_chemical_content(s))
        .collect();
    if claims.is_empty() {
        Decomposition {
            claims: vec![text.trim().to_string()],
            path: DecompositionPath::WholeStep,
            fallback_reason: None,
        }
    } else {
        Decomposition {
            claims,
            path: DecompositionPath::Heuristic,
            fallback_reason: None,
        }
    }
}

/// One claim per non-empty line, list numbering and bullets stripped.
pub fn parse_claim_list(reply: &str) -> Vec<String> {
    reply
        .lines()
        .map(|l| list_marker_re().replace(l, "").trim().to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

pub fn extract_atomic_units(
    step: &ReasoningStep,
    general: &dyn ModelBackend,
    templates: &PromptTemplates,
    strategy: DecompositionStrategy,
) -> Decomposition {
    if strategy == DecompositionStrategy::Heuristic {
        return split_claims_heuristic(&step.text);
    }
    let prompt = fill(&templates.decompose, &[("step", &step.text)]);
    let reason = match general.complete(
        &[ChatMessage::user(prompt)],
        &SamplingConfig::general(),
        ModelRole::General,
    ) {
        Ok(reply) => {
            let claims = parse_claim_list(&reply.text);
            if !claims.is_empty() {
                return Decomposition {
                    claims,
                    path: DecompositionPath::Model,
                    fallback_reason: None,
                };
            }
            "model returned no claims".to_string()
        }
        Err(e) => e.to_string(),
    };
    tracing::debug!(step = step.index, %reason, "falling back to heuristic decomposition");
    let mut d = split_claims_heuristic(&step.text);
    d.fallback_reason = Some(reason);
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Keyword {
    Not,
    Accurate,
    Inaccurate,
    Incomplete,
}

fn keyword(word: &str) -> Option<Keyword> {
    match word.to_ascii_lowercase().as_str() {
        "not" => Some(Keyword::Not),
        "correct" | "accurate" => Some(Keyword::Accurate),
        "incorrect" | "inaccurate" | "wrong" => Some(Keyword::Inaccurate),
        "incomplete" | "partial" | "partially" => Some(Keyword::Incomplete),
        _ => None,
    }
}

fn word_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[A-Za-z]+").unwrap())
}

/// Finds the verdict on the first line mentioning a verdict keyword.
///
/// Within that line, a negated positive ("not correct") or any negative
/// keyword reads as inaccurate; otherwise incomplete beats accurate. The
/// correction is whatever follows the leading run of verdict words on that
/// line, plus all later lines.
pub fn parse_verdict(reply: &str) -> (Verdict, String) {
    let lines: Vec<&str> = reply.lines().collect();
    for (n, line) in lines.iter().enumerate() {
        let words: Vec<(usize, usize, Option<Keyword>)> = word_re()
            .find_iter(line)
            .map(|m| (m.start(), m.end(), keyword(m.as_str())))
            .collect();
        let verdict_words: Vec<Keyword> = words
            .iter()
            .filter_map(|w| w.2)
            .filter(|k| *k != Keyword::Not)
            .collect();
        if verdict_words.is_empty() {
            continue;
        }
        let negated = words.windows(2).any(|w| {
            w[0].2 == Some(Keyword::Not) && w[1].2 == Some(Keyword::Accurate)
        });
        let verdict = if negated || verdict_words.contains(&Keyword::Inaccurate) {
            Verdict::Inaccurate
        } else if verdict_words.contains(&Keyword::Incomplete) {
            Verdict::Incomplete
        } else {
            Verdict::Accurate
        };
        if verdict == Verdict::Accurate {
            return (verdict, String::new());
        }
        let first = words
            .iter()
            .position(|w| w.2.is_some_and(|k| k != Keyword::Not))
            .expect("line has a verdict keyword");
        let mut cut = words[first].1;
        for w in &words[first + 1..] {
            let gap = &line[cut..w.0];
            if w.2.is_some() && gap.chars().all(char::is_whitespace) {
                cut = w.1;
            } else {
                break;
            }
        }
        let head = line[cut..]
            .trim_start_matches(|c: char| c.is_whitespace() || ".,:;!-\u{2013}\u{2014}".contains(c))
            .trim_end();
        let mut parts: Vec<&str> = Vec::new();
        if !head.is_empty() {
            parts.push(head);
        }
        parts.extend(lines[n + 1..].iter().copied());
        return (verdict, parts.join("\n").trim().to_string());
    }
    (Verdict::Unknown, reply.trim().to_string())
}

pub fn verify_and_correct(
    claim: &str,
    source_step: usize,
    domain: &dyn ModelBackend,
    templates: &PromptTemplates,
) -> KnowledgeUnit {
    let prompt = fill(&templates.verify, &[("claim", claim)]);
    let reply = domain.complete(
        &[ChatMessage::user(prompt)],
        &SamplingConfig::domain(),
        ModelRole::Domain,
    );
    let (verdict, mut correction) = match reply {
        Ok(r) => parse_verdict(&r.text),
        Err(e) => {
            tracing::warn!(error = %e, "domain model call failed; verdict unknown");
            (Verdict::Unknown, String::new())
        }
    };
    if matches!(verdict, Verdict::Inaccurate | Verdict::Incomplete) && correction.is_empty() {
        let label = if verdict == Verdict::Inaccurate {
            "incorrect"
        } else {
            "incomplete"
        };
        correction = format!("The statement \"{claim}\" is {label}.");
    }
    KnowledgeUnit {
        claim: claim.to_string(),
        verdict,
        correction,
        source_step,
    }
}

/// Merges the units of one bridging pass into a knowledge block.
///
/// Corrections (inaccurate, incomplete, or unknown with text) are kept in
/// order with exact duplicates merged. Only when there are none does the
/// block fall back to a single line confirming the accurate claims, or
/// naming the claims that could not be verified.
pub fn consolidate(units: &[KnowledgeUnit], iteration: u32) -> KnowledgeBlock {
    let mut entries: Vec<KnowledgeEntry> = Vec::new();
    for unit in units {
        let keep = match unit.verdict {
            Verdict::Inaccurate | Verdict::Incomplete => true,
            Verdict::Unknown => !unit.correction.trim().is_empty(),
            Verdict::Accurate => false,
        };
        if !keep {
            continue;
        }
        let text = unit.correction.trim().to_string();
        match entries.iter_mut().find(|e| e.text == text) {
            Some(e) => {
                if !e.source_claims.contains(&unit.claim) {
                    e.source_claims.push(unit.claim.clone());
                }
            }
            None => entries.push(KnowledgeEntry {
                text,
                source_claims: vec![unit.claim.clone()],
            }),
        }
    }
    if entries.is_empty() && !units.is_empty() {
        let accurate: Vec<String> = units
            .iter()
            .filter(|u| u.verdict == Verdict::Accurate)
            .map(|u| u.claim.clone())
            .collect();
        let (text, claims) = if accurate.is_empty() {
            let claims: Vec<String> = units.iter().map(|u| u.claim.clone()).collect();
            (
                format!("The chemistry specialist could not verify: {}", claims.join("; ")),
                claims,
            )
        } else {
            (
                format!("Verified as accurate: {}", accurate.join("; ")),
                accurate,
            )
        };
        entries.push(KnowledgeEntry {
            text,
            source_claims: claims,
        });
    }
    KnowledgeBlock { entries, iteration }
}
