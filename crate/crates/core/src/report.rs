//! Three-part diagnostic reports: deterministic rendering from labels and
//! strict parsing back to labels.
//!
//! The grammar (see `grammar.ebnf` at the crate root) is a closed template
//! family. Findings are listed in canonical concept order and the rationale
//! is a fixed function of the grade and the concept set, so every valid
//! `(grade, findings)` pair renders to exactly one string.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{flags_from_kinds, ConceptFlags, Finding, Grade, LesionKind, Location};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReportError {
    #[error("grade {grade} is inconsistent with concepts {concepts:?}")]
    Inconsistent { grade: Grade, concepts: ConceptFlags },
    #[error("concept {0:?} listed more than once")]
    DuplicateConcept(LesionKind),
}

pub const NO_CONCEPTS_ANSWER: &str = "no pathological concepts are present .";

/// Splits text into lowercase words with sentence punctuation as separate
/// tokens. Hyphens stay inside words.
pub fn canonical_words(text: &str) -> Vec<String> {
    const PUNCT: &[char] = &['.', ',', ':', ';', '?', '!', '(', ')', '"', '\''];
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut cur = String::new();
        for ch in raw.chars() {
            if PUNCT.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Canonical form: canonical words joined by single spaces.
pub fn canonicalize(text: &str) -> String {
    canonical_words(text).join(" ")
}

/// Whether `grade` follows from the concept set under the grading rule,
/// ignoring lesion counts (which a report does not carry).
pub fn grade_consistent(grade: Grade, flags: &ConceptFlags) -> bool {
    use LesionKind::*;
    let has = |k: LesionKind| flags[k.index()];
    match grade {
        Grade::Proliferative => has(Neovascularization),
        Grade::Severe => !has(Neovascularization) && (has(Irma) || has(Hemorrhage) || has(SoftExudate)),
        Grade::Moderate => {
            !has(Neovascularization) && !has(Irma) && (has(Hemorrhage) || has(HardExudate) || has(SoftExudate))
        }
        Grade::Mild => *flags == flags_from_kinds([Microaneurysm]),
        Grade::NoDr => flags.iter().all(|&f| !f),
    }
}

fn join_and(kinds: &[LesionKind], flags: &ConceptFlags) -> String {
    kinds
        .iter()
        .filter(|k| flags[k.index()])
        .map(|k| k.phrase())
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Rationale sentence body (without the `rationale :` lead-in).
fn rationale(grade: Grade, flags: &ConceptFlags) -> String {
    use LesionKind::*;
    match grade {
        Grade::NoDr => "no diabetic lesions are observed .".to_string(),
        Grade::Mild => "microaneurysms only indicate mild non-proliferative diabetic retinopathy .".to_string(),
        Grade::Moderate => format!(
            "{} without severe features indicate moderate non-proliferative diabetic retinopathy .",
            join_and(&[Hemorrhage, HardExudate, SoftExudate], flags)
        ),
        Grade::Severe if flags[Irma.index()] => {
            "intraretinal microvascular abnormalities indicate severe non-proliferative diabetic retinopathy ."
                .to_string()
        }
        Grade::Severe => format!(
            "extensive {} indicate severe non-proliferative diabetic retinopathy .",
            join_and(&[Hemorrhage, SoftExudate], flags)
        ),
        Grade::Proliferative => "neovascularization indicates proliferative diabetic retinopathy .".to_string(),
    }
}

/// Sorts findings into canonical order and rejects repeated concepts.
pub fn canonical_findings(findings: &[Finding]) -> Result<Vec<Finding>, ReportError> {
    let mut sorted = findings.to_vec();
    sorted.sort_by_key(|f| f.kind);
    for w in sorted.windows(2) {
        if w[0].kind == w[1].kind {
            return Err(ReportError::DuplicateConcept(w[0].kind));
        }
    }
    Ok(sorted)
}

pub fn concept_flags(findings: &[Finding]) -> ConceptFlags {
    flags_from_kinds(findings.iter().map(|f| f.kind))
}

fn findings_list(findings: &[Finding]) -> String {
    findings
        .iter()
        .map(|f| format!("{} {}", f.location.phrase(), f.kind.phrase()))
        .collect::<Vec<_>>()
        .join(" , ")
}

pub fn render_report(grade: Grade, findings: &[Finding]) -> Result<String, ReportError> {
    let findings = canonical_findings(findings)?;
    let flags = concept_flags(&findings);
    if !grade_consistent(grade, &flags) {
        return Err(ReportError::Inconsistent { grade, concepts: flags });
    }
    let listed = if findings.is_empty() {
        "none".to_string()
    } else {
        findings_list(&findings)
    };
    Ok(format!(
        "diagnosis : {} . findings : {listed} . rationale : {}",
        grade.phrase(),
        rationale(grade, &flags)
    ))
}

pub fn render_concept_answer(findings: &[Finding]) -> Result<String, ReportError> {
    let findings = canonical_findings(findings)?;
    if findings.is_empty() {
        return Ok(NO_CONCEPTS_ANSWER.to_string());
    }
    Ok(format!("present concepts : {} .", findings_list(&findings)))
}

/// Result of parsing a diagnostic report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParsedReport {
    /// Present whenever the diagnosis sentence is intact, even if the rest
    /// of the report is malformed.
    pub grade: Option<Grade>,
    pub findings: Option<Vec<Finding>>,
    pub valid: bool,
    /// Index of the first word that breaks the grammar.
    pub error_pos: Option<usize>,
    /// Number of words consumed by a complete report.
    #[serde(skip)]
    pub consumed: usize,
}

impl ParsedReport {
    pub fn concepts(&self) -> Option<ConceptFlags> {
        self.findings.as_deref().map(concept_flags)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParsedConcepts {
    pub findings: Option<Vec<Finding>>,
    pub valid: bool,
    pub error_pos: Option<usize>,
}

impl ParsedConcepts {
    pub fn concepts(&self) -> Option<ConceptFlags> {
        self.findings.as_deref().map(concept_flags)
    }
}

struct Cursor<'a> {
    words: &'a [String],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn expect(&mut self, word: &str) -> Result<(), usize> {
        if self.words.get(self.pos).map(String::as_str) == Some(word) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.pos)
        }
    }

    fn try_phrase(&mut self, phrase: &str) -> bool {
        let parts: Vec<&str> = phrase.split(' ').collect();
        let end = self.pos + parts.len();
        if end <= self.words.len() && self.words[self.pos..end].iter().zip(&parts).all(|(a, b)| a == b) {
            self.pos = end;
            true
        } else {
            false
        }
    }

    fn expect_phrase(&mut self, phrase: &str) -> Result<(), usize> {
        for part in phrase.split(' ') {
            self.expect(part)?;
        }
        Ok(())
    }

    fn peek(&self) -> Option<&str> {
        self.words.get(self.pos).map(String::as_str)
    }

    fn grade(&mut self) -> Result<Grade, usize> {
        Grade::ALL
            .into_iter()
            .find(|g| self.try_phrase(g.phrase()))
            .ok_or(self.pos)
    }

    fn finding(&mut self) -> Result<Finding, usize> {
        let location = Location::ALL
            .into_iter()
            .find(|l| self.try_phrase(l.phrase()))
            .ok_or(self.pos)?;
        let kind = LesionKind::ALL
            .into_iter()
            .find(|k| self.try_phrase(k.phrase()))
            .ok_or(self.pos)?;
        Ok(Finding { kind, location })
    }

    /// `finding ("," finding)*` in strictly increasing concept order.
    fn findings_list(&mut self) -> Result<Vec<Finding>, usize> {
        let mut out: Vec<Finding> = Vec::new();
        loop {
            let start = self.pos;
            let f = self.finding()?;
            if out.last().is_some_and(|prev| prev.kind >= f.kind) {
                return Err(start);
            }
            out.push(f);
            if self.peek() == Some(",") {
                self.pos += 1;
            } else {
                return Ok(out);
            }
        }
    }
}

fn parse_report_words(words: &[String], require_end: bool) -> ParsedReport {
    let mut cur = Cursor { words, pos: 0 };
    let mut out = ParsedReport {
        grade: None,
        findings: None,
        valid: false,
        error_pos: None,
        consumed: 0,
    };
    let fail = |mut out: ParsedReport, pos: usize| {
        out.error_pos = Some(pos);
        out
    };

    let grade = (|| {
        cur.expect("diagnosis")?;
        cur.expect(":")?;
        let g = cur.grade()?;
        cur.expect(".")?;
        Ok(g)
    })();
    let grade = match grade {
        Ok(g) => g,
        Err(p) => return fail(out, p),
    };
    out.grade = Some(grade);

    let findings = (|| {
        cur.expect("findings")?;
        cur.expect(":")?;
        let list = if cur.peek() == Some("none") {
            cur.pos += 1;
            Vec::new()
        } else {
            cur.findings_list()?
        };
        cur.expect(".")?;
        Ok(list)
    })();
    let findings = match findings {
        Ok(f) => f,
        Err(p) => return fail(out, p),
    };
    let flags = concept_flags(&findings);
    out.findings = Some(findings);
    let rationale_start = cur.pos;
    if !grade_consistent(grade, &flags) {
        return fail(out, rationale_start);
    }

    let tail = (|| {
        cur.expect("rationale")?;
        cur.expect(":")?;
        cur.expect_phrase(&rationale(grade, &flags))
    })();
    if let Err(p) = tail {
        return fail(out, p);
    }
    if require_end && cur.pos != words.len() {
        return fail(out, cur.pos);
    }
    out.valid = true;
    out.consumed = cur.pos;
    out
}

/// Strict parse of a complete report. Never panics; malformed input yields
/// `valid == false` with the first failing word position.
pub fn parse_report(text: &str) -> ParsedReport {
    parse_report_words(&canonical_words(text), true)
}

fn parse_concepts_words(words: &[String]) -> ParsedConcepts {
    let mut cur = Cursor { words, pos: 0 };
    let none = NO_CONCEPTS_ANSWER.split(' ').map(str::to_string).collect::<Vec<_>>();
    if words == none.as_slice() {
        return ParsedConcepts {
            findings: Some(Vec::new()),
            valid: true,
            error_pos: None,
        };
    }
    let parsed = (|| {
        cur.expect("present")?;
        cur.expect("concepts")?;
        cur.expect(":")?;
        let list = cur.findings_list()?;
        cur.expect(".")?;
        if cur.pos != words.len() {
            return Err(cur.pos);
        }
        Ok(list)
    })();
    match parsed {
        Ok(list) => ParsedConcepts {
            findings: Some(list),
            valid: true,
            error_pos: None,
        },
        Err(p) => ParsedConcepts {
            findings: None,
            valid: false,
            error_pos: Some(p),
        },
    }
}

pub fn parse_concept_answer(text: &str) -> ParsedConcepts {
    parse_concepts_words(&canonical_words(text))
}

/// Parses the single-prompt output: a report immediately followed by a
/// concept answer.
pub fn parse_combined(text: &str) -> (ParsedReport, ParsedConcepts) {
    let words = canonical_words(text);
    let report = parse_report_words(&words, false);
    let concepts = if report.valid {
        let mut c = parse_concepts_words(&words[report.consumed..]);
        c.error_pos = c.error_pos.map(|p| p + report.consumed);
        c
    } else {
        ParsedConcepts {
            findings: None,
            valid: false,
            error_pos: report.error_pos,
        }
    };
    (report, concepts)
}

/// Every string the grammar can emit uses only words from this corpus.
pub fn grammar_corpus() -> Vec<String> {
    let mut out = Vec::new();
    for mask in 0u32..64 {
        let findings: Vec<Finding> = LesionKind::ALL
            .iter()
            .filter(|k| mask & (1 << k.index()) != 0)
            .map(|&kind| Finding {
                kind,
                location: Location::Central,
            })
            .collect();
        for g in Grade::ALL {
            if let Ok(r) = render_report(g, &findings) {
                out.push(r);
            }
        }
        out.push(render_concept_answer(&findings).expect("distinct kinds"));
    }
    out.extend(Location::ALL.iter().map(|l| l.phrase().to_string()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use LesionKind::*;

    fn f(kind: LesionKind, location: Location) -> Finding {
        Finding { kind, location }
    }

    #[test]
    fn grade_zero_report_is_fixed() {
        assert_eq!(
            render_report(Grade::NoDr, &[]).unwrap(),
            "diagnosis : no dr . findings : none . rationale : no diabetic lesions are observed ."
        );
    }

    #[test]
    fn proliferative_rationale_names_neovascularization() {
        let r = render_report(Grade::Proliferative, &[f(Neovascularization, Location::Central)]).unwrap();
        let rationale = r.split("rationale :").nth(1).unwrap();
        assert!(rationale.contains("neovascularization"));
        assert!(rationale.contains("proliferative"));
    }

    #[test]
    fn inconsistent_grade_is_rejected() {
        assert!(render_report(Grade::NoDr, &[f(Hemorrhage, Location::Central)]).is_err());
        assert!(render_report(Grade::Mild, &[]).is_err());
        assert!(render_report(Grade::Moderate, &[f(Neovascularization, Location::Central)]).is_err());
        assert!(render_report(
            Grade::Moderate,
            &[f(Hemorrhage, Location::Central), f(Hemorrhage, Location::SuperiorNasal)]
        )
        .is_err());
    }

    #[test]
    fn concept_answers() {
        assert_eq!(render_concept_answer(&[]).unwrap(), NO_CONCEPTS_ANSWER);
        let one = render_concept_answer(&[f(HardExudate, Location::Central)]).unwrap();
        assert!(one.contains("hard exudates") && one.contains("central"));
        let a = render_concept_answer(&[f(Irma, Location::InferiorNasal), f(Microaneurysm, Location::Central)]).unwrap();
        let b = render_concept_answer(&[f(Microaneurysm, Location::Central), f(Irma, Location::InferiorNasal)]).unwrap();
        assert_eq!(a, b);
        assert!(a.find("microaneurysms").unwrap() < a.find("intraretinal").unwrap());
    }

    #[test]
    fn garbage_fails_at_position_zero() {
        let p = parse_report("hello world");
        assert!(!p.valid);
        assert_eq!(p.error_pos, Some(0));
        assert_eq!(p.grade, None);
        assert!(!parse_concept_answer("hello").valid);
        assert!(!parse_report("").valid);
    }

    #[test]
    fn truncated_report_keeps_grade() {
        let full = render_report(Grade::Severe, &[f(Irma, Location::SuperiorNasal)]).unwrap();
        let cut = &full[..full.find("rationale").unwrap()];
        let p = parse_report(cut);
        assert!(!p.valid);
        assert_eq!(p.grade, Some(Grade::Severe));
        let p = parse_report("diagnosis : mild dr . findings : oops");
        assert_eq!(p.grade, Some(Grade::Mild));
        assert_eq!(p.error_pos, Some(7));
    }

    #[test]
    fn non_canonical_order_is_rejected() {
        let p = parse_report(
            "diagnosis : moderate dr . findings : central hard exudates , central hemorrhages . \
             rationale : hemorrhages and hard exudates without severe features indicate moderate \
             non-proliferative diabetic retinopathy .",
        );
        assert!(!p.valid);
        assert_eq!(p.error_pos, Some(11));
    }

    #[test]
    fn wrong_rationale_is_rejected() {
        let p = parse_report(
            "diagnosis : mild dr . findings : central microaneurysms . rationale : no diabetic lesions are observed .",
        );
        assert!(!p.valid);
        assert_eq!(p.grade, Some(Grade::Mild));
    }

    #[test]
    fn combined_output_parses_both_parts() {
        let fs = [f(Hemorrhage, Location::InferiorTemporal), f(SoftExudate, Location::Central)];
        let text = format!(
            "{} {}",
            render_report(Grade::Moderate, &fs).unwrap(),
            render_concept_answer(&fs).unwrap()
        );
        let (r, c) = parse_combined(&text);
        assert!(r.valid && c.valid);
        assert_eq!(r.grade, Some(Grade::Moderate));
        assert_eq!(c.findings.unwrap(), fs.to_vec());
        assert!(!parse_report(&text).valid);
    }

    #[test]
    fn canonical_words_split_punctuation_only() {
        assert_eq!(canonicalize("No DR."), "no dr .");
        assert_eq!(canonicalize("  Retinopathy-related  concepts,  ok "), "retinopathy-related concepts , ok");
    }
}
