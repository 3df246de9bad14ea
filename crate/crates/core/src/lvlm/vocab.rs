//! Closed word-level vocabulary and the task prompts.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::nn::{ModelError, Result};
use crate::report::{canonical_words, grammar_corpus};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const IMG: usize = 3;
pub const SPECIALS: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<img>"];

pub const DIAGNOSIS_PROMPT: &str = "Please analyze this fundus image and determine the severity level of Diabetic Retinopathy. Provide a detailed explanation for your diagnosis.";
pub const CONCEPT_PROMPT: &str = "Identify and describe all Diabetic Retinopathy-related pathological concepts present in this image, such as hemorrhages, exudates, microaneurysms, cotton wool spots, or neovascularization. Point out their locations and features.";
pub const GENERIC_PROMPT: &str = "Describe this image.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Diagnosis,
    Concept,
    Generic,
}

impl PromptKind {
    pub fn text(self) -> &'static str {
        match self {
            PromptKind::Diagnosis => DIAGNOSIS_PROMPT,
            PromptKind::Concept => CONCEPT_PROMPT,
            PromptKind::Generic => GENERIC_PROMPT,
        }
    }
}

/// Specials first, then every corpus word in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words, index }
    }

    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Self {
        let set: BTreeSet<String> = corpus
            .iter()
            .flat_map(|s| canonical_words(s.as_ref()))
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let words = SPECIALS.iter().map(|s| s.to_string()).chain(set).collect();
        Self::from_words(words)
    }

    /// Vocabulary covering the prompts and every string the report grammar
    /// can produce.
    pub fn standard() -> Self {
        let mut corpus = grammar_corpus();
        corpus.extend([DIAGNOSIS_PROMPT, CONCEPT_PROMPT, GENERIC_PROMPT].map(String::from));
        Self::build(&corpus)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        canonical_words(text)
            .into_iter()
            .map(|w| self.id(&w).ok_or(ModelError::OutOfVocabulary(w)))
            .collect()
    }

    /// Words joined by single spaces; unknown ids render as `<unk>`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i).unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }

    /// One word per line.
    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        if words.len() < SPECIALS.len() || words[..4] != SPECIALS.map(String::from) {
            return Err(ModelError::Checkpoint("vocabulary file must start with the four special tokens".into()));
        }
        let unique: BTreeSet<&String> = words.iter().collect();
        if unique.len() != words.len() || words.iter().any(|w| w.is_empty() || w.contains(char::is_whitespace)) {
            return Err(ModelError::Checkpoint("vocabulary words must be unique and free of whitespace".into()));
        }
        Ok(Self::from_words(words))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_corpus() {
        let v = Vocabulary::build(&["no dr"]);
        assert_eq!(v.words(), &["<bos>", "<eos>", "<pad>", "<img>", "dr", "no"]);
        assert_eq!(Vocabulary::build(&["no dr"]), v);
    }

    #[test]
    fn canonical_round_trip() {
        let v = Vocabulary::standard();
        let ids = v.tokenize("No DR .").unwrap();
        assert_eq!(v.detokenize(&ids), "no dr .");
        assert!(v.tokenize("").unwrap().is_empty());
        match v.tokenize("no banana") {
            Err(ModelError::OutOfVocabulary(w)) => assert_eq!(w, "banana"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn prompts_are_in_vocabulary() {
        let v = Vocabulary::standard();
        for p in [PromptKind::Diagnosis, PromptKind::Concept, PromptKind::Generic] {
            assert!(v.tokenize(p.text()).is_ok());
        }
        assert!(v.id("retinopathy-related").is_some());
    }

    #[test]
    fn file_round_trip() {
        let v = Vocabulary::standard();
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
    }
}
