//! Politeness-strategy rule engine.
//!
//! Every rule is evaluated per sentence and the per-sentence counts are
//! summed. Lexical rules match lowercased surface forms. "Sentence start"
//! means the first non-punctuation token.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depparse::{ParsedComment, Sentence, Token};

const DEFAULT_REGISTRY: &str = include_str!("../data/politeness_registry.json");

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("registry JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("duplicate strategy name {0:?}")]
    DuplicateName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    First,
    NotFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Matcher {
    /// Counts tokens whose form is in `words`, plus occurrences of the
    /// multi-token `phrases`.
    LexiconMatch {
        words: Vec<String>,
        #[serde(default)]
        phrases: Vec<String>,
    },
    /// Fires on the sentence-initial word (`First`), or counts matching words
    /// elsewhere in the sentence (`NotFirst`).
    PositionalLexiconMatch { words: Vec<String>, position: Position },
    /// Counts tokens with a listed lemma (and UPOS, when given) that govern at
    /// least one dependent matching the optional relation/lemma filters.
    DependencyPattern {
        head_lemmas: Vec<String>,
        #[serde(default)]
        head_upos: Vec<String>,
        #[serde(default)]
        deprels: Vec<String>,
        #[serde(default)]
        child_lemmas: Vec<String>,
    },
    /// Question-shaped sentences: ends in `?` (when required) and opens with a
    /// wh-word or a fronted auxiliary.
    #[serde(rename = "SentenceInitialPOS")]
    SentenceInitialPos {
        wh_words: Vec<String>,
        fronted_upos: Vec<String>,
        fronted_lemmas: Vec<String>,
        #[serde(default = "yes")]
        require_question_mark: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRule {
    pub name: String,
    /// Human-readable label used in reports.
    pub label: String,
    #[serde(flatten)]
    pub matcher: Matcher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub version: String,
    pub rules: Vec<StrategyRule>,
}

impl Registry {
    pub fn from_json(text: &str) -> Result<Self, RegistryError> {
        let reg: Registry = serde_json::from_str(text)?;
        reg.check()?;
        Ok(reg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }

    fn check(&self) -> Result<(), RegistryError> {
        let mut seen = HashSet::new();
        for r in &self.rules {
            if !seen.insert(r.name.as_str()) {
                return Err(RegistryError::DuplicateName(r.name.clone()));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.rules.iter().map(|r| r.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn compile(&self) -> CompiledRegistry {
        CompiledRegistry {
            names: self.rules.iter().map(|r| r.name.clone()).collect(),
            rules: self.rules.iter().map(|r| CompiledRule::new(&r.matcher)).collect(),
        }
    }
}

/// The shipped 19-rule registry.
pub fn default_registry() -> Registry {
    Registry::from_json(DEFAULT_REGISTRY).expect("bundled registry is valid")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyVector {
    pub names: Vec<String>,
    pub counts: Vec<u32>,
}

impl StrategyVector {
    pub fn zeros(names: &[String]) -> Self {
        StrategyVector {
            names: names.to_vec(),
            counts: vec![0; names.len()],
        }
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.counts[i])
    }

    /// Presence flags (count > 0), in registry order.
    pub fn binary(&self) -> Vec<bool> {
        self.counts.iter().map(|&c| c > 0).collect()
    }

    pub fn present(&self) -> impl Iterator<Item = &str> {
        self.names
            .iter()
            .zip(&self.counts)
            .filter(|(_, &c)| c > 0)
            .map(|(n, _)| n.as_str())
    }

    pub fn add(&mut self, other: &StrategyVector) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone)]
enum CompiledRule {
    Lexicon {
        words: HashSet<String>,
        phrases: Vec<Vec<String>>,
    },
    Positional {
        words: HashSet<String>,
        position: Position,
    },
    Dependency {
        head_lemmas: HashSet<String>,
        head_upos: HashSet<String>,
        deprels: HashSet<String>,
        child_lemmas: HashSet<String>,
    },
    Question {
        wh_words: HashSet<String>,
        fronted_upos: HashSet<String>,
        fronted_lemmas: HashSet<String>,
        require_question_mark: bool,
    },
}

fn lower_set(words: &[String]) -> HashSet<String> {
    words.iter().map(|w| w.to_lowercase()).collect()
}

impl CompiledRule {
    fn new(m: &Matcher) -> Self {
        match m {
            Matcher::LexiconMatch { words, phrases } => CompiledRule::Lexicon {
                words: lower_set(words),
                phrases: phrases
                    .iter()
                    .map(|p| p.split_whitespace().map(str::to_lowercase).collect())
                    .filter(|p: &Vec<String>| !p.is_empty())
                    .collect(),
            },
            Matcher::PositionalLexiconMatch { words, position } => CompiledRule::Positional {
                words: lower_set(words),
                position: *position,
            },
            Matcher::DependencyPattern {
                head_lemmas,
                head_upos,
                deprels,
                child_lemmas,
            } => CompiledRule::Dependency {
                head_lemmas: lower_set(head_lemmas),
                head_upos: head_upos.iter().cloned().collect(),
                deprels: lower_set(deprels),
                child_lemmas: lower_set(child_lemmas),
            },
            Matcher::SentenceInitialPos {
                wh_words,
                fronted_upos,
                fronted_lemmas,
                require_question_mark,
            } => CompiledRule::Question {
                wh_words: lower_set(wh_words),
                fronted_upos: fronted_upos.iter().cloned().collect(),
                fronted_lemmas: lower_set(fronted_lemmas),
                require_question_mark: *require_question_mark,
            },
        }
    }

    fn count(&self, s: &Sentence, forms: &[String]) -> u32 {
        match self {
            CompiledRule::Lexicon { words, phrases } => {
                let singles = forms.iter().filter(|f| words.contains(*f)).count();
                let multi: usize = phrases
                    .iter()
                    .map(|p| forms.windows(p.len()).filter(|w| *w == p.as_slice()).count())
                    .sum();
                (singles + multi) as u32
            }
            CompiledRule::Positional { words, position } => {
                let Some(first) = s.tokens.iter().position(|t| !t.is_punct()) else {
                    return 0;
                };
                match position {
                    Position::First => words.contains(&forms[first]) as u32,
                    Position::NotFirst => forms[first + 1..]
                        .iter()
                        .filter(|f| words.contains(*f))
                        .count() as u32,
                }
            }
            CompiledRule::Dependency {
                head_lemmas,
                head_upos,
                deprels,
                child_lemmas,
            } => s
                .tokens
                .iter()
                .filter(|h| head_lemmas.contains(&h.norm_lemma()))
                .filter(|h| head_upos.is_empty() || head_upos.contains(&h.upos))
                .filter(|h| {
                    s.dependents(h.index).any(|c: &Token| {
                        c.deprel != "punct"
                            && (deprels.is_empty() || deprels.contains(&c.deprel.to_lowercase()))
                            && (child_lemmas.is_empty() || child_lemmas.contains(&c.norm_lemma()))
                    })
                })
                .count() as u32,
            CompiledRule::Question {
                wh_words,
                fronted_upos,
                fronted_lemmas,
                require_question_mark,
            } => {
                if *require_question_mark
                    && !s.tokens.last().is_some_and(|t| t.form.contains('?'))
                {
                    return 0;
                }
                let Some(first) = s.first_word() else {
                    return 0;
                };
                let wh = wh_words.contains(&first.lower_form());
                let fronted = fronted_upos.contains(&first.upos)
                    && (fronted_lemmas.is_empty() || fronted_lemmas.contains(&first.norm_lemma()));
                (wh || fronted) as u32
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompiledRegistry {
    names: Vec<String>,
    rules: Vec<CompiledRule>,
}

impl CompiledRegistry {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn sentence_counts(&self, s: &Sentence) -> Vec<u32> {
        let forms: Vec<String> = s.tokens.iter().map(Token::lower_form).collect();
        self.rules.iter().map(|r| r.count(s, &forms)).collect()
    }

    pub fn extract(&self, pc: &ParsedComment) -> StrategyVector {
        let mut v = StrategyVector::zeros(&self.names);
        for s in &pc.sentences {
            for (acc, c) in v.counts.iter_mut().zip(self.sentence_counts(s)) {
                *acc += c;
            }
        }
        v
    }
}

/// Evaluates every rule of `registry` on `pc`.
pub fn extract_strategies(pc: &ParsedComment, registry: &Registry) -> StrategyVector {
    registry.compile().extract(pc)
}
