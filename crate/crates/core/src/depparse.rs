//! CoNLL-U reading and writing, dependency-tree checks and topic-masked arc
//! extraction.
//!
//! Comment boundaries are marked with `# comment_id = <id>` metadata lines.
//! A block may carry `# parse_failed = true`, in which case it holds no
//! sentences. Multiword-token ranges (`1-2`) and empty nodes (`3.1`) are
//! skipped.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Placeholder used for masked lemmas.
pub const MASK: &str = "*";

#[derive(Debug, Error, PartialEq)]
pub enum ConlluError {
    #[error("line {line}: expected 10 tab-separated columns, found {found}")]
    ColumnCount { line: usize, found: usize },
    #[error("line {line}: invalid {field} value {value:?}")]
    BadField {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("sentence {sentence} (comment {comment_id:?}): {kind}")]
    Tree {
        comment_id: String,
        sentence: usize,
        kind: TreeError,
    },
    #[error("line {line}: token outside of a comment block (missing `# comment_id`)")]
    NoComment { line: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeError {
    MissingRoot,
    MultipleRoots,
    HeadOutOfRange { token: usize, head: usize },
    Cycle { token: usize },
    NonSequentialIndex { expected: usize, found: usize },
}

impl fmt::Display for TreeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeError::MissingRoot => write!(f, "no token attached to the root"),
            TreeError::MultipleRoots => write!(f, "more than one token attached to the root"),
            TreeError::HeadOutOfRange { token, head } => {
                write!(f, "token {token} has head {head} outside the sentence")
            }
            TreeError::Cycle { token } => write!(f, "cyclic head structure through token {token}"),
            TreeError::NonSequentialIndex { expected, found } => {
                write!(f, "token index {found} where {expected} was expected")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    /// 1-based position in the sentence.
    pub index: usize,
    pub form: String,
    pub lemma: String,
    pub upos: String,
    /// Index of the governor; 0 for the root.
    pub head: usize,
    pub deprel: String,
}

impl Token {
    pub fn is_punct(&self) -> bool {
        self.upos == "PUNCT" || self.deprel == "punct"
    }

    /// Lowercased lemma, falling back to the form when the lemma is absent.
    pub fn norm_lemma(&self) -> String {
        if self.lemma.is_empty() || self.lemma == "_" {
            self.form.to_lowercase()
        } else {
            self.lemma.to_lowercase()
        }
    }

    pub fn lower_form(&self) -> String {
        self.form.to_lowercase()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Sentence { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn root(&self) -> Option<&Token> {
        self.tokens.iter().find(|t| t.head == 0)
    }

    /// Token with the given 1-based index.
    pub fn token(&self, index: usize) -> Option<&Token> {
        index.checked_sub(1).and_then(|i| self.tokens.get(i))
    }

    pub fn dependents(&self, head: usize) -> impl Iterator<Item = &Token> {
        self.tokens.iter().filter(move |t| t.head == head)
    }

    /// First token that is not punctuation.
    pub fn first_word(&self) -> Option<&Token> {
        self.tokens.iter().find(|t| !t.is_punct())
    }

    /// Checks the single-root, in-range and acyclic conditions.
    pub fn validate(&self) -> Result<(), TreeError> {
        let n = self.tokens.len();
        for (i, t) in self.tokens.iter().enumerate() {
            if t.index != i + 1 {
                return Err(TreeError::NonSequentialIndex {
                    expected: i + 1,
                    found: t.index,
                });
            }
            if t.head > n {
                return Err(TreeError::HeadOutOfRange {
                    token: t.index,
                    head: t.head,
                });
            }
        }
        // Cycles first: a self-loop or loop leaves no path to the root, and
        // reporting it as a cycle is more useful than "missing root".
        for t in &self.tokens {
            let mut cur = t.index;
            let mut steps = 0;
            while cur != 0 {
                cur = self.tokens[cur - 1].head;
                steps += 1;
                if steps > n {
                    return Err(TreeError::Cycle { token: t.index });
                }
            }
        }
        match self.tokens.iter().filter(|t| t.head == 0).count() {
            0 if n > 0 => Err(TreeError::MissingRoot),
            0 | 1 => Ok(()),
            _ => Err(TreeError::MultipleRoots),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParsedComment {
    pub comment_id: String,
    pub sentences: Vec<Sentence>,
    /// Set when the annotator could not parse the comment.
    #[serde(default)]
    pub parse_failed: bool,
}

impl ParsedComment {
    pub fn new(comment_id: impl Into<String>, sentences: Vec<Sentence>) -> Self {
        ParsedComment {
            comment_id: comment_id.into(),
            sentences,
            parse_failed: false,
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = &Token> {
        self.sentences.iter().flat_map(|s| s.tokens.iter())
    }

    /// Serializes back to a CoNLL-U block.
    pub fn to_conllu(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# comment_id = {}", self.comment_id);
        if self.parse_failed {
            out.push_str("# parse_failed = true\n");
        }
        for s in &self.sentences {
            for t in &s.tokens {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t_\t_\t{}\t{}\t_\t_",
                    t.index,
                    field_out(&t.form),
                    field_out(&t.lemma),
                    field_out(&t.upos),
                    t.head,
                    field_out(&t.deprel)
                );
            }
            out.push('\n');
        }
        if self.sentences.is_empty() {
            out.push('\n');
        }
        out
    }
}

fn field_out(s: &str) -> &str {
    if s.is_empty() {
        "_"
    } else {
        s
    }
}

/// Serializes a sequence of comments as one CoNLL-U document.
pub fn write_conllu(comments: &[ParsedComment]) -> String {
    comments.iter().map(ParsedComment::to_conllu).collect()
}

/// Parses a CoNLL-U document into per-comment parses.
pub fn parse_conllu(text: &str) -> Result<Vec<ParsedComment>, ConlluError> {
    let mut out: Vec<ParsedComment> = Vec::new();
    let mut current: Option<ParsedComment> = None;
    let mut sentence: Vec<Token> = Vec::new();

    fn close_sentence(
        current: &mut Option<ParsedComment>,
        sentence: &mut Vec<Token>,
    ) -> Result<(), ConlluError> {
        if sentence.is_empty() {
            return Ok(());
        }
        let pc = current.as_mut().expect("tokens are only collected inside a comment");
        let s = Sentence::new(std::mem::take(sentence));
        let ordinal = pc.sentences.len() + 1;
        s.validate().map_err(|kind| ConlluError::Tree {
            comment_id: pc.comment_id.clone(),
            sentence: ordinal,
            kind,
        })?;
        pc.sentences.push(s);
        Ok(())
    }

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            close_sentence(&mut current, &mut sentence)?;
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            if let Some((key, value)) = meta.split_once('=') {
                match key.trim() {
                    "comment_id" => {
                        close_sentence(&mut current, &mut sentence)?;
                        if let Some(done) = current.take() {
                            out.push(done);
                        }
                        current = Some(ParsedComment::new(value.trim(), Vec::new()));
                    }
                    "parse_failed" => {
                        if let Some(pc) = current.as_mut() {
                            pc.parse_failed = value.trim().eq_ignore_ascii_case("true");
                        }
                    }
                    _ => {}
                }
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(ConlluError::ColumnCount {
                line: lineno,
                found: cols.len(),
            });
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        if current.is_none() {
            return Err(ConlluError::NoComment { line: lineno });
        }
        let index = cols[0].parse::<usize>().map_err(|_| ConlluError::BadField {
            line: lineno,
            field: "ID",
            value: cols[0].to_string(),
        })?;
        let head = cols[6].parse::<usize>().map_err(|_| ConlluError::BadField {
            line: lineno,
            field: "HEAD",
            value: cols[6].to_string(),
        })?;
        sentence.push(Token {
            index,
            form: cols[1].to_string(),
            lemma: cols[2].to_string(),
            upos: cols[3].to_string(),
            head,
            deprel: cols[7].to_string(),
        });
    }
    close_sentence(&mut current, &mut sentence)?;
    if let Some(done) = current.take() {
        out.push(done);
    }
    Ok(out)
}

/// Lookup of parses by comment id, built from one or more CoNLL-U documents.
#[derive(Debug, Clone, Default)]
pub struct ParseIndex {
    by_id: HashMap<String, ParsedComment>,
}

impl ParseIndex {
    pub fn from_comments(comments: Vec<ParsedComment>) -> Self {
        let by_id = comments
            .into_iter()
            .map(|c| (c.comment_id.clone(), c))
            .collect();
        ParseIndex { by_id }
    }

    pub fn from_conllu(text: &str) -> Result<Self, ConlluError> {
        Ok(Self::from_comments(parse_conllu(text)?))
    }

    pub fn extend(&mut self, comments: Vec<ParsedComment>) {
        for c in comments {
            self.by_id.insert(c.comment_id.clone(), c);
        }
    }

    pub fn get(&self, comment_id: &str) -> Option<&ParsedComment> {
        self.by_id.get(comment_id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

/// A dependency edge keyed by lemmas.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Arc {
    pub deprel: String,
    pub head_lemma: String,
    pub child_lemma: String,
}

impl fmt::Display for Arc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({},{})", self.deprel, self.head_lemma, self.child_lemma)
    }
}

/// Which lemmas get replaced by [`MASK`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub masked_upos: Vec<String>,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            masked_upos: vec!["NOUN".into(), "PROPN".into(), "NUM".into()],
        }
    }
}

impl MaskPolicy {
    pub fn none() -> Self {
        MaskPolicy {
            masked_upos: Vec::new(),
        }
    }

    /// Copy of `pc` with masked lemmas replaced by [`MASK`].
    pub fn apply(&self, pc: &ParsedComment) -> ParsedComment {
        let mut out = pc.clone();
        for t in out.sentences.iter_mut().flat_map(|s| s.tokens.iter_mut()) {
            if self.masked_upos.iter().any(|u| u == &t.upos) {
                t.lemma = MASK.to_string();
            }
        }
        out
    }

    fn slot(&self, t: &Token) -> String {
        if self.masked_upos.iter().any(|u| u == &t.upos) {
            MASK.to_string()
        } else {
            t.norm_lemma()
        }
    }
}

/// One arc per non-punctuation edge of a sentence, with the child token
/// index it came from. Root attachments are not edges.
pub fn sentence_arcs(sentence: &Sentence, policy: &MaskPolicy) -> Vec<(usize, usize, Arc)> {
    sentence
        .tokens
        .iter()
        .filter(|t| t.head != 0 && t.deprel != "punct")
        .filter_map(|t| {
            let head = sentence.token(t.head)?;
            Some((
                t.head,
                t.index,
                Arc {
                    deprel: t.deprel.to_lowercase(),
                    head_lemma: policy.slot(head),
                    child_lemma: policy.slot(t),
                },
            ))
        })
        .collect()
}

/// Multiset of masked arcs over all sentences, as arc → multiplicity.
pub fn extract_arcs(pc: &ParsedComment, policy: &MaskPolicy) -> BTreeMap<Arc, usize> {
    let mut out = BTreeMap::new();
    for s in &pc.sentences {
        for (_, _, arc) in sentence_arcs(s, policy) {
            *out.entry(arc).or_insert(0) += 1;
        }
    }
    out
}
