//! Conversation data model, JSONL ingestion, toxicity-threshold candidate
//! selection and same-page matched-pair construction.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: conversation {conversation:?}: field `{field}`: {message}")]
    Invalid {
        line: usize,
        conversation: String,
        field: String,
        message: String,
    },
    #[error("conversation {conversation:?}, comment {comment:?}: missing toxicity score")]
    MissingToxicity {
        conversation: String,
        comment: String,
    },
    #[error("invalid thresholds: need 0 <= civil_max ({civil_max}) <= toxic_min ({toxic_min}) <= 1")]
    Thresholds { civil_max: f64, toxic_min: f64 },
    #[error("toxicity scorer failed for comment {comment:?}: {message}")]
    Scorer { comment: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comment {
    pub id: String,
    pub author_id: String,
    #[serde(default)]
    pub author_edit_count: u64,
    #[serde(default)]
    pub author_is_anonymous: bool,
    /// Seconds since the epoch.
    pub timestamp: i64,
    pub text: String,
    /// Toxicity score in [0, 1]; absent until scored.
    #[serde(default)]
    pub toxicity: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "awry")]
    AwryTurning,
    #[serde(rename = "ontrack")]
    OnTrack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub page_id: String,
    #[serde(default)]
    pub label: Option<Label>,
    /// 0-based position of the first attack; awry conversations only.
    #[serde(default)]
    pub attack_index: Option<usize>,
    pub comments: Vec<Comment>,
}

impl Conversation {
    /// Timestamp of the first comment.
    pub fn start_time(&self) -> i64 {
        self.comments.first().map(|c| c.timestamp).unwrap_or(0)
    }

    pub fn is_awry(&self) -> bool {
        self.label == Some(Label::AwryTurning)
    }

    /// Author of the attacking comment, when known.
    pub fn attacker(&self) -> Option<&str> {
        self.attack_index
            .and_then(|i| self.comments.get(i))
            .map(|c| c.author_id.as_str())
    }

    /// Orders comments by (timestamp, id).
    pub fn sort_comments(&mut self) {
        self.comments
            .sort_by(|a, b| (a.timestamp, &a.id).cmp(&(b.timestamp, &b.id)));
    }

    /// Checks every invariant; returns the offending field and a message.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let fail = |f: &str, m: String| Err((f.to_string(), m));
        if self.id.is_empty() {
            return fail("id", "empty conversation id".into());
        }
        for (i, c) in self.comments.iter().enumerate() {
            if let Some(t) = c.toxicity {
                if !(0.0..=1.0).contains(&t) || t.is_nan() {
                    return fail(
                        &format!("comments[{i}].toxicity"),
                        format!("{t} is outside [0, 1]"),
                    );
                }
            }
            if c.text.trim().is_empty() {
                return fail(&format!("comments[{i}].text"), "empty after trimming".into());
            }
        }
        let sorted = self
            .comments
            .windows(2)
            .all(|w| (w[0].timestamp, &w[0].id) <= (w[1].timestamp, &w[1].id));
        if !sorted {
            return fail("comments", "not ordered by (timestamp, id)".into());
        }
        match self.label {
            Some(label) => {
                if self.comments.len() < 3 {
                    return fail(
                        "comments",
                        format!("labeled conversation has {} comments, need >= 3", self.comments.len()),
                    );
                }
                match (label, self.attack_index) {
                    (Label::AwryTurning, None) => {
                        return fail("attack_index", "required for awry conversations".into())
                    }
                    (Label::AwryTurning, Some(i)) if i < 2 || i >= self.comments.len() => {
                        return fail(
                            "attack_index",
                            format!("{i} must be >= 2 and < {}", self.comments.len()),
                        )
                    }
                    (Label::OnTrack, Some(_)) => {
                        return fail("attack_index", "must be null for on-track conversations".into())
                    }
                    _ => {}
                }
            }
            None => {
                if self.comments.is_empty() {
                    return fail("comments", "conversation has no comments".into());
                }
                if self.attack_index.is_some() {
                    return fail("attack_index", "set on an unlabeled conversation".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnError {
    #[default]
    Abort,
    Skip,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub on_error: OnError,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub loaded: usize,
    pub skipped: usize,
    pub diagnostics: Vec<String>,
}

/// Reads a JSONL corpus file.
pub fn load_corpus(
    path: impl AsRef<Path>,
    opts: &LoadOptions,
) -> Result<(Vec<Conversation>, LoadReport), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut convs = Vec::new();
    let mut report = LoadReport::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        ingest_line(&line, i + 1, opts, &mut convs, &mut report)?;
    }
    Ok((convs, report))
}

/// Same as [`load_corpus`] over an in-memory JSONL string.
pub fn parse_corpus(
    text: &str,
    opts: &LoadOptions,
) -> Result<(Vec<Conversation>, LoadReport), CorpusError> {
    let mut convs = Vec::new();
    let mut report = LoadReport::default();
    for (i, line) in text.lines().enumerate() {
        ingest_line(line, i + 1, opts, &mut convs, &mut report)?;
    }
    Ok((convs, report))
}

fn ingest_line(
    line: &str,
    lineno: usize,
    opts: &LoadOptions,
    convs: &mut Vec<Conversation>,
    report: &mut LoadReport,
) -> Result<(), CorpusError> {
    if line.trim().is_empty() {
        return Ok(());
    }
    let parsed = serde_json::from_str::<Conversation>(line)
        .map_err(|source| CorpusError::Json { line: lineno, source })
        .and_then(|mut conv| {
            conv.sort_comments();
            match conv.validate() {
                Ok(()) => Ok(conv),
                Err((field, message)) => Err(CorpusError::Invalid {
                    line: lineno,
                    conversation: conv.id.clone(),
                    field,
                    message,
                }),
            }
        });
    match parsed {
        Ok(conv) => {
            convs.push(conv);
            report.loaded += 1;
            Ok(())
        }
        Err(e) if opts.on_error == OnError::Skip => {
            log::warn!("skipping record: {e}");
            report.skipped += 1;
            report.diagnostics.push(e.to_string());
            Ok(())
        }
        Err(e) => Err(e),
    }
}

/// Serializes conversations as JSONL.
pub fn to_jsonl(convs: &[Conversation]) -> String {
    let mut out = String::new();
    for c in convs {
        out.push_str(&serde_json::to_string(c).expect("conversation serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionThresholds {
    pub civil_max: f64,
    pub toxic_min: f64,
}

impl Default for SelectionThresholds {
    fn default() -> Self {
        SelectionThresholds {
            civil_max: 0.4,
            toxic_min: 0.6,
        }
    }
}

impl SelectionThresholds {
    pub fn new(civil_max: f64, toxic_min: f64) -> Result<Self, CorpusError> {
        let th = SelectionThresholds { civil_max, toxic_min };
        th.check()?;
        Ok(th)
    }

    pub fn check(&self) -> Result<(), CorpusError> {
        if 0.0 <= self.civil_max && self.civil_max <= self.toxic_min && self.toxic_min <= 1.0 {
            Ok(())
        } else {
            Err(CorpusError::Thresholds {
                civil_max: self.civil_max,
                toxic_min: self.toxic_min,
            })
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Candidates {
    pub awry: Vec<Conversation>,
    pub ontrack: Vec<Conversation>,
    pub dropped: usize,
}

/// Splits unlabeled conversations into awry-turning and on-track candidates.
///
/// On-track: every comment below `civil_max`. Awry: the first comment that is
/// not civil sits at position 2 or later and reaches `toxic_min`. Everything
/// else, including conversations that end within the first exchange, is
/// dropped.
pub fn select_candidates(
    convs: &[Conversation],
    th: &SelectionThresholds,
) -> Result<Candidates, CorpusError> {
    th.check()?;
    let mut out = Candidates::default();
    for conv in convs {
        let mut scores = Vec::with_capacity(conv.comments.len());
        for c in &conv.comments {
            scores.push(c.toxicity.ok_or_else(|| CorpusError::MissingToxicity {
                conversation: conv.id.clone(),
                comment: c.id.clone(),
            })?);
        }
        if scores.len() < 3 {
            out.dropped += 1;
            continue;
        }
        match scores.iter().position(|&t| t >= th.civil_max) {
            None => {
                let mut c = conv.clone();
                c.label = Some(Label::OnTrack);
                c.attack_index = None;
                out.ontrack.push(c);
            }
            Some(n) if n >= 2 && scores[n] >= th.toxic_min => {
                let mut c = conv.clone();
                c.label = Some(Label::AwryTurning);
                c.attack_index = Some(n);
                out.awry.push(c);
            }
            Some(_) => out.dropped += 1,
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationPair {
    pub awry: Conversation,
    pub ontrack: Conversation,
}

impl ConversationPair {
    pub fn page_id(&self) -> &str {
        &self.awry.page_id
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairedDataset {
    pairs: Vec<ConversationPair>,
    #[serde(skip)]
    page_index: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub pairs: usize,
    pub conversations: usize,
    pub pages: usize,
    pub max_pairs_per_page: usize,
    pub mean_pairs_per_page: f64,
    pub mean_conversation_length: f64,
}

impl PairedDataset {
    /// Builds a dataset from explicit pairs, checking page agreement and
    /// conversation uniqueness.
    pub fn from_pairs(pairs: Vec<ConversationPair>) -> Result<Self, String> {
        let mut seen = std::collections::HashSet::new();
        for p in &pairs {
            if p.awry.page_id != p.ontrack.page_id {
                return Err(format!(
                    "pair ({}, {}) spans pages {} and {}",
                    p.awry.id, p.ontrack.id, p.awry.page_id, p.ontrack.page_id
                ));
            }
            for id in [&p.awry.id, &p.ontrack.id] {
                if !seen.insert(id.clone()) {
                    return Err(format!("conversation {id} appears in more than one pair"));
                }
            }
        }
        let mut ds = PairedDataset {
            pairs,
            page_index: BTreeMap::new(),
        };
        ds.reindex();
        Ok(ds)
    }

    fn reindex(&mut self) {
        self.page_index.clear();
        for (i, p) in self.pairs.iter().enumerate() {
            self.page_index
                .entry(p.page_id().to_string())
                .or_default()
                .push(i);
        }
    }

    pub fn pairs(&self) -> &[ConversationPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pair positions per page, pages in sorted order.
    pub fn page_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.page_index
    }

    pub fn pairs_on_page(&self, page_id: &str) -> usize {
        self.page_index.get(page_id).map_or(0, Vec::len)
    }

    pub fn conversations(&self) -> impl Iterator<Item = &Conversation> {
        self.pairs.iter().flat_map(|p| [&p.awry, &p.ontrack])
    }

    /// Keeps the pairs for which `keep` holds.
    pub fn filter(&self, keep: impl Fn(&ConversationPair) -> bool) -> PairedDataset {
        let mut ds = PairedDataset {
            pairs: self.pairs.iter().filter(|p| keep(p)).cloned().collect(),
            page_index: BTreeMap::new(),
        };
        ds.reindex();
        ds
    }

    pub fn summary(&self) -> DatasetSummary {
        let conversations = self.pairs.len() * 2;
        let total_len: usize = self.conversations().map(|c| c.comments.len()).sum();
        let pages = self.page_index.len();
        DatasetSummary {
            pairs: self.pairs.len(),
            conversations,
            pages,
            max_pairs_per_page: self.page_index.values().map(Vec::len).max().unwrap_or(0),
            mean_pairs_per_page: if pages == 0 {
                0.0
            } else {
                self.pairs.len() as f64 / pages as f64
            },
            mean_conversation_length: if conversations == 0 {
                0.0
            } else {
                total_len as f64 / conversations as f64
            },
        }
    }

    /// Splits labeled conversations by label and matches them.
    pub fn from_labeled(convs: &[Conversation]) -> PairedDataset {
        let (awry, ontrack): (Vec<_>, Vec<_>) = convs
            .iter()
            .filter(|c| c.label.is_some())
            .cloned()
            .partition(|c| c.is_awry());
        build_matched_pairs(&awry, &ontrack)
    }
}

impl PairedDataset {
    /// Restores the page index after deserialization.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let mut ds: PairedDataset = serde_json::from_str(text)?;
        ds.reindex();
        Ok(ds)
    }
}

/// Greedy closest-in-time matching within each page.
///
/// Among all unmatched (awry, on-track) combinations on a page, the one with
/// the smallest start-time gap is taken first; gap ties go to the smaller awry
/// id, then the smaller on-track id. The result does not depend on input order.
pub fn build_matched_pairs(awry: &[Conversation], ontrack: &[Conversation]) -> PairedDataset {
    let mut awry_by_page: BTreeMap<&str, Vec<&Conversation>> = BTreeMap::new();
    for c in awry {
        awry_by_page.entry(&c.page_id).or_default().push(c);
    }
    let mut ontrack_by_page: HashMap<&str, Vec<&Conversation>> = HashMap::new();
    for c in ontrack {
        ontrack_by_page.entry(&c.page_id).or_default().push(c);
    }

    let mut pairs = Vec::new();
    for (page, page_awry) in awry_by_page {
        let Some(page_ontrack) = ontrack_by_page.get(page) else {
            continue;
        };
        let mut candidates: Vec<(i64, &str, &str, usize, usize)> = Vec::new();
        for (ai, a) in page_awry.iter().enumerate() {
            for (oi, o) in page_ontrack.iter().enumerate() {
                let gap = (a.start_time() - o.start_time()).abs();
                candidates.push((gap, &a.id, &o.id, ai, oi));
            }
        }
        candidates.sort_unstable();
        let mut awry_used = vec![false; page_awry.len()];
        let mut ontrack_used = vec![false; page_ontrack.len()];
        for (_, _, _, ai, oi) in candidates {
            if awry_used[ai] || ontrack_used[oi] {
                continue;
            }
            awry_used[ai] = true;
            ontrack_used[oi] = true;
            pairs.push(ConversationPair {
                awry: page_awry[ai].clone(),
                ontrack: page_ontrack[oi].clone(),
            });
        }
    }
    PairedDataset::from_pairs(pairs).expect("matching pairs within pages and uses each once")
}

/// Source of toxicity scores for comments that lack one.
pub trait ToxicityScorer {
    fn score(&self, comment: &Comment) -> Result<f64, String>;
}

/// Calls an HTTP endpoint: POST `{"text": ...}`, expects `{"score": x}`.
#[derive(Debug, Clone)]
pub struct HttpToxicityScorer {
    pub endpoint: String,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

impl ToxicityScorer for HttpToxicityScorer {
    fn score(&self, comment: &Comment) -> Result<f64, String> {
        let resp: ScoreResponse = ureq::post(&self.endpoint)
            .send_json(ScoreRequest { text: &comment.text })
            .map_err(|e| e.to_string())?
            .body_mut()
            .read_json()
            .map_err(|e| e.to_string())?;
        Ok(resp.score)
    }
}

/// Offline scorer backed by a sidecar JSON object. Keys are comment ids or
/// comment texts; ids take precedence.
#[derive(Debug, Clone, Default)]
pub struct FixtureToxicityScorer {
    scores: HashMap<String, f64>,
}

impl FixtureToxicityScorer {
    pub fn new(scores: HashMap<String, f64>) -> Self {
        FixtureToxicityScorer { scores }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let scores = serde_json::from_str(&text)
            .map_err(|source| CorpusError::Json { line: 1, source })?;
        Ok(FixtureToxicityScorer { scores })
    }
}

impl ToxicityScorer for FixtureToxicityScorer {
    fn score(&self, comment: &Comment) -> Result<f64, String> {
        self.scores
            .get(&comment.id)
            .or_else(|| self.scores.get(&comment.text))
            .copied()
            .ok_or_else(|| "no fixture score".to_string())
    }
}

/// Fills missing toxicity fields; returns how many scores were added.
pub fn fill_toxicity(
    convs: &mut [Conversation],
    scorer: &dyn ToxicityScorer,
) -> Result<usize, CorpusError> {
    let mut filled = 0;
    for conv in convs.iter_mut() {
        for c in conv.comments.iter_mut().filter(|c| c.toxicity.is_none()) {
            let t = scorer.score(c).map_err(|message| CorpusError::Scorer {
                comment: c.id.clone(),
                message,
            })?;
            if !(0.0..=1.0).contains(&t) {
                return Err(CorpusError::Scorer {
                    comment: c.id.clone(),
                    message: format!("score {t} outside [0, 1]"),
                });
            }
            c.toxicity = Some(t);
            filled += 1;
        }
    }
    Ok(filled)
}
