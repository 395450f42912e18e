//! Unsupervised prompt types.
//!
//! Phrasings are topic-masked dependency arcs and pairs of arcs sharing a
//! head. A truncated SVD of the phrasing × reply matrix `R ≈ U S Vᵀ` gives
//! reply-vectors (rows of `U`). The prompt matrix `P` has the same columns as
//! `R`: `P[i][r] = 1` when reply `r` answers a comment containing phrasing
//! `i`. Prompt-vectors are `P̂ = P V S⁻¹`. Rows of `U` and `P̂` are scaled to
//! unit norm and the `P̂` rows are clustered with k-means; a comment is the
//! mean of its phrasings' prompt-vectors, assigned to the nearest centroid or
//! to the null type when every centroid is at least `null_distance` away.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Conversation;
use crate::depparse::{sentence_arcs, MaskPolicy, ParseIndex, ParsedComment};
use crate::kmeans::{kmeans, nearest, KMeansConfig, KMeansError};
use crate::linalg::{normalize_rows, truncated_svd, CsrMatrix, SvdError, SvdOptions};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error(transparent)]
    Svd(#[from] SvdError),
    #[error("clustering failed: {0}")]
    KMeans(#[from] KMeansError),
    #[error("matrix shape mismatch: {0}")]
    Shape(String),
    #[error("k = {k} exceeds the {usable} non-degenerate prompt-vectors")]
    TooFewPromptVectors { k: usize, usable: usize },
    #[error("model JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("model content hash mismatch (stored {stored}, computed {computed})")]
    Hash { stored: String, computed: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    #[default]
    Binary,
    LogTf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// Each distinct phrasing counts once.
    #[default]
    Set,
    Multiset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub rank: usize,
    pub k: usize,
    pub seed: u64,
    pub min_count: usize,
    pub null_distance: f64,
    pub weighting: Weighting,
    pub averaging: Averaging,
    pub mask: MaskPolicy,
    pub svd: SvdOptions,
    pub kmeans_max_iter: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            rank: 25,
            k: 6,
            seed: 0,
            min_count: 50,
            null_distance: 1.0,
            weighting: Weighting::Binary,
            averaging: Averaging::Set,
            mask: MaskPolicy::default(),
            svd: SvdOptions::default(),
            kmeans_max_iter: 300,
        }
    }
}

/// Phrasings of one comment with their multiplicities.
pub fn comment_phrasings(pc: &ParsedComment, policy: &MaskPolicy) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for s in &pc.sentences {
        let arcs = sentence_arcs(s, policy);
        let mut by_head: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for (head, _, arc) in &arcs {
            let key = arc.to_string();
            *out.entry(key.clone()).or_insert(0) += 1;
            by_head.entry(*head).or_default().push(key);
        }
        for group in by_head.values() {
            for i in 0..group.len() {
                for j in i + 1..group.len() {
                    let (a, b) = if group[i] <= group[j] {
                        (&group[i], &group[j])
                    } else {
                        (&group[j], &group[i])
                    };
                    *out.entry(format!("{a} {b}")).or_insert(0) += 1;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhrasingVocabulary {
    pub phrasings: Vec<String>,
    pub doc_freq: Vec<usize>,
    pub min_count: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PhrasingVocabulary {
    pub fn new(phrasings: Vec<String>, doc_freq: Vec<usize>, min_count: usize) -> Self {
        let index = phrasings
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        PhrasingVocabulary {
            phrasings,
            doc_freq,
            min_count,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.phrasings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrasings.is_empty()
    }

    pub fn index_of(&self, phrasing: &str) -> Option<usize> {
        self.index.get(phrasing).copied()
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .phrasings
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
    }

    /// In-vocabulary phrasings of a comment as (index, multiplicity).
    pub fn lookup(&self, pc: &ParsedComment, policy: &MaskPolicy) -> Vec<(usize, usize)> {
        comment_phrasings(pc, policy)
            .into_iter()
            .filter_map(|(p, n)| self.index_of(&p).map(|i| (i, n)))
            .collect()
    }
}

/// Phrasings occurring in at least `min_count` comments, sorted.
pub fn extract_phrasings<'a>(
    comments: impl IntoIterator<Item = &'a ParsedComment>,
    min_count: usize,
    policy: &MaskPolicy,
) -> PhrasingVocabulary {
    let min_count = min_count.max(1);
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for pc in comments {
        for p in comment_phrasings(pc, policy).into_keys() {
            *df.entry(p).or_insert(0) += 1;
        }
    }
    let (phrasings, doc_freq) = df.into_iter().filter(|(_, n)| *n >= min_count).unzip();
    PhrasingVocabulary::new(phrasings, doc_freq, min_count)
}

/// Phrasing × reply matrices sharing one column per reply document.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptMatrices {
    /// `R`: phrasings of each reply.
    pub reply: CsrMatrix,
    /// `P`: phrasings of the comment each reply answers.
    pub prompt: CsrMatrix,
    /// Comment id of each reply column.
    pub reply_ids: Vec<String>,
    /// Replies with no in-vocabulary phrasing.
    pub dropped_replies: usize,
}

impl PromptMatrices {
    /// Phrasing-level view: entry (i, j) is 1 when phrasing `j` occurred in a
    /// reply to a comment containing phrasing `i`.
    pub fn phrasing_pairs(&self) -> CsrMatrix {
        let reply_t = self.reply.transpose();
        let mut entries = Vec::new();
        for i in 0..self.prompt.nrows() {
            let mut hits = BTreeSet::new();
            for (doc, _) in self.prompt.row(i) {
                for (j, _) in reply_t.row(doc) {
                    hits.insert(j);
                }
            }
            entries.extend(hits.into_iter().map(|j| (i, j, 1.0)));
        }
        let v = self.prompt.nrows();
        CsrMatrix::from_triplets(v, v, entries)
    }
}

/// Builds `R` and `P` from consecutive (comment, reply) pairs.
pub fn build_matrices(
    convs: &[Conversation],
    parses: &ParseIndex,
    vocab: &PhrasingVocabulary,
    config: &PromptConfig,
) -> PromptMatrices {
    let phrasings_of = |id: &str| -> Vec<(usize, usize)> {
        parses
            .get(id)
            .map(|pc| vocab.lookup(pc, &config.mask))
            .unwrap_or_default()
    };
    let mut reply_entries = Vec::new();
    let mut prompt_entries = Vec::new();
    let mut reply_ids = Vec::new();
    let mut dropped = 0;
    for conv in convs {
        let mut prev = conv.comments.first().map(|c| phrasings_of(&c.id));
        for reply in conv.comments.iter().skip(1) {
            let here = phrasings_of(&reply.id);
            let prompt = prev.take().unwrap_or_default();
            if here.is_empty() {
                dropped += 1;
            } else {
                let col = reply_ids.len();
                reply_ids.push(reply.id.clone());
                for &(j, n) in &here {
                    let w = match config.weighting {
                        Weighting::Binary => 1.0,
                        Weighting::LogTf => 1.0 + (n as f64).ln(),
                    };
                    reply_entries.push((j, col, w));
                }
                for &(i, _) in &prompt {
                    prompt_entries.push((i, col, 1.0));
                }
            }
            prev = Some(here);
        }
    }
    let d = reply_ids.len();
    PromptMatrices {
        reply: CsrMatrix::from_triplets(vocab.len(), d, reply_entries),
        prompt: CsrMatrix::from_triplets(vocab.len(), d, prompt_entries),
        reply_ids,
        dropped_replies: dropped,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptTypeAssignment {
    /// `None` is the null type.
    pub type_index: Option<usize>,
    pub distance: f64,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], ncols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c])
}

/// `P V S⁻¹`, before any row scaling.
pub fn project_prompts(prompt: &CsrMatrix, v: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64> {
    let mut out = prompt.mul_dense(v);
    for (j, sv) in s.iter().enumerate() {
        out.column_mut(j).scale_mut(1.0 / sv);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptModel {
    pub config: PromptConfig,
    pub vocabulary: PhrasingVocabulary,
    /// Unit-norm reply-vectors, one row per phrasing.
    pub reply_vectors: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    /// Right singular vectors, one row per reply document.
    pub reply_doc_vectors: Vec<Vec<f64>>,
    /// Unit-norm prompt-vectors, one row per phrasing.
    pub prompt_vectors: Vec<Vec<f64>>,
    /// Phrasings whose prompt-vector was zero before scaling.
    pub degenerate: Vec<bool>,
    pub centroids: Vec<Vec<f64>>,
    /// Cluster of each non-degenerate phrasing.
    pub phrasing_types: Vec<Option<usize>>,
    pub content_hash: String,
}

const DEGENERATE_EPS: f64 = 1e-12;

pub fn fit_prompt_model(
    matrices: &PromptMatrices,
    vocab: &PhrasingVocabulary,
    config: &PromptConfig,
) -> Result<PromptModel, PromptError> {
    let (r, p) = (&matrices.reply, &matrices.prompt);
    if r.nrows() != vocab.len() || p.nrows() != vocab.len() || r.ncols() != p.ncols() {
        return Err(PromptError::Shape(format!(
            "R is {}x{}, P is {}x{}, vocabulary has {} phrasings",
            r.nrows(),
            r.ncols(),
            p.nrows(),
            p.ncols(),
            vocab.len()
        )));
    }
    let svd_opts = SvdOptions {
        seed: config.seed,
        ..config.svd
    };
    let svd = truncated_svd(r, config.rank, &svd_opts)?;

    let mut u = svd.u.clone();
    normalize_rows(&mut u, DEGENERATE_EPS);
    let mut p_hat = project_prompts(p, &svd.v, &svd.s);
    let degenerate = normalize_rows(&mut p_hat, DEGENERATE_EPS);

    let usable: Vec<usize> = (0..p_hat.nrows()).filter(|&i| !degenerate[i]).collect();
    if usable.len() < config.k {
        return Err(PromptError::TooFewPromptVectors {
            k: config.k,
            usable: usable.len(),
        });
    }
    let prompt_rows = rows_of(&p_hat);
    let points: Vec<Vec<f64>> = usable.iter().map(|&i| prompt_rows[i].clone()).collect();
    let fit = kmeans(
        &points,
        &KMeansConfig {
            k: config.k,
            seed: config.seed,
            max_iter: config.kmeans_max_iter,
            ..KMeansConfig::default()
        },
    )?;
    let mut phrasing_types = vec![None; vocab.len()];
    for (&i, &c) in usable.iter().zip(&fit.assignments) {
        phrasing_types[i] = Some(c);
    }

    let mut model = PromptModel {
        config: config.clone(),
        vocabulary: vocab.clone(),
        reply_vectors: rows_of(&u),
        singular_values: svd.s.clone(),
        reply_doc_vectors: rows_of(&svd.v),
        prompt_vectors: prompt_rows,
        degenerate,
        centroids: fit.centroids,
        phrasing_types,
        content_hash: String::new(),
    };
    model.content_hash = model.compute_hash();
    Ok(model)
}

impl PromptModel {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    fn compute_hash(&self) -> String {
        let mut copy = self.clone();
        copy.content_hash = String::new();
        let bytes = serde_json::to_vec(&copy).expect("model serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    /// Parses a saved model and checks its content hash.
    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let mut model: PromptModel = serde_json::from_str(text)?;
        model.vocabulary.rebuild_index();
        let computed = model.compute_hash();
        if computed != model.content_hash {
            return Err(PromptError::Hash {
                stored: model.content_hash,
                computed,
            });
        }
        Ok(model)
    }

    pub fn reply_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.reply_vectors, self.rank())
    }

    /// Nearest-centroid assignment of an embedded comment.
    pub fn assign(&self, v: &[f64]) -> PromptTypeAssignment {
        let (idx, sq) = nearest(v, &self.centroids);
        let distance = sq.sqrt();
        PromptTypeAssignment {
            type_index: (distance < self.config.null_distance).then_some(idx),
            distance,
        }
    }

    /// Mean prompt-vector of a comment's in-vocabulary phrasings.
    pub fn embed(&self, pc: &ParsedComment) -> Option<Vec<f64>> {
        let mut acc = vec![0.0; self.rank()];
        let mut weight = 0.0;
        for (i, n) in self.vocabulary.lookup(pc, &self.config.mask) {
            if self.degenerate[i] {
                continue;
            }
            let w = match self.config.averaging {
                Averaging::Set => 1.0,
                Averaging::Multiset => n as f64,
            };
            for (a, x) in acc.iter_mut().zip(&self.prompt_vectors[i]) {
                *a += w * x;
            }
            weight += w;
        }
        (weight > 0.0).then(|| acc.into_iter().map(|a| a / weight).collect())
    }

    pub fn infer(&self, pc: &ParsedComment) -> PromptTypeAssignment {
        match self.embed(pc) {
            Some(v) => self.assign(&v),
            None => PromptTypeAssignment {
                type_index: None,
                distance: f64::INFINITY,
            },
        }
    }

    /// The `n` phrasings of a cluster closest to its centroid.
    pub fn top_phrasings(&self, cluster: usize, n: usize) -> Vec<&str> {
        let mut members: Vec<(f64, usize)> = self
            .phrasing_types
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == Some(cluster))
            .map(|(i, _)| {
                let d = crate::kmeans::sq_dist(&self.prompt_vectors[i], &self.centroids[cluster]);
                (d, i)
            })
            .collect();
        members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        members
            .into_iter()
            .take(n)
            .map(|(_, i)| self.vocabulary.phrasings[i].as_str())
            .collect()
    }
}

/// Assigns `pc` a prompt type under `model`.
pub fn infer_prompt_type(model: &PromptModel, pc: &ParsedComment) -> PromptTypeAssignment {
    model.infer(pc)
}

/// Extracts the vocabulary, builds the matrices and fits a model in one go.
pub fn discover_prompt_types(
    convs: &[Conversation],
    parses: &ParseIndex,
    config: &PromptConfig,
) -> Result<PromptModel, PromptError> {
    let comments = convs
        .iter()
        .flat_map(|c| c.comments.iter())
        .filter_map(|c| parses.get(&c.id));
    let vocab = extract_phrasings(comments, config.min_count, &config.mask);
    let matrices = build_matrices(convs, parses, &vocab, config);
    fit_prompt_model(&matrices, &vocab, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depparse::{Sentence, Token};

    fn tok(index: usize, lemma: &str, upos: &str, head: usize, deprel: &str) -> Token {
        Token {
            index,
            form: lemma.into(),
            lemma: lemma.into(),
            upos: upos.into(),
            head,
            deprel: deprel.into(),
        }
    }

    fn i_think(id: &str) -> ParsedComment {
        ParsedComment::new(
            id,
            vec![Sentence::new(vec![
                tok(1, "i", "PRON", 2, "nsubj"),
                tok(2, "think", "VERB", 0, "root"),
                tok(3, "so", "ADV", 2, "advmod"),
            ])],
        )
    }

    #[test]
    fn phrasings_include_head_sharing_pairs() {
        let p = comment_phrasings(&i_think("c"), &MaskPolicy::default());
        let keys: Vec<_> = p.keys().cloned().collect();
        assert_eq!(
            keys,
            vec![
                "advmod(think,so)".to_string(),
                "advmod(think,so) nsubj(think,i)".to_string(),
                "nsubj(think,i)".to_string(),
            ]
        );
    }

    #[test]
    fn frequency_threshold() {
        let mut comments: Vec<ParsedComment> = (0..100).map(|i| i_think(&i.to_string())).collect();
        let vocab = extract_phrasings(&comments, 50, &MaskPolicy::default());
        assert!(vocab.index_of("nsubj(think,i)").is_some());

        for c in comments.iter_mut().skip(49) {
            c.sentences[0].tokens.truncate(2);
            c.sentences[0].tokens[0].lemma = "we".into();
        }
        let vocab = extract_phrasings(&comments, 50, &MaskPolicy::default());
        assert!(vocab.index_of("advmod(think,so)").is_none());
        assert!(vocab.index_of("nsubj(think,we)").is_some());
        assert!(extract_phrasings(&[], 1, &MaskPolicy::default()).is_empty());
    }

    #[test]
    fn null_boundary() {
        let model = PromptModel {
            config: PromptConfig::default(),
            vocabulary: PhrasingVocabulary::new(Vec::new(), Vec::new(), 1),
            reply_vectors: Vec::new(),
            singular_values: vec![1.0, 1.0],
            reply_doc_vectors: Vec::new(),
            prompt_vectors: Vec::new(),
            degenerate: Vec::new(),
            centroids: vec![vec![0.0, 0.0], vec![5.0, 5.0]],
            phrasing_types: Vec::new(),
            content_hash: String::new(),
        };
        let at = model.assign(&[1.0, 0.0]);
        assert_eq!(at, PromptTypeAssignment { type_index: None, distance: 1.0 });
        let inside = model.assign(&[1.0 - 1e-12, 0.0]);
        assert_eq!(inside.type_index, Some(0));
        let exact = model.assign(&[5.0, 5.0]);
        assert_eq!(exact, PromptTypeAssignment { type_index: Some(1), distance: 0.0 });
        assert_eq!(model.infer(&i_think("x")).type_index, None);
        assert!(model.infer(&i_think("x")).distance.is_infinite());
    }
}
