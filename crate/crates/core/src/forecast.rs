//! Initial-exchange features, pair prediction, and leave-one-page-out
//! cross-validation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Conversation, ConversationPair, PairedDataset};
use crate::depparse::ParseIndex;
use crate::logistic::{fit_logistic, FitOptions, LogisticError, LogisticModel, SparseRow};
use crate::politeness::CompiledRegistry;
use crate::prompts::PromptModel;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("conversation {0:?} has fewer than 2 comments")]
    ShortConversation(String),
    #[error("no parse for comment {0:?}")]
    MissingParse(String),
    #[error("comment {0:?} has no toxicity score")]
    MissingToxicity(String),
    #[error("conversation {conversation:?} lacks {component} features")]
    Missing {
        conversation: String,
        component: &'static str,
    },
    #[error("registry has no {0:?} rule")]
    MissingRule(&'static str),
    #[error("unknown feature set {0:?}")]
    UnknownFeatureSet(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum ForecastError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Logistic(#[from] LogisticError),
    #[error("cross-validation needs at least 2 pages, got {0}")]
    TooFewPages(usize),
    #[error("no features computed for conversation {0:?}")]
    NoFeatures(String),
    #[error("empty l2 grid")]
    EmptyGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureSet {
    WordCount,
    SentimentLexicon,
    BagOfWords,
    Politeness,
    PromptTypes,
    Pragmatic,
    Interlocutor,
    TrainedToxicity,
    ToxicityPlusPragmatic,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 9] = [
        FeatureSet::WordCount,
        FeatureSet::SentimentLexicon,
        FeatureSet::BagOfWords,
        FeatureSet::Politeness,
        FeatureSet::PromptTypes,
        FeatureSet::Pragmatic,
        FeatureSet::Interlocutor,
        FeatureSet::TrainedToxicity,
        FeatureSet::ToxicityPlusPragmatic,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            FeatureSet::WordCount => "wordcount",
            FeatureSet::SentimentLexicon => "sentiment",
            FeatureSet::BagOfWords => "bow",
            FeatureSet::Politeness => "politeness",
            FeatureSet::PromptTypes => "prompts",
            FeatureSet::Pragmatic => "pragmatic",
            FeatureSet::Interlocutor => "interlocutor",
            FeatureSet::TrainedToxicity => "toxicity",
            FeatureSet::ToxicityPlusPragmatic => "toxicity+pragmatic",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FeatureSet::WordCount => "Word count",
            FeatureSet::SentimentLexicon => "Sentiment lexicon",
            FeatureSet::BagOfWords => "Bag of words",
            FeatureSet::Politeness => "Politeness strategies",
            FeatureSet::PromptTypes => "Prompt types",
            FeatureSet::Pragmatic => "Pragmatic (all)",
            FeatureSet::Interlocutor => "Interlocutor features",
            FeatureSet::TrainedToxicity => "Trained toxicity",
            FeatureSet::ToxicityPlusPragmatic => "Toxicity + Pragmatic",
        }
    }

    /// Width with the default 19-rule registry, 6 prompt types and a full
    /// 5000-word vocabulary.
    pub fn nominal_dimension(self) -> usize {
        match self {
            FeatureSet::WordCount => 1,
            FeatureSet::SentimentLexicon => 4,
            FeatureSet::BagOfWords => 5000,
            FeatureSet::Politeness => 38,
            FeatureSet::PromptTypes => 12,
            FeatureSet::Pragmatic => 50,
            FeatureSet::Interlocutor => 5,
            FeatureSet::TrainedToxicity => 2,
            FeatureSet::ToxicityPlusPragmatic => 52,
        }
    }

    pub fn uses_vocabulary(self) -> bool {
        self == FeatureSet::BagOfWords
    }

    pub fn uses_parses(self) -> bool {
        matches!(
            self,
            FeatureSet::SentimentLexicon
                | FeatureSet::Politeness
                | FeatureSet::PromptTypes
                | FeatureSet::Pragmatic
                | FeatureSet::ToxicityPlusPragmatic
        )
    }

    pub fn uses_prompt_model(self) -> bool {
        matches!(
            self,
            FeatureSet::PromptTypes | FeatureSet::Pragmatic | FeatureSet::ToxicityPlusPragmatic
        )
    }

    pub fn uses_toxicity(self) -> bool {
        matches!(
            self,
            FeatureSet::TrainedToxicity | FeatureSet::ToxicityPlusPragmatic
        )
    }
}

impl FromStr for FeatureSet {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FeatureSet::ALL
            .into_iter()
            .find(|f| f.cli_name() == s)
            .ok_or_else(|| FeatureError::UnknownFeatureSet(s.to_string()))
    }
}

/// Lowercased word tokens of raw comment text.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|w| w.trim_matches('\''))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Everything needed to build any feature row for one conversation, taken
/// from its first two comments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeFeatures {
    pub conversation_id: String,
    pub tokens: [Vec<String>; 2],
    /// log(1+edits) and anonymity of each author, then a same-author flag.
    pub interlocutor: [f64; 5],
    pub toxicity: Option<[f64; 2]>,
    pub politeness: Option<[Vec<u32>; 2]>,
    /// Positive and negative lexicon counts of comment 0, then comment 1.
    pub sentiment: Option<[u32; 4]>,
    pub prompt_types: Option<[Option<usize>; 2]>,
    pub prompt_k: usize,
}

#[derive(Clone, Copy, Default)]
pub struct FeatureInputs<'a> {
    pub parses: Option<&'a ParseIndex>,
    pub registry: Option<&'a CompiledRegistry>,
    pub prompt_model: Option<&'a PromptModel>,
}

pub fn exchange_features(
    conv: &Conversation,
    inputs: &FeatureInputs,
) -> Result<ExchangeFeatures, FeatureError> {
    if conv.comments.len() < 2 {
        return Err(FeatureError::ShortConversation(conv.id.clone()));
    }
    let c = [&conv.comments[0], &conv.comments[1]];
    let toxicity = match (c[0].toxicity, c[1].toxicity) {
        (Some(a), Some(b)) => Some([a, b]),
        _ => None,
    };
    let interlocutor = [
        (c[0].author_edit_count as f64).ln_1p(),
        c[0].author_is_anonymous as u8 as f64,
        (c[1].author_edit_count as f64).ln_1p(),
        c[1].author_is_anonymous as u8 as f64,
        (c[0].author_id == c[1].author_id) as u8 as f64,
    ];

    let mut politeness = None;
    let mut sentiment = None;
    let mut prompt_types = None;
    if let Some(parses) = inputs.parses {
        let pcs = [
            parses
                .get(&c[0].id)
                .ok_or_else(|| FeatureError::MissingParse(c[0].id.clone()))?,
            parses
                .get(&c[1].id)
                .ok_or_else(|| FeatureError::MissingParse(c[1].id.clone()))?,
        ];
        if let Some(reg) = inputs.registry {
            let v = [reg.extract(pcs[0]), reg.extract(pcs[1])];
            let pos = reg.names().iter().position(|n| n == "positive_sentiment");
            let neg = reg.names().iter().position(|n| n == "negative_sentiment");
            if let (Some(p), Some(n)) = (pos, neg) {
                sentiment = Some([v[0].counts[p], v[0].counts[n], v[1].counts[p], v[1].counts[n]]);
            }
            politeness = Some([v[0].counts.clone(), v[1].counts.clone()]);
        }
        if let Some(model) = inputs.prompt_model {
            prompt_types = Some([model.infer(pcs[0]).type_index, model.infer(pcs[1]).type_index]);
        }
    }

    Ok(ExchangeFeatures {
        conversation_id: conv.id.clone(),
        tokens: [tokenize(&c[0].text), tokenize(&c[1].text)],
        interlocutor,
        toxicity,
        politeness,
        sentiment,
        prompt_types,
        prompt_k: inputs.prompt_model.map_or(0, |m| m.k()),
    })
}

/// Features for both conversations of every pair, keyed by conversation id.
pub fn featurize_dataset(
    paired: &PairedDataset,
    inputs: &FeatureInputs,
) -> Result<HashMap<String, ExchangeFeatures>, FeatureError> {
    paired
        .conversations()
        .map(|c| exchange_features(c, inputs).map(|f| (c.id.clone(), f)))
        .collect()
}

/// Unigram vocabulary ranked by document frequency over initial exchanges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BowVocabulary {
    pub words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl BowVocabulary {
    /// Top `size` words by document frequency; ties break alphabetically.
    pub fn build<'a>(exchanges: impl IntoIterator<Item = &'a ExchangeFeatures>, size: usize) -> Self {
        let mut df: HashMap<&str, usize> = HashMap::new();
        for ef in exchanges {
            let doc: BTreeSet<&str> = ef.tokens.iter().flatten().map(String::as_str).collect();
            for w in doc {
                *df.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = df.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(size);
        Self::from_words(ranked.into_iter().map(|(w, _)| w.to_string()).collect())
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        BowVocabulary { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }
}

fn missing(ef: &ExchangeFeatures, component: &'static str) -> FeatureError {
    FeatureError::Missing {
        conversation: ef.conversation_id.clone(),
        component,
    }
}

fn push_dense(row: &mut SparseRow, offset: usize, values: impl IntoIterator<Item = f64>) -> usize {
    let mut n = 0;
    for (i, v) in values.into_iter().enumerate() {
        if v != 0.0 {
            row.push((offset + i, v));
        }
        n += 1;
    }
    n
}

fn politeness_block(ef: &ExchangeFeatures, row: &mut SparseRow, offset: usize) -> Result<usize, FeatureError> {
    let p = ef.politeness.as_ref().ok_or_else(|| missing(ef, "politeness"))?;
    let a = push_dense(row, offset, p[0].iter().map(|&c| c as f64));
    let b = push_dense(row, offset + a, p[1].iter().map(|&c| c as f64));
    Ok(a + b)
}

fn prompt_block(ef: &ExchangeFeatures, row: &mut SparseRow, offset: usize) -> Result<usize, FeatureError> {
    let p = ef.prompt_types.ok_or_else(|| missing(ef, "prompt type"))?;
    let k = ef.prompt_k;
    for (slot, t) in p.iter().enumerate() {
        if let Some(t) = t {
            row.push((offset + slot * k + t, 1.0));
        }
    }
    Ok(2 * k)
}

fn toxicity_block(ef: &ExchangeFeatures, row: &mut SparseRow, offset: usize) -> Result<usize, FeatureError> {
    let t = ef.toxicity.ok_or_else(|| missing(ef, "toxicity"))?;
    Ok(push_dense(row, offset, t))
}

impl FeatureSet {
    /// Sparse row and its width. Bag-of-words needs `vocab`.
    pub fn row(
        self,
        ef: &ExchangeFeatures,
        vocab: Option<&BowVocabulary>,
    ) -> Result<(SparseRow, usize), FeatureError> {
        let mut row = SparseRow::new();
        let dim = match self {
            FeatureSet::WordCount => {
                push_dense(&mut row, 0, [(ef.tokens[0].len() + ef.tokens[1].len()) as f64])
            }
            FeatureSet::SentimentLexicon => {
                let s = ef.sentiment.ok_or_else(|| missing(ef, "sentiment"))?;
                push_dense(&mut row, 0, s.map(f64::from))
            }
            FeatureSet::BagOfWords => {
                let vocab = vocab.ok_or_else(|| missing(ef, "vocabulary"))?;
                let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
                for w in ef.tokens.iter().flatten() {
                    if let Some(j) = vocab.get(w) {
                        *counts.entry(j).or_default() += 1.0;
                    }
                }
                row.extend(counts);
                vocab.len()
            }
            FeatureSet::Politeness => politeness_block(ef, &mut row, 0)?,
            FeatureSet::PromptTypes => prompt_block(ef, &mut row, 0)?,
            FeatureSet::Pragmatic => {
                let a = politeness_block(ef, &mut row, 0)?;
                a + prompt_block(ef, &mut row, a)?
            }
            FeatureSet::Interlocutor => push_dense(&mut row, 0, ef.interlocutor),
            FeatureSet::TrainedToxicity => toxicity_block(ef, &mut row, 0)?,
            FeatureSet::ToxicityPlusPragmatic => {
                let a = toxicity_block(ef, &mut row, 0)?;
                let b = politeness_block(ef, &mut row, a)?;
                a + b + prompt_block(ef, &mut row, a + b)?
            }
        };
        Ok((row, dim))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairChoice {
    A,
    B,
}

/// Higher score wins; exact ties go to the lexicographically smaller id and
/// increment `ties`.
pub fn choose(a: (&str, f64), b: (&str, f64), ties: &mut usize) -> PairChoice {
    if a.1 > b.1 {
        PairChoice::A
    } else if b.1 > a.1 {
        PairChoice::B
    } else {
        *ties += 1;
        if a.0 <= b.0 {
            PairChoice::A
        } else {
            PairChoice::B
        }
    }
}

/// Picks the conversation with the higher predicted awry probability.
pub fn predict_pair(
    model: &LogisticModel,
    a: (&str, &[(usize, f64)]),
    b: (&str, &[(usize, f64)]),
    ties: &mut usize,
) -> PairChoice {
    choose(
        (a.0, model.predict_proba(a.1)),
        (b.0, model.predict_proba(b.1)),
        ties,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub feature_set: FeatureSet,
    pub l2_grid: Vec<f64>,
    pub inner_folds: usize,
    pub seed: u64,
    /// Train on within-pair feature differences instead of single
    /// conversations.
    pub pairwise: bool,
    pub vocabulary_size: usize,
    pub fit: FitOptions,
    pub parallel: bool,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            feature_set: FeatureSet::Pragmatic,
            l2_grid: vec![0.1, 1.0, 10.0],
            inner_folds: 5,
            seed: 0,
            pairwise: false,
            vocabulary_size: 5000,
            fit: FitOptions::default(),
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub page_id: String,
    pub awry_id: String,
    pub ontrack_id: String,
    pub awry_score: f64,
    pub ontrack_score: f64,
    pub correct: bool,
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub page_id: String,
    pub pairs: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub feature_set: FeatureSet,
    pub dimension: usize,
    pub pairs: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub ties: usize,
    pub seed: u64,
    pub pairwise: bool,
    pub l2_grid: Vec<f64>,
    pub folds: Vec<FoldResult>,
    pub predictions: Vec<PairPrediction>,
}

/// Artifacts fitted on one fold's training pages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldModel {
    pub vocabulary: Option<BowVocabulary>,
    pub model: LogisticModel,
    pub dimension: usize,
    pub l2: f64,
    pub pairwise: bool,
}

impl FoldModel {
    fn score(&self, ef: &ExchangeFeatures, fs: FeatureSet) -> Result<f64, FeatureError> {
        let (row, _) = fs.row(ef, self.vocabulary.as_ref())?;
        Ok(if self.pairwise {
            self.model.linear_score(&row)
        } else {
            self.model.predict_proba(&row)
        })
    }
}

type Features = HashMap<String, ExchangeFeatures>;

fn lookup<'a>(feats: &'a Features, id: &str) -> Result<&'a ExchangeFeatures, ForecastError> {
    feats.get(id).ok_or_else(|| ForecastError::NoFeatures(id.to_string()))
}

fn merge_diff(a: &[(usize, f64)], b: &[(usize, f64)]) -> SparseRow {
    let mut m: BTreeMap<usize, f64> = BTreeMap::new();
    for &(j, x) in a {
        *m.entry(j).or_default() += x;
    }
    for &(j, x) in b {
        *m.entry(j).or_default() -= x;
    }
    m.into_iter().filter(|(_, v)| *v != 0.0).collect()
}

fn train(
    pairs: &[&ConversationPair],
    feats: &Features,
    cfg: &CvConfig,
    l2: f64,
) -> Result<FoldModel, ForecastError> {
    let fs = cfg.feature_set;
    let vocabulary = if fs.uses_vocabulary() {
        let mut exchanges = Vec::with_capacity(2 * pairs.len());
        for p in pairs {
            exchanges.push(lookup(feats, &p.awry.id)?);
            exchanges.push(lookup(feats, &p.ontrack.id)?);
        }
        Some(BowVocabulary::build(exchanges, cfg.vocabulary_size))
    } else {
        None
    };
    let mut rows = Vec::with_capacity(2 * pairs.len());
    let mut y = Vec::with_capacity(2 * pairs.len());
    let mut dim = 0;
    for p in pairs {
        let (ra, da) = fs.row(lookup(feats, &p.awry.id)?, vocabulary.as_ref())?;
        let (ro, _) = fs.row(lookup(feats, &p.ontrack.id)?, vocabulary.as_ref())?;
        dim = da;
        if cfg.pairwise {
            rows.push(merge_diff(&ra, &ro));
            y.push(true);
            rows.push(merge_diff(&ro, &ra));
            y.push(false);
        } else {
            rows.push(ra);
            y.push(true);
            rows.push(ro);
            y.push(false);
        }
    }
    let opts = FitOptions { l2, ..cfg.fit };
    let model = fit_logistic(&rows, dim, &y, &opts)?;
    Ok(FoldModel {
        vocabulary,
        model,
        dimension: dim,
        l2,
        pairwise: cfg.pairwise,
    })
}

fn evaluate(
    fold: &FoldModel,
    pairs: &[&ConversationPair],
    feats: &Features,
    fs: FeatureSet,
) -> Result<Vec<PairPrediction>, ForecastError> {
    pairs
        .iter()
        .map(|p| {
            let sa = fold.score(lookup(feats, &p.awry.id)?, fs)?;
            let so = fold.score(lookup(feats, &p.ontrack.id)?, fs)?;
            let mut ties = 0;
            let choice = choose((&p.awry.id, sa), (&p.ontrack.id, so), &mut ties);
            Ok(PairPrediction {
                page_id: p.page_id().to_string(),
                awry_id: p.awry.id.clone(),
                ontrack_id: p.ontrack.id.clone(),
                awry_score: sa,
                ontrack_score: so,
                correct: choice == PairChoice::A,
                tie: ties > 0,
            })
        })
        .collect()
}

fn page_seed(seed: u64, page: &str) -> u64 {
    // FNV-1a, so a fold's seed does not depend on which other pages exist.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in page.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    seed ^ h
}

fn default_l2(grid: &[f64]) -> f64 {
    if grid.contains(&1.0) {
        1.0
    } else {
        grid[0]
    }
}

/// Chooses the l2 strength by grouped k-fold over the training pages; ties
/// prefer stronger regularization.
fn select_l2(
    train_pairs: &[&ConversationPair],
    feats: &Features,
    cfg: &CvConfig,
    seed: u64,
) -> Result<f64, ForecastError> {
    if cfg.l2_grid.len() == 1 {
        return Ok(cfg.l2_grid[0]);
    }
    let mut pages: Vec<&str> = train_pairs.iter().map(|p| p.page_id()).collect();
    pages.sort_unstable();
    pages.dedup();
    let folds = cfg.inner_folds.min(pages.len());
    if folds < 2 {
        return Ok(default_l2(&cfg.l2_grid));
    }
    pages.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let group: HashMap<&str, usize> = pages.iter().enumerate().map(|(i, p)| (*p, i % folds)).collect();

    let mut best = (default_l2(&cfg.l2_grid), -1i64);
    let mut grid = cfg.l2_grid.clone();
    grid.sort_by(|a, b| b.total_cmp(a));
    for l2 in grid {
        let mut correct = 0i64;
        for g in 0..folds {
            let (held, rest): (Vec<&ConversationPair>, Vec<&ConversationPair>) =
                train_pairs.iter().partition(|p| group[p.page_id()] == g);
            let fold = train(&rest, feats, cfg, l2)?;
            correct += evaluate(&fold, &held, feats, cfg.feature_set)?
                .iter()
                .filter(|p| p.correct)
                .count() as i64;
        }
        if correct > best.1 {
            best = (l2, correct);
        }
    }
    Ok(best.0)
}

/// Fits the model used to score the pairs of `page_id`, from all other pages.
pub fn fold_model(
    paired: &PairedDataset,
    feats: &Features,
    page_id: &str,
    cfg: &CvConfig,
) -> Result<FoldModel, ForecastError> {
    let train_pairs: Vec<&ConversationPair> =
        paired.pairs().iter().filter(|p| p.page_id() != page_id).collect();
    let l2 = select_l2(&train_pairs, feats, cfg, page_seed(cfg.seed, page_id))?;
    train(&train_pairs, feats, cfg, l2)
}

pub fn lopo_cv(
    paired: &PairedDataset,
    feats: &Features,
    cfg: &CvConfig,
) -> Result<CvReport, ForecastError> {
    if cfg.l2_grid.is_empty() {
        return Err(ForecastError::EmptyGrid);
    }
    let pages: Vec<&String> = paired.page_index().keys().collect();
    if pages.len() < 2 {
        return Err(ForecastError::TooFewPages(pages.len()));
    }
    let run = |page: &&String| -> Result<(FoldResult, Vec<PairPrediction>, usize), ForecastError> {
        let fold = fold_model(paired, feats, page, cfg)?;
        let test: Vec<&ConversationPair> = paired.page_index()[page.as_str()]
            .iter()
            .map(|&i| &paired.pairs()[i])
            .collect();
        let preds = evaluate(&fold, &test, feats, cfg.feature_set)?;
        let correct = preds.iter().filter(|p| p.correct).count();
        Ok((
            FoldResult {
                page_id: page.to_string(),
                pairs: preds.len(),
                correct,
                accuracy: correct as f64 / preds.len() as f64,
                l2: fold.l2,
            },
            preds,
            fold.dimension,
        ))
    };
    let results: Vec<_> = if cfg.parallel {
        pages.par_iter().map(run).collect::<Result<_, _>>()?
    } else {
        pages.iter().map(run).collect::<Result<_, _>>()?
    };

    let mut folds = Vec::with_capacity(results.len());
    let mut predictions = Vec::with_capacity(paired.len());
    let mut dimension = 0;
    for (f, p, d) in results {
        folds.push(f);
        predictions.extend(p);
        dimension = dimension.max(d);
    }
    let correct = predictions.iter().filter(|p| p.correct).count();
    Ok(CvReport {
        feature_set: cfg.feature_set,
        dimension,
        pairs: predictions.len(),
        correct,
        accuracy: correct as f64 / predictions.len() as f64,
        ties: predictions.iter().filter(|p| p.tie).count(),
        seed: cfg.seed,
        pairwise: cfg.pairwise,
        l2_grid: cfg.l2_grid.clone(),
        folds,
        predictions,
    })
}

/// Pairs whose attack comes after the fourth comment.
pub fn horizon_subset(paired: &PairedDataset) -> PairedDataset {
    paired.filter(|p| p.awry.attack_index.is_some_and(|i| i >= 4))
}

/// Accuracy table, one row per report, in feature-set order.
pub fn accuracy_table(reports: &[CvReport]) -> String {
    let mut sorted: Vec<&CvReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.feature_set);
    let mut out = String::from("| Feature set | # features | Accuracy |\n|---|---:|---:|\n");
    for r in sorted {
        let _ = writeln!(
            out,
            "| {} | {} | {:.1}% |",
            r.feature_set.label(),
            r.dimension,
            100.0 * r.accuracy
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ef(id: &str) -> ExchangeFeatures {
        ExchangeFeatures {
            conversation_id: id.to_string(),
            tokens: [vec!["a".into(), "b".into()], vec!["b".into()]],
            interlocutor: [0.0; 5],
            toxicity: Some([0.1, 0.2]),
            politeness: Some([vec![0; 19], vec![0; 19]]),
            sentiment: Some([0; 4]),
            prompt_types: Some([Some(2), Some(5)]),
            prompt_k: 6,
        }
    }

    #[test]
    fn nominal_dimensions() {
        let e = ef("x");
        for fs in FeatureSet::ALL {
            if fs == FeatureSet::BagOfWords {
                continue;
            }
            assert_eq!(fs.row(&e, None).unwrap().1, fs.nominal_dimension(), "{fs:?}");
        }
        for fs in FeatureSet::ALL {
            assert_eq!(fs.cli_name().parse::<FeatureSet>().unwrap(), fs);
        }
    }

    #[test]
    fn prompt_block_is_one_hot() {
        let mut e = ef("x");
        let (row, _) = FeatureSet::PromptTypes.row(&e, None).unwrap();
        assert_eq!(row, vec![(2, 1.0), (11, 1.0)]);
        e.prompt_types = Some([None, None]);
        assert!(FeatureSet::PromptTypes.row(&e, None).unwrap().0.is_empty());
    }

    #[test]
    fn tie_policy() {
        let mut ties = 0;
        assert_eq!(choose(("a", 0.9), ("b", 0.2), &mut ties), PairChoice::A);
        assert_eq!(choose(("a", 0.2), ("b", 0.9), &mut ties), PairChoice::B);
        assert_eq!(ties, 0);
        assert_eq!(choose(("z", 0.5), ("b", 0.5), &mut ties), PairChoice::B);
        assert_eq!(ties, 1);
    }

    #[test]
    fn bow_vocabulary_ranks_by_document_frequency() {
        let mut a = ef("a");
        a.tokens = [vec!["x".into(), "x".into()], vec!["y".into()]];
        let mut b = ef("b");
        b.tokens = [vec!["y".into()], vec![]];
        let v = BowVocabulary::build([&a, &b], 10);
        assert_eq!(v.words, vec!["y", "x"]);
        let (row, dim) = FeatureSet::BagOfWords.row(&a, Some(&v)).unwrap();
        assert_eq!((row, dim), (vec![(0, 1.0), (1, 2.0)], 2));
    }

    #[test]
    fn tokenizer() {
        assert_eq!(tokenize("Don't SHOUT, ok?"), vec!["don't", "shout", "ok"]);
    }
}
