#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use derail::corpus::{to_jsonl, Comment, Conversation, Label};
use derail::depparse::{write_conllu, ParsedComment, Sentence, Token};
use derail::logistic::Objective;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORKED_EXAMPLES: &str = include_str!("../fixtures/worked_examples.conllu");

/// (comment id, strategy, expected count) for the hand-annotated sentences.
pub const WORKED_EXPECTATIONS: &[(&str, &str, u32)] = &[
    ("gratitude", "gratitude", 1),
    ("gratitude", "second_person", 1),
    ("greeting", "greeting", 1),
    ("greeting", "direct_question", 0),
    ("please_start", "please_start", 1),
    ("please_start", "please_mid", 0),
    ("please_mid", "please_mid", 1),
    ("please_mid", "please_start", 0),
    ("please_mid", "direct_question", 0),
    ("hedge_think", "hedges", 1),
    ("hedge_think", "first_person_start", 1),
    ("hedge_assume", "hedges", 1),
    ("hedge_assume", "first_person_start", 1),
    ("direct_question", "direct_question", 1),
    ("second_person_start", "second_person_start", 1),
    ("second_person_start", "second_person", 0),
];

// ---------------------------------------------------------------- oracles

fn choose_exact(n: u64, k: u64) -> u128 {
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
    }
    c
}

/// Two-sided binomial p-value by enumeration with exact integer coefficients.
pub fn binomial_enumeration(k: u64, n: u64, p0: f64) -> f64 {
    let pmf: Vec<f64> = (0..=n)
        .map(|x| choose_exact(n, x) as f64 * p0.powi(x as i32) * (1.0 - p0).powi((n - x) as i32))
        .collect();
    let cutoff = pmf[k as usize] * (1.0 + 1e-7);
    pmf.iter().filter(|&&q| q <= cutoff).sum::<f64>().min(1.0)
}

pub fn log_odds_direct(k1: u64, n1: u64, k2: u64, n2: u64) -> f64 {
    let a = (k1 as f64 + 0.5) / ((n1 - k1) as f64 + 0.5);
    let b = (k2 as f64 + 0.5) / ((n2 - k2) as f64 + 0.5);
    a.ln() - b.ln()
}

/// Orthogonal projection of the rows of `p` onto the row space of `r`,
/// via modified Gram-Schmidt on the rows of `r`.
pub fn row_space_projection(r: &[Vec<f64>], p: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for row in r {
        let mut v = row.clone();
        for _ in 0..2 {
            for q in &basis {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(q) {
                    *x -= d * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    p.iter()
        .map(|row| {
            let mut out = vec![0.0; row.len()];
            for q in &basis {
                let d: f64 = row.iter().zip(q).map(|(a, b)| a * b).sum();
                for (o, y) in out.iter_mut().zip(q) {
                    *o += d * y;
                }
            }
            out
        })
        .collect()
}

/// Largest relative error between the analytic gradient and central
/// differences.
pub fn gradient_check(obj: &Objective, params: &[f64]) -> f64 {
    let (_, g) = obj.value_and_gradient(params);
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let h = 1e-5 * params[i].abs().max(1.0);
        let mut up = params.to_vec();
        let mut down = params.to_vec();
        up[i] += h;
        down[i] -= h;
        let fd = (obj.value(&up) - obj.value(&down)) / (2.0 * h);
        let err = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-3);
        worst = worst.max(err);
    }
    worst
}

// ---------------------------------------------------------- synthetic data

type Tok = (&'static str, &'static str, &'static str, usize, &'static str);

fn sentence(toks: &[Tok]) -> Sentence {
    Sentence::new(
        toks.iter()
            .enumerate()
            .map(|(i, t)| Token {
                index: i + 1,
                form: t.0.into(),
                lemma: t.1.into(),
                upos: t.2.into(),
                head: t.3,
                deprel: t.4.into(),
            })
            .collect(),
    )
}

const WHY_NO_SOURCE: &[Tok] = &[
    ("Why", "why", "ADV", 2, "advmod"),
    ("is", "be", "VERB", 0, "root"),
    ("there", "there", "PRON", 2, "expl"),
    ("no", "no", "DET", 5, "det"),
    ("source", "source", "NOUN", 2, "nsubj"),
    ("?", "?", "PUNCT", 2, "punct"),
];
const YOU_REMOVED: &[Tok] = &[
    ("You", "you", "PRON", 2, "nsubj"),
    ("removed", "remove", "VERB", 0, "root"),
    ("my", "my", "PRON", 4, "nmod:poss"),
    ("edit", "edit", "NOUN", 2, "obj"),
    ("again", "again", "ADV", 2, "advmod"),
    (".", ".", "PUNCT", 2, "punct"),
];
const WHAT_IS_WRONG: &[Tok] = &[
    ("What", "what", "PRON", 3, "nsubj"),
    ("is", "be", "AUX", 3, "cop"),
    ("wrong", "wrong", "ADJ", 0, "root"),
    ("with", "with", "ADP", 6, "case"),
    ("this", "this", "DET", 6, "det"),
    ("claim", "claim", "NOUN", 3, "obl"),
    ("?", "?", "PUNCT", 3, "punct"),
];
const YOUR_SOURCE: &[Tok] = &[
    ("Your", "your", "PRON", 2, "nmod:poss"),
    ("source", "source", "NOUN", 5, "nsubj"),
    ("does", "do", "AUX", 5, "aux"),
    ("not", "not", "PART", 5, "advmod"),
    ("support", "support", "VERB", 0, "root"),
    ("this", "this", "PRON", 5, "obj"),
    (".", ".", "PUNCT", 5, "punct"),
];
const THANKS: &[Tok] = &[
    ("Thanks", "thanks", "NOUN", 0, "root"),
    ("for", "for", "ADP", 4, "case"),
    ("the", "the", "DET", 4, "det"),
    ("help", "help", "NOUN", 1, "nmod"),
    (".", ".", "PUNCT", 1, "punct"),
];
const HELLO_MERGE: &[Tok] = &[
    ("Hello", "hello", "INTJ", 4, "discourse"),
    (",", ",", "PUNCT", 1, "punct"),
    ("I", "I", "PRON", 4, "nsubj"),
    ("think", "think", "VERB", 0, "root"),
    ("we", "we", "PRON", 7, "nsubj"),
    ("could", "could", "AUX", 7, "aux"),
    ("merge", "merge", "VERB", 4, "ccomp"),
    ("these", "these", "DET", 9, "det"),
    ("sections", "section", "NOUN", 7, "obj"),
    (".", ".", "PUNCT", 4, "punct"),
];
const PLEASE_ADD: &[Tok] = &[
    ("Please", "please", "INTJ", 2, "discourse"),
    ("add", "add", "VERB", 0, "root"),
    ("a", "a", "DET", 4, "det"),
    ("citation", "citation", "NOUN", 2, "obj"),
    ("for", "for", "ADP", 7, "case"),
    ("the", "the", "DET", 7, "det"),
    ("date", "date", "NOUN", 2, "obl"),
    (".", ".", "PUNCT", 2, "punct"),
];
const IT_SEEMS: &[Tok] = &[
    ("It", "it", "PRON", 2, "nsubj"),
    ("seems", "seem", "VERB", 0, "root"),
    ("the", "the", "DET", 4, "det"),
    ("article", "article", "NOUN", 5, "nsubj"),
    ("needs", "need", "VERB", 2, "ccomp"),
    ("a", "a", "DET", 7, "det"),
    ("map", "map", "NOUN", 5, "obj"),
    (".", ".", "PUNCT", 2, "punct"),
];
const I_EXPANDED: &[Tok] = &[
    ("I", "I", "PRON", 2, "nsubj"),
    ("expanded", "expand", "VERB", 0, "root"),
    ("the", "the", "DET", 4, "det"),
    ("lead", "lead", "NOUN", 2, "obj"),
    ("yesterday", "yesterday", "NOUN", 2, "obl:tmod"),
    (".", ".", "PUNCT", 2, "punct"),
];
const PAGE_DELETED: &[Tok] = &[
    ("The", "the", "DET", 2, "det"),
    ("page", "page", "NOUN", 4, "nsubj:pass"),
    ("was", "be", "AUX", 4, "aux:pass"),
    ("deleted", "delete", "VERB", 0, "root"),
    ("as", "as", "ADP", 6, "case"),
    ("spam", "spam", "NOUN", 4, "obl"),
    (".", ".", "PUNCT", 4, "punct"),
];

pub const HOSTILE: [&[Tok]; 4] = [WHY_NO_SOURCE, YOU_REMOVED, WHAT_IS_WRONG, YOUR_SOURCE];
pub const POLITE: [&[Tok]; 4] = [THANKS, HELLO_MERGE, PLEASE_ADD, IT_SEEMS];
pub const NEUTRAL: [&[Tok]; 2] = [I_EXPANDED, PAGE_DELETED];

fn all_templates() -> Vec<&'static [Tok]> {
    HOSTILE.iter().chain(&POLITE).chain(&NEUTRAL).copied().collect()
}

pub struct Synth {
    pub labeled: Vec<Conversation>,
    pub parses: Vec<ParsedComment>,
    pub unlabeled: Vec<Conversation>,
    pub unlabeled_parses: Vec<ParsedComment>,
}

pub struct SynthOptions {
    pub pages: usize,
    pub max_pairs_per_page: usize,
    /// Probability that the opening of an awry conversation is hostile (and
    /// that of an on-track conversation polite).
    pub signal: f64,
    pub unlabeled_conversations: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            pages: 30,
            max_pairs_per_page: 3,
            signal: 0.8,
            unlabeled_conversations: 300,
            seed: 7,
        }
    }
}

fn comment(
    rng: &mut ChaCha8Rng,
    id: String,
    author: &str,
    ts: i64,
    toks: &[&[Tok]],
    toxicity: f64,
) -> (Comment, ParsedComment) {
    let sentences: Vec<Sentence> = toks.iter().map(|t| sentence(t)).collect();
    let text = sentences
        .iter()
        .map(|s| s.tokens.iter().map(|t| t.form.as_str()).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join(" ");
    let c = Comment {
        id: id.clone(),
        author_id: author.to_string(),
        author_edit_count: rng.random_range(0..5000),
        author_is_anonymous: rng.random_bool(0.1),
        timestamp: ts,
        text,
        toxicity: Some(toxicity),
    };
    (c, ParsedComment::new(&id, sentences))
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a [Tok]]) -> &'a [Tok] {
    pool[rng.random_range(0..pool.len())]
}

fn opening(rng: &mut ChaCha8Rng, awry: bool, signal: f64) -> &'static [Tok] {
    let leaning = rng.random_bool(signal);
    match (awry, leaning) {
        (true, true) | (false, false) => pick(rng, &HOSTILE),
        _ => pick(rng, &POLITE),
    }
}

/// Deterministic labeled and unlabeled corpora with parses.
pub fn synth(opts: &SynthOptions) -> Synth {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut labeled = Vec::new();
    let mut parses = Vec::new();
    for page in 0..opts.pages {
        let pairs = rng.random_range(1..=opts.max_pairs_per_page);
        let base = 1_500_000_000 + page as i64 * 10_000_000;
        for j in 0..pairs {
            for awry in [true, false] {
                let cid = format!("p{page:03}-{j}-{}", if awry { "a" } else { "o" });
                let len = rng.random_range(3..=8usize);
                let attack = awry.then(|| rng.random_range(2..len));
                let attacker_first = rng.random_bool(0.5);
                let authors = [format!("{cid}-u0"), format!("{cid}-u1"), format!("{cid}-u2")];
                let mut ts = base + j as i64 * 100_000 + rng.random_range(0..50_000);
                let mut comments = Vec::new();
                for pos in 0..len {
                    let author = match (attack, pos) {
                        (Some(a), p) if p == a => {
                            if attacker_first { &authors[0] } else { &authors[1] }
                        }
                        (_, 0) => &authors[0],
                        (_, 1) => &authors[1],
                        _ => &authors[2],
                    };
                    let first = if pos < 2 {
                        opening(&mut rng, awry, opts.signal)
                    } else {
                        pick(&mut rng, &all_templates())
                    };
                    let mut toks = vec![first];
                    if rng.random_bool(0.3) {
                        toks.push(pick(&mut rng, &NEUTRAL));
                    }
                    let tox = match attack {
                        Some(a) if pos == a => rng.random_range(0.6..1.0),
                        Some(_) if pos < 2 => rng.random_range(0.1..0.39),
                        _ => rng.random_range(0.0..0.3),
                    };
                    ts += rng.random_range(60..5000);
                    let (c, pc) = comment(&mut rng, format!("{cid}-c{pos}"), author, ts, &toks, tox);
                    comments.push(c);
                    parses.push(pc);
                }
                labeled.push(Conversation {
                    id: cid,
                    page_id: format!("page-{page:03}"),
                    label: Some(if awry { Label::AwryTurning } else { Label::OnTrack }),
                    attack_index: attack,
                    comments,
                });
            }
        }
    }

    // Replies depend on the prompting template so prompt types have
    // something to recover.
    let mut unlabeled = Vec::new();
    let mut unlabeled_parses = Vec::new();
    let templates = all_templates();
    for i in 0..opts.unlabeled_conversations {
        let cid = format!("u{i:04}");
        let len = rng.random_range(2..=4usize);
        let mut ts = 1_400_000_000 + i as i64 * 1000;
        let mut prev = rng.random_range(0..templates.len());
        let mut comments = Vec::new();
        for pos in 0..len {
            let t = if pos == 0 {
                prev
            } else if rng.random_bool(0.8) {
                (prev * 3 + 1) % templates.len()
            } else {
                rng.random_range(0..templates.len())
            };
            prev = t;
            ts += 100;
            let author = format!("{cid}-u{}", pos % 2);
            let (c, pc) = comment(&mut rng, format!("{cid}-c{pos}"), &author, ts, &[templates[t]], 0.1);
            comments.push(c);
            unlabeled_parses.push(pc);
        }
        unlabeled.push(Conversation {
            id: cid,
            page_id: format!("talk-{}", i % 40),
            label: None,
            attack_index: None,
            comments,
        });
    }
    Synth {
        labeled,
        parses,
        unlabeled,
        unlabeled_parses,
    }
}

pub struct SynthFiles {
    pub labeled: PathBuf,
    pub parses: PathBuf,
    pub unlabeled: PathBuf,
    pub unlabeled_parses: PathBuf,
}

impl Synth {
    pub fn write(&self, dir: &Path) -> SynthFiles {
        let files = SynthFiles {
            labeled: dir.join("labeled.jsonl"),
            parses: dir.join("labeled.conllu"),
            unlabeled: dir.join("unlabeled.jsonl"),
            unlabeled_parses: dir.join("unlabeled.conllu"),
        };
        fs::write(&files.labeled, to_jsonl(&self.labeled)).unwrap();
        fs::write(&files.parses, write_conllu(&self.parses)).unwrap();
        fs::write(&files.unlabeled, to_jsonl(&self.unlabeled)).unwrap();
        fs::write(&files.unlabeled_parses, write_conllu(&self.unlabeled_parses)).unwrap();
        files
    }
}

/// Small prompt-model settings that suit the synthetic corpus.
pub const SYNTH_PROMPTS_TOML: &str = "[prompts]\nrank = 4\nk = 3\nmin_count = 10\nseed = 3\n";
