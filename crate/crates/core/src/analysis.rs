//! Marker statistics: smoothed log-odds ratios, exact two-sided tests, and
//! the position / role breakdown of markers in the initial exchange.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Conversation, PairedDataset};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("invalid counts: need 0 <= k <= n and n > 0 (got k1={k1}, n1={n1}, k2={k2}, n2={n2})")]
    Counts { k1: u64, n1: u64, k2: u64, n2: u64 },
    #[error("invalid binomial test input: k={k}, n={n}, p0={p0}")]
    Binomial { k: u64, n: u64, p0: f64 },
    #[error("comment {0:?} has no marker annotations")]
    MissingMarkers(String),
    #[error("conversation {0:?} has fewer than two comments")]
    ShortConversation(String),
}

/// Log-odds ratio of group 1 vs group 2 with +½ added to every cell.
pub fn log_odds_ratio(k1: u64, n1: u64, k2: u64, n2: u64) -> Result<f64, AnalysisError> {
    if n1 == 0 || n2 == 0 || k1 > n1 || k2 > n2 {
        return Err(AnalysisError::Counts { k1, n1, k2, n2 });
    }
    let odds = |k: u64, n: u64| (k as f64 + 0.5) / ((n - k) as f64 + 0.5);
    Ok((odds(k1, n1) / odds(k2, n2)).ln())
}

fn ln_factorials(n: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    out.push(0.0);
    let mut acc = 0.0;
    for i in 1..=n {
        acc += (i as f64).ln();
        out.push(acc);
    }
    out
}

/// Binomial(n, p) probabilities of 0..=n.
pub fn binomial_pmf(n: u64, p: f64) -> Vec<f64> {
    let lf = ln_factorials(n);
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    (0..=n)
        .map(|x| {
            let xi = x as usize;
            let log_choose = lf[n as usize] - lf[xi] - lf[(n - x) as usize];
            (log_choose + x as f64 * lp + (n - x) as f64 * lq).exp()
        })
        .collect()
}

/// Relative slack when comparing probabilities to the observed one.
const TIE_TOLERANCE: f64 = 1e-7;

fn small_p_sum(probs: &[f64], observed: f64) -> f64 {
    let cutoff = observed * (1.0 + TIE_TOLERANCE);
    probs
        .iter()
        .filter(|&&q| q <= cutoff)
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

/// Exact two-sided binomial test: total probability of all outcomes no more
/// likely than `k` under Binomial(n, p0).
pub fn binomial_test_two_tailed(k: u64, n: u64, p0: f64) -> Result<f64, AnalysisError> {
    if k > n || !(p0 > 0.0 && p0 < 1.0) {
        return Err(AnalysisError::Binomial { k, n, p0 });
    }
    let pmf = binomial_pmf(n, p0);
    Ok(small_p_sum(&pmf, pmf[k as usize]))
}

/// Fisher's exact test on the 2×2 table [[k1, n1-k1], [k2, n2-k2]],
/// two-sided by the same small-p rule.
pub fn fisher_exact_two_tailed(k1: u64, n1: u64, k2: u64, n2: u64) -> Result<f64, AnalysisError> {
    if n1 == 0 || n2 == 0 || k1 > n1 || k2 > n2 {
        return Err(AnalysisError::Counts { k1, n1, k2, n2 });
    }
    let total = n1 + n2;
    let successes = k1 + k2;
    let lf = ln_factorials(total);
    let ln_choose = |n: u64, k: u64| lf[n as usize] - lf[k as usize] - lf[(n - k) as usize];
    let denom = ln_choose(total, successes);
    let lo = successes.saturating_sub(n2);
    let hi = successes.min(n1);
    let probs: Vec<f64> = (lo..=hi)
        .map(|x| (ln_choose(n1, x) + ln_choose(n2, successes - x) - denom).exp())
        .collect();
    Ok(small_p_sum(&probs, probs[(k1 - lo) as usize]))
}

/// Binomial test with the on-track proportion as the null, including the
/// degenerate proportions 0 and 1.
fn binomial_vs_reference(k: u64, n: u64, k_ref: u64, n_ref: u64) -> f64 {
    let p0 = k_ref as f64 / n_ref as f64;
    if k_ref == 0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if k_ref == n_ref {
        return if k == n { 1.0 } else { 0.0 };
    }
    binomial_test_two_tailed(k, n, p0).expect("0 < p0 < 1 and k <= n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NullTest {
    /// Binomial test of the awry count against the on-track proportion.
    #[default]
    Binomial,
    /// Fisher's exact test on the two proportions.
    Fisher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    First,
    Second,
    Attacker,
    NonAttacker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    All,
    AttackerInitiated,
    NonAttackerInitiated,
}

impl View {
    /// Comment position examined for `slot`, if the combination is defined.
    pub fn position(self, slot: Slot) -> Option<usize> {
        match (self, slot) {
            (View::All, Slot::First) => Some(0),
            (View::All, Slot::Second) => Some(1),
            (View::AttackerInitiated, Slot::Attacker) => Some(0),
            (View::AttackerInitiated, Slot::NonAttacker) => Some(1),
            (View::NonAttackerInitiated, Slot::Attacker) => Some(1),
            (View::NonAttackerInitiated, Slot::NonAttacker) => Some(0),
            _ => None,
        }
    }

    pub fn slots(self) -> [Slot; 2] {
        match self {
            View::All => [Slot::First, Slot::Second],
            _ => [Slot::Attacker, Slot::NonAttacker],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Significance {
    #[serde(rename = "0.001")]
    P001,
    #[serde(rename = "0.01")]
    P01,
    #[serde(rename = "0.05")]
    P05,
    #[serde(rename = "none")]
    None,
}

impl Significance {
    pub fn of(p: f64) -> Self {
        if p < 0.001 {
            Significance::P001
        } else if p < 0.01 {
            Significance::P01
        } else if p < 0.05 {
            Significance::P05
        } else {
            Significance::None
        }
    }

    pub fn marks(self, symbol: char) -> String {
        let n = match self {
            Significance::P001 => 3,
            Significance::P01 => 2,
            Significance::P05 => 1,
            Significance::None => 0,
        };
        std::iter::repeat_n(symbol, n).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerRow {
    pub marker: String,
    pub slot: Slot,
    pub view: View,
    pub count_awry: u64,
    pub n_awry: u64,
    pub count_ontrack: u64,
    pub n_ontrack: u64,
    pub log_odds: f64,
    pub p_value: f64,
    pub significant_at: Significance,
    pub bonferroni_significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerTable {
    pub rows: Vec<MarkerRow>,
    /// Number of tests in the `All` view used for the Bonferroni correction.
    pub bonferroni_tests: usize,
    pub attacker_initiated: usize,
    pub non_attacker_initiated: usize,
    /// Awry conversations without a usable attacker attribution.
    pub role_exclusions: usize,
}

/// Markers present in each comment, keyed by comment id.
pub type MarkerPresence = HashMap<String, BTreeSet<String>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    AttackerInitiated,
    NonAttackerInitiated,
}

fn role_of(conv: &Conversation) -> Option<Role> {
    let attacker = conv.attacker()?;
    if conv.comments.first()?.author_id == attacker {
        Some(Role::AttackerInitiated)
    } else if conv.comments.get(1)?.author_id == attacker {
        Some(Role::NonAttackerInitiated)
    } else {
        None
    }
}

pub fn marker_analysis(
    paired: &PairedDataset,
    markers: &[String],
    presence: &MarkerPresence,
    test: NullTest,
) -> Result<MarkerTable, AnalysisError> {
    let has = |conv: &Conversation, pos: usize, marker: &str| -> Result<bool, AnalysisError> {
        let c = conv
            .comments
            .get(pos)
            .ok_or_else(|| AnalysisError::ShortConversation(conv.id.clone()))?;
        let set = presence
            .get(&c.id)
            .ok_or_else(|| AnalysisError::MissingMarkers(c.id.clone()))?;
        Ok(set.contains(marker))
    };

    let mut attacker_initiated = Vec::new();
    let mut non_attacker_initiated = Vec::new();
    let mut role_exclusions = 0;
    for pair in paired.pairs() {
        match role_of(&pair.awry) {
            Some(Role::AttackerInitiated) => attacker_initiated.push(pair),
            Some(Role::NonAttackerInitiated) => non_attacker_initiated.push(pair),
            None => role_exclusions += 1,
        }
    }
    let all: Vec<_> = paired.pairs().iter().collect();

    let mut rows = Vec::new();
    for (view, pairs) in [
        (View::All, &all),
        (View::AttackerInitiated, &attacker_initiated),
        (View::NonAttackerInitiated, &non_attacker_initiated),
    ] {
        if pairs.is_empty() {
            continue;
        }
        for marker in markers {
            for slot in view.slots() {
                let pos = view.position(slot).expect("slots of a view are defined");
                let mut k_awry = 0;
                let mut k_ontrack = 0;
                for p in pairs.iter() {
                    k_awry += has(&p.awry, pos, marker)? as u64;
                    k_ontrack += has(&p.ontrack, pos, marker)? as u64;
                }
                let n = pairs.len() as u64;
                let log_odds = log_odds_ratio(k_awry, n, k_ontrack, n)?;
                let p_value = match test {
                    NullTest::Binomial => binomial_vs_reference(k_awry, n, k_ontrack, n),
                    NullTest::Fisher => fisher_exact_two_tailed(k_awry, n, k_ontrack, n)?,
                };
                rows.push(MarkerRow {
                    marker: marker.clone(),
                    slot,
                    view,
                    count_awry: k_awry,
                    n_awry: n,
                    count_ontrack: k_ontrack,
                    n_ontrack: n,
                    log_odds,
                    p_value,
                    significant_at: Significance::of(p_value),
                    bonferroni_significant: false,
                });
            }
        }
    }

    let bonferroni_tests = rows.iter().filter(|r| r.view == View::All).count();
    if bonferroni_tests > 0 {
        let alpha = 0.05 / bonferroni_tests as f64;
        for r in rows.iter_mut() {
            r.bonferroni_significant = r.p_value < alpha;
        }
    }
    Ok(MarkerTable {
        rows,
        bonferroni_tests,
        attacker_initiated: attacker_initiated.len(),
        non_attacker_initiated: non_attacker_initiated.len(),
        role_exclusions,
    })
}

/// Display filter for reports: markers seen at least `min_occurrences` times
/// in some row with |log-odds| at least `min_effect` in some row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplayFilter {
    pub min_occurrences: u64,
    pub min_effect: f64,
}

impl Default for DisplayFilter {
    fn default() -> Self {
        DisplayFilter {
            min_occurrences: 50,
            min_effect: 0.2,
        }
    }
}

impl MarkerTable {
    pub fn row(&self, marker: &str, slot: Slot, view: View) -> Option<&MarkerRow> {
        self.rows
            .iter()
            .find(|r| r.marker == marker && r.slot == slot && r.view == view)
    }

    pub fn markers(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.marker.as_str()) {
                seen.push(r.marker.as_str());
            }
        }
        seen
    }

    pub fn displayed_markers(&self, filter: &DisplayFilter) -> Vec<&str> {
        self.markers()
            .into_iter()
            .filter(|m| {
                let rows: Vec<_> = self.rows.iter().filter(|r| r.marker == *m).collect();
                rows.iter()
                    .any(|r| r.count_awry + r.count_ontrack >= filter.min_occurrences)
                    && rows.iter().any(|r| r.log_odds.abs() >= filter.min_effect)
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn rows_from_csv(text: &str) -> Result<Vec<MarkerRow>, csv::Error> {
        csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect()
    }

    /// Three-panel Markdown rendering (A: all conversations, B:
    /// attacker-initiated, C: non-attacker-initiated).
    pub fn to_markdown(&self, filter: &DisplayFilter, label: &dyn Fn(&str) -> String) -> String {
        let shown = self.displayed_markers(filter);
        let mut out = String::new();
        let panels = [
            ("A. First and second comment", View::All, ["First comment", "Second comment"], ['*', '+']),
            ("B. Attacker-initiated", View::AttackerInitiated, ["Attacker", "Non-attacker"], ['*', '+']),
            ("C. Non-attacker-initiated", View::NonAttackerInitiated, ["Attacker", "Non-attacker"], ['*', '+']),
        ];
        for (title, view, cols, marks) in panels {
            let n = self
                .rows
                .iter()
                .find(|r| r.view == view)
                .map_or(0, |r| r.n_awry);
            let _ = writeln!(out, "### {title} ({n} pairs)\n");
            let _ = writeln!(out, "| Marker | {} | {} |", cols[0], cols[1]);
            out.push_str("|---|---:|---:|\n");
            for m in &shown {
                let cell = |slot: Slot, mark: char| {
                    self.row(m, slot, view).map_or("".to_string(), |r| {
                        format!("{:+.3} {}", r.log_odds, r.significant_at.marks(mark))
                            .trim_end()
                            .to_string()
                    })
                };
                let [s0, s1] = view.slots();
                let _ = writeln!(out, "| {} | {} | {} |", label(m), cell(s0, marks[0]), cell(s1, marks[1]));
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "Significance: 1/2/3 marks for p < 0.05 / 0.01 / 0.001 (two-tailed). \
             Bonferroni over {} tests in panel A.",
            self.bonferroni_tests
        );
        out
    }
}
