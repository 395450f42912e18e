mod common;

use std::collections::BTreeSet;

use common::{synth, SynthOptions};
use derail::analysis::{
    log_odds_ratio, marker_analysis, AnalysisError, DisplayFilter, MarkerPresence, MarkerTable,
    NullTest, Slot, View,
};
use derail::corpus::PairedDataset;

fn paired() -> PairedDataset {
    PairedDataset::from_labeled(&synth(&SynthOptions { pages: 25, ..Default::default() }).labeled)
}

/// "m" in every awry first comment and nowhere else; "never" nowhere.
fn presence(paired: &PairedDataset) -> MarkerPresence {
    let mut out = MarkerPresence::new();
    for p in paired.pairs() {
        for (awry, conv) in [(true, &p.awry), (false, &p.ontrack)] {
            for (pos, c) in conv.comments.iter().take(2).enumerate() {
                let mut set = BTreeSet::new();
                if awry && pos == 0 {
                    set.insert("m".to_string());
                }
                out.insert(c.id.clone(), set);
            }
        }
    }
    out
}

fn markers() -> Vec<String> {
    vec!["m".into(), "never".into()]
}

#[test]
fn extreme_separation_and_absent_marker() {
    let paired = paired();
    let n = paired.len() as u64;
    let t = marker_analysis(&paired, &markers(), &presence(&paired), NullTest::Binomial).unwrap();
    let m = t.row("m", Slot::First, View::All).unwrap();
    assert_eq!((m.count_awry, m.count_ontrack), (n, 0));
    assert_eq!(m.log_odds, log_odds_ratio(n, n, 0, n).unwrap());
    assert!(m.p_value < 1e-10);
    assert!(m.bonferroni_significant);
    let second = t.row("m", Slot::Second, View::All).unwrap();
    assert_eq!((second.log_odds, second.p_value), (0.0, 1.0));
    for r in t.rows.iter().filter(|r| r.marker == "never") {
        assert_eq!((r.log_odds, r.p_value), (0.0, 1.0));
    }
    let fisher = marker_analysis(&paired, &markers(), &presence(&paired), NullTest::Fisher).unwrap();
    assert!(fisher.row("m", Slot::First, View::All).unwrap().p_value < 1e-10);
}

#[test]
fn role_views_partition_awry_conversations() {
    let paired = paired();
    let t = marker_analysis(&paired, &markers(), &presence(&paired), NullTest::Binomial).unwrap();
    assert_eq!(t.attacker_initiated + t.non_attacker_initiated + t.role_exclusions, paired.len());
    assert_eq!(t.role_exclusions, 0);
    assert!(t.attacker_initiated > 0 && t.non_attacker_initiated > 0);
    // The attacker writes the first comment in attacker-initiated threads.
    let a = t.row("m", Slot::Attacker, View::AttackerInitiated).unwrap();
    assert_eq!(a.count_awry, t.attacker_initiated as u64);
    let c = t.row("m", Slot::NonAttacker, View::NonAttackerInitiated).unwrap();
    assert_eq!(c.count_awry, t.non_attacker_initiated as u64);
    assert_eq!(t.bonferroni_tests, 4);
}

#[test]
fn csv_and_markdown_outputs() {
    let paired = paired();
    let t = marker_analysis(&paired, &markers(), &presence(&paired), NullTest::Binomial).unwrap();
    let csv = t.to_csv().unwrap();
    assert_eq!(MarkerTable::rows_from_csv(&csv).unwrap(), t.rows);
    let filter = DisplayFilter { min_occurrences: 1, min_effect: 0.2 };
    assert_eq!(t.displayed_markers(&filter), vec!["m"]);
    let md = t.to_markdown(&filter, &|m| m.to_uppercase());
    assert!(md.contains("| M | +"));
    assert!(md.contains("***"));
    assert!(!md.contains("NEVER"));
}

#[test]
fn missing_presence_is_an_error() {
    let paired = paired();
    let mut p = presence(&paired);
    let id = paired.pairs()[0].ontrack.comments[1].id.clone();
    p.remove(&id);
    assert_eq!(
        marker_analysis(&paired, &markers(), &p, NullTest::Binomial),
        Err(AnalysisError::MissingMarkers(id))
    );
}
