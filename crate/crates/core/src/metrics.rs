//! Evaluation metrics: word error rate with a full alignment trace,
//! biased/unbiased WER with keyword recall, mixed error rate for
//! code-switched text, and corpus BLEU.
//!
//! Alignment tie-breaks are fixed (match > substitution > deletion >
//! insertion) so traces are reproducible.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditKind {
    Match,
    Substitution,
    Deletion,
    Insertion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditOp {
    pub kind: EditKind,
    pub ref_word: Option<String>,
    pub hyp_word: Option<String>,
}

pub type AlignmentTrace = Vec<EditOp>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerStats {
    pub rate: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    pub trace: AlignmentTrace,
}

impl WerStats {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Optimal token alignment via dynamic programming. On cost ties the
/// traceback prefers match, then substitution, deletion, insertion.
pub fn align_tokens(ref_toks: &[String], hyp_toks: &[String]) -> AlignmentTrace {
    let (m, n) = (ref_toks.len(), hyp_toks.len());
    let mut cost = vec![vec![0usize; n + 1]; m + 1];
    for (i, row) in cost.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=n {
        cost[0][j] = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let sub_cost = if ref_toks[i - 1] == hyp_toks[j - 1] { 0 } else { 1 };
            cost[i][j] = (cost[i - 1][j - 1] + sub_cost)
                .min(cost[i - 1][j] + 1)
                .min(cost[i][j - 1] + 1);
        }
    }

    let mut ops = Vec::new();
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        let here = cost[i][j];
        // Preference order: match, substitution, deletion, insertion.
        if i > 0 && j > 0 && ref_toks[i - 1] == hyp_toks[j - 1] && cost[i - 1][j - 1] == here {
            ops.push(EditOp {
                kind: EditKind::Match,
                ref_word: Some(ref_toks[i - 1].clone()),
                hyp_word: Some(hyp_toks[j - 1].clone()),
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && cost[i - 1][j - 1] + 1 == here {
            ops.push(EditOp {
                kind: EditKind::Substitution,
                ref_word: Some(ref_toks[i - 1].clone()),
                hyp_word: Some(hyp_toks[j - 1].clone()),
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && cost[i - 1][j] + 1 == here {
            ops.push(EditOp {
                kind: EditKind::Deletion,
                ref_word: Some(ref_toks[i - 1].clone()),
                hyp_word: None,
            });
            i -= 1;
        } else {
            ops.push(EditOp {
                kind: EditKind::Insertion,
                ref_word: None,
                hyp_word: Some(hyp_toks[j - 1].clone()),
            });
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

fn stats_from_trace(trace: AlignmentTrace, ref_words: usize) -> WerStats {
    let mut s = 0;
    let mut d = 0;
    let mut ins = 0;
    for op in &trace {
        match op.kind {
            EditKind::Match => {}
            EditKind::Substitution => s += 1,
            EditKind::Deletion => d += 1,
            EditKind::Insertion => ins += 1,
        }
    }
    WerStats {
        rate: (s + d + ins) as f64 / ref_words as f64,
        substitutions: s,
        deletions: d,
        insertions: ins,
        ref_words,
        trace,
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// (S+D+I)/N over whitespace tokens. Empty reference is an error.
pub fn wer(reference: &str, hypothesis: &str) -> Result<WerStats> {
    let r = words(reference);
    if r.is_empty() {
        return Err(Error::UndefinedRate);
    }
    let h = words(hypothesis);
    let n = r.len();
    Ok(stats_from_trace(align_tokens(&r, &h), n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasedWerStats {
    /// Errors on listed reference words / listed reference words.
    /// `None` when the reference contains no listed words.
    pub b_wer: Option<f64>,
    pub u_wer: Option<f64>,
    pub recall: Option<f64>,
    pub b_errors: usize,
    pub u_errors: usize,
    pub listed_ref_words: usize,
    pub unlisted_ref_words: usize,
    pub matched_listed: usize,
}

/// Splits the alignment errors into biased (listed) and unbiased classes.
/// Substitutions and deletions follow their reference word; an insertion
/// counts as biased iff the inserted word is in the list.
pub fn biased_wer(
    reference: &str,
    hypothesis: &str,
    list: &BTreeSet<String>,
) -> Result<BiasedWerStats> {
    let stats = wer(reference, hypothesis)?;
    let mut b_errors = 0;
    let mut u_errors = 0;
    let mut listed = 0;
    let mut unlisted = 0;
    let mut matched_listed = 0;
    for op in &stats.trace {
        match op.kind {
            EditKind::Match => {
                let w = op.ref_word.as_ref().unwrap();
                if list.contains(w) {
                    listed += 1;
                    matched_listed += 1;
                } else {
                    unlisted += 1;
                }
            }
            EditKind::Substitution | EditKind::Deletion => {
                let w = op.ref_word.as_ref().unwrap();
                if list.contains(w) {
                    listed += 1;
                    b_errors += 1;
                } else {
                    unlisted += 1;
                    u_errors += 1;
                }
            }
            EditKind::Insertion => {
                let w = op.hyp_word.as_ref().unwrap();
                if list.contains(w) {
                    b_errors += 1;
                } else {
                    u_errors += 1;
                }
            }
        }
    }
    Ok(BiasedWerStats {
        b_wer: (listed > 0).then(|| b_errors as f64 / listed as f64),
        u_wer: (unlisted > 0).then(|| u_errors as f64 / unlisted as f64),
        recall: (listed > 0).then(|| matched_listed as f64 / listed as f64),
        b_errors,
        u_errors,
        listed_ref_words: listed,
        unlisted_ref_words: unlisted,
        matched_listed,
    })
}

fn is_cjk(c: char) -> bool {
    matches!(c,
        '\u{4E00}'..='\u{9FFF}'
        | '\u{3400}'..='\u{4DBF}'
        | '\u{F900}'..='\u{FAFF}'
        | '\u{3040}'..='\u{30FF}')
}

/// Mixed tokenization: each CJK codepoint is one token, maximal non-CJK
/// runs split on whitespace into word tokens.
pub fn mixed_tokens(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut run = String::new();
    for c in s.chars() {
        if is_cjk(c) {
            if !run.is_empty() {
                out.extend(words(&run));
                run.clear();
            }
            out.push(c.to_string());
        } else {
            run.push(c);
        }
    }
    if !run.is_empty() {
        out.extend(words(&run));
    }
    out
}

/// Mixed error rate over CJK-character/Latin-word tokens.
pub fn mer(reference: &str, hypothesis: &str) -> Result<WerStats> {
    let r = mixed_tokens(reference);
    if r.is_empty() {
        return Err(Error::UndefinedRate);
    }
    let h = mixed_tokens(hypothesis);
    let n = r.len();
    Ok(stats_from_trace(align_tokens(&r, &h), n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// Corpus score in [0, 100].
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    /// Set when the hypothesis corpus was entirely empty.
    pub empty_hypotheses: bool,
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Vec<String>, usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU: clipped n-gram precision (n ≤ max_n) with multi-reference
/// clipping, add-one smoothing on the precisions for n ≥ 2, and the usual
/// brevity penalty against the closest reference length.
pub fn bleu(refs: &[Vec<String>], hyps: &[String], max_n: usize) -> Result<BleuReport> {
    if refs.is_empty() || refs.len() != hyps.len() {
        return Err(Error::Contract(format!(
            "bleu needs matching non-empty corpora, got {} refs and {} hyps",
            refs.len(),
            hyps.len()
        )));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;

    for (ref_set, hyp) in refs.iter().zip(hyps.iter()) {
        let h = words(hyp);
        hyp_len += h.len();
        // Closest reference length; ties prefer the shorter.
        let closest = ref_set
            .iter()
            .map(|r| words(r).len())
            .min_by_key(|&l| ((l as i64 - h.len() as i64).abs(), l))
            .unwrap_or(0);
        ref_len += closest;
        for n in 1..=max_n {
            let hc = ngram_counts(&h, n);
            let mut clipped: BTreeMap<Vec<String>, usize> = BTreeMap::new();
            for r in ref_set {
                for (gram, c) in ngram_counts(&words(r), n) {
                    let e = clipped.entry(gram).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (gram, c) in &hc {
                totals[n - 1] += c;
                matches[n - 1] += (*c).min(clipped.get(gram).copied().unwrap_or(0));
            }
        }
    }

    if hyp_len == 0 {
        return Ok(BleuReport {
            score: 0.0,
            precisions: vec![0.0; max_n],
            brevity_penalty: 0.0,
            empty_hypotheses: true,
        });
    }

    let mut precisions = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let (m, t) = (matches[n - 1], totals[n - 1]);
        let p = if n == 1 {
            if t == 0 {
                0.0
            } else {
                m as f64 / t as f64
            }
        } else {
            (m as f64 + 1.0) / (t as f64 + 1.0)
        };
        precisions.push(p);
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        100.0 * bp * log_mean.exp()
    };
    Ok(BleuReport {
        score,
        precisions,
        brevity_penalty: bp,
        empty_hypotheses: false,
    })
}

/// Independent reference implementations used by the verification suites.
/// Kept deliberately separate from the production DP path.
pub mod oracle {
    use std::collections::VecDeque;

    /// Minimal edit distance by 0-1 breadth-first search over the edit
    /// lattice: match edges cost 0, substitution/insertion/deletion cost 1.
    pub fn min_edit_distance<T: PartialEq>(r: &[T], h: &[T]) -> usize {
        let (m, n) = (r.len(), h.len());
        let idx = |i: usize, j: usize| i * (n + 1) + j;
        let mut dist = vec![usize::MAX; (m + 1) * (n + 1)];
        let mut dq = VecDeque::new();
        dist[idx(0, 0)] = 0;
        dq.push_back((0usize, 0usize));
        while let Some((i, j)) = dq.pop_front() {
            let d = dist[idx(i, j)];
            if i == m && j == n {
                return d;
            }
            // 0-cost match edge first.
            if i < m && j < n && r[i] == h[j] && d < dist[idx(i + 1, j + 1)] {
                dist[idx(i + 1, j + 1)] = d;
                dq.push_front((i + 1, j + 1));
            }
            let mut relax = |ni: usize, nj: usize, dq: &mut VecDeque<(usize, usize)>| {
                if d + 1 < dist[idx(ni, nj)] {
                    dist[idx(ni, nj)] = d + 1;
                    dq.push_back((ni, nj));
                }
            };
            if i < m && j < n {
                relax(i + 1, j + 1, &mut dq);
            }
            if i < m {
                relax(i + 1, j, &mut dq);
            }
            if j < n {
                relax(i, j + 1, &mut dq);
            }
        }
        dist[idx(m, n)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(words: &[&str]) -> BTreeSet<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn identical_strings_have_zero_wer() {
        let s = wer("a b c", "a b c").unwrap();
        assert_eq!(s.rate, 0.0);
        assert_eq!(s.errors(), 0);
        assert!(s.trace.iter().all(|o| o.kind == EditKind::Match));
    }

    #[test]
    fn single_deletion_is_one_third() {
        let s = wer("the cat sat", "the cat").unwrap();
        assert_eq!(s.deletions, 1);
        assert_eq!(s.substitutions, 0);
        assert_eq!(s.insertions, 0);
        assert!((s.rate - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let s = wer("a b", "").unwrap();
        assert_eq!(s.rate, 1.0);
        assert_eq!(s.deletions, 2);
    }

    #[test]
    fn empty_reference_is_undefined() {
        assert!(wer("", "a").is_err());
        assert!(mer("", "a").is_err());
    }

    #[test]
    fn replaying_the_trace_transforms_ref_into_hyp() {
        let s = wer("go cat go now", "go bat new go").unwrap();
        let mut rebuilt = Vec::new();
        for op in &s.trace {
            match op.kind {
                EditKind::Match | EditKind::Substitution | EditKind::Insertion => {
                    rebuilt.push(op.hyp_word.clone().unwrap())
                }
                EditKind::Deletion => {}
            }
        }
        assert_eq!(rebuilt.join(" "), "go bat new go");
    }

    #[test]
    fn biased_wer_substitution_on_listed_word() {
        let b = biased_wer("the cat sat", "the bat sat", &set(&["cat"])).unwrap();
        assert_eq!(b.b_wer, Some(1.0));
        assert_eq!(b.u_wer, Some(0.0));
        assert_eq!(b.recall, Some(0.0));
        assert_eq!(b.listed_ref_words, 1);
        assert_eq!(b.unlisted_ref_words, 2);
    }

    #[test]
    fn biased_wer_perfect_hypothesis() {
        let b = biased_wer("the cat sat", "the cat sat", &set(&["cat"])).unwrap();
        assert_eq!(b.b_wer, Some(0.0));
        assert_eq!(b.u_wer, Some(0.0));
        assert_eq!(b.recall, Some(1.0));
    }

    #[test]
    fn inserted_listed_word_counts_toward_bias_errors() {
        let b = biased_wer("go cat go", "go cat cat go", &set(&["cat"])).unwrap();
        assert_eq!(b.b_errors, 1);
        assert_eq!(b.u_errors, 0);
        assert_eq!(b.b_wer, Some(1.0));
        assert_eq!(b.u_wer, Some(0.0));
        assert_eq!(b.recall, Some(1.0));
    }

    #[test]
    fn no_listed_words_marks_b_and_recall_undefined() {
        let b = biased_wer("a b", "a b", &set(&["zz"])).unwrap();
        assert_eq!(b.b_wer, None);
        assert_eq!(b.recall, None);
        assert_eq!(b.u_wer, Some(0.0));
    }

    #[test]
    fn mer_mixed_example_is_a_quarter() {
        let s = mer("我喜欢 apple", "我喜欢 apples").unwrap();
        assert_eq!(s.ref_words, 4);
        assert_eq!(s.substitutions, 1);
        assert!((s.rate - 0.25).abs() < 1e-12);
    }

    #[test]
    fn mer_equals_wer_on_latin_only_text() {
        let a = mer("hello big world", "hello small world").unwrap();
        let b = wer("hello big world", "hello small world").unwrap();
        assert_eq!(a.rate, b.rate);
    }

    #[test]
    fn mer_is_character_rate_on_cjk_only_text() {
        let s = mer("我喜欢", "我喜叹").unwrap();
        assert_eq!(s.ref_words, 3);
        assert!((s.rate - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_identity_is_one_hundred() {
        let refs = vec![vec!["a b c d".to_string()], vec!["x y".to_string()]];
        let hyps = vec!["a b c d".to_string(), "x y".to_string()];
        let r = bleu(&refs, &hyps, 4).unwrap();
        assert!((r.score - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_disjoint_unigrams_is_zero() {
        let refs = vec![vec!["a b c".to_string()]];
        let hyps = vec!["x y z".to_string()];
        let r = bleu(&refs, &hyps, 4).unwrap();
        assert_eq!(r.score, 0.0);
    }

    #[test]
    fn bleu_brevity_penalty_hand_computed() {
        // ref "a b c d", hyp "a b c": p1..p4 all 1 under add-one smoothing,
        // BP = e^(1-4/3); score = 100·e^(-1/3).
        let refs = vec![vec!["a b c d".to_string()]];
        let hyps = vec!["a b c".to_string()];
        let r = bleu(&refs, &hyps, 4).unwrap();
        let expect = 100.0 * (-1.0f64 / 3.0).exp();
        assert!((r.score - expect).abs() < 1e-9, "{} vs {expect}", r.score);
        assert!((r.brevity_penalty - (-1.0f64 / 3.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn bleu_empty_hypothesis_corpus_warns_and_scores_zero() {
        let refs = vec![vec!["a b".to_string()]];
        let hyps = vec![String::new()];
        let r = bleu(&refs, &hyps, 4).unwrap();
        assert_eq!(r.score, 0.0);
        assert!(r.empty_hypotheses);
    }

    proptest! {
        /// DP alignment cost equals the independent 0-1 BFS oracle.
        #[test]
        fn wer_matches_bfs_oracle(
            r in proptest::collection::vec("[ab]{1,2}", 1..8),
            h in proptest::collection::vec("[ab]{1,2}", 0..8),
        ) {
            let rs: Vec<String> = r;
            let hs: Vec<String> = h;
            let trace = align_tokens(&rs, &hs);
            let errors = trace.iter().filter(|o| o.kind != EditKind::Match).count();
            prop_assert_eq!(errors, oracle::min_edit_distance(&rs, &hs));
        }

        /// Biased + unbiased errors always decompose total errors.
        #[test]
        fn bias_decomposition_identity(
            r in proptest::collection::vec("[abc]", 1..8),
            h in proptest::collection::vec("[abc]", 0..8),
        ) {
            let rs = r.join(" ");
            let hs = h.join(" ");
            let list = set(&["a"]);
            let w = wer(&rs, &hs).unwrap();
            let b = biased_wer(&rs, &hs, &list).unwrap();
            prop_assert_eq!(b.b_errors + b.u_errors, w.errors());
        }
    }
}
