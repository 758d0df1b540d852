//! CER and NE-CER scoring over minimum-edit-distance alignments.
//!
//! Both metrics pool corpus-level: total edits divided by total reference
//! characters, not a mean of per-utterance rates. NE-CER projects each gold
//! entity span through the alignment to find the hypothesis segment it maps
//! to, then scores that segment against the entity text.

use std::collections::HashMap;

use crate::corpus::EntitySpan;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditKind {
    Match,
    Substitute,
    Delete,
    Insert,
}

/// One alignment step. For match/substitute, `ref_pos`/`hyp_pos` are the
/// aligned indices. For delete, `hyp_pos` is the hypothesis cursor. For
/// insert, `ref_pos` is the gap index: the number of reference characters
/// consumed before the inserted hypothesis character.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignOp {
    pub kind: EditKind,
    pub ref_pos: usize,
    pub hyp_pos: usize,
}

#[derive(Debug, Clone)]
pub struct Alignment {
    pub ops: Vec<AlignOp>,
    pub cost: usize,
}

/// Minimum-edit-distance alignment under unit costs, with deterministic
/// backtrace preference match > substitute > delete > insert.
pub fn align(reference: &[char], hypothesis: &[char]) -> Alignment {
    let n = reference.len();
    let m = hypothesis.len();
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dp[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dp[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = reference[i - 1] == hypothesis[j - 1];
            let diag = dp[idx(i - 1, j - 1)] + usize::from(!same);
            let del = dp[idx(i - 1, j)] + 1;
            let ins = dp[idx(i, j - 1)] + 1;
            dp[idx(i, j)] = diag.min(del).min(ins);
        }
    }
    let cost = dp[idx(n, m)];

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[idx(i, j)];
        let same = i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1];
        if i > 0 && j > 0 && same && dp[idx(i - 1, j - 1)] == here {
            ops.push(AlignOp { kind: EditKind::Match, ref_pos: i - 1, hyp_pos: j - 1 });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && !same && dp[idx(i - 1, j - 1)] + 1 == here {
            ops.push(AlignOp { kind: EditKind::Substitute, ref_pos: i - 1, hyp_pos: j - 1 });
            i -= 1;
            j -= 1;
        } else if i > 0 && dp[idx(i - 1, j)] + 1 == here {
            ops.push(AlignOp { kind: EditKind::Delete, ref_pos: i - 1, hyp_pos: j });
            i -= 1;
        } else {
            ops.push(AlignOp { kind: EditKind::Insert, ref_pos: i, hyp_pos: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    Alignment { ops, cost }
}

/// Plain edit distance (no backtrace) for segment scoring.
pub fn edit_distance(a: &[char], b: &[char]) -> usize {
    let n = a.len();
    let m = b.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Project a gold span through an alignment. The segment consists of all
/// hypothesis characters aligned (match/substitute) to in-span reference
/// positions, plus inserted characters whose gap lies strictly inside the
/// span. Insertions at a span edge count only when the span abuts the
/// utterance boundary there, so a span covering the whole reference scores
/// identically to plain CER.
pub fn project_span(
    alignment: &Alignment,
    hypothesis: &[char],
    span: EntitySpan,
    ref_len: usize,
) -> Vec<char> {
    let mut out = Vec::new();
    for op in &alignment.ops {
        let take = match op.kind {
            EditKind::Match | EditKind::Substitute => {
                op.ref_pos >= span.start && op.ref_pos < span.end
            }
            EditKind::Delete => false,
            EditKind::Insert => {
                let g = op.ref_pos;
                (g > span.start && g < span.end)
                    || (g == span.start && span.start == 0)
                    || (g == span.end && span.end == ref_len)
            }
        };
        if take {
            out.push(hypothesis[op.hyp_pos]);
        }
    }
    out
}

/// Corpus-level scores and their raw counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub cer: f64,
    pub ne_cer: f64,
    pub ref_chars: usize,
    pub edits: usize,
    pub entity_ref_chars: usize,
    pub entity_edits: usize,
}

impl Scores {
    pub fn report(&self) -> String {
        format!(
            "CER={:.4}\nNE-CER={:.4}\nref_chars={}\nedits={}\nentity_ref_chars={}\nentity_edits={}\n",
            self.cer, self.ne_cer, self.ref_chars, self.edits, self.entity_ref_chars, self.entity_edits
        )
    }
}

/// A scored reference: transcript plus its gold entity spans.
#[derive(Debug, Clone)]
pub struct Reference {
    pub utt_id: String,
    pub text: Vec<char>,
    pub spans: Vec<EntitySpan>,
}

/// Score hypotheses against references paired by utterance id. Every
/// reference id must be present in `hyps`; ordering is irrelevant.
pub fn score_corpus(refs: &[Reference], hyps: &HashMap<String, Vec<char>>) -> Result<Scores> {
    let mut ref_chars = 0usize;
    let mut edits = 0usize;
    let mut entity_ref_chars = 0usize;
    let mut entity_edits = 0usize;
    for r in refs {
        let hyp = hyps
            .get(&r.utt_id)
            .ok_or_else(|| Error::Eval(format!("no hypothesis for utterance `{}`", r.utt_id)))?;
        let alignment = align(&r.text, hyp);
        ref_chars += r.text.len();
        edits += alignment.cost;
        for &span in &r.spans {
            let segment = project_span(&alignment, hyp, span, r.text.len());
            let gold: Vec<char> = r.text[span.start..span.end].to_vec();
            entity_ref_chars += gold.len();
            entity_edits += edit_distance(&gold, &segment);
        }
    }
    Ok(Scores {
        cer: ratio(edits, ref_chars),
        ne_cer: ratio(entity_edits, entity_ref_chars),
        ref_chars,
        edits,
        entity_ref_chars,
        entity_edits,
    })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Corpus CER alone (pooled edits over pooled reference lengths).
pub fn cer(pairs: &[(Vec<char>, Vec<char>)]) -> f64 {
    let mut edits = 0;
    let mut chars = 0;
    for (r, h) in pairs {
        edits += edit_distance(r, h);
        chars += r.len();
    }
    ratio(edits, chars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn identical_sequences_align_with_zero_cost() {
        let a = align(&chars("abc"), &chars("abc"));
        assert_eq!(a.cost, 0);
        assert!(a.ops.iter().all(|o| o.kind == EditKind::Match));
    }

    #[test]
    fn single_substitution() {
        let a = align(&chars("abc"), &chars("axc"));
        assert_eq!(a.cost, 1);
        let subs: Vec<_> = a.ops.iter().filter(|o| o.kind == EditKind::Substitute).collect();
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].ref_pos, 1);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let a = align(&chars("ab"), &chars(""));
        assert_eq!(a.cost, 2);
        assert!(a.ops.iter().all(|o| o.kind == EditKind::Delete));
    }

    #[test]
    fn replaying_ops_transforms_ref_into_hyp() {
        let r = chars("kitten");
        let h = chars("sitting");
        let a = align(&r, &h);
        let mut rebuilt = Vec::new();
        for op in &a.ops {
            match op.kind {
                EditKind::Match => rebuilt.push(r[op.ref_pos]),
                EditKind::Substitute | EditKind::Insert => rebuilt.push(h[op.hyp_pos]),
                EditKind::Delete => {}
            }
        }
        assert_eq!(rebuilt, h);
        assert_eq!(a.cost, 3);
    }

    #[test]
    fn cer_single_substitution_is_one_third() {
        let pairs = vec![(chars("abc"), chars("axc"))];
        assert!((cer(&pairs) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cer_pools_rather_than_averages() {
        // Lengths 1 and 9: one edit each. Pooled: 2/10, not (1/1 + 1/9)/2.
        let pairs = vec![(chars("a"), chars("b")), (chars("bbbbbbbbb"), chars("bbbbbbbbx"))];
        let pooled = cer(&pairs);
        assert!((pooled - 0.2).abs() < 1e-12);
        let mean = (1.0 + 1.0 / 9.0) / 2.0;
        assert!((pooled - mean).abs() > 0.1);
    }

    fn one_ref(text: &str, spans: Vec<EntitySpan>) -> Vec<Reference> {
        vec![Reference { utt_id: "u0".into(), text: chars(text), spans }]
    }

    fn hyp_map(text: &str) -> HashMap<String, Vec<char>> {
        let mut m = HashMap::new();
        m.insert("u0".to_string(), chars(text));
        m
    }

    #[test]
    fn ne_cer_perfect_hypothesis_is_zero() {
        let refs = one_ref("xxCDxx", vec![EntitySpan { start: 2, end: 4 }]);
        let s = score_corpus(&refs, &hyp_map("xxCDxx")).unwrap();
        assert_eq!(s.ne_cer, 0.0);
        assert_eq!(s.cer, 0.0);
    }

    #[test]
    fn ne_cer_substitution_inside_span() {
        let refs = one_ref("xxCDxx", vec![EntitySpan { start: 2, end: 4 }]);
        let s = score_corpus(&refs, &hyp_map("xxCExx")).unwrap();
        assert_eq!(s.entity_edits, 1);
        assert_eq!(s.entity_ref_chars, 2);
        assert!((s.ne_cer - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ne_cer_fully_deleted_entity() {
        let refs = one_ref("xxCDxx", vec![EntitySpan { start: 2, end: 4 }]);
        let s = score_corpus(&refs, &hyp_map("xxxx")).unwrap();
        assert_eq!(s.entity_edits, 2);
        assert!((s.ne_cer - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_span_ne_cer_equals_cer() {
        let cases = [
            ("abcd", "abxd"),
            ("abcd", "abcdzz"),
            ("abcd", "zzabcd"),
            ("abcd", ""),
            ("a", "ab"),
        ];
        for (r, h) in cases {
            let refs = one_ref(r, vec![EntitySpan { start: 0, end: r.len() }]);
            let s = score_corpus(&refs, &hyp_map(h)).unwrap();
            assert_eq!(s.entity_edits, s.edits, "ref `{r}` hyp `{h}`");
            assert!((s.ne_cer - s.cer).abs() < 1e-12, "ref `{r}` hyp `{h}`");
        }
    }

    #[test]
    fn missing_hypothesis_id_is_an_error() {
        let refs = one_ref("ab", vec![]);
        let hyps = HashMap::new();
        assert!(matches!(score_corpus(&refs, &hyps), Err(Error::Eval(_))));
    }

    #[test]
    fn scores_invariant_to_utterance_order() {
        let refs = vec![
            Reference { utt_id: "a".into(), text: chars("abcd"), spans: vec![EntitySpan { start: 1, end: 3 }] },
            Reference { utt_id: "b".into(), text: chars("wxyz"), spans: vec![] },
        ];
        let mut hyps = HashMap::new();
        hyps.insert("a".to_string(), chars("axcd"));
        hyps.insert("b".to_string(), chars("wxz"));
        let fwd = score_corpus(&refs, &hyps).unwrap();
        let mut rev = refs.clone();
        rev.reverse();
        let bwd = score_corpus(&rev, &hyps).unwrap();
        assert_eq!(fwd, bwd);
    }

    proptest! {
        #[test]
        fn align_cost_matches_plain_dp(
            r in proptest::collection::vec(prop_oneof![Just('a'), Just('b'), Just('c')], 0..12),
            h in proptest::collection::vec(prop_oneof![Just('a'), Just('b'), Just('c')], 0..12),
        ) {
            let a = align(&r, &h);
            prop_assert_eq!(a.cost, edit_distance(&r, &h));
            let edits = a.ops.iter().filter(|o| o.kind != EditKind::Match).count();
            prop_assert_eq!(edits, a.cost);
        }

        #[test]
        fn full_span_property(
            r in proptest::collection::vec(prop_oneof![Just('a'), Just('b')], 1..10),
            h in proptest::collection::vec(prop_oneof![Just('a'), Just('b')], 0..10),
        ) {
            let refs = vec![Reference {
                utt_id: "u".into(),
                text: r.clone(),
                spans: vec![EntitySpan { start: 0, end: r.len() }],
            }];
            let mut hyps = HashMap::new();
            hyps.insert("u".to_string(), h);
            let s = score_corpus(&refs, &hyps).unwrap();
            prop_assert_eq!(s.entity_edits, s.edits);
        }
    }
}
