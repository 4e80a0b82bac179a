//! Task metrics: macro-averaged F1 over a declared label set, and an
//! exact-match METEOR with a fragmentation penalty.
//!
//! Both metrics are pure and return values in `[0, 1]`.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::MetricError;

/// Per-class confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassCounts {
    fn is_empty(&self) -> bool {
        self.tp == 0 && self.fp == 0 && self.fn_ == 0
    }

    /// F1 with the zero-denominator convention (P, R and F1 are 0 when undefined).
    pub fn f1(&self) -> f64 {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion counts for every class of a label set, kept in label order.
///
/// A prediction of `None` (unparseable) or of a string outside the label set
/// is treated as a synthetic out-of-set class: it adds a false negative to the
/// gold class and no false positive anywhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionStats {
    classes: Vec<(String, ClassCounts)>,
}

impl ConfusionStats {
    pub fn from_pairs<'a, I>(pairs: I, labels: &[String]) -> Result<Self, MetricError>
    where
        I: IntoIterator<Item = (Option<&'a str>, &'a str)>,
    {
        let index: BTreeMap<&str, usize> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        let mut counts = alloc::vec![ClassCounts::default(); labels.len()];
        for (pred, gold) in pairs {
            let g = *index
                .get(gold)
                .ok_or_else(|| MetricError::GoldOutsideLabels(gold.to_string()))?;
            match pred.and_then(|p| index.get(p).copied()) {
                Some(p) if p == g => counts[g].tp += 1,
                Some(p) => {
                    counts[p].fp += 1;
                    counts[g].fn_ += 1;
                }
                None => counts[g].fn_ += 1,
            }
        }
        Ok(Self {
            classes: labels.iter().cloned().zip(counts).collect(),
        })
    }

    pub fn classes(&self) -> &[(String, ClassCounts)] {
        &self.classes
    }

    /// Unweighted mean F1 over classes that carry evidence. Classes with
    /// `tp = fp = fn = 0` are excluded; with no evidence at all the score is 0.
    pub fn macro_f1(&self) -> f64 {
        let (sum, n) = self
            .classes
            .iter()
            .filter(|(_, c)| !c.is_empty())
            .fold((0.0, 0usize), |(s, n), (_, c)| (s + c.f1(), n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Macro F1 of `(predicted, gold)` pairs over `labels`.
pub fn macro_f1<'a, I>(pairs: I, labels: &[String]) -> Result<f64, MetricError>
where
    I: IntoIterator<Item = (Option<&'a str>, &'a str)>,
{
    Ok(ConfusionStats::from_pairs(pairs, labels)?.macro_f1())
}

/// Lowercase, split on whitespace, trim non-alphanumeric characters from both
/// ends of each token, and drop tokens that become empty.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .map(ToString::to_string)
        .collect()
}

/// Summary of a unigram alignment between a candidate and a reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeteorAlignment {
    pub matches: usize,
    pub candidate_len: usize,
    pub reference_len: usize,
    pub chunks: usize,
}

/// Largest match count for which [`align_unigrams`] runs the exact search.
pub const EXACT_ALIGNMENT_MAX_MATCHES: usize = 12;

/// Opening runs tried by the greedy alignment (longest first).
const GREEDY_RESTARTS: usize = 16;

/// Memo-table budget for the exact search inside [`align_unigrams`].
const EXACT_STATE_BUDGET: usize = 1 << 18;

/// Maximum-cardinality one-to-one matching of identical tokens, choosing among
/// maximum matchings one with the fewest chunks.
///
/// Uses the exact search when the match count is at most
/// [`EXACT_ALIGNMENT_MAX_MATCHES`] and the search fits its state budget, and
/// the greedy longest-run heuristic otherwise.
pub fn align_unigrams<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> MeteorAlignment {
    let problem = Problem::new(candidate, reference);
    if problem.max_matches <= EXACT_ALIGNMENT_MAX_MATCHES {
        if let Some(a) = problem.solve_exact(Some(EXACT_STATE_BUDGET)) {
            return a;
        }
    }
    problem.solve_greedy()
}

/// Greedy longest-run alignment: repeatedly match the longest run of unmatched
/// tokens that is contiguous in both sequences until no common token remains.
/// Among equally long runs it prefers one that extends an existing chunk,
/// then one that overlaps the fewest other multi-token runs, then the
/// earliest position. The greedy pass is restarted from each of the 16
/// longest opening runs and the fewest-chunk result is kept.
pub fn align_unigrams_greedy<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> MeteorAlignment {
    Problem::new(candidate, reference).solve_greedy()
}

fn overlaps(a: usize, al: usize, b: usize, bl: usize) -> bool {
    a < b + bl && b < a + al
}

/// Exact minimum-chunk alignment with no state budget. Returns `None` only
/// when more than 64 reference positions share a type with the candidate.
pub fn align_unigrams_exhaustive<T: AsRef<str>>(
    candidate: &[T],
    reference: &[T],
) -> Option<MeteorAlignment> {
    Problem::new(candidate, reference).solve_exact(None)
}

/// Sentence-level METEOR with exact unigram matching:
/// `F_mean = 10PR / (R + 9P)`, `penalty = 0.5 (chunks / m)^3`,
/// `score = F_mean (1 - penalty)`.
pub fn meteor(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    meteor_from_alignment(&align_unigrams(&c, &r))
}

pub fn meteor_from_alignment(a: &MeteorAlignment) -> f64 {
    if a.matches == 0 {
        return 0.0;
    }
    let m = a.matches as f64;
    let precision = m / a.candidate_len as f64;
    let recall = m / a.reference_len as f64;
    let f_mean = 10.0 * precision * recall / (recall + 9.0 * precision);
    let frag = a.chunks as f64 / m;
    let penalty = 0.5 * frag * frag * frag;
    f_mean * (1.0 - penalty)
}

/// Tokens interned to type ids, shared by both alignment strategies.
struct Problem {
    cand: Vec<usize>,
    refr: Vec<usize>,
    max_matches: usize,
}

impl Problem {
    fn new<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> Self {
        fn intern<'a, T: AsRef<str>>(seq: &'a [T], ids: &mut BTreeMap<&'a str, usize>) -> Vec<usize> {
            seq.iter()
                .map(|t| {
                    let next = ids.len();
                    *ids.entry(t.as_ref()).or_insert(next)
                })
                .collect()
        }
        let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
        let cand = intern(candidate, &mut ids);
        let refr = intern(reference, &mut ids);
        let n_types = ids.len();
        let mut cc = alloc::vec![0usize; n_types];
        let mut rc = alloc::vec![0usize; n_types];
        cand.iter().for_each(|&t| cc[t] += 1);
        refr.iter().for_each(|&t| rc[t] += 1);
        let max_matches = cc.iter().zip(&rc).map(|(a, b)| (*a).min(*b)).sum();
        Self {
            cand,
            refr,
            max_matches,
        }
    }

    fn alignment(&self, chunks: usize) -> MeteorAlignment {
        MeteorAlignment {
            matches: self.max_matches,
            candidate_len: self.cand.len(),
            reference_len: self.refr.len(),
            chunks,
        }
    }

    /// Greedy completion from every possible opening run; keeps the fewest chunks.
    fn solve_greedy(&self) -> MeteorAlignment {
        let n = self.cand.len();
        let empty_to: Vec<Option<usize>> = alloc::vec![None; n];
        let empty_used = alloc::vec![false; self.refr.len()];
        let mut openings = self.open_runs(&empty_to, &empty_used);
        openings.sort_by_key(|&(i, j, len)| (core::cmp::Reverse(len), i, j));
        openings.truncate(GREEDY_RESTARTS);
        let chunks = openings
            .iter()
            .map(|&first| self.greedy_from(Some(first)))
            .min()
            .unwrap_or(0);
        self.alignment(chunks)
    }

    fn greedy_from(&self, first: Option<(usize, usize, usize)>) -> usize {
        let n = self.cand.len();
        let k = self.refr.len();
        let mut cand_to: Vec<Option<usize>> = alloc::vec![None; n];
        let mut ref_used = alloc::vec![false; k];
        let mut forced = first;
        loop {
            let pick = match forced.take() {
                Some(run) => Some(run),
                None => {
                    let runs = self.open_runs(&cand_to, &ref_used);
                    let longest = runs.iter().map(|r| r.2).max().unwrap_or(0);
                    // among the longest runs: most attachments to existing
                    // chunks, then fewest overlaps with other multi-token runs,
                    // then earliest position
                    runs.iter()
                        .filter(|r| r.2 == longest)
                        .map(|&(i, j, len)| {
                            let left = i > 0 && j > 0 && cand_to[i - 1] == Some(j - 1);
                            let right = i + len < n && j + len < k && cand_to[i + len] == Some(j + len);
                            let attach = usize::from(left) + usize::from(right);
                            let conflicts = runs
                                .iter()
                                .filter(|&&(i2, j2, l2)| {
                                    l2 >= 2
                                        && (i2, j2) != (i, j)
                                        && (overlaps(i, len, i2, l2) || overlaps(j, len, j2, l2))
                                })
                                .count();
                            ((attach, core::cmp::Reverse(conflicts), core::cmp::Reverse((i, j))), (i, j, len))
                        })
                        .max_by(|a, b| a.0.cmp(&b.0))
                        .map(|(_, r)| r)
                }
            };
            let Some((i, j, len)) = pick else { break };
            for d in 0..len {
                cand_to[i + d] = Some(j + d);
                ref_used[j + d] = true;
            }
        }
        let mut chunks = 0;
        let mut prev: Option<(usize, usize)> = None;
        for (i, j) in cand_to.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j))) {
            if prev != Some((i.wrapping_sub(1), j.wrapping_sub(1))) {
                chunks += 1;
            }
            prev = Some((i, j));
        }
        chunks
    }

    /// Maximal runs `(i, j, len)` of unmatched tokens equal in both sequences.
    fn open_runs(&self, cand_to: &[Option<usize>], ref_used: &[bool]) -> Vec<(usize, usize, usize)> {
        let (n, k) = (self.cand.len(), self.refr.len());
        let free = |i: usize, j: usize| cand_to[i].is_none() && !ref_used[j] && self.cand[i] == self.refr[j];
        let mut runs = Vec::new();
        for i in 0..n {
            for j in 0..k {
                if !free(i, j) || (i > 0 && j > 0 && free(i - 1, j - 1)) {
                    continue;
                }
                let mut len = 1;
                while i + len < n && j + len < k && free(i + len, j + len) {
                    len += 1;
                }
                runs.push((i, j, len));
            }
        }
        runs
    }

    fn solve_exact(&self, budget: Option<usize>) -> Option<MeteorAlignment> {
        if self.max_matches == 0 {
            return Some(self.alignment(0));
        }
        let in_cand: alloc::collections::BTreeSet<usize> = self.cand.iter().copied().collect();
        // Reference positions that can take part in a match, numbered for the bitmask.
        let mut slot_of = alloc::vec![usize::MAX; self.refr.len()];
        let mut slots = 0usize;
        for (j, t) in self.refr.iter().enumerate() {
            if in_cand.contains(t) {
                slot_of[j] = slots;
                slots += 1;
            }
        }
        if slots > 64 {
            return None;
        }
        let n_types = self
            .cand
            .iter()
            .chain(&self.refr)
            .max()
            .map_or(0, |m| m + 1);
        let mut cand_count = alloc::vec![0usize; n_types];
        let mut ref_count = alloc::vec![0usize; n_types];
        let mut type_mask = alloc::vec![0u64; n_types];
        self.cand.iter().for_each(|&t| cand_count[t] += 1);
        for (j, &t) in self.refr.iter().enumerate() {
            ref_count[t] += 1;
            if slot_of[j] != usize::MAX {
                type_mask[t] |= 1u64 << slot_of[j];
            }
        }
        let mut search = ExactSearch {
            p: self,
            slot_of,
            type_mask,
            allowed_skips: cand_count
                .iter()
                .zip(&ref_count)
                .map(|(c, r)| c - (*c).min(*r))
                .collect(),
            seen_before: Vec::new(),
            memo: BTreeMap::new(),
            budget,
        };
        // seen_before[i] = occurrences of cand[i]'s type in cand[..i]
        let mut running = alloc::vec![0usize; n_types];
        for &t in &self.cand {
            search.seen_before.push(running[t]);
            running[t] += 1;
        }
        let chunks = search.best(0, 0, usize::MAX)?;
        if chunks == INFEASIBLE {
            return None;
        }
        Some(self.alignment(chunks))
    }
}

const INFEASIBLE: usize = usize::MAX / 2;

struct ExactSearch<'p> {
    p: &'p Problem,
    slot_of: Vec<usize>,
    type_mask: Vec<u64>,
    allowed_skips: Vec<usize>,
    seen_before: Vec<usize>,
    memo: BTreeMap<(usize, u64, usize), usize>,
    budget: Option<usize>,
}

impl ExactSearch<'_> {
    /// Minimum number of chunks for candidate positions `i..`, given the used
    /// reference slots and the reference position matched to `i - 1`
    /// (`usize::MAX` when it was skipped). `None` aborts on budget exhaustion.
    fn best(&mut self, i: usize, used: u64, prev: usize) -> Option<usize> {
        if i == self.p.cand.len() {
            return Some(if used.count_ones() as usize == self.p.max_matches {
                0
            } else {
                INFEASIBLE
            });
        }
        let key = (i, used, prev);
        if let Some(&v) = self.memo.get(&key) {
            return Some(v);
        }
        if let Some(b) = self.budget {
            if self.memo.len() >= b {
                return None;
            }
        }
        let t = self.p.cand[i];
        let matched_of_type = (used & self.type_mask[t]).count_ones() as usize;
        let skips_so_far = self.seen_before[i] - matched_of_type;
        let mut best = INFEASIBLE;
        if skips_so_far < self.allowed_skips[t] {
            best = best.min(self.best(i + 1, used, usize::MAX)?);
        }
        for j in 0..self.p.refr.len() {
            if self.p.refr[j] != t {
                continue;
            }
            let bit = 1u64 << self.slot_of[j];
            if used & bit != 0 {
                continue;
            }
            let continues = prev != usize::MAX && j == prev + 1;
            let rest = self.best(i + 1, used | bit, j)?;
            if rest != INFEASIBLE {
                best = best.min(rest + usize::from(!continues));
            }
        }
        self.memo.insert(key, best);
        Some(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn labels(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn perfect_predictions() {
        let l = labels(&["A", "B"]);
        let pairs = [(Some("A"), "A"), (Some("B"), "B"), (Some("A"), "A")];
        assert_eq!(macro_f1(pairs, &l).unwrap(), 1.0);
    }

    #[test]
    fn hand_computed_two_class() {
        // A: P=1/2 R=1 F1=2/3; B: P=1 R=2/3 F1=4/5; mean 11/15
        let l = labels(&["A", "B"]);
        let pairs = [
            (Some("A"), "A"),
            (Some("A"), "B"),
            (Some("B"), "B"),
            (Some("B"), "B"),
        ];
        assert!((macro_f1(pairs, &l).unwrap() - 11.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn all_unparseable_is_zero() {
        let l = labels(&["A", "B", "C"]);
        let pairs = [(None, "A"), (None, "B"), (None, "B")];
        assert_eq!(macro_f1(pairs, &l).unwrap(), 0.0);
    }

    #[test]
    fn unknown_gold_is_rejected() {
        let l = labels(&["A"]);
        assert_eq!(
            macro_f1([(Some("A"), "Z")], &l),
            Err(MetricError::GoldOutsideLabels("Z".into()))
        );
    }

    #[test]
    fn classes_without_evidence_are_excluded() {
        let l = labels(&["A", "B", "C"]);
        let pairs = [(Some("A"), "A"), (Some("B"), "B")];
        assert_eq!(macro_f1(pairs, &l).unwrap(), 1.0);
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("The cat, sat."), vec!["the", "cat", "sat"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("  A  b "), vec!["a", "b"]);
        assert!(tokenize("... !!").is_empty());
    }

    #[test]
    fn alignment_examples() {
        let a = align_unigrams(&["the", "cat", "sat"], &["the", "cat", "sat"]);
        assert_eq!((a.matches, a.chunks), (3, 1));
        let a = align_unigrams(&["sat", "cat", "the"], &["the", "cat", "sat"]);
        assert_eq!((a.matches, a.chunks), (3, 3));
        let a = align_unigrams(&["a", "b"], &["x", "y"]);
        assert_eq!((a.matches, a.chunks), (0, 0));
    }

    #[test]
    fn repeated_tokens_prefer_fewer_chunks() {
        // "the" can pair with either reference copy; only one choice gives a single chunk
        let a = align_unigrams(&["the", "dog"], &["the", "cat", "the", "dog"]);
        assert_eq!((a.matches, a.chunks), (2, 1));
    }

    #[test]
    fn meteor_examples() {
        let identity = 1.0 - 0.5 / 27.0;
        assert!((meteor("the cat sat", "the cat sat") - identity).abs() < 1e-9);
        assert_eq!(meteor("abc", "xyz"), 0.0);
        assert!((meteor("sat cat the", "the cat sat") - 0.5).abs() < 1e-9);
        assert_eq!(meteor("", ""), 0.0);
    }

    #[test]
    fn meteor_recall_weighting() {
        // m=2, P=1, R=1/2 -> F_mean = 10*0.5/(0.5+9) ; one chunk
        let got = meteor("the cat", "the cat sat down");
        let f_mean = 5.0 / 9.5;
        let expected = f_mean * (1.0 - 0.5 * (0.5f64).powi(3));
        assert!((got - expected).abs() < 1e-12);
    }
}
