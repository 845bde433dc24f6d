//! Per-metric pairwise comparison of restored candidates, vote counting and
//! average-win-rate rankings.
//!
//! Win rates are kept as integer counts so every 0.5 threshold is an exact
//! integer comparison.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Direction, MetricSpec, MetricVector, Ranking};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vote {
    Win,
    Loss,
    Tie,
}

impl Vote {
    pub fn flipped(self) -> Vote {
        match self {
            Vote::Win => Vote::Loss,
            Vote::Loss => Vote::Win,
            Vote::Tie => Vote::Tie,
        }
    }
}

/// Outcome of comparing candidate i against candidate j over a metric set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseOutcome {
    /// Metrics on which i is strictly better.
    pub favor_i: u32,
    /// Metrics on which j is strictly better.
    pub favor_j: u32,
    pub metric_count: u32,
}

impl PairwiseOutcome {
    pub fn new(favor_i: u32, favor_j: u32, metric_count: u32) -> Result<Self> {
        if metric_count == 0 || favor_i + favor_j > metric_count {
            return Err(Error::InvalidInput(format!(
                "invalid outcome counts {favor_i}/{favor_j} of {metric_count}"
            )));
        }
        Ok(PairwiseOutcome {
            favor_i,
            favor_j,
            metric_count,
        })
    }

    /// r_{i≻j} as a float.
    pub fn win_rate(&self) -> f64 {
        f64::from(self.favor_i) / f64::from(self.metric_count)
    }

    /// Win when more than half the metrics favor i, Loss when more than half favor j.
    pub fn vote(&self) -> Vote {
        if 2 * self.favor_i > self.metric_count {
            Vote::Win
        } else if 2 * self.favor_j > self.metric_count {
            Vote::Loss
        } else {
            Vote::Tie
        }
    }

    /// The same comparison seen from j's side.
    pub fn reversed(&self) -> PairwiseOutcome {
        PairwiseOutcome {
            favor_i: self.favor_j,
            favor_j: self.favor_i,
            metric_count: self.metric_count,
        }
    }
}

/// 1 iff `score_i` is strictly better than `score_j` under `spec`; equal scores give 0.
pub fn metric_indicator(spec: &MetricSpec, score_i: f64, score_j: f64) -> Result<u32> {
    if !score_i.is_finite() || !score_j.is_finite() {
        return Err(Error::InvalidMetric(spec.name.clone()));
    }
    let better = match spec.direction {
        Direction::HigherBetter => score_i > score_j,
        Direction::LowerBetter => score_i < score_j,
    };
    Ok(u32::from(better))
}

pub fn pairwise_win_rate(metrics: &[MetricSpec], v_i: &MetricVector, v_j: &MetricVector) -> Result<PairwiseOutcome> {
    if metrics.is_empty() {
        return Err(Error::MetricSetMismatch("empty metric set".into()));
    }
    v_i.validate(metrics)?;
    v_j.validate(metrics)?;
    let mut favor_i = 0;
    let mut favor_j = 0;
    for m in metrics {
        let a = v_i.0[&m.name];
        let b = v_j.0[&m.name];
        favor_i += metric_indicator(m, a, b)?;
        favor_j += metric_indicator(m, b, a)?;
    }
    PairwiseOutcome::new(favor_i, favor_j, metrics.len() as u32)
}

/// All-pairs outcomes for the candidates of one atomic record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordComparison {
    pub candidates: Vec<String>,
    /// Outcomes for every i < j, row-major.
    pub outcomes: Vec<PairEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub i: usize,
    pub j: usize,
    pub outcome: PairwiseOutcome,
}

impl RecordComparison {
    /// Compares every pair of scored candidates.
    pub fn compute(metrics: &[MetricSpec], scored: &[(String, MetricVector)]) -> Result<Self> {
        let mut outcomes = Vec::with_capacity(scored.len() * scored.len().saturating_sub(1) / 2);
        for i in 0..scored.len() {
            for j in (i + 1)..scored.len() {
                let outcome = pairwise_win_rate(metrics, &scored[i].1, &scored[j].1)?;
                outcomes.push(PairEntry { i, j, outcome });
            }
        }
        Ok(RecordComparison {
            candidates: scored.iter().map(|(k, _)| k.clone()).collect(),
            outcomes,
        })
    }

    /// Outcome of `a` against `b`, oriented from `a`'s side.
    pub fn outcome(&self, a: usize, b: usize) -> Option<PairwiseOutcome> {
        self.outcomes.iter().find_map(|e| {
            if e.i == a && e.j == b {
                Some(e.outcome)
            } else if e.i == b && e.j == a {
                Some(e.outcome.reversed())
            } else {
                None
            }
        })
    }
}

/// Average win rate per candidate and the ranking sorted from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateSummary {
    pub candidates: Vec<String>,
    pub win_rates: Vec<f64>,
    pub ranking: Ranking,
}

impl WinRateSummary {
    pub fn win_rate_of(&self, key: &str) -> Option<f64> {
        self.candidates
            .iter()
            .position(|c| c == key)
            .map(|i| self.win_rates[i])
    }
}

/// R_i = mean over j ≠ i of r_{i≻j}; ranking by descending R_i, ties by ascending key.
pub fn summarize(record: &RecordComparison) -> Result<WinRateSummary> {
    let k = record.candidates.len();
    if k < 2 {
        return Err(Error::NotEnoughCandidates(k));
    }
    let metric_count = record
        .outcomes
        .first()
        .map(|e| e.outcome.metric_count)
        .ok_or(Error::NotEnoughCandidates(k))?;
    if record.outcomes.len() != k * (k - 1) / 2 {
        return Err(Error::CandidateSetMismatch(format!(
            "expected {} pair outcomes for {k} candidates, found {}",
            k * (k - 1) / 2,
            record.outcomes.len()
        )));
    }
    // Numerators share the denominator |M|·(k−1), so sorting on them is exact.
    let mut favor = vec![0u64; k];
    for e in &record.outcomes {
        if e.outcome.metric_count != metric_count {
            return Err(Error::MetricSetMismatch("outcomes over different metric sets".into()));
        }
        favor[e.i] += u64::from(e.outcome.favor_i);
        favor[e.j] += u64::from(e.outcome.favor_j);
    }
    let denom = f64::from(metric_count) * (k - 1) as f64;
    let win_rates = favor.iter().map(|&f| f as f64 / denom).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        favor[b]
            .cmp(&favor[a])
            .then_with(|| record.candidates[a].cmp(&record.candidates[b]))
    });
    let ranking = Ranking::from_ordered(order.iter().map(|&i| record.candidates[i].clone()).collect())?;
    Ok(WinRateSummary {
        candidates: record.candidates.clone(),
        win_rates,
        ranking,
    })
}

/// Accumulated win/loss/tie counts over a fixed candidate list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseStats {
    pub candidates: Vec<String>,
    pub wins: Vec<Vec<u64>>,
    pub losses: Vec<Vec<u64>>,
    pub ties: Vec<Vec<u64>>,
    pub rounds: u64,
}

impl PairwiseStats {
    pub fn new(candidates: Vec<String>) -> Self {
        let k = candidates.len();
        PairwiseStats {
            candidates,
            wins: vec![vec![0; k]; k],
            losses: vec![vec![0; k]; k],
            ties: vec![vec![0; k]; k],
            rounds: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.candidates.iter().position(|c| c == key)
    }

    /// Total comparisons recorded between i and j.
    pub fn comparisons(&self, i: usize, j: usize) -> u64 {
        self.wins[i][j] + self.losses[i][j] + self.ties[i][j]
    }

    /// Records one vote of `i` against `j`, mirrored into both orientations.
    pub fn record_vote(&mut self, i: usize, j: usize, vote: Vote) {
        match vote {
            Vote::Win => {
                self.wins[i][j] += 1;
                self.losses[j][i] += 1;
            }
            Vote::Loss => {
                self.losses[i][j] += 1;
                self.wins[j][i] += 1;
            }
            Vote::Tie => {
                self.ties[i][j] += 1;
                self.ties[j][i] += 1;
            }
        }
    }

    /// Adds another block's counts; associative and commutative.
    pub fn merge(&mut self, other: &PairwiseStats) -> Result<()> {
        if self.candidates != other.candidates {
            return Err(Error::CandidateSetMismatch(format!(
                "cannot merge stats over {:?} and {:?}",
                self.candidates, other.candidates
            )));
        }
        let k = self.len();
        for i in 0..k {
            for j in 0..k {
                self.wins[i][j] += other.wins[i][j];
                self.losses[i][j] += other.losses[i][j];
                self.ties[i][j] += other.ties[i][j];
            }
        }
        self.rounds += other.rounds;
        Ok(())
    }

    pub fn total_ties(&self) -> u64 {
        self.ties.iter().flatten().sum::<u64>() / 2
    }

    /// Structural invariants: mirrored wins/losses, symmetric ties, zero diagonal.
    pub fn is_consistent(&self) -> bool {
        let k = self.len();
        (0..k).all(|i| {
            self.wins[i][i] == 0
                && self.losses[i][i] == 0
                && self.ties[i][i] == 0
                && (0..k).all(|j| self.wins[i][j] == self.losses[j][i] && self.ties[i][j] == self.ties[j][i])
        })
    }
}

/// Adds one record's votes to `stats`: one unit per compared pair, one round.
pub fn accumulate(stats: &mut PairwiseStats, record: &RecordComparison) -> Result<()> {
    let mut index = Vec::with_capacity(record.candidates.len());
    for key in &record.candidates {
        let idx = stats.index_of(key).ok_or_else(|| {
            Error::CandidateSetMismatch(format!("record candidate `{key}` is not tracked by the stats block"))
        })?;
        index.push(idx);
    }
    for e in &record.outcomes {
        stats.record_vote(index[e.i], index[e.j], e.outcome.vote());
    }
    stats.rounds += 1;
    Ok(())
}

/// Convenience view: the stats block as a nested key map of (w, l, t).
pub fn stats_table(stats: &PairwiseStats) -> BTreeMap<(String, String), (u64, u64, u64)> {
    let mut out = BTreeMap::new();
    for i in 0..stats.len() {
        for j in 0..stats.len() {
            if i != j {
                out.insert(
                    (stats.candidates[i].clone(), stats.candidates[j].clone()),
                    (stats.wins[i][j], stats.losses[i][j], stats.ties[i][j]),
                );
            }
        }
    }
    out
}

pub(crate) fn cmp_f64(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::fidelity_metrics;
    use proptest::prelude::*;

    fn vector(pairs: &[(&str, f64)]) -> MetricVector {
        MetricVector(pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect())
    }

    fn four_metrics() -> Vec<MetricSpec> {
        ["a", "b", "c", "d"].iter().map(|n| MetricSpec::higher(n)).collect()
    }

    #[test]
    fn indicator_examples() {
        assert_eq!(metric_indicator(&MetricSpec::higher("PSNR"), 30.0, 25.0).unwrap(), 1);
        assert_eq!(metric_indicator(&MetricSpec::lower("LPIPS"), 0.30, 0.25).unwrap(), 0);
        assert_eq!(metric_indicator(&MetricSpec::higher("x"), 0.5, 0.5).unwrap(), 0);
        assert_eq!(metric_indicator(&MetricSpec::lower("x"), 0.5, 0.5).unwrap(), 0);
        assert!(matches!(
            metric_indicator(&MetricSpec::higher("x"), f64::NAN, 0.5),
            Err(Error::InvalidMetric(_))
        ));
    }

    #[test]
    fn unanimous_and_split_votes() {
        let m = four_metrics();
        let hi = vector(&[("a", 2.0), ("b", 2.0), ("c", 2.0), ("d", 2.0)]);
        let lo = vector(&[("a", 1.0), ("b", 1.0), ("c", 1.0), ("d", 1.0)]);
        let o = pairwise_win_rate(&m, &hi, &lo).unwrap();
        assert_eq!(o.win_rate(), 1.0);
        assert_eq!(o.vote(), Vote::Win);

        let mixed = vector(&[("a", 2.0), ("b", 2.0), ("c", 0.0), ("d", 0.0)]);
        let o = pairwise_win_rate(&m, &mixed, &lo).unwrap();
        assert_eq!(o.win_rate(), 0.5);
        assert_eq!(o.vote(), Vote::Tie);
    }

    #[test]
    fn fidelity_set_three_of_four() {
        let m = fidelity_metrics();
        let i = vector(&[("PSNR", 25.0), ("SSIM", 0.8), ("LPIPS", 0.2), ("DISTS", 0.3)]);
        let j = vector(&[("PSNR", 24.0), ("SSIM", 0.7), ("LPIPS", 0.25), ("DISTS", 0.1)]);
        let o = pairwise_win_rate(&m, &i, &j).unwrap();
        assert_eq!((o.favor_i, o.metric_count), (3, 4));
        assert_eq!(o.win_rate(), 0.75);
        assert_eq!(o.vote(), Vote::Win);
    }

    #[test]
    fn metric_set_mismatch_is_reported() {
        let m = four_metrics();
        let short = vector(&[("a", 1.0)]);
        let full = vector(&[("a", 2.0), ("b", 2.0), ("c", 2.0), ("d", 2.0)]);
        assert!(matches!(
            pairwise_win_rate(&m, &short, &full),
            Err(Error::MetricSetMismatch(_))
        ));
    }

    fn comparison(scores: &[(&str, f64)]) -> RecordComparison {
        let m = vec![MetricSpec::higher("q")];
        let scored: Vec<(String, MetricVector)> =
            scores.iter().map(|(k, v)| (k.to_string(), vector(&[("q", *v)]))).collect();
        RecordComparison::compute(&m, &scored).unwrap()
    }

    #[test]
    fn accumulate_single_and_double() {
        let rec = comparison(&[("i", 2.0), ("j", 1.0)]);
        let mut stats = PairwiseStats::new(vec!["i".into(), "j".into()]);
        accumulate(&mut stats, &rec).unwrap();
        assert_eq!(stats.wins[0][1], 1);
        assert_eq!(stats.losses[1][0], 1);
        accumulate(&mut stats, &rec).unwrap();
        assert_eq!(stats.wins[0][1], 2);
        assert_eq!(stats.losses[1][0], 2);
        assert_eq!(stats.rounds, 2);
        assert!(stats.is_consistent());
    }

    #[test]
    fn accumulate_rejects_unknown_candidates() {
        let rec = comparison(&[("i", 2.0), ("x", 1.0)]);
        let mut stats = PairwiseStats::new(vec!["i".into(), "j".into()]);
        assert!(matches!(accumulate(&mut stats, &rec), Err(Error::CandidateSetMismatch(_))));
    }

    #[test]
    fn dominant_candidate_ranks_first() {
        let s = summarize(&comparison(&[("b", 1.0), ("a", 3.0), ("c", 2.0)])).unwrap();
        assert_eq!(s.win_rate_of("a"), Some(1.0));
        assert_eq!(s.ranking.ordered(), &["a", "c", "b"]);
    }

    #[test]
    fn full_symmetry_ranks_by_key() {
        let s = summarize(&comparison(&[("c", 1.0), ("a", 1.0), ("b", 1.0)])).unwrap();
        assert!(s.win_rates.iter().all(|&r| r == 0.0));
        assert_eq!(s.ranking.ordered(), &["a", "b", "c"]);
    }

    #[test]
    fn summarize_needs_two_candidates() {
        let rec = comparison(&[("a", 1.0)]);
        assert!(matches!(summarize(&rec), Err(Error::NotEnoughCandidates(1))));
    }

    #[test]
    fn merge_requires_same_keys() {
        let mut a = PairwiseStats::new(vec!["x".into(), "y".into()]);
        let b = PairwiseStats::new(vec!["y".into(), "x".into()]);
        assert!(a.merge(&b).is_err());
    }

    fn arb_scores(k: usize, m: usize) -> impl Strategy<Value = Vec<Vec<i8>>> {
        proptest::collection::vec(proptest::collection::vec(-3i8..3, m), k)
    }

    fn build(scores: &[Vec<i8>], dirs: &[bool]) -> (Vec<MetricSpec>, Vec<(String, MetricVector)>) {
        let metrics: Vec<MetricSpec> = dirs
            .iter()
            .enumerate()
            .map(|(i, &hi)| if hi { MetricSpec::higher(&format!("m{i}")) } else { MetricSpec::lower(&format!("m{i}")) })
            .collect();
        let scored = scores
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let v = row.iter().enumerate().map(|(i, &s)| (format!("m{i}"), f64::from(s))).collect();
                (format!("c{c}"), MetricVector(v))
            })
            .collect();
        (metrics, scored)
    }

    proptest! {
        #[test]
        fn win_rates_sum_at_most_one(scores in arb_scores(2, 5), dirs in proptest::collection::vec(any::<bool>(), 5)) {
            let (m, s) = build(&scores, &dirs);
            let ij = pairwise_win_rate(&m, &s[0].1, &s[1].1).unwrap();
            let ji = pairwise_win_rate(&m, &s[1].1, &s[0].1).unwrap();
            let tied = m.iter().any(|spec| s[0].1.0[&spec.name] == s[1].1.0[&spec.name]);
            prop_assert!(ij.favor_i + ji.favor_i <= ij.metric_count);
            prop_assert_eq!(ij.favor_i + ji.favor_i == ij.metric_count, !tied);
            prop_assert_eq!(ij.vote(), ji.vote().flipped());
        }

        #[test]
        fn summarize_is_relabeling_invariant(scores in arb_scores(4, 3), dirs in proptest::collection::vec(any::<bool>(), 3), rot in 0usize..4) {
            let (m, s) = build(&scores, &dirs);
            let mut rotated = s.clone();
            rotated.rotate_left(rot);
            let a = summarize(&RecordComparison::compute(&m, &s).unwrap()).unwrap();
            let b = summarize(&RecordComparison::compute(&m, &rotated).unwrap()).unwrap();
            prop_assert_eq!(&a.ranking, &b.ranking);
            for key in &a.candidates {
                prop_assert_eq!(a.win_rate_of(key), b.win_rate_of(key));
            }
        }

        #[test]
        fn monotone_transform_preserves_everything(scores in arb_scores(3, 3)) {
            let dirs = [true, true, false];
            let (m, s) = build(&scores, &dirs);
            let mut t = s.clone();
            for (_, v) in &mut t {
                let x = v.0["m0"];
                v.0.insert("m0".into(), x.exp() * 3.0 + 1.0);
            }
            let a = RecordComparison::compute(&m, &s).unwrap();
            let b = RecordComparison::compute(&m, &t).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(summarize(&a).unwrap(), summarize(&b).unwrap());
        }
    }
}
