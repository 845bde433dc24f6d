//! Self-evolution: exhaustive acquisition, batch-triggered BTD updates of the
//! coarse level, insight distillation, and pattern-profile learning under
//! semantic and ranking consistency.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::btd::{self, BtdFit, FitConfig};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::oracles::{
    format_groups, parse_debate_reply, parse_groups, parse_plan_lines, render, DebateAction, EncoderOracle,
    LanguageOracle, MetaOperation, ParsedGroup, PlanRequest, GROUPER_ROLE, INSIGHT_PROMPT,
};
use crate::pool::{centroid, CoarseEntry, Gate, InsightEntry, PatternProfile, Pool};
use crate::ranking::{accumulate, summarize, PairwiseStats, RecordComparison, WinRateSummary};
use crate::types::{
    canonical_key, enumerate_candidates, metrics_for, DegradationSet, DegradationType, ImageRef, MetricVector,
    PlanCandidate, Preference, Ranking, ToolId,
};

pub const DEBATE_ROLES: [&str; 3] = ["proposer", "critic", "judge"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolveConfig {
    pub batch_size: usize,
    pub mini_batch: usize,
    pub alpha: f64,
    pub rho_threshold: f64,
    /// Turns per debate role before falling back to ranking-only grouping.
    pub debate_turns: usize,
    pub fit: FitConfig,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        EvolveConfig {
            batch_size: 25,
            mini_batch: 12,
            alpha: 0.975,
            rho_threshold: 0.8,
            debate_turns: 4,
            fit: FitConfig::default(),
        }
    }
}

impl EvolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.mini_batch == 0 || self.debate_turns == 0 {
            return Err(Error::ConfigError("batch sizes and debate turns must be at least 1".into()));
        }
        if !(self.alpha > 0.5 && self.alpha < 1.0) {
            return Err(Error::ConfigError(format!("alpha must lie in (0.5, 1), got {}", self.alpha)));
        }
        if !(-1.0..=1.0).contains(&self.rho_threshold) {
            return Err(Error::ConfigError("rho threshold must lie in [-1, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicExperienceRecord {
    pub record_id: u64,
    pub image: ImageRef,
    pub degradation_type: String,
    pub preference: Preference,
    /// Every enumerated candidate key, including failed ones.
    pub candidates: Vec<String>,
    /// Anchored tool per degradation used by order candidates.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tools: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, MetricVector>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub failed: BTreeMap<String, String>,
    pub comparison: RecordComparison,
    pub summary: WinRateSummary,
    /// Evolution round that consumed the record; 0 while pending.
    pub round: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

/// Rank-1 coarse tool per degradation, falling back to the first registered tool.
pub fn anchored_tools(
    pool: &Pool,
    env: &dyn Environment,
    set: &DegradationSet,
    preference: Preference,
) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for d in set.iter() {
        let registered = env.registry().tools(d)?;
        let learned = pool
            .coarse_lookup(d.as_str(), preference)
            .and_then(|e| e.ranking.ordered().iter().find(|t| registered.iter().any(|r| r.as_str() == *t)))
            .cloned();
        let tool = learned.unwrap_or_else(|| registered[0].as_str().to_string());
        out.insert(d.as_str().to_string(), tool);
    }
    Ok(out)
}

fn run_candidate(
    env: &dyn Environment,
    image: &ImageRef,
    set: &DegradationSet,
    candidate: &PlanCandidate,
    tools: &BTreeMap<String, String>,
    preference: Preference,
) -> Result<MetricVector> {
    let restored = match candidate {
        PlanCandidate::Tool(t) => {
            let d = set.iter().next().expect("single degradation");
            env.apply_tool(image, t, d)?
        }
        PlanCandidate::Order(order) => {
            let mut current = image.clone();
            for d in order.steps() {
                let tool = ToolId::new(&tools[d.as_str()])?;
                current = env.apply_tool(&current, &tool, d)?;
            }
            current
        }
    };
    let mut v = BTreeMap::new();
    for m in metrics_for(preference) {
        let s = env.score(&restored, &m)?;
        if !s.is_finite() {
            return Err(Error::InvalidMetric(m.name));
        }
        v.insert(m.name, s);
    }
    Ok(MetricVector(v))
}

/// Evaluates every candidate for one image and derives its pairwise
/// outcomes and win-rate ranking. Failed candidates are excluded.
pub fn acquire_record(
    env: &dyn Environment,
    pool: &Pool,
    image: &ImageRef,
    set: &DegradationSet,
    preference: Preference,
) -> Result<AtomicExperienceRecord> {
    let key = canonical_key(set)?;
    let candidates = enumerate_candidates(set, env.registry())?;
    let tools = if set.len() > 1 {
        anchored_tools(pool, env, set, preference)?
    } else {
        BTreeMap::new()
    };
    let mut scored = Vec::with_capacity(candidates.len());
    let mut failed = BTreeMap::new();
    for c in &candidates {
        match run_candidate(env, image, set, c, &tools, preference) {
            Ok(v) => scored.push((c.key(), v)),
            Err(e) => {
                log::warn!("candidate `{}` failed on {image}: {e}", c.key());
                failed.insert(c.key(), e.to_string());
            }
        }
    }
    let comparison = RecordComparison::compute(&metrics_for(preference), &scored)?;
    let summary = summarize(&comparison)?;
    Ok(AtomicExperienceRecord {
        record_id: 0,
        image: image.clone(),
        degradation_type: key.clone(),
        preference,
        candidates: candidates.iter().map(PlanCandidate::key).collect(),
        tools,
        metrics: scored.into_iter().collect(),
        failed,
        comparison,
        summary,
        round: 0,
        embedding: None,
    })
}

/// Perceives and acquires every image in parallel; images perceived as clean
/// are skipped. Output order follows `images`.
pub fn acquire_all(
    env: &dyn Environment,
    pool: &Pool,
    images: &[ImageRef],
    preference: Preference,
) -> Result<Vec<AtomicExperienceRecord>> {
    let results: Vec<Result<Option<AtomicExperienceRecord>>> = images
        .par_iter()
        .map(|img| {
            let set = env.perceive(img, 0)?;
            if set.is_empty() {
                return Ok(None);
            }
            acquire_record(env, pool, img, &set, preference).map(Some)
        })
        .collect();
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionBatch {
    pub degradation_type: String,
    pub preference: Preference,
    pub records: Vec<AtomicExperienceRecord>,
    pub round: u64,
}

/// Consumes the first `batch_size` pending records of a partition, if present.
pub fn maybe_trigger(pool: &mut Pool, key: &str, preference: Preference, batch_size: usize) -> Option<EvolutionBatch> {
    let ids: Vec<u64> = {
        let part = pool.partition_mut(key, preference);
        if batch_size == 0 || part.pending.len() < batch_size {
            return None;
        }
        part.rounds += 1;
        part.pending.drain(..batch_size).collect()
    };
    let round = pool.partition(key, preference).map_or(0, |p| p.rounds);
    let mut records = Vec::with_capacity(ids.len());
    for id in ids {
        let pos = pool
            .store
            .records
            .binary_search_by_key(&id, |r| r.record_id)
            .expect("pending ids refer to stored records");
        pool.store.records[pos].round = round;
        records.push(pool.store.records[pos].clone());
    }
    Some(EvolutionBatch {
        degradation_type: key.to_string(),
        preference,
        records,
        round,
    })
}

/// Accumulates the batch onto the prior counts and refits the coarse entry.
pub fn evolve_coarse(
    prior: Option<&PairwiseStats>,
    batch: &EvolutionBatch,
    alpha: f64,
    config: &FitConfig,
) -> Result<(PairwiseStats, CoarseEntry, BtdFit)> {
    let mut stats = match prior {
        Some(s) => s.clone(),
        None => {
            let keys: BTreeSet<&String> = batch.records.iter().flat_map(|r| r.candidates.iter()).collect();
            PairwiseStats::new(keys.into_iter().cloned().collect())
        }
    };
    for r in &batch.records {
        accumulate(&mut stats, &r.comparison)?;
    }
    let fit = btd::fit(&stats, config)?;
    let gate = if btd::needs_fine_grained(&fit, alpha)? {
        Gate::NeedsFine
    } else {
        Gate::SufficientAlone
    };
    let entry = CoarseEntry {
        degradation_type: batch.degradation_type.clone(),
        preference: batch.preference,
        ranking: btd::priority(&fit),
        gate,
        round: batch.round,
        abilities: fit.candidates.iter().cloned().zip(fit.theta.iter().copied()).collect(),
        tie_intensity: fit.nu,
    };
    Ok((stats, entry, fit))
}

fn fit_from_entry(entry: &CoarseEntry) -> BtdFit {
    let candidates: Vec<String> = entry.abilities.keys().cloned().collect();
    let k = candidates.len();
    BtdFit {
        theta: entry.abilities.values().copied().collect(),
        candidates,
        nu: entry.tie_intensity,
        covariance: None,
        log_likelihood: 0.0,
        converged: true,
        iterations: 0,
        at_bound: vec![false; k],
        separated: false,
    }
}

/// Insight prompt body: one `[key]` block of deduced relations per
/// multi-degradation coarse entry.
pub fn insight_context(pool: &Pool, preference: Preference) -> String {
    pool.coarse
        .values()
        .filter(|e| e.preference == preference && e.degradation_type.contains('+') && e.abilities.len() >= 2)
        .map(|e| format!("[{}]\n{}", e.degradation_type, btd::deduce_relations(&fit_from_entry(e))))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Distills insight text for `preference`. `Ok(None)` when there is nothing
/// to distill or the oracle failed; the previous insight then stays.
pub fn evolve_insight(
    pool: &Pool,
    preference: Preference,
    language: &dyn LanguageOracle,
    round: u64,
) -> Result<Option<InsightEntry>> {
    let combined = insight_context(pool, preference);
    if combined.is_empty() {
        return Ok(None);
    }
    let prompt = render(
        INSIGHT_PROMPT,
        &[("preference", preference.as_str()), ("combined_text", &combined)],
    );
    match language.distill_insight(&prompt) {
        Ok(text) if !text.trim().is_empty() => Ok(Some(InsightEntry {
            preference,
            text: text.trim().to_string(),
            round,
        })),
        Ok(_) => {
            log::warn!("insight distillation for {preference} returned empty text; round skipped");
            Ok(None)
        }
        Err(e) => {
            log::warn!("insight distillation for {preference} failed; round skipped: {e}");
            Ok(None)
        }
    }
}

// ---------------------------------------------------------------------------
// Rank correlation

/// Spearman's ρ over the candidates common to both rankings.
pub fn spearman_rho(a: &Ranking, b: &Ranking) -> Result<f64> {
    let common: Vec<&String> = a.ordered().iter().filter(|k| b.rank_of(k).is_some()).collect();
    let n = common.len();
    if n < 2 {
        return Err(Error::InsufficientOverlap);
    }
    let pos_b: Vec<&String> = b.ordered().iter().filter(|k| common.contains(k)).collect();
    let d2: f64 = common
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let j = pos_b.iter().position(|x| x == k).expect("common key");
            let d = i as f64 - j as f64;
            d * d
        })
        .sum();
    let n = n as f64;
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

/// ρ restricted to the union of both rankings' top three candidates.
pub fn rho_top3(a: &Ranking, b: &Ranking) -> Result<f64> {
    let top: BTreeSet<&String> = a.ordered().iter().take(3).chain(b.ordered().iter().take(3)).collect();
    let restrict = |r: &Ranking| {
        Ranking::from_ordered(r.ordered().iter().filter(|k| top.contains(k)).cloned().collect())
    };
    spearman_rho(&restrict(a)?, &restrict(b)?)
}

fn consistent(a: &Ranking, b: &Ranking, threshold: f64) -> bool {
    rho_top3(a, b).is_ok_and(|r| r >= threshold)
}

/// Greedy split in arrival order: each record joins the first cluster whose
/// members are all ranking-consistent with it.
fn split_consistent<'a>(
    members: &[&'a AtomicExperienceRecord],
    threshold: f64,
) -> Vec<Vec<&'a AtomicExperienceRecord>> {
    let mut clusters: Vec<Vec<&AtomicExperienceRecord>> = Vec::new();
    for r in members {
        match clusters
            .iter_mut()
            .find(|c| c.iter().all(|m| consistent(&m.summary.ranking, &r.summary.ranking, threshold)))
        {
            Some(c) => c.push(r),
            None => clusters.push(vec![r]),
        }
    }
    clusters
}

/// Final profile ranking: ascending mean rank across cached trajectory
/// ranks, ties by descending mean win rate, then key.
pub fn stabilize(profile: &PatternProfile, cached: &[&WinRateSummary]) -> Result<Ranking> {
    if cached.is_empty() {
        return Err(Error::ProfileNotStabilizable(profile.exp_id));
    }
    let mut acc: BTreeMap<&String, (f64, f64, usize)> = BTreeMap::new();
    for s in cached {
        for (i, key) in s.ranking.ordered().iter().enumerate() {
            let e = acc.entry(key).or_default();
            e.0 += (i + 1) as f64;
            e.1 += s.win_rate_of(key).unwrap_or(0.0);
            e.2 += 1;
        }
    }
    let mut rows: Vec<(&String, f64, f64)> = acc
        .into_iter()
        .map(|(k, (rank, rate, n))| (k, rank / n as f64, rate / n as f64))
        .collect();
    rows.sort_by(|a, b| {
        a.1.total_cmp(&b.1)
            .then_with(|| b.2.total_cmp(&a.2))
            .then_with(|| a.0.cmp(b.0))
    });
    Ranking::from_ordered(rows.into_iter().map(|r| r.0.clone()).collect())
}

// ---------------------------------------------------------------------------
// Pattern partitioning

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub profiles: Vec<PatternProfile>,
    /// The debate did not finish and ranking-only grouping was used.
    pub fallback: bool,
    pub debate_log: Vec<String>,
}

fn top3_text(r: &Ranking) -> String {
    r.ordered().iter().take(3).cloned().collect::<Vec<_>>().join(" > ")
}

fn build_profile(
    key: &str,
    preference: Preference,
    text: String,
    members: &[&AtomicExperienceRecord],
) -> Result<PatternProfile> {
    let mut p = PatternProfile {
        exp_id: 0,
        degradation_type: key.to_string(),
        preference,
        degradation_pattern: text,
        ranking: Ranking::default(),
        related_trajectory_ids: members.iter().map(|r| r.record_id).collect(),
        support: members.iter().map(|r| r.image.clone()).collect(),
        centroid: Vec::new(),
    };
    let summaries: Vec<&WinRateSummary> = members.iter().map(|r| &r.summary).collect();
    p.ranking = stabilize(&p, &summaries)?;
    let embeddings: Vec<Vec<f64>> = members
        .iter()
        .map(|r| {
            r.embedding
                .clone()
                .ok_or_else(|| Error::DegenerateEmbedding(format!("record {} has no embedding", r.record_id)))
        })
        .collect::<Result<_>>()?;
    p.centroid = centroid(&embeddings)?;
    Ok(p)
}

/// Groups a mini-batch into new profiles: oracle descriptions, a capped
/// multi-role debate, then a hard ranking-consistency split of every group.
/// Records must carry embeddings.
pub fn partition_patterns(
    records: &[&AtomicExperienceRecord],
    language: &dyn LanguageOracle,
    config: &EvolveConfig,
) -> Result<Partition> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidInput("partition needs at least one record".into()))?;
    let (key, preference) = (first.degradation_type.clone(), first.preference);
    if records.iter().any(|r| r.degradation_type != key || r.preference != preference) {
        return Err(Error::InvalidInput("mini-batch mixes partitions".into()));
    }
    let mut descriptions = BTreeMap::new();
    let mut lines = vec![format!("Degradation type: {key}")];
    let mut image_lines = Vec::new();
    for r in records {
        let text = language.describe(&r.image, &key)?.trim().to_string();
        lines.push(format!(
            "Traj{} (image {}): {text} Top ranking: {}",
            r.record_id,
            r.image,
            top3_text(&r.summary.ranking)
        ));
        image_lines.push(format!("Traj{}: image {}", r.record_id, r.image));
        descriptions.insert(r.record_id, text);
    }
    let context = lines.join("\n");
    let image_context = image_lines.join("\n");

    let mut log: Vec<String> = Vec::new();
    let mut groups: Option<Vec<ParsedGroup>> = None;
    let mut finished = false;
    'debate: for _ in 0..config.debate_turns {
        for role in DEBATE_ROLES {
            let history = format!("{context}\n{}", log.join("\n"));
            let reply = language.debate_turn(role, &history, &image_context)?;
            let action = parse_debate_reply(&reply).action;
            let request = match &action {
                DebateAction::GenerateGroups => Some(context.clone()),
                DebateAction::ValidateCurrentGroup(ids) | DebateAction::ValidateOtherGroup(ids) => {
                    let current = groups.as_deref().map(format_groups).unwrap_or_default();
                    let ids: Vec<String> = ids.iter().map(|i| format!("Traj{i}")).collect();
                    Some(format!("{context}\nCurrent groups: {current}\nValidate: {}", ids.join(", ")))
                }
                DebateAction::Finish if groups.is_some() => {
                    log.push(format!("{role}: finish()"));
                    finished = true;
                    break 'debate;
                }
                DebateAction::Finish => {
                    log.push(format!("{role}: finish() before any grouping was ignored"));
                    None
                }
                DebateAction::Unrecognized(text) => {
                    log.push(format!("{role}: unrecognized action `{text}`"));
                    None
                }
            };
            if let Some(request) = request {
                let reply = language.debate_turn(GROUPER_ROLE, &request, &image_context)?;
                let parsed = parse_groups(&reply);
                if parsed.is_empty() {
                    log.push(format!("{role}: grouping reply had no groups"));
                } else {
                    log.push(format!("{role}: {}", format_groups(&parsed)));
                    groups = Some(parsed);
                }
            }
        }
    }

    let by_id: BTreeMap<u64, &AtomicExperienceRecord> = records.iter().map(|r| (r.record_id, *r)).collect();
    let mut assigned: BTreeSet<u64> = BTreeSet::new();
    let mut raw: Vec<(Option<String>, Vec<&AtomicExperienceRecord>)> = Vec::new();
    if finished {
        for g in groups.unwrap_or_default() {
            let members: Vec<&AtomicExperienceRecord> = g
                .trajectories
                .iter()
                .filter_map(|id| by_id.get(id).copied())
                .filter(|r| assigned.insert(r.record_id))
                .collect();
            if !members.is_empty() {
                raw.push((Some(g.text), members));
            }
        }
    } else {
        log::warn!("debate for {key}/{preference} did not finish; grouping by ranking only");
    }
    let leftover: Vec<&AtomicExperienceRecord> =
        records.iter().copied().filter(|r| !assigned.contains(&r.record_id)).collect();
    if !leftover.is_empty() {
        raw.push((None, leftover));
    }

    let mut profiles = Vec::new();
    for (text, members) in raw {
        for cluster in split_consistent(&members, config.rho_threshold) {
            let text = text
                .clone()
                .unwrap_or_else(|| descriptions[&cluster[0].record_id].clone());
            profiles.push(build_profile(&key, preference, text, &cluster)?);
        }
    }
    Ok(Partition {
        profiles,
        fallback: !finished,
        debate_log: log,
    })
}

// ---------------------------------------------------------------------------
// Profile iteration

fn members_of<'a>(pool: &'a Pool, ids: &[u64]) -> Result<Vec<&'a AtomicExperienceRecord>> {
    ids.iter()
        .map(|id| {
            pool.record(*id)
                .ok_or_else(|| Error::InvalidInput(format!("profile refers to unknown record {id}")))
        })
        .collect()
}

fn rebuild(pool: &Pool, profile: &mut PatternProfile) -> Result<()> {
    let members = members_of(pool, &profile.related_trajectory_ids)?;
    let fresh = build_profile(
        &profile.degradation_type,
        profile.preference,
        profile.degradation_pattern.clone(),
        &members,
    )?;
    profile.ranking = fresh.ranking;
    profile.support = fresh.support;
    profile.centroid = fresh.centroid;
    Ok(())
}

fn cross_consistent(pool: &Pool, a: &[u64], b: &[u64], threshold: f64) -> Result<bool> {
    let ma = members_of(pool, a)?;
    let mb = members_of(pool, b)?;
    Ok(ma
        .iter()
        .all(|x| mb.iter().all(|y| consistent(&x.summary.ranking, &y.summary.ranking, threshold))))
}

/// Applies oracle-proposed meta-operations of new profiles against the
/// stored ones for (key, preference). Merge and Update must pass the ranking
/// constraint; rejected or unmentioned new profiles are added. Returns the
/// applied operations, one line each.
pub fn iterate_profiles(
    pool: &mut Pool,
    key: &str,
    preference: Preference,
    new: Vec<PatternProfile>,
    language: &dyn LanguageOracle,
    rho_threshold: f64,
) -> Result<Vec<String>> {
    let mut existing = pool.profiles(key, preference).to_vec();
    let mut report = Vec::new();
    let request = PlanRequest {
        degradation_type: key.to_string(),
        new_patterns: new
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{}: {}", i + 1, p.degradation_pattern))
            .collect(),
        existing_patterns: existing
            .iter()
            .map(|p| format!("{}: {}", p.exp_id, p.degradation_pattern))
            .collect(),
        history_plan: "None".into(),
        history_feedback: "None".into(),
    };
    let plan = if existing.is_empty() {
        Vec::new()
    } else {
        let reply = language.propose_plan(&request)?;
        let parsed = parse_plan_lines(&reply);
        for d in &parsed.diagnostics {
            log::warn!("plan line skipped: {d}");
        }
        parsed.operations
    };

    let mut handled: BTreeSet<usize> = BTreeSet::new();
    let mut touched: BTreeSet<u64> = BTreeSet::new();
    let mut additions: Vec<usize> = Vec::new();
    for op in plan {
        let source = op.source();
        if source == 0 || source > new.len() || handled.contains(&source) {
            report.push(format!("skipped `{}`: bad or repeated source", op.to_line()));
            continue;
        }
        let candidate = &new[source - 1];
        let target = op.target();
        let slot = target.and_then(|t| existing.iter().position(|p| p.exp_id == t));
        if target.is_some() && (slot.is_none() || touched.contains(&target.unwrap_or(0))) {
            report.push(format!("rejected `{}`: unknown or already revised target", op.to_line()));
            continue;
        }
        match op {
            MetaOperation::Add { .. } => {
                handled.insert(source);
                additions.push(source);
            }
            MetaOperation::Merge { target, .. } | MetaOperation::Update { target, .. } => {
                let at = slot.expect("checked");
                let old = &existing[at];
                let ok = consistent(&candidate.ranking, &old.ranking, rho_threshold)
                    && cross_consistent(
                        pool,
                        &candidate.related_trajectory_ids,
                        &old.related_trajectory_ids,
                        rho_threshold,
                    )?;
                if !ok {
                    report.push(format!("rejected `{}`: ranking constraint", op.to_line()));
                    continue;
                }
                let old = &mut existing[at];
                for id in &candidate.related_trajectory_ids {
                    if !old.related_trajectory_ids.contains(id) {
                        old.related_trajectory_ids.push(*id);
                    }
                }
                rebuild(pool, old)?;
                handled.insert(source);
                touched.insert(target);
                report.push(op.to_line());
            }
            MetaOperation::Replace { target, .. } => {
                let at = slot.expect("checked");
                let mut replacement = candidate.clone();
                replacement.exp_id = target;
                existing[at] = replacement;
                handled.insert(source);
                touched.insert(target);
                report.push(op.to_line());
            }
            MetaOperation::Delete { target, .. } => {
                let at = slot.expect("checked");
                if !existing[at].support.is_empty() {
                    report.push(format!("rejected `{}`: target still has support", op.to_line()));
                    continue;
                }
                existing.remove(at);
                handled.insert(source);
                touched.insert(target);
                additions.push(source);
                report.push(op.to_line());
            }
        }
    }
    for source in 1..=new.len() {
        if !handled.contains(&source) {
            additions.push(source);
        }
    }
    additions.sort_unstable();
    additions.dedup();
    for source in additions {
        let mut p = new[source - 1].clone();
        let part = pool.partition_mut(key, preference);
        p.exp_id = part.next_exp_id;
        part.next_exp_id += 1;
        report.push(format!("{source} | add -> {}", p.exp_id));
        existing.push(p);
    }

    // Consistency sweep: split any profile whose trajectories disagree.
    let mut swept = Vec::with_capacity(existing.len());
    for p in existing {
        let members = members_of(pool, &p.related_trajectory_ids)?;
        let clusters = split_consistent(&members, rho_threshold);
        if clusters.len() == 1 {
            swept.push(p);
            continue;
        }
        let ids: Vec<Vec<u64>> = clusters.iter().map(|c| c.iter().map(|r| r.record_id).collect()).collect();
        for (i, cluster) in ids.into_iter().enumerate() {
            let mut q = p.clone();
            q.related_trajectory_ids = cluster;
            if i > 0 {
                let part = pool.partition_mut(key, preference);
                q.exp_id = part.next_exp_id;
                part.next_exp_id += 1;
            }
            rebuild(pool, &mut q)?;
            report.push(format!("split {} -> {}", p.exp_id, q.exp_id));
            swept.push(q);
        }
    }
    swept.sort_by_key(|p| p.exp_id);
    pool.profiles.insert((key.to_string(), preference), swept);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Rounds

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub abilities: BTreeMap<String, f64>,
    pub tie_intensity: f64,
    pub log_likelihood: f64,
    pub converged: bool,
    pub separated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub degradation_type: String,
    pub preference: Preference,
    pub round: u64,
    pub records_consumed: Vec<u64>,
    pub fit: FitSummary,
    pub gate: Gate,
    pub ranking: Ranking,
    pub fine_batches: usize,
    pub fallback_batches: usize,
    pub profile_operations: Vec<String>,
}

fn ensure_embeddings(pool: &mut Pool, ids: &[u64], encoder: &dyn EncoderOracle) -> Result<()> {
    for id in ids {
        let pos = pool
            .store
            .records
            .binary_search_by_key(id, |r| r.record_id)
            .map_err(|_| Error::InvalidInput(format!("unknown record {id}")))?;
        if pool.store.records[pos].embedding.is_none() {
            let v = encoder.embed(&pool.store.records[pos].image)?;
            pool.store.records[pos].embedding = Some(v);
        }
    }
    Ok(())
}

/// Runs every triggered round for one partition.
pub fn evolve_partition(
    pool: &mut Pool,
    key: &str,
    preference: Preference,
    config: &EvolveConfig,
    language: &dyn LanguageOracle,
    encoder: &dyn EncoderOracle,
) -> Result<Vec<RoundReport>> {
    config.validate()?;
    let mut reports = Vec::new();
    while let Some(batch) = maybe_trigger(pool, key, preference, config.batch_size) {
        let prior = pool.partition(key, preference).and_then(|p| p.stats.clone());
        let (stats, entry, fit) = evolve_coarse(prior.as_ref(), &batch, config.alpha, &config.fit)?;
        let gate = entry.gate;
        let ranking = entry.ranking.clone();
        pool.partition_mut(key, preference).stats = Some(stats);
        pool.insert_coarse(entry)?;
        let consumed: Vec<u64> = batch.records.iter().map(|r| r.record_id).collect();
        let mut report = RoundReport {
            degradation_type: key.to_string(),
            preference,
            round: batch.round,
            records_consumed: consumed.clone(),
            fit: FitSummary {
                abilities: fit.candidates.iter().cloned().zip(fit.theta.iter().copied()).collect(),
                tie_intensity: fit.nu,
                log_likelihood: fit.log_likelihood,
                converged: fit.converged,
                separated: fit.separated,
            },
            gate,
            ranking,
            fine_batches: 0,
            fallback_batches: 0,
            profile_operations: Vec::new(),
        };
        if gate == Gate::NeedsFine {
            pool.partition_mut(key, preference).fine_pending.extend(consumed);
        }
        loop {
            let part = pool.partition_mut(key, preference);
            if gate != Gate::NeedsFine || part.fine_pending.len() < config.mini_batch {
                break;
            }
            let ids: Vec<u64> = part.fine_pending.drain(..config.mini_batch).collect();
            ensure_embeddings(pool, &ids, encoder)?;
            let members = members_of(pool, &ids)?;
            let partition = partition_patterns(&members, language, config)?;
            report.fine_batches += 1;
            report.fallback_batches += usize::from(partition.fallback);
            let ops = iterate_profiles(pool, key, preference, partition.profiles, language, config.rho_threshold)?;
            report.profile_operations.extend(ops);
        }
        reports.push(report);
    }
    Ok(reports)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvolveOutcome {
    pub rounds: Vec<RoundReport>,
    pub insight_updated: Vec<Preference>,
}

/// Evolves every partition with enough pending records, then refreshes the
/// insight of each preference that changed.
pub fn evolve_all(
    pool: &mut Pool,
    config: &EvolveConfig,
    language: &dyn LanguageOracle,
    encoder: &dyn EncoderOracle,
) -> Result<EvolveOutcome> {
    let partitions: Vec<(String, Preference)> = pool
        .store
        .partitions
        .iter()
        .map(|p| (p.degradation_type.clone(), p.preference))
        .collect();
    let mut out = EvolveOutcome::default();
    for (key, pref) in partitions {
        out.rounds
            .extend(evolve_partition(pool, &key, pref, config, language, encoder)?);
    }
    for pref in Preference::ALL {
        let rounds: Vec<&RoundReport> = out
            .rounds
            .iter()
            .filter(|r| r.preference == pref && r.degradation_type.contains('+'))
            .collect();
        if rounds.is_empty() {
            continue;
        }
        let round = pool
            .coarse
            .values()
            .filter(|e| e.preference == pref && e.degradation_type.contains('+'))
            .map(|e| e.round)
            .max()
            .unwrap_or(0);
        if let Some(entry) = evolve_insight(pool, pref, language, round)? {
            pool.set_insight(entry)?;
            out.insight_updated.push(pref);
        }
    }
    Ok(out)
}

/// Acquires and evolves in stages of increasing |D|, so order candidates
/// are anchored on tools learned from the single-degradation stage.
pub fn train(
    env: &dyn Environment,
    pool: &mut Pool,
    images: &[ImageRef],
    preference: Preference,
    config: &EvolveConfig,
    language: &dyn LanguageOracle,
    encoder: &dyn EncoderOracle,
) -> Result<EvolveOutcome> {
    let mut stages: BTreeMap<usize, Vec<ImageRef>> = BTreeMap::new();
    for img in images {
        let n = env.perceive(img, 0)?.len();
        if n > 0 {
            stages.entry(n).or_default().push(img.clone());
        }
    }
    let mut out = EvolveOutcome::default();
    for (_, stage) in stages {
        for record in acquire_all(env, pool, &stage, preference)? {
            pool.add_record(record);
        }
        let o = evolve_all(pool, config, language, encoder)?;
        out.rounds.extend(o.rounds);
        out.insight_updated.extend(o.insight_updated);
    }
    out.insight_updated.sort();
    out.insight_updated.dedup();
    Ok(out)
}

/// The degradation type of a single-degradation key.
pub fn single_degradation(key: &str) -> Option<DegradationType> {
    let set = DegradationSet::from_key(key).ok()?;
    (set.len() == 1).then(|| set.iter().next().cloned()).flatten()
}
