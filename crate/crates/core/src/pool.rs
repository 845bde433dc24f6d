//! Hierarchical experience pool: insight text, coarse rankings and pattern
//! profiles, with cascade retrieval and directory persistence.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolve::AtomicExperienceRecord;
use crate::oracles::{parse_choice, EncoderOracle, LanguageOracle};
use crate::ranking::PairwiseStats;
use crate::types::{canonical_key, DegradationSet, ImageRef, Preference, Ranking, RemovalOrder, ToolRegistry};

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    #[default]
    SufficientAlone,
    NeedsFine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsightEntry {
    pub preference: Preference,
    pub text: String,
    #[serde(default)]
    pub round: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseEntry {
    pub degradation_type: String,
    pub preference: Preference,
    pub ranking: Ranking,
    #[serde(default)]
    pub gate: Gate,
    #[serde(default)]
    pub round: u64,
    /// Fitted abilities per candidate, kept for insight distillation.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub abilities: BTreeMap<String, f64>,
    #[serde(default)]
    pub tie_intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternProfile {
    pub exp_id: u64,
    pub degradation_type: String,
    pub preference: Preference,
    pub degradation_pattern: String,
    pub ranking: Ranking,
    pub related_trajectory_ids: Vec<u64>,
    #[serde(default)]
    pub support: Vec<ImageRef>,
    #[serde(default)]
    pub centroid: Vec<f64>,
}

/// Evolution bookkeeping for one (degradation key, preference) partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionState {
    pub degradation_type: String,
    pub preference: Preference,
    /// Record ids awaiting a coarse batch, in arrival order.
    pub pending: Vec<u64>,
    /// Record ids awaiting pattern partitioning, in arrival order.
    pub fine_pending: Vec<u64>,
    pub rounds: u64,
    pub next_exp_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<PairwiseStats>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStore {
    pub next_record_id: u64,
    pub partitions: Vec<PartitionState>,
    pub records: Vec<AtomicExperienceRecord>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pool {
    pub insight: BTreeMap<Preference, InsightEntry>,
    pub coarse: BTreeMap<(String, Preference), CoarseEntry>,
    pub profiles: BTreeMap<(String, Preference), Vec<PatternProfile>>,
    pub store: TrajectoryStore,
}

impl Pool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn coarse_lookup(&self, key: &str, preference: Preference) -> Option<&CoarseEntry> {
        self.coarse.get(&(key.to_string(), preference))
    }

    pub fn insert_coarse(&mut self, entry: CoarseEntry) -> Result<()> {
        let set = DegradationSet::from_key(&entry.degradation_type)?;
        if canonical_key(&set)? != entry.degradation_type {
            return Err(Error::InvalidInput(format!(
                "`{}` is not a canonical degradation key",
                entry.degradation_type
            )));
        }
        self.coarse
            .insert((entry.degradation_type.clone(), entry.preference), entry);
        Ok(())
    }

    pub fn insight_for(&self, preference: Preference) -> Option<&InsightEntry> {
        self.insight.get(&preference)
    }

    pub fn set_insight(&mut self, entry: InsightEntry) -> Result<()> {
        if entry.text.trim().is_empty() {
            return Err(Error::InvalidInput("insight text must not be empty".into()));
        }
        self.insight.insert(entry.preference, entry);
        Ok(())
    }

    pub fn profiles(&self, key: &str, preference: Preference) -> &[PatternProfile] {
        self.profiles
            .get(&(key.to_string(), preference))
            .map_or(&[], Vec::as_slice)
    }

    pub fn record(&self, id: u64) -> Option<&AtomicExperienceRecord> {
        // Ids are assigned in increasing order, so the log is sorted.
        self.store
            .records
            .binary_search_by_key(&id, |r| r.record_id)
            .ok()
            .map(|i| &self.store.records[i])
    }

    pub fn partition(&self, key: &str, preference: Preference) -> Option<&PartitionState> {
        self.store
            .partitions
            .iter()
            .find(|p| p.degradation_type == key && p.preference == preference)
    }

    pub fn partition_mut(&mut self, key: &str, preference: Preference) -> &mut PartitionState {
        let at = match self
            .store
            .partitions
            .iter()
            .position(|p| p.degradation_type == key && p.preference == preference)
        {
            Some(i) => i,
            None => {
                self.store.partitions.push(PartitionState {
                    degradation_type: key.to_string(),
                    preference,
                    pending: Vec::new(),
                    fine_pending: Vec::new(),
                    rounds: 0,
                    next_exp_id: 0,
                    stats: None,
                });
                self.store
                    .partitions
                    .sort_by(|a, b| (&a.degradation_type, a.preference).cmp(&(&b.degradation_type, b.preference)));
                self.store
                    .partitions
                    .iter()
                    .position(|p| p.degradation_type == key && p.preference == preference)
                    .expect("just inserted")
            }
        };
        &mut self.store.partitions[at]
    }

    /// Appends a record to the log and its partition's pending queue,
    /// assigning the next record id.
    pub fn add_record(&mut self, mut record: AtomicExperienceRecord) -> u64 {
        let id = self.store.next_record_id;
        self.store.next_record_id += 1;
        record.record_id = id;
        let (key, pref) = (record.degradation_type.clone(), record.preference);
        self.store.records.push(record);
        self.partition_mut(&key, pref).pending.push(id);
        id
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let staging = sibling(dir, "staging");
        let backup = sibling(dir, "old");
        for stale in [&staging, &backup] {
            if stale.exists() {
                fs::remove_dir_all(stale).map_err(|e| Error::io(stale, e))?;
            }
        }
        self.write_files(&staging)?;
        if dir.exists() {
            fs::rename(dir, &backup).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&staging, dir).map_err(|e| Error::io(&staging, e))?;
        if backup.exists() {
            fs::remove_dir_all(&backup).map_err(|e| Error::io(&backup, e))?;
        }
        Ok(())
    }

    fn write_files(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("profiles")).map_err(|e| Error::io(dir, e))?;
        write_json(
            &dir.join("insight.json"),
            &InsightFile {
                schema: SCHEMA_VERSION,
                entries: self.insight.values().cloned().collect(),
            },
        )?;
        write_json(
            &dir.join("coarse.json"),
            &CoarseFile {
                schema: SCHEMA_VERSION,
                entries: self.coarse.values().cloned().collect(),
            },
        )?;
        for ((key, pref), profiles) in &self.profiles {
            let sub = dir.join("profiles").join(key);
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            write_json(
                &sub.join(format!("{pref}.json")),
                &ProfileFile {
                    schema: SCHEMA_VERSION,
                    profiles: profiles.clone(),
                },
            )?;
        }
        write_json(
            &dir.join("trajectories.json"),
            &TrajectoryFile {
                schema: SCHEMA_VERSION,
                store: self.store.clone(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Pool> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "pool directory not found"),
            ));
        }
        let mut pool = Pool::new();
        let insight: InsightFile = read_json(&dir.join("insight.json"))?;
        for entry in insight.entries {
            pool.set_insight(entry)?;
        }
        let coarse: CoarseFile = read_json(&dir.join("coarse.json"))?;
        for entry in coarse.entries {
            pool.insert_coarse(entry)?;
        }
        let profiles_dir = dir.join("profiles");
        if profiles_dir.is_dir() {
            let mut keys: Vec<PathBuf> = fs::read_dir(&profiles_dir)
                .map_err(|e| Error::io(&profiles_dir, e))?
                .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&profiles_dir, err)))
                .collect::<Result<_>>()?;
            keys.sort();
            for key_dir in keys.into_iter().filter(|p| p.is_dir()) {
                let key = key_dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                for pref in Preference::ALL {
                    let path = key_dir.join(format!("{pref}.json"));
                    if !path.exists() {
                        continue;
                    }
                    let file: ProfileFile = read_json(&path)?;
                    if file
                        .profiles
                        .iter()
                        .any(|p| p.degradation_type != key || p.preference != pref)
                    {
                        return Err(Error::ParseError {
                            path,
                            message: "profile key or preference does not match its file location".into(),
                        });
                    }
                    pool.profiles.insert((key.clone(), pref), file.profiles);
                }
            }
        }
        let path = dir.join("trajectories.json");
        if path.exists() {
            let file: TrajectoryFile = read_json(&path)?;
            pool.store = file.store;
        }
        Ok(pool)
    }

    /// Loads `dir`, or returns an empty pool when it does not exist yet.
    pub fn load_or_default(dir: &Path) -> Result<Pool> {
        if dir.exists() {
            Pool::load(dir)
        } else {
            Ok(Pool::new())
        }
    }
}

fn sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("pool");
    dir.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

#[derive(Serialize, Deserialize)]
struct InsightFile {
    schema: u64,
    entries: Vec<InsightEntry>,
}

#[derive(Serialize, Deserialize)]
struct CoarseFile {
    schema: u64,
    entries: Vec<CoarseEntry>,
}

#[derive(Serialize, Deserialize)]
struct ProfileFile {
    schema: u64,
    profiles: Vec<PatternProfile>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryFile {
    schema: u64,
    #[serde(flatten)]
    store: TrajectoryStore,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, &e))? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a versioned JSON document, checking `"schema"` before decoding.
pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse(path, &e))?;
    let found = value.get("schema").and_then(serde_json::Value::as_u64).unwrap_or(0);
    if found != SCHEMA_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found,
            expected: SCHEMA_VERSION,
        });
    }
    // Decode from text, not the Value, so errors carry line and column.
    serde_json::from_str(&text).map_err(|e| Error::parse(path, &e))
}

// ---------------------------------------------------------------------------
// Retrieval

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionError {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0 && na.is_finite() && nb.is_finite()) {
        return Err(Error::DegenerateEmbedding(
            "cosine similarity needs finite non-zero vectors".into(),
        ));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Unit-normalized mean of `vectors`.
pub fn centroid(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::DegenerateEmbedding("centroid of an empty support".into()))?;
    let mut sum = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != sum.len() {
            return Err(Error::DimensionError {
                expected: sum.len(),
                actual: v.len(),
            });
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::DegenerateEmbedding("support embeddings cancel out".into()));
    }
    Ok(sum.into_iter().map(|x| x / norm).collect())
}

/// Indices of the `k` profiles most similar to `query`, best first; ties by exp_id.
pub fn rank_by_similarity(profiles: &[PatternProfile], query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    let mut scored = profiles
        .iter()
        .enumerate()
        .map(|(i, p)| cosine_similarity(&p.centroid, query).map(|s| (i, s)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| profiles[a.0].exp_id.cmp(&profiles[b.0].exp_id))
    });
    scored.truncate(k);
    Ok(scored)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recalled<'a> {
    pub profile: &'a PatternProfile,
    pub similarity: f64,
}

/// Top-K profiles under (key, preference) by centroid similarity to the image.
pub fn recall_topk<'a>(
    pool: &'a Pool,
    encoder: &dyn EncoderOracle,
    image: &ImageRef,
    key: &str,
    preference: Preference,
    k: usize,
) -> Result<Vec<Recalled<'a>>> {
    let profiles = pool.profiles(key, preference);
    if profiles.is_empty() || k == 0 {
        return Ok(Vec::new());
    }
    let query = encoder.embed(image)?;
    Ok(rank_by_similarity(profiles, &query, k)?
        .into_iter()
        .map(|(i, similarity)| Recalled {
            profile: &profiles[i],
            similarity,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub index: usize,
    pub warning: Option<String>,
}

/// Lets the language oracle pick one candidate by description; falls back to
/// the first (most similar) candidate on a malformed reply.
pub fn refine(language: &dyn LanguageOracle, candidates: &[&PatternProfile], image: &ImageRef) -> Result<Refined> {
    match candidates.len() {
        0 => return Err(Error::InvalidInput("refine needs at least one candidate".into())),
        1 => return Ok(Refined { index: 0, warning: None }),
        _ => {}
    }
    let texts: Vec<String> = candidates.iter().map(|p| p.degradation_pattern.clone()).collect();
    let fallback = |why: String| {
        log::warn!("refine fell back to the most similar profile: {why}");
        Ok(Refined {
            index: 0,
            warning: Some(why),
        })
    };
    match language.refine_choice(&texts, image) {
        Ok(reply) => match parse_choice(&reply, texts.len()) {
            Some(index) => Ok(Refined { index, warning: None }),
            None => fallback(format!("refine reply `{}` names no candidate", reply.trim())),
        },
        Err(Error::OracleProtocol(m)) => fallback(m),
        Err(e) => Err(e),
    }
}

// ---------------------------------------------------------------------------
// Guidance

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceLevel {
    None,
    Insight,
    Coarse,
    Fine,
}

impl GuidanceLevel {
    pub const ALL: [GuidanceLevel; 4] = [
        GuidanceLevel::None,
        GuidanceLevel::Insight,
        GuidanceLevel::Coarse,
        GuidanceLevel::Fine,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceLevel::None => "none",
            GuidanceLevel::Insight => "insight",
            GuidanceLevel::Coarse => "coarse",
            GuidanceLevel::Fine => "fine",
        }
    }
}

impl fmt::Display for GuidanceLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for GuidanceLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GuidanceLevel::ALL
            .into_iter()
            .find(|l| l.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidInput(format!("unknown guidance level `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Guidance {
    pub level: GuidanceLevel,
    pub degradation_type: String,
    /// Order ranking for |D| > 1, tool ranking for |D| = 1.
    pub ranking: Option<Ranking>,
    /// Ranked tools per degradation, best first; covers every d ∈ D.
    pub tools: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub insight: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Guidance {
    /// Orders to try, best first: ranked orders, then the rest lexicographically.
    pub fn orders(&self, set: &DegradationSet) -> Vec<RemovalOrder> {
        let all = RemovalOrder::all(set);
        if set.len() < 2 {
            return all;
        }
        let mut out: Vec<RemovalOrder> = self
            .ranking
            .iter()
            .flat_map(|r| r.ordered().iter())
            .filter_map(|k| RemovalOrder::parse(k, set).ok())
            .collect();
        for o in all {
            if !out.contains(&o) {
                out.push(o);
            }
        }
        out
    }
}

#[derive(Clone, Copy)]
pub struct GuidanceOptions {
    pub top_k: usize,
    /// Highest level the lookup may use; lower levels remain as fallbacks.
    pub max_level: GuidanceLevel,
}

impl Default for GuidanceOptions {
    fn default() -> Self {
        GuidanceOptions {
            top_k: 3,
            max_level: GuidanceLevel::Fine,
        }
    }
}

/// Ranked tools for `d`: its single-degradation coarse ranking, then any
/// remaining registry tools in registry order.
fn tool_list(
    pool: &Pool,
    registry: &ToolRegistry,
    d: &crate::types::DegradationType,
    preference: Preference,
    use_pool: bool,
    first: Option<&Ranking>,
) -> Result<Vec<String>> {
    let registered: Vec<String> = registry.tools(d)?.iter().map(|t| t.as_str().to_string()).collect();
    let mut out: Vec<String> = Vec::with_capacity(registered.len());
    let learned = if use_pool {
        first.or_else(|| pool.coarse_lookup(d.as_str(), preference).map(|e| &e.ranking))
    } else {
        None
    };
    if let Some(r) = learned {
        out.extend(r.ordered().iter().filter(|t| registered.contains(t)).cloned());
    }
    for t in registered {
        if !out.contains(&t) {
            out.push(t);
        }
    }
    Ok(out)
}

/// Order suggested by insight text: degradations sorted by where they are
/// first mentioned. `None` when the text mentions none of them.
pub fn insight_order(text: &str, set: &DegradationSet) -> Option<RemovalOrder> {
    let lower = text.to_lowercase();
    let mut found: Vec<(usize, crate::types::DegradationType)> = Vec::new();
    let mut missing = Vec::new();
    for d in set.iter() {
        match lower.find(d.as_str()) {
            Some(pos) => found.push((pos, d.clone())),
            None => missing.push(d.clone()),
        }
    }
    if found.is_empty() {
        return None;
    }
    found.sort();
    let seq = found.into_iter().map(|(_, d)| d).chain(missing).collect();
    RemovalOrder::new(seq, set).ok()
}

/// Cascade lookup: Fine (coarse gate NeedsFine and a profile recalled) >
/// Coarse > Insight > None. Tools always come from coarse entries.
#[allow(clippy::too_many_arguments)]
pub fn get_guidance(
    pool: &Pool,
    registry: &ToolRegistry,
    language: &dyn LanguageOracle,
    encoder: &dyn EncoderOracle,
    image: &ImageRef,
    set: &DegradationSet,
    preference: Preference,
    options: GuidanceOptions,
) -> Result<Guidance> {
    let key = canonical_key(set)?;
    let use_pool = options.max_level > GuidanceLevel::None;
    let mut g = Guidance {
        level: GuidanceLevel::None,
        degradation_type: key.clone(),
        ranking: None,
        tools: BTreeMap::new(),
        profile: None,
        insight: None,
        warnings: Vec::new(),
    };
    let coarse = pool.coarse_lookup(&key, preference);
    if let Some(entry) = coarse.filter(|_| options.max_level >= GuidanceLevel::Coarse) {
        g.level = GuidanceLevel::Coarse;
        g.ranking = Some(entry.ranking.clone());
        if entry.gate == Gate::NeedsFine && options.max_level >= GuidanceLevel::Fine {
            let recalled = recall_topk(pool, encoder, image, &key, preference, options.top_k)?;
            if !recalled.is_empty() {
                let candidates: Vec<&PatternProfile> = recalled.iter().map(|r| r.profile).collect();
                let refined = refine(language, &candidates, image)?;
                g.warnings.extend(refined.warning);
                let chosen = candidates[refined.index];
                g.level = GuidanceLevel::Fine;
                g.ranking = Some(chosen.ranking.clone());
                g.profile = Some(chosen.exp_id);
            }
        }
    } else if options.max_level >= GuidanceLevel::Insight {
        if let Some(entry) = pool.insight_for(preference) {
            g.insight = Some(entry.text.clone());
            if set.len() > 1 {
                if let Some(order) = insight_order(&entry.text, set) {
                    g.level = GuidanceLevel::Insight;
                    g.ranking = Some(Ranking::from_ordered(vec![order.key()])?);
                }
            } else {
                g.level = GuidanceLevel::Insight;
            }
        }
    }
    let single = set.len() == 1 && g.level >= GuidanceLevel::Coarse;
    for d in set.iter() {
        let first = if single { g.ranking.as_ref() } else { None };
        g.tools
            .insert(d.as_str().to_string(), tool_list(pool, registry, d, preference, use_pool, first)?);
    }
    Ok(g)
}
