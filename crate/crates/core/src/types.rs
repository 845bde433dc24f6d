//! Domain vocabulary shared by every other module.
//!
//! Degradations, tools, removal orders, metric specs and rankings are plain
//! immutable values. Collections use ordered maps so that iteration order,
//! and therefore every derived decision, is deterministic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Separator used in canonical degradation-set keys ("dark+motion blur").
pub const KEY_SEPARATOR: &str = "+";
/// Separator used in removal-order candidate keys ("motion blur -> dark").
pub const ORDER_SEPARATOR: &str = " -> ";
/// Upper bound on |D|; the candidate space grows factorially past it.
pub const MAX_DEGRADATIONS: usize = 4;

/// The visual-quality criterion that selects the active metric set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preference {
    Fidelity,
    Perception,
}

impl Preference {
    pub const ALL: [Preference; 2] = [Preference::Fidelity, Preference::Perception];

    pub fn as_str(self) -> &'static str {
        match self {
            Preference::Fidelity => "fidelity",
            Preference::Perception => "perception",
        }
    }
}

impl fmt::Display for Preference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Preference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fidelity" => Ok(Preference::Fidelity),
            "perception" => Ok(Preference::Perception),
            other => Err(Error::InvalidInput(format!("unknown preference `{other}`"))),
        }
    }
}

fn validate_token(kind: &str, raw: &str) -> Result<String> {
    let id = raw.trim().to_lowercase();
    if id.is_empty() {
        return Err(Error::InvalidInput(format!("{kind} id must not be empty")));
    }
    if id.contains(KEY_SEPARATOR) || id.contains("->") || id.contains('/') || id.contains('|') {
        return Err(Error::InvalidInput(format!(
            "{kind} id `{raw}` contains a reserved character"
        )));
    }
    Ok(id)
}

/// A single degradation type such as "dark" or "motion blur".
///
/// Ids are lower-cased on construction; equality is string equality.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DegradationType(String);

impl DegradationType {
    pub fn new(id: &str) -> Result<Self> {
        validate_token("degradation", id).map(DegradationType)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for DegradationType {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        DegradationType::new(&value)
    }
}

impl From<DegradationType> for String {
    fn from(value: DegradationType) -> Self {
        value.0
    }
}

impl fmt::Display for DegradationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// An ordered, duplicate-free set of degradation types.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DegradationSet(BTreeSet<DegradationType>);

impl DegradationSet {
    pub fn new(members: impl IntoIterator<Item = DegradationType>) -> Self {
        DegradationSet(members.into_iter().collect())
    }

    /// Parses a list of raw ids, rejecting duplicates.
    pub fn from_ids<S: AsRef<str>>(ids: &[S]) -> Result<Self> {
        let mut set = BTreeSet::new();
        for raw in ids {
            let d = DegradationType::new(raw.as_ref())?;
            if !set.insert(d.clone()) {
                return Err(Error::InvalidInput(format!("duplicate degradation `{d}`")));
            }
        }
        Ok(DegradationSet(set))
    }

    /// Parses a canonical key back into a set.
    pub fn from_key(key: &str) -> Result<Self> {
        let parts: Vec<&str> = key.split(KEY_SEPARATOR).collect();
        DegradationSet::from_ids(&parts)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, d: &DegradationType) -> bool {
        self.0.contains(d)
    }

    pub fn iter(&self) -> impl Iterator<Item = &DegradationType> {
        self.0.iter()
    }
}

impl FromIterator<DegradationType> for DegradationSet {
    fn from_iter<I: IntoIterator<Item = DegradationType>>(iter: I) -> Self {
        DegradationSet::new(iter)
    }
}

/// Order-insensitive key for a degradation set: members sorted and joined by "+".
pub fn canonical_key(set: &DegradationSet) -> Result<String> {
    if set.is_empty() {
        return Err(Error::InvalidInput(
            "canonical key of an empty degradation set".into(),
        ));
    }
    Ok(set
        .iter()
        .map(DegradationType::as_str)
        .collect::<Vec<_>>()
        .join(KEY_SEPARATOR))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ToolId(String);

impl ToolId {
    /// Tool ids keep their case ("EVSSM" and "mprnet" both appear in stored pools).
    pub fn new(id: &str) -> Result<Self> {
        let id = id.trim();
        if id.is_empty() {
            return Err(Error::InvalidInput("tool id must not be empty".into()));
        }
        if id.contains(ORDER_SEPARATOR.trim()) || id.contains('|') || id.contains('/') {
            return Err(Error::InvalidInput(format!(
                "tool id `{id}` contains a reserved character"
            )));
        }
        Ok(ToolId(id.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ToolId {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        ToolId::new(&value)
    }
}

impl From<ToolId> for String {
    fn from(value: ToolId) -> Self {
        value.0
    }
}

impl fmt::Display for ToolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Candidate tool set T(d) for every known degradation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolRegistry {
    tools: BTreeMap<DegradationType, Vec<ToolId>>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers the candidate list for `d`. Registry order is kept: it is the
    /// no-experience fallback order.
    pub fn insert(&mut self, d: DegradationType, tools: Vec<ToolId>) -> Result<()> {
        if tools.is_empty() {
            return Err(Error::InvalidInput(format!("no tools registered for `{d}`")));
        }
        let mut seen = BTreeSet::new();
        for t in &tools {
            if !seen.insert(t) {
                return Err(Error::InvalidInput(format!(
                    "tool `{t}` registered twice for `{d}`"
                )));
            }
        }
        self.tools.insert(d, tools);
        Ok(())
    }

    pub fn tools(&self, d: &DegradationType) -> Result<&[ToolId]> {
        self.tools
            .get(d)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownDegradation(d.to_string()))
    }

    pub fn contains(&self, d: &DegradationType, tool: &ToolId) -> bool {
        self.tools.get(d).is_some_and(|ts| ts.contains(tool))
    }

    pub fn degradations(&self) -> impl Iterator<Item = &DegradationType> {
        self.tools.keys()
    }
}

/// A permutation of a degradation set: the sequence in which degradations are removed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RemovalOrder(Vec<DegradationType>);

impl RemovalOrder {
    /// Accepts `sequence` only if it is an exact permutation of `set`.
    pub fn new(sequence: Vec<DegradationType>, set: &DegradationSet) -> Result<Self> {
        let as_set: BTreeSet<&DegradationType> = sequence.iter().collect();
        if sequence.len() != set.len()
            || as_set.len() != sequence.len()
            || !sequence.iter().all(|d| set.contains(d))
        {
            return Err(Error::InvalidInput(format!(
                "order {:?} is not a permutation of {:?}",
                sequence.iter().map(|d| d.as_str()).collect::<Vec<_>>(),
                set.iter().map(|d| d.as_str()).collect::<Vec<_>>()
            )));
        }
        Ok(RemovalOrder(sequence))
    }

    pub fn parse(key: &str, set: &DegradationSet) -> Result<Self> {
        let seq = key
            .split(ORDER_SEPARATOR)
            .map(DegradationType::new)
            .collect::<Result<Vec<_>>>()?;
        RemovalOrder::new(seq, set)
    }

    pub fn key(&self) -> String {
        self.0
            .iter()
            .map(DegradationType::as_str)
            .collect::<Vec<_>>()
            .join(ORDER_SEPARATOR)
    }

    pub fn steps(&self) -> &[DegradationType] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Every permutation of `set`, sorted by key.
    pub fn all(set: &DegradationSet) -> Vec<RemovalOrder> {
        let members: Vec<DegradationType> = set.iter().cloned().collect();
        let mut out = Vec::new();
        permute(&members, &mut Vec::new(), &mut vec![false; members.len()], &mut out);
        let mut orders: Vec<RemovalOrder> = out.into_iter().map(RemovalOrder).collect();
        orders.sort_by_key(|o| o.key());
        orders
    }
}

fn permute(
    items: &[DegradationType],
    current: &mut Vec<DegradationType>,
    used: &mut [bool],
    out: &mut Vec<Vec<DegradationType>>,
) {
    if current.len() == items.len() {
        out.push(current.clone());
        return;
    }
    for i in 0..items.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        current.push(items[i].clone());
        permute(items, current, used, out);
        current.pop();
        used[i] = false;
    }
}

/// One element of the candidate space of an atomic record: a tool when |D| = 1,
/// a removal order otherwise.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum PlanCandidate {
    Tool(ToolId),
    Order(RemovalOrder),
}

impl PlanCandidate {
    /// Stable persistence key: the tool id, or the order joined by " -> ".
    pub fn key(&self) -> String {
        match self {
            PlanCandidate::Tool(t) => t.as_str().to_string(),
            PlanCandidate::Order(o) => o.key(),
        }
    }
}

/// Enumerates the candidate space for `set`: |T(d)| tools when |D| = 1, |D|! orders otherwise.
pub fn enumerate_candidates(set: &DegradationSet, registry: &ToolRegistry) -> Result<Vec<PlanCandidate>> {
    if set.is_empty() {
        return Err(Error::InvalidInput("empty degradation set".into()));
    }
    if set.len() > MAX_DEGRADATIONS {
        return Err(Error::TooLarge {
            count: set.len(),
            cap: MAX_DEGRADATIONS,
        });
    }
    for d in set.iter() {
        registry.tools(d)?;
    }
    if set.len() == 1 {
        let d = set.iter().next().expect("non-empty");
        let mut tools: Vec<PlanCandidate> = registry
            .tools(d)?
            .iter()
            .cloned()
            .map(PlanCandidate::Tool)
            .collect();
        tools.sort();
        return Ok(tools);
    }
    Ok(RemovalOrder::all(set).into_iter().map(PlanCandidate::Order).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    pub direction: Direction,
}

impl MetricSpec {
    pub fn higher(name: &str) -> Self {
        MetricSpec {
            name: name.to_string(),
            direction: Direction::HigherBetter,
        }
    }

    pub fn lower(name: &str) -> Self {
        MetricSpec {
            name: name.to_string(),
            direction: Direction::LowerBetter,
        }
    }
}

/// The fidelity metric set: PSNR, SSIM, LPIPS, DISTS.
pub fn fidelity_metrics() -> Vec<MetricSpec> {
    vec![
        MetricSpec::higher("PSNR"),
        MetricSpec::higher("SSIM"),
        MetricSpec::lower("LPIPS"),
        MetricSpec::lower("DISTS"),
    ]
}

/// The perception metric set: MANIQA, MUSIQ, BRISQUE, CLIPIQA, NIQE, NIMA.
pub fn perception_metrics() -> Vec<MetricSpec> {
    vec![
        MetricSpec::higher("MANIQA"),
        MetricSpec::higher("MUSIQ"),
        MetricSpec::lower("BRISQUE"),
        MetricSpec::higher("CLIPIQA"),
        MetricSpec::lower("NIQE"),
        MetricSpec::higher("NIMA"),
    ]
}

/// Suite summarized by the unified quality index: PSNR, SSIM, LPIPS,
/// MANIQA, CLIPIQA, MUSIQ.
pub fn uqi_metrics() -> Vec<MetricSpec> {
    vec![
        MetricSpec::higher("PSNR"),
        MetricSpec::higher("SSIM"),
        MetricSpec::lower("LPIPS"),
        MetricSpec::higher("MANIQA"),
        MetricSpec::higher("CLIPIQA"),
        MetricSpec::higher("MUSIQ"),
    ]
}

pub fn metrics_for(pref: Preference) -> Vec<MetricSpec> {
    match pref {
        Preference::Fidelity => fidelity_metrics(),
        Preference::Perception => perception_metrics(),
    }
}

/// Metric name → finite score.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricVector(pub BTreeMap<String, f64>);

impl MetricVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    /// Checks the vector covers exactly `metrics` with finite values.
    pub fn validate(&self, metrics: &[MetricSpec]) -> Result<()> {
        if self.0.len() != metrics.len() || metrics.iter().any(|m| !self.0.contains_key(&m.name)) {
            return Err(Error::MetricSetMismatch(format!(
                "vector covers {:?}, expected {:?}",
                self.0.keys().collect::<Vec<_>>(),
                metrics.iter().map(|m| &m.name).collect::<Vec<_>>()
            )));
        }
        if let Some((name, _)) = self.0.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidMetric(name.clone()));
        }
        Ok(())
    }
}

/// Opaque reference to an image held by an environment.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(pub String);

impl ImageRef {
    pub fn new(id: impl Into<String>) -> Self {
        ImageRef(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A strict ranking over candidate keys: ranks are exactly 1..=k.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ranking {
    ordered: Vec<String>,
}

impl Ranking {
    /// Builds a ranking from keys listed best first.
    pub fn from_ordered(keys: Vec<String>) -> Result<Self> {
        let unique: BTreeSet<&String> = keys.iter().collect();
        if unique.len() != keys.len() {
            return Err(Error::InvalidInput("ranking lists a candidate twice".into()));
        }
        Ok(Ranking { ordered: keys })
    }

    /// Builds a ranking from a key → rank map; ranks must be a permutation of 1..=k.
    pub fn from_map(map: &BTreeMap<String, usize>) -> Result<Self> {
        let k = map.len();
        let mut slots: Vec<Option<String>> = vec![None; k];
        for (key, &rank) in map {
            if rank == 0 || rank > k || slots[rank - 1].is_some() {
                return Err(Error::InvalidInput(format!(
                    "ranks must be a permutation of 1..={k}; bad rank {rank} for `{key}`"
                )));
            }
            slots[rank - 1] = Some(key.clone());
        }
        Ok(Ranking {
            ordered: slots.into_iter().map(|s| s.expect("filled")).collect(),
        })
    }

    pub fn to_map(&self) -> BTreeMap<String, usize> {
        self.ordered
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i + 1))
            .collect()
    }

    /// Keys best first.
    pub fn ordered(&self) -> &[String] {
        &self.ordered
    }

    pub fn rank_of(&self, key: &str) -> Option<usize> {
        self.ordered.iter().position(|k| k == key).map(|i| i + 1)
    }

    pub fn top(&self) -> Option<&str> {
        self.ordered.first().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.ordered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordered.is_empty()
    }
}

// Serialized as a JSON object listed in rank order, as in stored pool samples.
impl Serialize for Ranking {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.ordered.len()))?;
        for (i, key) in self.ordered.iter().enumerate() {
            map.serialize_entry(key, &(i + 1))?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Ranking {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct RankingVisitor;

        impl<'de> Visitor<'de> for RankingVisitor {
            type Value = Ranking;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of candidate key to rank")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> std::result::Result<Ranking, A::Error> {
                let mut map = BTreeMap::new();
                while let Some((key, rank)) = access.next_entry::<String, usize>()? {
                    if map.insert(key.clone(), rank).is_some() {
                        return Err(serde::de::Error::custom(format!("duplicate key `{key}`")));
                    }
                }
                Ranking::from_map(&map).map_err(serde::de::Error::custom)
            }
        }

        deserializer.deserialize_map(RankingVisitor)
    }
}

/// One entry of the decision history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum HistoryEvent {
    Perceived {
        degradations: Vec<String>,
    },
    Planned {
        degradation_type: String,
        order: String,
        tools: BTreeMap<String, String>,
        guidance: String,
    },
    Executed {
        degradation: String,
        tool: String,
        input: ImageRef,
        output: ImageRef,
    },
    Reflected {
        unresolved: Vec<String>,
    },
    OrderRollback {
        from: String,
        to: String,
    },
    ToolRollback {
        revised: BTreeMap<String, (String, String)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: u64,
    #[serde(flatten)]
    pub event: HistoryEvent,
}

/// Append-only decision history with strictly increasing step indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    entries: Vec<HistoryEntry>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: HistoryEvent) -> u64 {
        let step = self.entries.last().map_or(0, |e| e.step + 1);
        self.entries.push(HistoryEntry { step, event });
        step
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True when step indices are strictly increasing.
    pub fn is_well_formed(&self) -> bool {
        self.entries.windows(2).all(|w| w[0].step < w[1].step)
    }
}
