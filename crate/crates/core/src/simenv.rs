//! Synthetic degradation world with known ground truth.
//!
//! Images are latent states: per-degradation pattern and residual severity plus
//! fidelity/perception quality scalars. Tools shrink a residual by
//! `min(1, effectiveness × Π order factors)`, where a factor applies while
//! another degradation is still pending. Metric readings are the latent value
//! `q − penalty·Σ residual` mapped onto each metric's scale, plus noise seeded
//! by (image, metric). Dynamics are noiseless, so the brute-force optimum is exact.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::oracles::{
    format_groups, parse_groups, EncoderOracle, LanguageOracle, OracleRequest, ParsedGroup, GROUPER_ROLE,
};
use crate::ranking::PairwiseStats;
use crate::types::{
    fidelity_metrics, metrics_for, DegradationSet, DegradationType, Direction, ImageRef, MetricSpec, Preference,
    RemovalOrder, ToolId, ToolRegistry, MAX_DEGRADATIONS,
};

pub const SCHEMA_VERSION: u64 = 1;
const JOINT_SEARCH_CAP: usize = 200_000;

// ---------------------------------------------------------------------------
// Hashing

fn fnv1a(seed: u64, parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for part in parts {
        for b in part.bytes().chain(std::iter::once(0xff)) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    splitmix(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn rng_for(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a(seed, parts))
}

// ---------------------------------------------------------------------------
// Spec

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub label: String,
    pub weight: f64,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub id: String,
    pub patterns: Vec<PatternSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub id: String,
    pub degradation: String,
    /// Effectiveness per pattern label; `"*"` is the fallback.
    pub effectiveness: BTreeMap<String, f64>,
    #[serde(default)]
    pub fidelity_delta: f64,
    #[serde(default)]
    pub perception_delta: f64,
}

/// Multiplies the effectiveness of any tool on `target` while `pending` is
/// unresolved, optionally only when the image has `pattern` on `pattern_of`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderFactor {
    pub target: String,
    pub pending: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern_of: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    pub factor: f64,
}

/// Degradation set drawn with relative `weight`; an empty set yields clean images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mix {
    pub degradations: Vec<String>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub dim: usize,
    /// Per-coordinate Gaussian spread around the pattern centers.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub schema: u64,
    pub name: String,
    pub seed: u64,
    pub degradations: Vec<DegradationSpec>,
    /// Registry order is the order tools appear here.
    pub tools: Vec<ToolSpec>,
    #[serde(default)]
    pub order_factors: Vec<OrderFactor>,
    pub mixes: Vec<Mix>,
    pub severity: (f64, f64),
    pub residual_threshold: f64,
    /// Quality lost per unit of residual severity.
    pub penalty: f64,
    /// Metric noise σ in latent-value units.
    pub metric_noise: f64,
    #[serde(default)]
    pub metric_noise_overrides: BTreeMap<String, f64>,
    pub embedding: EmbeddingSpec,
    #[serde(default)]
    pub perception_error_rate: f64,
    #[serde(default)]
    pub debate_confusion: f64,
}

fn pattern(label: &str, weight: f64, description: &str) -> PatternSpec {
    PatternSpec {
        label: label.into(),
        weight,
        description: description.into(),
    }
}

fn degradation(id: &str, patterns: Vec<PatternSpec>) -> DegradationSpec {
    DegradationSpec {
        id: id.into(),
        patterns,
    }
}

fn tool(id: &str, d: &str, eff: &[(&str, f64)], fidelity: f64, perception: f64) -> ToolSpec {
    ToolSpec {
        id: id.into(),
        degradation: d.into(),
        effectiveness: eff.iter().map(|(p, e)| (p.to_string(), *e)).collect(),
        fidelity_delta: fidelity,
        perception_delta: perception,
    }
}

fn factor(target: &str, pending: &str, when: Option<(&str, &str)>, f: f64) -> OrderFactor {
    OrderFactor {
        target: target.into(),
        pending: pending.into(),
        pattern_of: when.map(|w| w.0.to_string()),
        pattern: when.map(|w| w.1.to_string()),
        factor: f,
    }
}

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

fn non_negative(x: f64) -> bool {
    x.is_finite() && x >= 0.0
}

fn mix(ids: &[&str], weight: f64) -> Mix {
    Mix {
        degradations: ids.iter().map(|s| s.to_string()).collect(),
        weight,
    }
}

pub const PRESETS: &[&str] = &[
    "group-a",
    "group-b",
    "group-c",
    "dominant",
    "symmetric",
    "decoupling-counterexample",
];

impl WorldSpec {
    fn base(name: &str, seed: u64) -> WorldSpec {
        WorldSpec {
            schema: SCHEMA_VERSION,
            name: name.into(),
            seed,
            degradations: Vec::new(),
            tools: Vec::new(),
            order_factors: Vec::new(),
            mixes: Vec::new(),
            severity: (0.6, 1.0),
            residual_threshold: 0.15,
            penalty: 1.0,
            metric_noise: 0.05,
            metric_noise_overrides: BTreeMap::new(),
            embedding: EmbeddingSpec { dim: 32, spread: 0.08 },
            perception_error_rate: 0.0,
            debate_confusion: 0.0,
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<WorldSpec> {
        let mut w = WorldSpec::base(name, seed);
        match name {
            // Pattern-dependent tools for noise and haze, pattern-dependent
            // order for dark + motion blur. Registry order is unhelpful.
            "group-a" => {
                w.degradations = vec![
                    degradation(
                        "noise",
                        vec![
                            pattern("fine", 0.5, "dense fine-grained sensor grain"),
                            pattern("blotchy", 0.5, "coarse low-frequency color blotches"),
                        ],
                    ),
                    degradation(
                        "haze",
                        vec![
                            pattern("thin", 0.5, "thin uniform veil over the whole frame"),
                            pattern("dense", 0.5, "dense patchy fog hiding distant structure"),
                        ],
                    ),
                    degradation("dark", vec![pattern("lowlight", 1.0, "globally underexposed scene")]),
                    degradation(
                        "motion blur",
                        vec![
                            pattern("linear", 0.5, "long straight streaks from camera translation"),
                            pattern("shake", 0.5, "curved smears from rotational hand shake"),
                        ],
                    ),
                ];
                w.tools = vec![
                    tool("swinir", "noise", &[("*", 0.45)], 0.0, 0.0),
                    tool("maxim", "noise", &[("fine", 0.95), ("blotchy", 0.5)], 0.0, 0.0),
                    tool("restormer", "noise", &[("fine", 0.5), ("blotchy", 0.95)], 0.0, 0.0),
                    tool("mprnet", "noise", &[("*", 0.6)], 0.0, 0.0),
                    tool("ridcp", "haze", &[("*", 0.45)], 0.0, 0.0),
                    tool("dehazeformer", "haze", &[("thin", 0.95), ("dense", 0.5)], 0.0, 0.0),
                    tool("xrestormer", "haze", &[("thin", 0.5), ("dense", 0.95)], 0.0, 0.0),
                    tool("gamma", "dark", &[("*", 0.5)], 0.0, 0.0),
                    tool("constant_shift", "dark", &[("*", 0.55)], 0.0, 0.0),
                    tool("clahe", "dark", &[("*", 0.96)], 0.0, 0.0),
                    tool("mprnet", "motion blur", &[("*", 0.55)], 0.0, 0.0),
                    tool("maxim", "motion blur", &[("*", 0.6)], 0.0, 0.0),
                    tool("xrestormer", "motion blur", &[("*", 0.96)], 0.0, 0.0),
                ];
                w.order_factors = vec![
                    factor("dark", "motion blur", Some(("motion blur", "linear")), 0.45),
                    factor("motion blur", "dark", Some(("motion blur", "shake")), 0.45),
                ];
                w.mixes = vec![
                    mix(&["noise"], 1.0),
                    mix(&["haze"], 1.0),
                    mix(&["dark", "motion blur"], 1.0),
                    mix(&["dark"], 0.5),
                    mix(&["motion blur"], 0.5),
                ];
            }
            // Globally dominant tools that sit late in the registry, with
            // quality deltas so the learned choice also restores better.
            "group-b" => {
                w.degradations = vec![
                    degradation("rain", vec![pattern("streaks", 1.0, "bright diagonal rain streaks")]),
                    degradation("haze", vec![pattern("veil", 1.0, "uniform atmospheric veil")]),
                    degradation(
                        "low resolution",
                        vec![pattern("bicubic", 1.0, "soft edges from bicubic downsampling")],
                    ),
                ];
                w.tools = vec![
                    tool("maxim", "rain", &[("*", 0.5)], -0.04, -0.04),
                    tool("mprnet", "rain", &[("*", 0.9)], 0.0, -0.02),
                    tool("restormer", "rain", &[("*", 0.95)], 0.06, 0.06),
                    tool("ridcp", "haze", &[("*", 0.5)], -0.04, 0.0),
                    tool("maxim", "haze", &[("*", 0.9)], 0.0, -0.02),
                    tool("dehazeformer", "haze", &[("*", 0.95)], 0.06, 0.06),
                    tool("swinir", "low resolution", &[("*", 0.5)], -0.03, -0.03),
                    tool("diffbir", "low resolution", &[("*", 0.9)], -0.02, 0.0),
                    tool("hat", "low resolution", &[("*", 0.95)], 0.06, 0.06),
                ];
                w.order_factors = vec![
                    factor("low resolution", "rain", None, 0.45),
                    factor("low resolution", "haze", None, 0.5),
                    factor("haze", "rain", None, 0.5),
                ];
                w.mixes = vec![
                    mix(&["rain"], 1.0),
                    mix(&["haze"], 1.0),
                    mix(&["low resolution"], 1.0),
                    mix(&["rain", "low resolution"], 1.0),
                    mix(&["haze", "low resolution"], 0.6),
                    mix(&["haze", "rain"], 0.6),
                ];
            }
            // Three-way coupling with strong order effects.
            "group-c" => {
                w.degradations = vec![
                    degradation("rain", vec![pattern("streaks", 1.0, "bright diagonal rain streaks")]),
                    degradation(
                        "haze",
                        vec![
                            pattern("thin", 0.5, "thin uniform veil"),
                            pattern("dense", 0.5, "dense patchy fog"),
                        ],
                    ),
                    degradation(
                        "low resolution",
                        vec![pattern("bicubic", 1.0, "soft edges from bicubic downsampling")],
                    ),
                ];
                w.tools = vec![
                    tool("maxim", "rain", &[("*", 0.6)], 0.0, 0.0),
                    tool("restormer", "rain", &[("*", 0.95)], 0.0, 0.0),
                    tool("ridcp", "haze", &[("thin", 0.95), ("dense", 0.6)], 0.0, 0.0),
                    tool("dehazeformer", "haze", &[("thin", 0.6), ("dense", 0.95)], 0.0, 0.0),
                    tool("swinir", "low resolution", &[("*", 0.6)], 0.0, 0.0),
                    tool("hat", "low resolution", &[("*", 0.96)], 0.0, 0.0),
                ];
                w.order_factors = vec![
                    factor("low resolution", "rain", None, 0.4),
                    factor("low resolution", "haze", None, 0.5),
                    factor("haze", "rain", Some(("haze", "thin")), 0.5),
                    factor("rain", "haze", Some(("haze", "dense")), 0.5),
                ];
                w.mixes = vec![
                    mix(&["rain", "haze", "low resolution"], 1.0),
                    mix(&["rain"], 0.3),
                    mix(&["haze"], 0.3),
                    mix(&["low resolution"], 0.3),
                ];
            }
            "dominant" => {
                w.degradations = vec![degradation("noise", vec![pattern("grain", 1.0, "sensor grain")])];
                w.tools = vec![
                    tool("swinir", "noise", &[("*", 0.6)], 0.0, 0.0),
                    tool("maxim", "noise", &[("*", 0.62)], 0.0, 0.0),
                    tool("restormer", "noise", &[("*", 0.95)], 0.0, 0.0),
                    tool("mprnet", "noise", &[("*", 0.55)], 0.0, 0.0),
                ];
                w.mixes = vec![mix(&["noise"], 1.0)];
            }
            "symmetric" => {
                w.degradations = vec![degradation("noise", vec![pattern("grain", 1.0, "sensor grain")])];
                w.tools = ["swinir", "maxim", "restormer", "mprnet"]
                    .iter()
                    .map(|t| tool(t, "noise", &[("*", 0.8)], 0.0, 0.0))
                    .collect();
                w.mixes = vec![mix(&["noise"], 1.0)];
            }
            // The best tool in isolation is not the best tool inside the best
            // order, so anchoring tools first changes the chosen order.
            "decoupling-counterexample" => {
                w.degradations = vec![
                    degradation("a", vec![pattern("p", 1.0, "pattern a")]),
                    degradation("b", vec![pattern("p", 1.0, "pattern b")]),
                ];
                w.tools = vec![
                    tool("a1", "a", &[("*", 0.9)], 0.0, 0.0),
                    tool("a2", "a", &[("*", 0.55)], 0.2, 0.2),
                    tool("b1", "b", &[("*", 0.8)], 0.0, 0.0),
                ];
                w.order_factors = vec![factor("a", "b", None, 1.8), factor("b", "a", None, 1.25)];
                w.mixes = vec![mix(&["a", "b"], 1.0)];
                w.severity = (1.0, 1.0);
            }
            other => {
                return Err(Error::SpecError(format!(
                    "unknown preset `{other}`; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(w)
    }

    /// Random world in which every tool of a degradation shares the same
    /// quality deltas and every order factor is a penalty (< 1), so the most
    /// effective tool is best in every context.
    pub fn random_premise(seed: u64) -> WorldSpec {
        let mut rng = rng_for(seed, &["premise-world"]);
        let mut w = WorldSpec::base(&format!("premise-{seed}"), seed);
        let n_deg = rng.random_range(2..=3usize);
        let ids: Vec<String> = (0..n_deg).map(|i| format!("d{i}")).collect();
        for id in &ids {
            w.degradations.push(degradation(
                id,
                vec![pattern("p0", 0.5, "first pattern"), pattern("p1", 0.5, "second pattern")],
            ));
            let delta = rng.random_range(-0.05..0.05);
            for t in 0..rng.random_range(2..=4usize) {
                w.tools.push(tool(
                    &format!("{id}_t{t}"),
                    id,
                    &[("p0", rng.random_range(0.3..1.0)), ("p1", rng.random_range(0.3..1.0))],
                    delta,
                    delta,
                ));
            }
        }
        for target in &ids {
            for pending in &ids {
                if target != pending && rng.random_bool(0.7) {
                    let when = rng
                        .random_bool(0.5)
                        .then(|| (pending.as_str(), if rng.random_bool(0.5) { "p0" } else { "p1" }));
                    w.order_factors
                        .push(factor(target, pending, when, rng.random_range(0.3..1.0)));
                }
            }
        }
        w.mixes = vec![Mix {
            degradations: ids,
            weight: 1.0,
        }];
        w
    }

    pub fn load(path: &Path) -> Result<WorldSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse(path, &e))?;
        let found = value.get("schema").and_then(serde_json::Value::as_u64).unwrap_or(0);
        if found != SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found,
                expected: SCHEMA_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| Error::parse(path, &e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes") + "\n"
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecError(m));
        if self.schema != SCHEMA_VERSION {
            return bad(format!("schema {} is not {SCHEMA_VERSION}", self.schema));
        }
        let ids: BTreeSet<&str> = self.degradations.iter().map(|d| d.id.as_str()).collect();
        if ids.len() != self.degradations.len() || ids.is_empty() {
            return bad("degradation ids must be unique and non-empty".into());
        }
        for d in &self.degradations {
            DegradationType::new(&d.id)?;
            if d.patterns.is_empty() || d.patterns.iter().any(|p| !positive(p.weight)) {
                return bad(format!("`{}` needs patterns with positive weights", d.id));
            }
        }
        for t in &self.tools {
            if !ids.contains(t.degradation.as_str()) {
                return bad(format!("tool `{}` targets unknown degradation `{}`", t.id, t.degradation));
            }
            if t.effectiveness.values().any(|e| !(0.0..=1.0).contains(e)) {
                return bad(format!("tool `{}` has effectiveness outside [0, 1]", t.id));
            }
            if !t.fidelity_delta.is_finite() || !t.perception_delta.is_finite() {
                return bad(format!("tool `{}` has a non-finite delta", t.id));
            }
        }
        for f in &self.order_factors {
            if !positive(f.factor) {
                return bad(format!("order factor for `{}` must be positive", f.target));
            }
            for d in [&f.target, &f.pending].into_iter().chain(f.pattern_of.as_ref()) {
                if !ids.contains(d.as_str()) {
                    return bad(format!("order factor names unknown degradation `{d}`"));
                }
            }
            if f.pattern_of.is_some() != f.pattern.is_some() {
                return bad("order factor needs both `pattern_of` and `pattern`, or neither".into());
            }
        }
        for m in &self.mixes {
            if !positive(m.weight) {
                return bad("mixes need a positive weight".into());
            }
            if m.degradations.iter().any(|d| !ids.contains(d.as_str())) {
                return bad("mix names an unknown degradation".into());
            }
        }
        let (lo, hi) = self.severity;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("severity range must satisfy 0 ≤ lo ≤ hi ≤ 1".into());
        }
        if !(self.residual_threshold > 0.0 && self.residual_threshold < 1.0) {
            return bad("residual_threshold must lie in (0, 1)".into());
        }
        if !non_negative(self.metric_noise) || self.metric_noise_overrides.values().any(|s| !non_negative(*s)) {
            return bad("metric noise must be non-negative".into());
        }
        if self.embedding.dim == 0 || !non_negative(self.embedding.spread) {
            return bad("embedding needs dim ≥ 1 and spread ≥ 0".into());
        }
        for (name, rate) in [
            ("perception_error_rate", self.perception_error_rate),
            ("debate_confusion", self.debate_confusion),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// World

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationState {
    pub pattern: String,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageState {
    pub id: String,
    pub root: String,
    pub degradations: BTreeMap<String, DegradationState>,
    pub q_fidelity: f64,
    pub q_perception: f64,
    pub parent: Option<String>,
    /// (tool, degradation) that produced this state from `parent`.
    pub applied: Option<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: String,
    pub degradations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u64,
    pub splits: BTreeMap<String, Vec<ManifestImage>>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse(path, &e))?;
        let found = value.get("schema").and_then(serde_json::Value::as_u64).unwrap_or(0);
        if found != SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found,
                expected: SCHEMA_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| Error::parse(path, &e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JointPlan {
    pub order: Vec<String>,
    pub tools: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruteForce {
    pub best: JointPlan,
    pub best_value: f64,
    pub table: Vec<(JointPlan, f64)>,
}

pub struct World {
    spec: WorldSpec,
    registry: ToolRegistry,
    tools: BTreeMap<(String, String), ToolSpec>,
    centers: BTreeMap<(String, String), Vec<f64>>,
    images: RwLock<BTreeMap<String, ImageState>>,
}

fn metric_calibration(name: &str) -> (f64, f64) {
    match name {
        "PSNR" => (25.0, 5.0),
        "SSIM" => (0.7, 0.1),
        "LPIPS" => (0.3, 0.1),
        "DISTS" => (0.2, 0.05),
        "MANIQA" => (0.5, 0.1),
        "MUSIQ" => (55.0, 8.0),
        "BRISQUE" => (35.0, 10.0),
        "CLIPIQA" => (0.5, 0.1),
        "NIQE" => (5.0, 1.0),
        "NIMA" => (5.0, 0.5),
        _ => (0.0, 1.0),
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

impl World {
    pub fn new(spec: WorldSpec) -> Result<World> {
        spec.validate()?;
        let mut registry = ToolRegistry::new();
        let mut tools = BTreeMap::new();
        for d in &spec.degradations {
            let list: Vec<ToolId> = spec
                .tools
                .iter()
                .filter(|t| t.degradation == d.id)
                .map(|t| ToolId::new(&t.id))
                .collect::<Result<_>>()?;
            if list.is_empty() {
                return Err(Error::SpecError(format!("degradation `{}` has no tools", d.id)));
            }
            registry
                .insert(DegradationType::new(&d.id)?, list)
                .map_err(|e| Error::SpecError(e.to_string()))?;
        }
        for t in &spec.tools {
            tools.insert((t.degradation.clone(), t.id.clone()), t.clone());
        }
        let mut centers = BTreeMap::new();
        for d in &spec.degradations {
            for p in &d.patterns {
                let mut rng = rng_for(spec.seed, &["center", &d.id, &p.label]);
                let mut v: Vec<f64> = (0..spec.embedding.dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                normalize(&mut v);
                centers.insert((d.id.clone(), p.label.clone()), v);
            }
        }
        Ok(World {
            spec,
            registry,
            tools,
            centers,
            images: RwLock::new(BTreeMap::new()),
        })
    }

    pub fn preset(name: &str, seed: u64) -> Result<World> {
        World::new(WorldSpec::preset(name, seed)?)
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn state(&self, image: &ImageRef) -> Result<ImageState> {
        self.images
            .read()
            .expect("image store lock")
            .get(image.as_str())
            .cloned()
            .ok_or_else(|| Error::ImageNotFound(image.to_string()))
    }

    fn insert(&self, state: ImageState) {
        self.images
            .write()
            .expect("image store lock")
            .entry(state.id.clone())
            .or_insert(state);
    }

    fn sample_pattern(&self, rng: &mut ChaCha8Rng, d: &DegradationSpec) -> String {
        let total: f64 = d.patterns.iter().map(|p| p.weight).sum();
        let mut x = rng.random::<f64>() * total;
        for p in &d.patterns {
            if x < p.weight {
                return p.label.clone();
            }
            x -= p.weight;
        }
        d.patterns.last().expect("validated non-empty").label.clone()
    }

    /// Registers the original image `id` with degradations `set` (or a set
    /// drawn from the spec's mixes). Patterns and severities derive from
    /// (seed, id) alone.
    pub fn register(&self, id: &str, set: Option<&DegradationSet>) -> Result<ImageRef> {
        let mut rng = rng_for(self.spec.seed, &["image", id]);
        let chosen: Vec<String> = match set {
            Some(s) => s.iter().map(|d| d.as_str().to_string()).collect(),
            None => {
                let total: f64 = self.spec.mixes.iter().map(|m| m.weight).sum();
                if self.spec.mixes.is_empty() {
                    return Err(Error::SpecError("world has no mixes to sample from".into()));
                }
                let mut x = rng.random::<f64>() * total;
                let mut pick = &self.spec.mixes[self.spec.mixes.len() - 1];
                for m in &self.spec.mixes {
                    if x < m.weight {
                        pick = m;
                        break;
                    }
                    x -= m.weight;
                }
                pick.degradations.clone()
            }
        };
        let mut degradations = BTreeMap::new();
        for d in &chosen {
            let spec = self
                .spec
                .degradations
                .iter()
                .find(|s| &s.id == d)
                .ok_or_else(|| Error::UnknownDegradation(d.clone()))?;
            let pattern = self.sample_pattern(&mut rng, spec);
            let (lo, hi) = self.spec.severity;
            let residual = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            degradations.insert(d.clone(), DegradationState { pattern, residual });
        }
        let state = ImageState {
            id: id.to_string(),
            root: id.to_string(),
            degradations,
            q_fidelity: 0.0,
            q_perception: 0.0,
            parent: None,
            applied: None,
        };
        if let Ok(existing) = self.state(&ImageRef::new(id)) {
            if existing != state {
                return Err(Error::InvalidInput(format!("image `{id}` already exists with another state")));
            }
        }
        self.insert(state);
        Ok(ImageRef::new(id))
    }

    /// Generates `n` originals named `<prefix>-0000`, `<prefix>-0001`, ...
    pub fn generate_images(&self, prefix: &str, n: usize, set: Option<&DegradationSet>) -> Result<Vec<ImageRef>> {
        (0..n).map(|i| self.register(&format!("{prefix}-{i:04}"), set)).collect()
    }

    pub fn manifest_entry(&self, image: &ImageRef) -> Result<ManifestImage> {
        let s = self.state(image)?;
        Ok(ManifestImage {
            id: s.id,
            degradations: s.degradations.keys().cloned().collect(),
        })
    }

    pub fn load_manifest(&self, manifest: &Manifest) -> Result<BTreeMap<String, Vec<ImageRef>>> {
        let mut out = BTreeMap::new();
        for (split, images) in &manifest.splits {
            let mut refs = Vec::with_capacity(images.len());
            for img in images {
                let set = DegradationSet::from_ids(&img.degradations)?;
                refs.push(self.register(&img.id, Some(&set))?);
            }
            out.insert(split.clone(), refs);
        }
        Ok(out)
    }

    fn effectiveness(&self, t: &ToolSpec, pattern: &str) -> f64 {
        t.effectiveness
            .get(pattern)
            .or_else(|| t.effectiveness.get("*"))
            .copied()
            .unwrap_or(0.0)
    }

    fn pending(&self, state: &ImageState, d: &str) -> bool {
        state
            .degradations
            .get(d)
            .is_some_and(|s| s.residual >= self.spec.residual_threshold)
    }

    /// Noiseless transition; does not touch the image store.
    pub fn step(&self, state: &ImageState, tool: &str, d: &str) -> Result<ImageState> {
        let spec = self.tools.get(&(d.to_string(), tool.to_string())).ok_or_else(|| Error::UnknownTool {
            tool: tool.to_string(),
            degradation: d.to_string(),
        })?;
        let mut next = state.clone();
        if let Some(target) = state.degradations.get(d) {
            let mut gain = self.effectiveness(spec, &target.pattern);
            for f in &self.spec.order_factors {
                if f.target != d || !self.pending(state, &f.pending) {
                    continue;
                }
                let applies = match (&f.pattern_of, &f.pattern) {
                    (Some(of), Some(p)) => state.degradations.get(of).is_some_and(|s| &s.pattern == p),
                    _ => true,
                };
                if applies {
                    gain *= f.factor;
                }
            }
            let slot = next.degradations.get_mut(d).expect("present");
            slot.residual *= 1.0 - gain.min(1.0);
        }
        next.q_fidelity += spec.fidelity_delta;
        next.q_perception += spec.perception_delta;
        let tag = format!("{:08x}", fnv1a(0, &[&state.id, d, tool]) as u32);
        next.id = format!("{}~{tag}", state.id);
        next.parent = Some(state.id.clone());
        next.applied = Some((tool.to_string(), d.to_string()));
        Ok(next)
    }

    /// Noiseless latent value under a preference.
    pub fn value(&self, state: &ImageState, preference: Preference) -> f64 {
        let q = match preference {
            Preference::Fidelity => state.q_fidelity,
            Preference::Perception => state.q_perception,
        };
        q - self.spec.penalty * state.degradations.values().map(|s| s.residual).sum::<f64>()
    }

    /// Composite latent label, e.g. `[dark=lowlight, motion blur=shake]`.
    pub fn label(&self, image: &ImageRef) -> Result<String> {
        let state = self.state(image)?;
        let root = self.state(&ImageRef::new(state.root.clone()))?;
        let parts: Vec<String> = root
            .degradations
            .iter()
            .map(|(d, s)| format!("{d}={}", s.pattern))
            .collect();
        Ok(format!("[{}]", parts.join(", ")))
    }

    /// Pattern-keyed description text.
    pub fn describe(&self, image: &ImageRef) -> Result<String> {
        let state = self.state(image)?;
        let root = self.state(&ImageRef::new(state.root.clone()))?;
        let mut notes = Vec::new();
        for (d, s) in &root.degradations {
            let text = self
                .spec
                .degradations
                .iter()
                .find(|x| &x.id == d)
                .and_then(|x| x.patterns.iter().find(|p| p.label == s.pattern))
                .map_or("unspecified", |p| p.description.as_str());
            notes.push(format!("{d}: {text}"));
        }
        Ok(format!("Observed pattern {}: {}.", self.label(image)?, notes.join("; ")))
    }

    pub fn embed(&self, image: &ImageRef) -> Result<Vec<f64>> {
        let state = self.state(image)?;
        let root = self.state(&ImageRef::new(state.root.clone()))?;
        let dim = self.spec.embedding.dim;
        let mut v = vec![0.0; dim];
        for (d, s) in &root.degradations {
            let c = &self.centers[&(d.clone(), s.pattern.clone())];
            for (x, y) in v.iter_mut().zip(c) {
                *x += y;
            }
        }
        let mut rng = rng_for(self.spec.seed, &["embed", &root.id]);
        for x in v.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *x += self.spec.embedding.spread * n;
        }
        normalize(&mut v);
        Ok(v)
    }

    fn simulate(&self, root: &ImageState, plan: &JointPlan) -> Result<ImageState> {
        let mut state = root.clone();
        for d in &plan.order {
            state = self.step(&state, &plan.tools[d], d)?;
        }
        Ok(state)
    }

    fn tool_ids(&self, d: &str) -> Result<Vec<String>> {
        Ok(self
            .registry
            .tools(&DegradationType::new(d)?)?
            .iter()
            .map(|t| t.as_str().to_string())
            .collect())
    }

    /// Exhaustive search over every order and tool combination.
    pub fn brute_force_optimum(&self, image: &ImageRef, preference: Preference) -> Result<BruteForce> {
        let root = self.state(image)?;
        let ds: Vec<String> = root.degradations.keys().cloned().collect();
        if ds.is_empty() {
            return Err(Error::InvalidInput("image has no degradations".into()));
        }
        if ds.len() > MAX_DEGRADATIONS {
            return Err(Error::TooLarge {
                count: ds.len(),
                cap: MAX_DEGRADATIONS,
            });
        }
        let tool_lists: Vec<Vec<String>> = ds.iter().map(|d| self.tool_ids(d)).collect::<Result<_>>()?;
        let set = DegradationSet::from_ids(&ds)?;
        let orders = RemovalOrder::all(&set);
        let combos: usize = tool_lists.iter().map(Vec::len).product::<usize>() * orders.len();
        if combos > JOINT_SEARCH_CAP {
            return Err(Error::TooLarge {
                count: combos,
                cap: JOINT_SEARCH_CAP,
            });
        }
        let mut table = Vec::with_capacity(combos);
        for order in &orders {
            let order: Vec<String> = order.steps().iter().map(|d| d.as_str().to_string()).collect();
            let mut idx = vec![0usize; ds.len()];
            loop {
                let tools: BTreeMap<String, String> = ds
                    .iter()
                    .zip(&idx)
                    .map(|(d, &i)| (d.clone(), tool_lists[ds.iter().position(|x| x == d).unwrap()][i].clone()))
                    .collect();
                let plan = JointPlan {
                    order: order.clone(),
                    tools,
                };
                let v = self.value(&self.simulate(&root, &plan)?, preference);
                table.push((plan, v));
                let mut carry = 0;
                while carry < idx.len() {
                    idx[carry] += 1;
                    if idx[carry] < tool_lists[carry].len() {
                        break;
                    }
                    idx[carry] = 0;
                    carry += 1;
                }
                if carry == idx.len() {
                    break;
                }
            }
        }
        let (best, best_value) = best_of(&table);
        Ok(BruteForce {
            best,
            best_value,
            table,
        })
    }

    /// Per-degradation tool that is best on the image with only that
    /// degradation present.
    pub fn anchored_tools(&self, image: &ImageRef, preference: Preference) -> Result<BTreeMap<String, String>> {
        let root = self.state(image)?;
        let mut out = BTreeMap::new();
        for (d, s) in &root.degradations {
            let mut alone = root.clone();
            alone.degradations = BTreeMap::from([(d.clone(), s.clone())]);
            let mut best: Option<(String, f64)> = None;
            for t in self.tool_ids(d)? {
                let v = self.value(&self.step(&alone, &t, d)?, preference);
                if best.as_ref().is_none_or(|(_, bv)| v > *bv) {
                    best = Some((t, v));
                }
            }
            out.insert(d.clone(), best.expect("registry non-empty").0);
        }
        Ok(out)
    }

    /// Best order when every degradation uses its anchored tool.
    pub fn decoupled_optimum(&self, image: &ImageRef, preference: Preference) -> Result<(JointPlan, f64)> {
        let root = self.state(image)?;
        let tools = self.anchored_tools(image, preference)?;
        let ds: Vec<String> = root.degradations.keys().cloned().collect();
        let set = DegradationSet::from_ids(&ds)?;
        let mut table = Vec::new();
        for order in RemovalOrder::all(&set) {
            let plan = JointPlan {
                order: order.steps().iter().map(|d| d.as_str().to_string()).collect(),
                tools: tools.clone(),
            };
            let v = self.value(&self.simulate(&root, &plan)?, preference);
            table.push((plan, v));
        }
        Ok(best_of(&table))
    }

    fn noise(&self, image: &str, metric: &str) -> f64 {
        let sigma = self
            .spec
            .metric_noise_overrides
            .get(metric)
            .copied()
            .unwrap_or(self.spec.metric_noise);
        if sigma == 0.0 {
            return 0.0;
        }
        let mut rng = rng_for(self.spec.seed, &["noise", image, metric]);
        let n: f64 = StandardNormal.sample(&mut rng);
        sigma * n
    }

    fn family(metric: &str) -> Preference {
        if fidelity_metrics().iter().any(|m| m.name == metric) {
            Preference::Fidelity
        } else {
            Preference::Perception
        }
    }
}

fn best_of(table: &[(JointPlan, f64)]) -> (JointPlan, f64) {
    let mut best = &table[0];
    for entry in &table[1..] {
        if entry.1 > best.1 || (entry.1 == best.1 && entry.0.order < best.0.order) {
            best = entry;
        }
    }
    (best.0.clone(), best.1)
}

impl Environment for World {
    fn registry(&self) -> &ToolRegistry {
        &self.registry
    }

    fn perceive(&self, image: &ImageRef, attempt: u32) -> Result<DegradationSet> {
        let state = self.state(image)?;
        let mut found: Vec<String> = state
            .degradations
            .iter()
            .filter(|(_, s)| s.residual >= self.spec.residual_threshold)
            .map(|(d, _)| d.clone())
            .collect();
        let attempt_tag = attempt.to_string();
        let h = fnv1a(self.spec.seed, &["perceive", image.as_str(), &attempt_tag]);
        if unit(h) < self.spec.perception_error_rate {
            let spurious: Vec<&String> = self
                .spec
                .degradations
                .iter()
                .map(|d| &d.id)
                .filter(|d| !found.contains(d))
                .collect();
            let pick = splitmix(h) as usize;
            if found.len() >= 2 || (spurious.is_empty() && !found.is_empty()) {
                found.remove(pick % found.len());
            } else if !spurious.is_empty() {
                found.push(spurious[pick % spurious.len()].clone());
            }
        }
        DegradationSet::from_ids(&found)
    }

    fn apply_tool(&self, image: &ImageRef, tool: &ToolId, degradation: &DegradationType) -> Result<ImageRef> {
        let state = self.state(image)?;
        let next = self.step(&state, tool.as_str(), degradation.as_str())?;
        let id = ImageRef::new(next.id.clone());
        self.insert(next);
        Ok(id)
    }

    fn score(&self, image: &ImageRef, metric: &MetricSpec) -> Result<f64> {
        let state = self.state(image)?;
        let v = self.value(&state, World::family(&metric.name));
        let (base, scale) = metric_calibration(&metric.name);
        let sign = match metric.direction {
            Direction::HigherBetter => 1.0,
            Direction::LowerBetter => -1.0,
        };
        Ok(base + sign * scale * (v + self.noise(image.as_str(), &metric.name)))
    }

    fn unresolved(&self, image: &ImageRef) -> Result<BTreeSet<DegradationType>> {
        let state = self.state(image)?;
        state
            .degradations
            .iter()
            .filter(|(_, s)| s.residual >= self.spec.residual_threshold)
            .map(|(d, _)| DegradationType::new(d))
            .collect()
    }

    fn quality(&self, image: &ImageRef, preference: Preference) -> Result<f64> {
        let metrics = metrics_for(preference);
        let mut total = 0.0;
        for m in &metrics {
            let (base, scale) = metric_calibration(&m.name);
            let sign = match m.direction {
                Direction::HigherBetter => 1.0,
                Direction::LowerBetter => -1.0,
            };
            total += sign * (self.score(image, m)? - base) / scale;
        }
        Ok(total / metrics.len() as f64)
    }
}

/// Samples win/loss/tie counts from the BTD model, `per_pair` comparisons per pair.
pub fn sample_btd_counts(theta: &[f64], nu: f64, per_pair: usize, seed: u64) -> PairwiseStats {
    let k = theta.len();
    let mut rng = rng_for(seed, &["btd-sample"]);
    let mut s = PairwiseStats::new((0..k).map(|i| format!("c{i}")).collect());
    for i in 0..k {
        for j in (i + 1)..k {
            let (ei, ej) = (theta[i].exp(), theta[j].exp());
            let et = 2.0 * nu * ((theta[i] + theta[j]) / 2.0).exp();
            let z = ei + ej + et;
            for _ in 0..per_pair {
                let x = rng.random::<f64>() * z;
                if x < ei {
                    s.wins[i][j] += 1;
                    s.losses[j][i] += 1;
                } else if x < ei + ej {
                    s.losses[i][j] += 1;
                    s.wins[j][i] += 1;
                } else {
                    s.ties[i][j] += 1;
                    s.ties[j][i] += 1;
                }
            }
        }
    }
    s
}

// ---------------------------------------------------------------------------
// Mock oracles

/// Deterministic stand-in for every language capability, reading latent
/// labels from the world.
pub struct MockLanguage {
    world: Arc<World>,
}

impl MockLanguage {
    pub fn new(world: Arc<World>) -> Self {
        MockLanguage { world }
    }

    fn label_in(text: &str) -> Option<&str> {
        let start = text.find("[")?;
        let end = text[start..].find(']')? + start;
        Some(&text[start..=end])
    }

    fn group(&self, context: &str) -> Result<String> {
        let line_re = regex::Regex::new(r"Traj(\d+) \(image ([^)]+)\)").expect("static regex");
        let mut by_label: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        let mut members: Vec<(u64, String, String)> = Vec::new();
        for cap in line_re.captures_iter(context) {
            let id: u64 = cap[1].parse().expect("digits");
            let image = ImageRef::new(&cap[2]);
            members.push((id, image.to_string(), self.world.label(&image)?));
        }
        let labels: Vec<String> = members
            .iter()
            .map(|m| m.2.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        for (id, image, label) in &members {
            let mut label = label.clone();
            let h = fnv1a(self.world.spec.seed, &["confuse", image]);
            if labels.len() > 1 && unit(h) < self.world.spec.debate_confusion {
                let at = labels.iter().position(|l| l == &label).expect("known label");
                label = labels[(at + 1) % labels.len()].clone();
            }
            by_label.entry(label).or_default().push(*id);
        }
        let mut groups = Vec::new();
        for (label, ids) in by_label {
            let sample = members.iter().find(|m| m.2 == label).map(|m| m.1.clone());
            let text = match sample {
                Some(image) => self.world.describe(&ImageRef::new(image))?,
                None => format!("Observed pattern {label}."),
            };
            groups.push(ParsedGroup {
                text: text.trim_end_matches('.').to_string(),
                trajectories: ids,
            });
        }
        Ok(format_groups(&groups))
    }

    fn insight(prompt: &str) -> String {
        let rel = regex::Regex::new(r"P\((.+) ≻ (.+)\) = ([0-9.]+)").expect("static regex");
        let tie = regex::Regex::new(r"P\((.+) = (.+)\) = ([0-9.]+)").expect("static regex");
        let mut blocks: Vec<(String, BTreeMap<String, f64>)> = Vec::new();
        for line in prompt.lines() {
            let line = line.trim();
            if line.starts_with('[') && line.ends_with(']') {
                blocks.push((line[1..line.len() - 1].to_string(), BTreeMap::new()));
                continue;
            }
            let Some((_, scores)) = blocks.last_mut() else { continue };
            if let Some(c) = rel.captures(line) {
                let p: f64 = c[3].parse().unwrap_or(0.0);
                *scores.entry(c[1].to_string()).or_default() += p;
                scores.entry(c[2].to_string()).or_default();
                // P(b ≻ a) is recovered once the tie line arrives.
                *scores.entry(format!("\u{0}{}|{}", &c[1], &c[2])).or_default() = p;
            } else if let Some(c) = tie.captures(line) {
                let t: f64 = c[3].parse().unwrap_or(0.0);
                let key = format!("\u{0}{}|{}", &c[1], &c[2]);
                let p = scores.get(&key).copied().unwrap_or(0.0);
                *scores.entry(c[2].to_string()).or_default() += (1.0 - p - t).max(0.0);
            }
        }
        let mut before: BTreeMap<(String, String), i64> = BTreeMap::new();
        let mut types: BTreeSet<String> = BTreeSet::new();
        let mut preferred = Vec::new();
        for (key, scores) in &blocks {
            let best = scores
                .iter()
                .filter(|(k, _)| !k.starts_with('\u{0}'))
                .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(k, _)| k.clone());
            let Some(best) = best else { continue };
            let steps: Vec<String> = best.split(" -> ").map(str::to_string).collect();
            for (i, x) in steps.iter().enumerate() {
                types.insert(x.clone());
                for y in &steps[i + 1..] {
                    *before.entry((x.clone(), y.clone())).or_default() += 1;
                    *before.entry((y.clone(), x.clone())).or_default() -= 1;
                }
            }
            preferred.push(format!("for {key} remove in the order {best}"));
        }
        let mut chain: Vec<String> = types.into_iter().collect();
        let wins = |x: &String| -> i64 {
            before
                .iter()
                .filter(|((a, _), n)| a == x && **n > 0)
                .map(|(_, n)| *n)
                .sum()
        };
        chain.sort_by(|a, b| wins(b).cmp(&wins(a)).then_with(|| a.cmp(b)));
        format!(
            "Here is the reference information from past trials: A reasonable overall elimination order is: {}. {}.",
            chain.join(" -> "),
            preferred.join("; ")
        )
    }
}

impl LanguageOracle for MockLanguage {
    fn complete(&self, request: &OracleRequest) -> Result<String> {
        match request {
            OracleRequest::DistillInsight { prompt } => Ok(MockLanguage::insight(prompt)),
            OracleRequest::Describe { image, .. } => self.world.describe(image),
            OracleRequest::DebateTurn { role, context, .. } if role == GROUPER_ROLE => self.group(context),
            OracleRequest::DebateTurn { context, .. } => {
                if parse_groups(context).is_empty() {
                    Ok("Thought: No grouping exists yet.\nAction: generate_groups()".into())
                } else {
                    Ok("Thought: The groups are consistent in text and ranking.\nAction: finish()".into())
                }
            }
            OracleRequest::RefineChoice { image, candidates } => {
                let label = self.world.label(image)?;
                let pick = candidates
                    .iter()
                    .position(|c| MockLanguage::label_in(c) == Some(label.as_str()))
                    .unwrap_or(0);
                Ok((pick + 1).to_string())
            }
            OracleRequest::ProposePlan(p) => {
                let split = |s: &str| -> Option<(u64, String)> {
                    let (n, text) = s.split_once(':')?;
                    Some((n.trim().parse().ok()?, MockLanguage::label_in(text)?.to_string()))
                };
                let existing: Vec<(u64, String)> = p.existing_patterns.iter().filter_map(|s| split(s)).collect();
                let mut used = BTreeSet::new();
                let mut lines = Vec::new();
                for s in &p.new_patterns {
                    let Some((n, label)) = split(s) else { continue };
                    match existing.iter().find(|(id, l)| l == &label && !used.contains(id)) {
                        Some((id, _)) => {
                            used.insert(*id);
                            lines.push(format!("{n} | merge | {id}"));
                        }
                        None => lines.push(format!("{n} | add")),
                    }
                }
                Ok(serde_json::to_string(&lines).expect("strings serialize"))
            }
            OracleRequest::Embed { image } => Ok(serde_json::to_string(&self.world.embed(image)?).expect("finite")),
        }
    }
}

pub struct MockEncoder {
    world: Arc<World>,
}

impl MockEncoder {
    pub fn new(world: Arc<World>) -> Self {
        MockEncoder { world }
    }
}

impl EncoderOracle for MockEncoder {
    fn embed(&self, image: &ImageRef) -> Result<Vec<f64>> {
        self.world.embed(image)
    }
}
