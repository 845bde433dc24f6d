//! Simulated ablations and trace aggregation for reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::evolve::{train, EvolveConfig};
use crate::pool::{GuidanceLevel, Pool};
use crate::simenv::{MockEncoder, MockLanguage, World, WorldSpec};
use crate::types::{uqi_metrics, DegradationSet, Direction, ImageRef, Preference};
use crate::workflow::{Status, Workflow, WorkflowConfig, WorkflowTrace};

/// Per-group means over a set of traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub images: usize,
    pub invocations: f64,
    pub o_rollbacks: f64,
    pub t_rollbacks: f64,
    pub total_rollbacks: f64,
    pub success_rate: f64,
    pub metrics: BTreeMap<String, f64>,
}

pub fn summarize_traces(traces: &[WorkflowTrace]) -> Result<TraceSummary> {
    if traces.is_empty() {
        return Err(Error::InvalidInput("no traces to summarize".into()));
    }
    let n = traces.len() as f64;
    let mean = |f: &dyn Fn(&WorkflowTrace) -> f64| traces.iter().map(f).sum::<f64>() / n;
    let mut metrics = BTreeMap::new();
    for m in uqi_metrics() {
        let mut sum = 0.0;
        for t in traces {
            sum += t.final_metrics.get(&m.name).copied().ok_or_else(|| {
                Error::MetricSetMismatch(format!("trace for {} lacks {}", t.image, m.name))
            })?;
        }
        metrics.insert(m.name, sum / n);
    }
    Ok(TraceSummary {
        images: traces.len(),
        invocations: mean(&|t| t.invocations as f64),
        o_rollbacks: mean(&|t| t.o_rollbacks as f64),
        t_rollbacks: mean(&|t| t.t_rollbacks as f64),
        total_rollbacks: mean(&|t| t.total_rollbacks() as f64),
        success_rate: mean(&|t| f64::from(u8::from(t.status == Status::Success))),
        metrics,
    })
}

/// Unified quality index per group: each metric's group means are oriented
/// so larger is better, min-max normalized across groups, then averaged.
pub fn uqi(groups: &[&BTreeMap<String, f64>]) -> Result<Vec<f64>> {
    let metrics = uqi_metrics();
    let mut out = vec![0.0; groups.len()];
    for m in &metrics {
        let sign = match m.direction {
            Direction::HigherBetter => 1.0,
            Direction::LowerBetter => -1.0,
        };
        let values: Vec<f64> = groups
            .iter()
            .map(|g| {
                g.get(&m.name)
                    .map(|v| sign * v)
                    .ok_or_else(|| Error::MetricSetMismatch(format!("group lacks {}", m.name)))
            })
            .collect::<Result<_>>()?;
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (o, v) in out.iter_mut().zip(&values) {
            *o += if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
        }
    }
    Ok(out.into_iter().map(|v| v / metrics.len() as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub mean_difference: f64,
    pub t: f64,
    pub df: f64,
    pub p_two_sided: f64,
}

/// Paired t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::DimensionError {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidInput("a paired test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = n - 1.0;
    if var == 0.0 {
        let p = if mean == 0.0 { 1.0 } else { 0.0 };
        let t = if mean == 0.0 { 0.0 } else { mean.signum() * f64::INFINITY };
        return Ok(PairedTest {
            mean_difference: mean,
            t,
            df,
            p_two_sided: p,
        });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::NumericalInstability(e.to_string()))?;
    Ok(PairedTest {
        mean_difference: mean,
        t,
        df,
        p_two_sided: 2.0 * (1.0 - dist.cdf(t.abs())),
    })
}

fn run_level(
    world: &Arc<World>,
    pool: &Pool,
    images: &[ImageRef],
    preference: Preference,
    level: GuidanceLevel,
) -> Result<Vec<WorkflowTrace>> {
    let language = MockLanguage::new(world.clone());
    let encoder = MockEncoder::new(world.clone());
    let mut config = WorkflowConfig::new(preference);
    config.max_level = level;
    Workflow {
        env: world.as_ref(),
        pool,
        language: &language,
        encoder: &encoder,
        config,
    }
    .run_many(images, 0)
}

fn train_world(
    world: &Arc<World>,
    pool: &mut Pool,
    images: &[ImageRef],
    preference: Preference,
    evolve: &EvolveConfig,
) -> Result<()> {
    let language = MockLanguage::new(world.clone());
    let encoder = MockEncoder::new(world.clone());
    train(world.as_ref(), pool, images, preference, evolve, &language, &encoder)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularityConfig {
    pub world: String,
    pub seeds: Vec<u64>,
    pub train_images: usize,
    pub test_images: usize,
    pub preference: Preference,
    pub evolve: EvolveConfig,
}

impl Default for GranularityConfig {
    fn default() -> Self {
        GranularityConfig {
            world: "group-a".into(),
            seeds: (1..=6).collect(),
            train_images: 400,
            test_images: 200,
            preference: Preference::Fidelity,
            evolve: EvolveConfig::default(),
        }
    }
}

pub const ABLATION_LEVELS: [GuidanceLevel; 3] = [GuidanceLevel::None, GuidanceLevel::Coarse, GuidanceLevel::Fine];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularityRow {
    pub seed: u64,
    pub level: GuidanceLevel,
    pub summary: TraceSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularityReport {
    pub rows: Vec<GranularityRow>,
    pub none_vs_coarse: PairedTest,
    pub coarse_vs_fine: PairedTest,
}

impl GranularityReport {
    pub fn mean_invocations(&self, level: GuidanceLevel) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.level == level)
            .map(|r| r.summary.invocations)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,level,images,invocations,o_rb,t_rb,total_rb,success_rate\n");
        for r in &self.rows {
            let m = &r.summary;
            let _ = writeln!(
                s,
                "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4}",
                r.seed, r.level, m.images, m.invocations, m.o_rollbacks, m.t_rollbacks, m.total_rollbacks, m.success_rate
            );
        }
        s
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        for level in ABLATION_LEVELS {
            let _ = writeln!(s, "mean invocations ({level}): {:.3}", self.mean_invocations(level));
        }
        for (name, t) in [("none vs coarse", &self.none_vs_coarse), ("coarse vs fine", &self.coarse_vs_fine)] {
            let _ = writeln!(
                s,
                "{name}: diff {:.3}, t {:.3}, df {}, p {:.3e}",
                t.mean_difference, t.t, t.df, t.p_two_sided
            );
        }
        s
    }
}

/// Trains one pool per seed, then runs the same test images under each
/// guidance level. Levels are compared with paired tests across seeds.
pub fn granularity_ablation(config: &GranularityConfig) -> Result<GranularityReport> {
    let mut rows = Vec::new();
    let mut per_level: BTreeMap<GuidanceLevel, Vec<f64>> = BTreeMap::new();
    for &seed in &config.seeds {
        let world = Arc::new(World::preset(&config.world, seed)?);
        let train_imgs = world.generate_images("train", config.train_images, None)?;
        let test_imgs = world.generate_images("test", config.test_images, None)?;
        let mut pool = Pool::new();
        train_world(&world, &mut pool, &train_imgs, config.preference, &config.evolve)?;
        for level in ABLATION_LEVELS {
            let traces = run_level(&world, &pool, &test_imgs, config.preference, level)?;
            let summary = summarize_traces(&traces)?;
            per_level.entry(level).or_default().push(summary.invocations);
            rows.push(GranularityRow { seed, level, summary });
        }
    }
    let get = |l| per_level.get(&l).cloned().unwrap_or_default();
    Ok(GranularityReport {
        none_vs_coarse: paired_t_test(&get(GuidanceLevel::None), &get(GuidanceLevel::Coarse))?,
        coarse_vs_fine: paired_t_test(&get(GuidanceLevel::Coarse), &get(GuidanceLevel::Fine))?,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimesConfig {
    pub world: String,
    pub seed: u64,
    pub max_times: u64,
    pub test_images: usize,
    pub preference: Preference,
    pub evolve: EvolveConfig,
}

impl Default for TimesConfig {
    fn default() -> Self {
        TimesConfig {
            world: "group-b".into(),
            seed: 1,
            max_times: 2,
            test_images: 200,
            preference: Preference::Perception,
            evolve: EvolveConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimesRow {
    pub times: u64,
    pub summary: TraceSummary,
    pub uqi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimesReport {
    pub rows: Vec<TimesRow>,
}

impl TimesReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("times,images,invocations,o_rb,t_rb,total_rb,success_rate,uqi");
        let names: Vec<String> = uqi_metrics().into_iter().map(|m| m.name).collect();
        for n in &names {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
        for r in &self.rows {
            let m = &r.summary;
            let _ = write!(
                s,
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                r.times, m.images, m.invocations, m.o_rollbacks, m.t_rollbacks, m.total_rollbacks, m.success_rate, r.uqi
            );
            for n in &names {
                let _ = write!(s, ",{:.4}", m.metrics[n]);
            }
            s.push('\n');
        }
        s
    }
}

/// Evolves a pool in chunks of one batch per degradation set of the world's
/// mixture, evaluating the same test images after each chunk.
pub fn times_ablation(config: &TimesConfig) -> Result<TimesReport> {
    let world = Arc::new(World::preset(&config.world, config.seed)?);
    run_times(world, config)
}

pub fn run_times(world: Arc<World>, config: &TimesConfig) -> Result<TimesReport> {
    let spec: &WorldSpec = world.spec();
    let sets: Vec<DegradationSet> = spec
        .mixes
        .iter()
        .map(|m| DegradationSet::from_ids(&m.degradations))
        .collect::<Result<_>>()?;
    let test_imgs = world.generate_images("test", config.test_images, None)?;
    let mut pool = Pool::new();
    let mut summaries = Vec::new();
    for times in 0..=config.max_times {
        if times > 0 {
            let mut chunk = Vec::new();
            for (i, set) in sets.iter().enumerate() {
                let prefix = format!("train{times}-{i}");
                chunk.extend(world.generate_images(&prefix, config.evolve.batch_size, Some(set))?);
            }
            train_world(&world, &mut pool, &chunk, config.preference, &config.evolve)?;
        }
        let traces = run_level(&world, &pool, &test_imgs, config.preference, GuidanceLevel::Fine)?;
        summaries.push((times, summarize_traces(&traces)?));
    }
    let groups: Vec<&BTreeMap<String, f64>> = summaries.iter().map(|(_, s)| &s.metrics).collect();
    let scores = uqi(&groups)?;
    Ok(TimesReport {
        rows: summaries
            .into_iter()
            .zip(scores)
            .map(|((times, summary), uqi)| TimesRow { times, summary, uqi })
            .collect(),
    })
}

/// Groups traces by a label and summarizes each group; UQI is normalized
/// across the groups.
pub fn report_groups(groups: &BTreeMap<String, Vec<WorkflowTrace>>) -> Result<String> {
    let summaries: Vec<(&String, TraceSummary)> = groups
        .iter()
        .map(|(k, v)| Ok((k, summarize_traces(v)?)))
        .collect::<Result<_>>()?;
    let metrics: Vec<&BTreeMap<String, f64>> = summaries.iter().map(|(_, s)| &s.metrics).collect();
    let scores = uqi(&metrics)?;
    let mut s = String::from("group,images,invocations,o_rb,t_rb,total_rb,success_rate,uqi\n");
    for ((name, m), u) in summaries.iter().zip(scores) {
        let _ = writeln!(
            s,
            "{name},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            m.images, m.invocations, m.o_rollbacks, m.t_rollbacks, m.total_rollbacks, m.success_rate, u
        );
    }
    Ok(s)
}
