//! Inference loop: Perception, Planning, Execution, Reflection and Rollback
//! driven by pool guidance.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::oracles::{EncoderOracle, LanguageOracle};
use crate::pool::{get_guidance, Guidance, GuidanceLevel, GuidanceOptions, Pool};
use crate::types::{uqi_metrics, DegradationSet, History, HistoryEvent, ImageRef, Preference, RemovalOrder, ToolId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkflowConfig {
    pub preference: Preference,
    pub max_rollbacks: u32,
    pub max_invocations: u32,
    pub top_k: usize,
    /// Highest guidance level consulted; `None` ignores the pool.
    pub max_level: GuidanceLevel,
}

impl WorkflowConfig {
    pub fn new(preference: Preference) -> Self {
        WorkflowConfig {
            preference,
            max_rollbacks: 8,
            max_invocations: 40,
            top_k: 3,
            max_level: GuidanceLevel::Fine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_rollbacks == 0 || self.max_invocations == 0 || self.top_k == 0 {
            return Err(Error::ConfigError("rollback, invocation and top-k limits must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExhaustedReason {
    RollbackBudget,
    InvocationBudget,
    /// Every order and every remaining tool of the failing degradations was tried.
    OptionsExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Status {
    Success,
    Exhausted { reason: ExhaustedReason },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    pub pass: u32,
    pub step: u64,
    pub degradation: String,
    pub tool: String,
    pub output: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reflection {
    pub pass: u32,
    /// Index into `executions` after which this reflection happened.
    pub after_execution: usize,
    pub unresolved: Vec<String>,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowTrace {
    pub image: ImageRef,
    pub preference: Preference,
    pub perceived: Vec<String>,
    pub guidance_level: GuidanceLevel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<u64>,
    pub executions: Vec<Execution>,
    pub reflections: Vec<Reflection>,
    pub history: History,
    pub o_rollbacks: u32,
    pub t_rollbacks: u32,
    pub invocations: u32,
    #[serde(flatten)]
    pub status: Status,
    pub final_image: ImageRef,
    pub final_quality: f64,
    /// Final image scored on the unified-quality suite.
    pub final_metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl WorkflowTrace {
    pub fn total_rollbacks(&self) -> u32 {
        self.o_rollbacks + self.t_rollbacks
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

/// Current plan state for one perceived degradation set.
struct PlanState {
    set: DegradationSet,
    guidance: Guidance,
    orders: Vec<RemovalOrder>,
    order_idx: usize,
    tool_idx: BTreeMap<String, usize>,
}

impl PlanState {
    fn order(&self) -> &RemovalOrder {
        &self.orders[self.order_idx]
    }

    fn tool(&self, d: &str) -> &str {
        &self.guidance.tools[d][self.tool_idx[d]]
    }

    fn tools(&self) -> BTreeMap<String, String> {
        self.tool_idx.keys().map(|d| (d.clone(), self.tool(d).to_string())).collect()
    }
}

pub struct Workflow<'a> {
    pub env: &'a dyn Environment,
    pub pool: &'a Pool,
    pub language: &'a dyn LanguageOracle,
    pub encoder: &'a dyn EncoderOracle,
    pub config: WorkflowConfig,
}

impl Workflow<'_> {
    fn plan(&self, image: &ImageRef, set: DegradationSet) -> Result<PlanState> {
        let guidance = get_guidance(
            self.pool,
            self.env.registry(),
            self.language,
            self.encoder,
            image,
            &set,
            self.config.preference,
            GuidanceOptions {
                top_k: self.config.top_k,
                max_level: self.config.max_level,
            },
        )?;
        let orders = guidance.orders(&set);
        let tool_idx = set.iter().map(|d| (d.as_str().to_string(), 0)).collect();
        Ok(PlanState {
            set,
            guidance,
            orders,
            order_idx: 0,
            tool_idx,
        })
    }

    fn final_metrics(&self, image: &ImageRef) -> Result<BTreeMap<String, f64>> {
        uqi_metrics()
            .into_iter()
            .map(|m| Ok((m.name.clone(), self.env.score(image, &m)?)))
            .collect()
    }

    /// Runs the loop for one image until Success or a budget is exhausted.
    /// Every pass restarts from the original image.
    pub fn run(&self, image: &ImageRef) -> Result<WorkflowTrace> {
        self.config.validate()?;
        let env = self.env;
        let pref = self.config.preference;
        let mut history = History::new();
        let mut attempt = 0u32;
        let set = env.perceive(image, attempt)?;
        let perceived: Vec<String> = set.iter().map(|d| d.as_str().to_string()).collect();
        history.push(HistoryEvent::Perceived {
            degradations: perceived.clone(),
        });
        let mut trace = WorkflowTrace {
            image: image.clone(),
            preference: pref,
            perceived,
            guidance_level: GuidanceLevel::None,
            profile: None,
            executions: Vec::new(),
            reflections: Vec::new(),
            history: History::new(),
            o_rollbacks: 0,
            t_rollbacks: 0,
            invocations: 0,
            status: Status::Success,
            final_image: image.clone(),
            final_quality: env.quality(image, pref)?,
            final_metrics: BTreeMap::new(),
            warnings: Vec::new(),
        };
        if set.is_empty() {
            trace.history = history;
            trace.final_metrics = self.final_metrics(image)?;
            return Ok(trace);
        }

        let mut plan = self.plan(image, set)?;
        trace.guidance_level = plan.guidance.level;
        trace.profile = plan.guidance.profile;
        trace.warnings.extend(plan.guidance.warnings.iter().cloned());
        let mut best: Option<(f64, ImageRef)> = None;
        let mut pass = 0u32;
        let status = loop {
            history.push(HistoryEvent::Planned {
                degradation_type: plan.guidance.degradation_type.clone(),
                order: plan.order().key(),
                tools: plan.tools(),
                guidance: plan.guidance.level.to_string(),
            });

            // Execution from the original degraded image.
            let mut current = image.clone();
            let mut failed: Vec<String> = Vec::new();
            let mut out_of_invocations = false;
            for d in plan.order().steps().to_vec() {
                if trace.invocations >= self.config.max_invocations {
                    out_of_invocations = true;
                    break;
                }
                let tool_name = plan.tool(d.as_str()).to_string();
                trace.invocations += 1;
                let result = ToolId::new(&tool_name).and_then(|t| env.apply_tool(&current, &t, &d));
                let step = match &result {
                    Ok(out) => history.push(HistoryEvent::Executed {
                        degradation: d.as_str().to_string(),
                        tool: tool_name.clone(),
                        input: current.clone(),
                        output: out.clone(),
                    }),
                    Err(_) => history.len() as u64,
                };
                trace.executions.push(Execution {
                    pass,
                    step,
                    degradation: d.as_str().to_string(),
                    tool: tool_name,
                    output: result.as_ref().ok().cloned(),
                    error: result.as_ref().err().map(ToString::to_string),
                });
                match result {
                    Ok(out) => current = out,
                    Err(e) => {
                        log::warn!("{} on {image} failed: {e}", d.as_str());
                        failed.push(d.as_str().to_string());
                    }
                }
            }

            // Reflection after the full pass.
            let mut unresolved: Vec<String> = env
                .unresolved(&current)?
                .into_iter()
                .map(|d| d.as_str().to_string())
                .collect();
            for d in failed {
                if !unresolved.contains(&d) {
                    unresolved.push(d);
                }
            }
            unresolved.sort();
            let quality = env.quality(&current, pref)?;
            history.push(HistoryEvent::Reflected {
                unresolved: unresolved.clone(),
            });
            trace.reflections.push(Reflection {
                pass,
                after_execution: trace.executions.len(),
                unresolved: unresolved.clone(),
                quality,
            });
            if best.as_ref().is_none_or(|(q, _)| quality > *q) {
                best = Some((quality, current.clone()));
            }
            if unresolved.is_empty() && !out_of_invocations {
                trace.final_image = current;
                trace.final_quality = quality;
                break Status::Success;
            }
            if out_of_invocations || trace.invocations >= self.config.max_invocations {
                break Status::Exhausted {
                    reason: ExhaustedReason::InvocationBudget,
                };
            }
            if trace.total_rollbacks() >= self.config.max_rollbacks {
                break Status::Exhausted {
                    reason: ExhaustedReason::RollbackBudget,
                };
            }

            // Rollback: re-perceive, then revise the order, then the tools.
            attempt += 1;
            let seen = env.perceive(image, attempt)?;
            if !seen.is_empty() && seen != plan.set {
                let from = plan.order().key();
                plan = self.plan(image, seen)?;
                trace.warnings.extend(plan.guidance.warnings.iter().cloned());
                history.push(HistoryEvent::OrderRollback {
                    from,
                    to: plan.order().key(),
                });
                trace.o_rollbacks += 1;
            } else if plan.order_idx + 1 < plan.orders.len() {
                let from = plan.order().key();
                plan.order_idx += 1;
                history.push(HistoryEvent::OrderRollback {
                    from,
                    to: plan.order().key(),
                });
                trace.o_rollbacks += 1;
            } else {
                let mut revised = BTreeMap::new();
                for d in &unresolved {
                    let Some(idx) = plan.tool_idx.get(d).copied() else {
                        continue;
                    };
                    if idx + 1 < plan.guidance.tools[d].len() {
                        let old = plan.tool(d).to_string();
                        plan.tool_idx.insert(d.clone(), idx + 1);
                        revised.insert(d.clone(), (old, plan.tool(d).to_string()));
                    }
                }
                if revised.is_empty() {
                    break Status::Exhausted {
                        reason: ExhaustedReason::OptionsExhausted,
                    };
                }
                plan.order_idx = 0;
                history.push(HistoryEvent::ToolRollback { revised });
                trace.t_rollbacks += 1;
            }
            pass += 1;
        };
        if let Status::Exhausted { .. } = status {
            let (q, img) = best.expect("at least one pass ran");
            trace.final_image = img;
            trace.final_quality = q;
        }
        trace.status = status;
        trace.history = history;
        trace.final_metrics = self.final_metrics(&trace.final_image)?;
        Ok(trace)
    }

    /// Independent runs over many images on `threads` workers (0 = rayon default).
    pub fn run_many(&self, images: &[ImageRef], threads: usize) -> Result<Vec<WorkflowTrace>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::ConfigError(e.to_string()))?;
        pool.install(|| images.par_iter().map(|img| self.run(img)).collect())
    }
}

/// True when no tool rollback happens while untried orders remain for the
/// current degradation set. A re-planned set starts with all orders untried.
pub fn rollback_order_respected(trace: &WorkflowTrace) -> bool {
    let mut current: Option<&str> = None;
    let mut orders = 1usize;
    let mut tried = 1usize;
    for e in trace.history.entries() {
        match &e.event {
            HistoryEvent::Planned { degradation_type, .. } => {
                if current != Some(degradation_type.as_str()) {
                    current = Some(degradation_type);
                    orders = (1..=degradation_type.split('+').count()).product();
                    tried = 1;
                }
            }
            HistoryEvent::OrderRollback { .. } => tried += 1,
            HistoryEvent::ToolRollback { .. } => {
                if tried < orders {
                    return false;
                }
                tried = 1;
            }
            _ => {}
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolve::{train, EvolveConfig};
    use crate::simenv::{MockEncoder, MockLanguage, ToolSpec, World, WorldSpec};
    use std::sync::Arc;

    struct Fixture {
        world: Arc<World>,
        language: MockLanguage,
        encoder: MockEncoder,
    }

    impl Fixture {
        fn new(world: World) -> Self {
            let world = Arc::new(world);
            Fixture {
                language: MockLanguage::new(world.clone()),
                encoder: MockEncoder::new(world.clone()),
                world,
            }
        }

        fn workflow<'a>(&'a self, pool: &'a Pool, level: GuidanceLevel) -> Workflow<'a> {
            let mut config = WorkflowConfig::new(Preference::Fidelity);
            config.max_level = level;
            Workflow {
                env: self.world.as_ref(),
                pool,
                language: &self.language,
                encoder: &self.encoder,
                config,
            }
        }
    }

    fn check_invariants(t: &WorkflowTrace, config: &WorkflowConfig) {
        assert!(t.history.is_well_formed());
        assert_eq!(t.invocations as usize, t.executions.len());
        assert!(rollback_order_respected(t), "{}", t.to_json());
        // Reflections only after a full pass.
        for r in &t.reflections {
            let pass: Vec<&Execution> = t.executions.iter().filter(|e| e.pass == r.pass).collect();
            assert!(r.after_execution >= pass.len());
            assert!(t.executions[r.after_execution..].iter().all(|e| e.pass > r.pass));
        }
        match t.status {
            Status::Success => {
                assert!(t.reflections.last().is_none_or(|r| r.unresolved.is_empty()));
                assert!(t.invocations as usize >= t.perceived.len());
            }
            Status::Exhausted { reason } => match reason {
                ExhaustedReason::RollbackBudget => assert_eq!(t.total_rollbacks(), config.max_rollbacks),
                ExhaustedReason::InvocationBudget => assert_eq!(t.invocations, config.max_invocations),
                ExhaustedReason::OptionsExhausted => {}
            },
        }
    }

    #[test]
    fn clean_image_needs_no_invocations() {
        let f = Fixture::new(World::preset("group-a", 1).unwrap());
        let img = f.world.register("clean", Some(&DegradationSet::default())).unwrap();
        let pool = Pool::new();
        let t = f.workflow(&pool, GuidanceLevel::Fine).run(&img).unwrap();
        assert_eq!(t.status, Status::Success);
        assert_eq!(t.invocations, 0);
        assert!(t.executions.is_empty());
    }

    #[test]
    fn only_third_tool_works() {
        let mut spec = WorldSpec::preset("dominant", 2).unwrap();
        spec.perception_error_rate = 0.0;
        for (tool, eff) in spec.tools.iter_mut().zip([0.3, 0.35, 0.97, 0.4]) {
            tool.effectiveness = [("*".to_string(), eff)].into();
        }
        let f = Fixture::new(World::new(spec).unwrap());
        let img = f.world.generate_images("only3", 1, None).unwrap().remove(0);
        let pool = Pool::new();
        let wf = f.workflow(&pool, GuidanceLevel::None);
        let t = wf.run(&img).unwrap();
        assert_eq!(t.status, Status::Success, "{}", t.to_json());
        assert_eq!(t.o_rollbacks, 0);
        assert_eq!(t.t_rollbacks, 2);
        assert_eq!(t.invocations, 3);
        check_invariants(&t, &wf.config);
        let tools: Vec<&str> = f.world.spec().tools.iter().map(|t: &ToolSpec| t.id.as_str()).collect();
        assert_eq!(t.executions.last().unwrap().tool, tools[2]);
    }

    #[test]
    fn orders_are_revised_before_tools() {
        let mut spec = WorldSpec::preset("group-a", 3).unwrap();
        spec.perception_error_rate = 0.0;
        let f = Fixture::new(World::new(spec).unwrap());
        let set = DegradationSet::from_ids(&["dark", "motion blur"]).unwrap();
        let imgs = f.world.generate_images("ob", 40, Some(&set)).unwrap();
        let pool = Pool::new();
        let wf = f.workflow(&pool, GuidanceLevel::None);
        let mut saw = false;
        for img in &imgs {
            let t = wf.run(img).unwrap();
            check_invariants(&t, &wf.config);
            let kinds: Vec<&str> = t
                .history
                .entries()
                .iter()
                .filter_map(|e| match e.event {
                    HistoryEvent::OrderRollback { .. } => Some("o"),
                    HistoryEvent::ToolRollback { .. } => Some("t"),
                    _ => None,
                })
                .collect();
            if let Some(first_t) = kinds.iter().position(|k| *k == "t") {
                assert_eq!(kinds[0], "o");
                assert!(first_t >= 1);
                saw = true;
            }
        }
        assert!(saw, "fixture never needed a tool rollback");
    }

    #[test]
    fn determinism_and_parallel_equivalence() {
        let f = Fixture::new(World::preset("group-a", 4).unwrap());
        let imgs = f.world.generate_images("det", 24, None).unwrap();
        let pool = Pool::new();
        let wf = f.workflow(&pool, GuidanceLevel::Fine);
        let seq: Vec<WorkflowTrace> = imgs.iter().map(|i| wf.run(i).unwrap()).collect();
        let par = wf.run_many(&imgs, 4).unwrap();
        assert_eq!(seq, par);
        for t in &seq {
            check_invariants(t, &wf.config);
        }
    }

    #[test]
    fn budgets_are_enforced() {
        let mut spec = WorldSpec::preset("dominant", 5).unwrap();
        for tool in spec.tools.iter_mut() {
            tool.effectiveness = [("*".to_string(), 0.1)].into();
        }
        let f = Fixture::new(World::new(spec).unwrap());
        let img = f.world.generate_images("b", 1, None).unwrap().remove(0);
        let pool = Pool::new();
        let mut wf = f.workflow(&pool, GuidanceLevel::None);
        let t = wf.run(&img).unwrap();
        assert_eq!(
            t.status,
            Status::Exhausted {
                reason: ExhaustedReason::OptionsExhausted
            }
        );
        wf.config.max_rollbacks = 2;
        let t = wf.run(&img).unwrap();
        assert_eq!(
            t.status,
            Status::Exhausted {
                reason: ExhaustedReason::RollbackBudget
            }
        );
        check_invariants(&t, &wf.config);
        wf.config.max_rollbacks = 8;
        wf.config.max_invocations = 2;
        let t = wf.run(&img).unwrap();
        assert_eq!(t.invocations, 2);
        check_invariants(&t, &wf.config);
        let best = t.reflections.iter().map(|r| r.quality).fold(f64::MIN, f64::max);
        assert_eq!(t.final_quality, best);
    }

    #[test]
    fn evolved_pool_reduces_invocations() {
        let f = Fixture::new(World::preset("group-a", 7).unwrap());
        let train_imgs = f.world.generate_images("tr", 300, None).unwrap();
        let test_imgs = f.world.generate_images("te", 60, None).unwrap();
        let mut pool = Pool::new();
        train(
            f.world.as_ref(),
            &mut pool,
            &train_imgs,
            Preference::Fidelity,
            &EvolveConfig::default(),
            &f.language,
            &f.encoder,
        )
        .unwrap();
        let mean = |level| {
            let wf = f.workflow(&pool, level);
            let ts = wf.run_many(&test_imgs, 0).unwrap();
            ts.iter().map(|t| t.invocations as f64).sum::<f64>() / ts.len() as f64
        };
        let (none, fine) = (mean(GuidanceLevel::None), mean(GuidanceLevel::Fine));
        assert!(fine < none, "fine {fine} vs none {none}");
    }

    #[test]
    fn inverted_pool_causes_more_rollbacks() {
        let mut spec = WorldSpec::preset("dominant", 8).unwrap();
        spec.perception_error_rate = 0.0;
        let f = Fixture::new(World::new(spec).unwrap());
        let imgs = f.world.generate_images("inv", 30, None).unwrap();
        let mut inverted = Pool::new();
        inverted
            .insert_coarse(crate::pool::CoarseEntry {
                degradation_type: "noise".into(),
                preference: Preference::Fidelity,
                ranking: crate::types::Ranking::from_ordered(
                    ["mprnet", "swinir", "maxim", "restormer"].map(String::from).to_vec(),
                )
                .unwrap(),
                gate: crate::pool::Gate::SufficientAlone,
                round: 1,
                abilities: BTreeMap::new(),
                tie_intensity: 0.0,
            })
            .unwrap();
        let empty = Pool::new();
        let total = |pool: &Pool| {
            let ts = f.workflow(pool, GuidanceLevel::Fine).run_many(&imgs, 0).unwrap();
            ts.iter().map(|t| t.total_rollbacks()).sum::<u32>()
        };
        assert!(total(&inverted) > total(&empty));
    }
}
