//! Command-line front end. Exit codes: 0 success, 1 usage, 2 runtime,
//! 3 oracle unavailable.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::evolve::{self, EvolveConfig};
use crate::experiments::{self, GranularityConfig, TimesConfig};
use crate::oracles::{
    EncoderOracle, LanguageOracle, Recording, RemoteConfig, RemoteOracle, Replay, Transcript, TranscriptEntry,
};
use crate::pool::{GuidanceLevel, Pool};
use crate::simenv::{Manifest, ManifestImage, MockEncoder, MockLanguage, World, WorldSpec, PRESETS};
use crate::types::{ImageRef, Preference};
use crate::workflow::{Workflow, WorkflowConfig, WorkflowTrace};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_ORACLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "expool", version, about = "Self-evolving experience pool for restoration agents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a world spec and an image manifest.
    Simulate(SimulateArgs),
    /// Evaluate every candidate on a manifest split and queue the records.
    Acquire(AcquireArgs),
    /// Run every triggered evolution round on the queued records.
    Evolve(CommonArgs),
    /// Acquire and evolve in stages of increasing degradation count.
    Train(AcquireArgs),
    /// Run the inference workflow and print one trace document per line.
    Infer(InferArgs),
    /// Summarize a stored pool.
    Inspect(CommonArgs),
    /// Aggregate traces or run a simulated ablation; prints CSV.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OracleBackend {
    Mock,
    Remote,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// World spec file (written by `simulate`).
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Image manifest; defaults to manifest.json next to the world file.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Pool directory.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// fidelity or perception [default: fidelity].
    #[arg(long, value_parser = parse_pref)]
    pub pref: Option<Preference>,
    /// Records per evolution round [default: 25].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Profiles retrieved by embedding similarity [default: 3].
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Wald gate confidence level [default: 0.975].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Records per fine-grained refinement batch [default: 12].
    #[arg(long)]
    pub mini_batch: Option<usize>,
    /// Rollback budget per image [default: 8].
    #[arg(long)]
    pub budget_rollbacks: Option<u32>,
    /// Tool invocation budget per image [default: 40].
    #[arg(long)]
    pub budget_invocations: Option<u32>,
    /// Oracle backend [default: mock].
    #[arg(long, value_enum)]
    pub oracle: Option<OracleBackend>,
    /// World seed used by `simulate` [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (`simulate`) or file (`infer`); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Save every oracle call to this transcript file.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Answer oracle calls from a recorded transcript.
    #[arg(long, conflicts_with = "record")]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Preset name, `premise` for a random premise world, or a spec file.
    #[arg(long = "preset", default_value = "group-a")]
    pub preset: String,
    #[arg(long, default_value_t = 400)]
    pub train_images: usize,
    #[arg(long, default_value_t = 200)]
    pub test_images: usize,
}

#[derive(Debug, Clone, Args)]
pub struct AcquireArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Only images perceived with exactly this many degradations.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Run only these image ids (repeatable).
    #[arg(long = "image")]
    pub images: Vec<String>,
    /// Highest guidance level consulted.
    #[arg(long, default_value = "fine", value_parser = parse_level)]
    pub level: GuidanceLevel,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[command(subcommand)]
    pub kind: ReportKind,
}

#[derive(Debug, Clone, Subcommand)]
pub enum ReportKind {
    /// Per-file means of Invoc., O-Rb, T-Rb, Total-Rb and UQI over trace files.
    Traces {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Guidance-granularity ablation (none / coarse / fine).
    Granularity {
        #[arg(long, default_value = "group-a")]
        preset: String,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 400)]
        train_images: usize,
        #[arg(long, default_value_t = 200)]
        test_images: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evolution-times ablation.
    Times {
        #[arg(long, default_value = "group-b")]
        preset: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        max_times: u64,
        #[arg(long, default_value_t = 200)]
        test_images: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_pref(s: &str) -> std::result::Result<Preference, String> {
    s.parse::<Preference>().map_err(|e| e.to_string())
}

fn parse_level(s: &str) -> std::result::Result<GuidanceLevel, String> {
    s.parse::<GuidanceLevel>().map_err(|e| e.to_string())
}

/// Config file contents; every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub pref: Option<Preference>,
    pub batch_size: Option<usize>,
    pub top_k: Option<usize>,
    pub alpha: Option<f64>,
    pub mini_batch: Option<usize>,
    pub budget_rollbacks: Option<u32>,
    pub budget_invocations: Option<u32>,
    pub oracle: Option<OracleBackend>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub remote: Option<RemoteConfig>,
}

type Splits = BTreeMap<String, Vec<ImageRef>>;

/// Flags over config file over defaults.
#[derive(Debug, Clone)]
struct Resolved {
    world: Option<PathBuf>,
    manifest: Option<PathBuf>,
    pool: Option<PathBuf>,
    pref: Preference,
    evolve: EvolveConfig,
    workflow: WorkflowConfig,
    oracle: OracleBackend,
    seed: u64,
    out: Option<PathBuf>,
    remote: RemoteConfig,
    record: Option<PathBuf>,
    replay: Option<PathBuf>,
}

fn resolve(args: &CommonArgs) -> Result<Resolved> {
    let file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<RunConfig>(&text).map_err(|e| Error::ConfigError(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    let pref = args.pref.or(file.pref).unwrap_or(Preference::Fidelity);
    let defaults = EvolveConfig::default();
    let evolve = EvolveConfig {
        batch_size: args.batch_size.or(file.batch_size).unwrap_or(defaults.batch_size),
        mini_batch: args.mini_batch.or(file.mini_batch).unwrap_or(defaults.mini_batch),
        alpha: args.alpha.or(file.alpha).unwrap_or(defaults.alpha),
        ..defaults
    };
    evolve.validate()?;
    let mut workflow = WorkflowConfig::new(pref);
    workflow.top_k = args.top_k.or(file.top_k).unwrap_or(workflow.top_k);
    workflow.max_rollbacks = args
        .budget_rollbacks
        .or(file.budget_rollbacks)
        .unwrap_or(workflow.max_rollbacks);
    workflow.max_invocations = args
        .budget_invocations
        .or(file.budget_invocations)
        .unwrap_or(workflow.max_invocations);
    workflow.validate()?;
    Ok(Resolved {
        world: args.world.clone().or(file.world),
        manifest: args.manifest.clone().or(file.manifest),
        pool: args.pool.clone().or(file.pool),
        pref,
        evolve,
        workflow,
        oracle: args.oracle.or(file.oracle).unwrap_or(OracleBackend::Mock),
        seed: args.seed.or(file.seed).unwrap_or(1),
        out: args.out.clone().or(file.out),
        remote: file.remote.unwrap_or_default(),
        record: args.record.clone(),
        replay: args.replay.clone(),
    })
}

impl Resolved {
    fn pool_dir(&self) -> Result<&Path> {
        self.pool
            .as_deref()
            .ok_or_else(|| Error::ConfigError("--pool is required".into()))
    }

    /// World and its registered manifest splits.
    fn world(&self) -> Result<(Arc<World>, Splits)> {
        let path = self
            .world
            .as_deref()
            .ok_or_else(|| Error::ConfigError("--world is required".into()))?;
        let world = World::new(WorldSpec::load(path)?)?;
        let manifest_path = self
            .manifest
            .clone()
            .unwrap_or_else(|| path.with_file_name("manifest.json"));
        let splits = world.load_manifest(&Manifest::load(&manifest_path)?)?;
        Ok((Arc::new(world), splits))
    }

    fn oracles(&self, world: &Arc<World>) -> Result<Oracles> {
        let transcript = self.record.as_ref().map(|_| Transcript::new());
        let (language, encoder): (Box<dyn LanguageOracle>, Box<dyn EncoderOracle>) = if let Some(path) = &self.replay {
            let entries = Transcript::load(path)?;
            let (embeds, rest): (Vec<TranscriptEntry>, Vec<TranscriptEntry>) =
                entries.into_iter().partition(|e| e.capability == "embed");
            (Box::new(Replay::new(rest)), Box::new(Replay::new(embeds)))
        } else {
            match self.oracle {
                OracleBackend::Mock => (
                    wrap_language(MockLanguage::new(world.clone()), &transcript),
                    wrap_encoder(MockEncoder::new(world.clone()), &transcript),
                ),
                OracleBackend::Remote => (
                    wrap_language(RemoteOracle::from_env(self.remote.clone())?, &transcript),
                    wrap_encoder(RemoteOracle::from_env(self.remote.clone())?, &transcript),
                ),
            }
        };
        Ok(Oracles {
            language,
            encoder,
            transcript,
            record: self.record.clone(),
        })
    }
}

struct Oracles {
    language: Box<dyn LanguageOracle>,
    encoder: Box<dyn EncoderOracle>,
    transcript: Option<Arc<Transcript>>,
    record: Option<PathBuf>,
}

impl Oracles {
    fn save(&self) -> Result<()> {
        if let (Some(t), Some(path)) = (&self.transcript, &self.record) {
            t.save(path)?;
        }
        Ok(())
    }
}

fn wrap_language<L: LanguageOracle + 'static>(l: L, t: &Option<Arc<Transcript>>) -> Box<dyn LanguageOracle> {
    match t {
        Some(t) => Box::new(Recording::new(l, t.clone())),
        None => Box::new(l),
    }
}

fn wrap_encoder<E: EncoderOracle + 'static>(e: E, t: &Option<Arc<Transcript>>) -> Box<dyn EncoderOracle> {
    match t {
        Some(t) => Box::new(Recording::new(e, t.clone())),
        None => Box::new(e),
    }
}

fn split<'a>(splits: &'a BTreeMap<String, Vec<ImageRef>>, name: &str) -> Result<&'a [ImageRef]> {
    splits
        .get(name)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::ConfigError(format!("manifest has no split `{name}`")))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| Error::io(Path::new("<stdout>"), e))
        }
    }
}

fn pretty(value: &serde_json::Value) -> String {
    serde_json::to_string_pretty(value).expect("json value") + "\n"
}

fn cmd_simulate(args: &SimulateArgs) -> Result<String> {
    let r = resolve(&args.common)?;
    let out = r
        .out
        .as_deref()
        .ok_or_else(|| Error::ConfigError("--out directory is required".into()))?;
    let spec = if PRESETS.contains(&args.preset.as_str()) {
        WorldSpec::preset(&args.preset, r.seed)?
    } else if args.preset == "premise" {
        WorldSpec::random_premise(r.seed)
    } else {
        WorldSpec::load(Path::new(&args.preset))?
    };
    let world = World::new(spec)?;
    let mut splits = BTreeMap::new();
    for (name, n) in [("train", args.train_images), ("test", args.test_images)] {
        let images = world.generate_images(name, n, None)?;
        let entries: Vec<ManifestImage> = images
            .iter()
            .map(|i| world.manifest_entry(i))
            .collect::<Result<_>>()?;
        splits.insert(name.to_string(), entries);
    }
    let manifest = Manifest {
        schema: crate::simenv::SCHEMA_VERSION,
        splits,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let world_path = out.join("world.json");
    let manifest_path = out.join("manifest.json");
    std::fs::write(&world_path, world.spec().to_json()).map_err(|e| Error::io(&world_path, e))?;
    std::fs::write(&manifest_path, manifest.to_json()).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(pretty(&json!({
        "world": world_path,
        "manifest": manifest_path,
        "name": world.spec().name,
        "seed": world.spec().seed,
        "train_images": args.train_images,
        "test_images": args.test_images,
    })))
}

fn pending_counts(pool: &Pool) -> BTreeMap<String, usize> {
    pool.store
        .partitions
        .iter()
        .map(|p| (format!("{}/{}", p.degradation_type, p.preference), p.pending.len()))
        .collect()
}

fn cmd_acquire(args: &AcquireArgs) -> Result<String> {
    let r = resolve(&args.common)?;
    let (world, splits) = r.world()?;
    let dir = r.pool_dir()?;
    let mut pool = Pool::load_or_default(dir)?;
    let mut images = Vec::new();
    let mut skipped = 0usize;
    for img in split(&splits, &args.split)? {
        let n = world.perceive(img, 0)?.len();
        if n == 0 || args.size.is_some_and(|s| s != n) {
            skipped += 1;
        } else {
            images.push(img.clone());
        }
    }
    let records = evolve::acquire_all(world.as_ref(), &pool, &images, r.pref)?;
    let acquired = records.len();
    for rec in records {
        pool.add_record(rec);
    }
    pool.save(dir)?;
    Ok(pretty(&json!({
        "acquired": acquired,
        "skipped": skipped,
        "pending": pending_counts(&pool),
    })))
}

fn cmd_evolve(args: &CommonArgs) -> Result<String> {
    let r = resolve(args)?;
    let (world, _) = r.world()?;
    let dir = r.pool_dir()?;
    let mut pool = Pool::load_or_default(dir)?;
    let oracles = r.oracles(&world)?;
    let outcome = evolve::evolve_all(&mut pool, &r.evolve, oracles.language.as_ref(), oracles.encoder.as_ref());
    oracles.save()?;
    let outcome = outcome?;
    pool.save(dir)?;
    Ok(pretty(&serde_json::to_value(&outcome).expect("outcome serializes")))
}

fn cmd_train(args: &AcquireArgs) -> Result<String> {
    let r = resolve(&args.common)?;
    let (world, splits) = r.world()?;
    let dir = r.pool_dir()?;
    let mut pool = Pool::load_or_default(dir)?;
    let oracles = r.oracles(&world)?;
    let outcome = evolve::train(
        world.as_ref(),
        &mut pool,
        split(&splits, &args.split)?,
        r.pref,
        &r.evolve,
        oracles.language.as_ref(),
        oracles.encoder.as_ref(),
    );
    oracles.save()?;
    let outcome = outcome?;
    pool.save(dir)?;
    Ok(pretty(&serde_json::to_value(&outcome).expect("outcome serializes")))
}

fn cmd_infer(args: &InferArgs) -> Result<String> {
    let r = resolve(&args.common)?;
    let (world, splits) = r.world()?;
    let pool = match &r.pool {
        Some(dir) => Pool::load_or_default(dir)?,
        None => Pool::new(),
    };
    let images: Vec<ImageRef> = if args.images.is_empty() {
        split(&splits, &args.split)?.to_vec()
    } else {
        let known: Vec<&ImageRef> = splits.values().flatten().collect();
        args.images
            .iter()
            .map(|id| {
                known
                    .iter()
                    .find(|i| i.as_str() == id)
                    .map(|i| (*i).clone())
                    .ok_or_else(|| Error::ImageNotFound(id.clone()))
            })
            .collect::<Result<_>>()?
    };
    let oracles = r.oracles(&world)?;
    let mut config = r.workflow;
    config.max_level = args.level;
    let workflow = Workflow {
        env: world.as_ref(),
        pool: &pool,
        language: oracles.language.as_ref(),
        encoder: oracles.encoder.as_ref(),
        config,
    };
    let traces = workflow.run_many(&images, args.threads);
    oracles.save()?;
    let mut text = String::new();
    for t in traces? {
        text.push_str(&serde_json::to_string(&t).expect("trace serializes"));
        text.push('\n');
    }
    emit(r.out.as_deref(), &text)?;
    Ok(String::new())
}

fn cmd_inspect(args: &CommonArgs) -> Result<String> {
    let r = resolve(args)?;
    let pool = Pool::load(r.pool_dir()?)?;
    let coarse: Vec<serde_json::Value> = pool
        .coarse
        .values()
        .map(|e| {
            json!({
                "degradation_type": e.degradation_type,
                "preference": e.preference,
                "gate": e.gate,
                "round": e.round,
                "ranking": e.ranking.ordered(),
            })
        })
        .collect();
    let profiles: BTreeMap<String, usize> = pool
        .profiles
        .iter()
        .map(|((k, p), v)| (format!("{k}/{p}"), v.len()))
        .collect();
    let insight: BTreeMap<String, &str> = pool
        .insight
        .iter()
        .map(|(p, e)| (p.to_string(), e.text.as_str()))
        .collect();
    Ok(pretty(&json!({
        "records": pool.store.records.len(),
        "pending": pending_counts(&pool),
        "coarse": coarse,
        "profiles": profiles,
        "insight": insight,
    })))
}

fn read_traces(path: &Path) -> Result<Vec<WorkflowTrace>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::parse(path, &e)))
        .collect()
}

fn cmd_report(args: &ReportArgs) -> Result<String> {
    match &args.kind {
        ReportKind::Traces { files, out } => {
            let mut groups = BTreeMap::new();
            for f in files {
                let name = f
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| f.display().to_string());
                groups.insert(name, read_traces(f)?);
            }
            emit(out.as_deref(), &experiments::report_groups(&groups)?)?;
            Ok(String::new())
        }
        ReportKind::Granularity {
            preset,
            seeds,
            train_images,
            test_images,
            out,
        } => {
            let report = experiments::granularity_ablation(&GranularityConfig {
                world: preset.clone(),
                seeds: seeds.clone(),
                train_images: *train_images,
                test_images: *test_images,
                ..GranularityConfig::default()
            })?;
            emit(out.as_deref(), &report.to_csv())?;
            Ok(report.summary_text())
        }
        ReportKind::Times {
            preset,
            seed,
            max_times,
            test_images,
            out,
        } => {
            let report = experiments::times_ablation(&TimesConfig {
                world: preset.clone(),
                seed: *seed,
                max_times: *max_times,
                test_images: *test_images,
                ..TimesConfig::default()
            })?;
            emit(out.as_deref(), &report.to_csv())?;
            Ok(String::new())
        }
    }
}

pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::OracleUnavailable(_) => EXIT_ORACLE,
        Error::ConfigError(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Acquire(a) => cmd_acquire(a),
        Command::Evolve(a) => cmd_evolve(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Report(a) => cmd_report(a),
    };
    match result.and_then(|text| if text.is_empty() { Ok(()) } else { emit(None, &text) }) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["expool", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["expool", "infer", "--pref", "sharpness"]), EXIT_USAGE);
        assert_eq!(run(["expool", "inspect"]), EXIT_USAGE);
        assert_eq!(run(["expool", "evolve", "--alpha", "2", "--pool", "x"]), EXIT_USAGE);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"batch_size": 10, "top_k": 5, "pref": "perception"}"#).unwrap();
        let cli = Cli::try_parse_from([
            "expool",
            "evolve",
            "--config",
            path.to_str().unwrap(),
            "--batch-size",
            "7",
        ])
        .unwrap();
        let Command::Evolve(args) = cli.command else { panic!() };
        let r = resolve(&args).unwrap();
        assert_eq!(r.evolve.batch_size, 7);
        assert_eq!(r.workflow.top_k, 5);
        assert_eq!(r.pref, Preference::Perception);
        assert_eq!(r.evolve.mini_batch, 12);
        assert_eq!(r.evolve.alpha, 0.975);
        std::fs::write(&path, r#"{"bogus": 1}"#).unwrap();
        assert!(matches!(resolve(&args), Err(Error::ConfigError(_))));
    }
}
