use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use morl_core::env::{default_config, stream};
use morl_core::imitation::BcConfig;
use morl_core::morl::{clone_program, compare_arms, evaluate_policy, load_program, run_morl, MorlConfig, RunDirectory};
use morl_core::persist::{append_jsonl, write_atomic, write_json};
use morl_core::policy::{MlpArchitecture, MlpPolicy};
use morl_core::repair::{
    apply_edits, auto_repair, check_constraints, resolve_constraints, total_violation_rate, EditScript, StateSampler,
};
use morl_core::synthesis::{extract_program, mean_return, SynthesisConfig};
use morl_core::trpo::{train, TrpoConfig};
use morl_core::MorlError;

#[derive(Debug, Parser)]
#[command(name = "morl", version, about = "Mixed symbolic/neural policy optimization for CartPole")]
struct Cli {
    /// Print results as one JSON object instead of key=value lines
    #[arg(long, global = true)]
    json: bool,

    /// Log progress to stderr (repeat for more detail)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Mean and std of episode returns for a program or a policy checkpoint
    Evaluate(EvaluateArgs),
    /// Extract a decision-tree program from a policy checkpoint
    Synthesize(SynthesizeArgs),
    /// Repair a program with an edit script or by automatic search
    Repair(RepairArgs),
    /// Check a program against behavioral constraints
    Check(CheckArgs),
    /// Clone a program into a neural policy by behavioral cloning
    Clone(CloneArgs),
    /// Finetune a policy checkpoint with TRPO
    Train(TrainArgs),
    /// Run the full policy → program → repair → clone → finetune loop
    Loop(LoopArgs),
    /// Clone several programs and compare their TRPO finetuning curves
    Compare(CompareArgs),
    /// Serve the repair-console HTTP API over a run directory
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["program", "checkpoint"])))]
struct EvaluateArgs {
    /// Program file or seed name (worst, intermediate, near_optimal)
    #[arg(long)]
    program: Option<String>,
    /// Policy checkpoint (evaluated greedily)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 25)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SynthesizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Where to write the extracted program
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    dagger_iterations: usize,
    #[arg(long, default_value_t = 20)]
    traces_per_iteration: usize,
    #[arg(long, default_value_t = 3)]
    max_depth: usize,
    #[arg(long, default_value_t = 5)]
    min_samples_leaf: usize,
    /// Episodes per iterate evaluation
    #[arg(long, default_value_t = 25)]
    eval_episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["edits", "auto"])))]
struct RepairArgs {
    /// Program file or seed name
    #[arg(long)]
    program: String,
    /// Edit script to apply
    #[arg(long)]
    edits: Option<PathBuf>,
    /// Search for a repair that satisfies the constraints
    #[arg(long, requires = "budget")]
    auto: bool,
    /// Objective evaluations allowed for --auto
    #[arg(long)]
    budget: Option<usize>,
    /// Comma-separated constraint names, or `builtin`
    #[arg(long, value_delimiter = ',', default_value = "builtin")]
    constraints: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the repaired program
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON report with the edit script and before/after checks
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SamplerKind {
    Grid,
    Uniform,
    Rollout,
}

#[derive(Debug, Args)]
struct CheckArgs {
    /// Program file or seed name
    #[arg(long)]
    program: String,
    /// Comma-separated constraint names, or `builtin`
    #[arg(long, value_delimiter = ',', default_value = "builtin")]
    constraints: Vec<String>,
    #[arg(long, value_enum, default_value_t = SamplerKind::Grid)]
    sampler: SamplerKind,
    /// Grid points per feature
    #[arg(long, default_value_t = 11)]
    points: usize,
    /// States drawn by the uniform sampler
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Episodes rolled out by the rollout sampler
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct CloneArgs {
    /// Program file or seed name
    #[arg(long)]
    program: String,
    /// Where to write the policy checkpoint
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 15_000)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    #[arg(long, default_value_t = 2_000)]
    dataset_size: usize,
    #[arg(long, default_value_t = 0.5)]
    rollout_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    holdout_fraction: f64,
    #[arg(long, default_value_t = 25)]
    eval_episodes: usize,
    /// Hidden layer widths
    #[arg(long, value_delimiter = ',', default_value = "32,32")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional JSON file for the full cloning report
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    iterations: usize,
    /// Where to write the finetuned checkpoint
    #[arg(long)]
    out: PathBuf,
    /// JSONL file receiving one record per iteration
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    kl_delta: f64,
    #[arg(long, default_value_t = 0.1)]
    fvp_damping: f64,
    #[arg(long, default_value_t = 10)]
    trajectories_per_iteration: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct LoopArgs {
    /// JSON config; omitted keys take their defaults
    #[arg(long)]
    config: PathBuf,
    #[arg(long, env = "MORL_RUN_DIR")]
    run_dir: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Comma-separated arms: seed names or program files
    #[arg(long, value_delimiter = ',', default_value = "worst,intermediate,near_optimal")]
    arms: Vec<String>,
    #[arg(long, default_value_t = 25)]
    iterations: usize,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// CSV output with header iteration,arm,seed,mean_return
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON config for cloning and TRPO settings
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report when each arm's seed-averaged return first reaches this
    #[arg(long, default_value_t = 195.0)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "MORL_RUN_DIR")]
    run_dir: PathBuf,
    #[arg(long, default_value_t = morl_service::DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
}

type Output = Vec<(&'static str, Value)>;

fn read_text(path: &Path) -> Result<String, MorlError> {
    fs::read_to_string(path).map_err(|e| MorlError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn evaluate(a: EvaluateArgs) -> Result<Output, MorlError> {
    let env = default_config();
    let mut rng = stream(a.seed);
    let (mean, std) = match (&a.program, &a.checkpoint) {
        (Some(p), _) => evaluate_policy(&load_program(p)?, &env, a.episodes, &mut rng)?,
        (None, Some(c)) => evaluate_policy(&MlpPolicy::load(c)?.greedy(), &env, a.episodes, &mut rng)?,
        (None, None) => unreachable!("clap requires a source"),
    };
    Ok(vec![("mean", json!(mean)), ("std", json!(std))])
}

fn synthesize(a: SynthesizeArgs) -> Result<Output, MorlError> {
    let cfg = SynthesisConfig {
        dagger_iterations: a.dagger_iterations,
        traces_per_iteration: a.traces_per_iteration,
        max_tree_depth: a.max_depth,
        min_samples_leaf: a.min_samples_leaf,
        eval_episodes: a.eval_episodes,
    };
    let policy = MlpPolicy::load(&a.checkpoint)?;
    let ex = extract_program(&policy.greedy(), &default_config(), &cfg, &mut stream(a.seed))?;
    write_atomic(&a.out, format!("{}\n", ex.tree.serialize_annotated()).as_bytes())?;
    let stats = ex.tree.structural_stats();
    Ok(vec![
        ("fidelity", json!(ex.fidelity)),
        ("mean_return", json!(ex.iterates[ex.best_iteration].mean_return)),
        ("best_iteration", json!(ex.best_iteration)),
        ("depth", json!(stats.depth)),
        ("nodes", json!(stats.node_count)),
    ])
}

fn repair(a: RepairArgs) -> Result<Output, MorlError> {
    let env = default_config();
    let program = load_program(&a.program)?;
    let constraints = resolve_constraints(&a.constraints)?;
    let (repaired, script) = match (&a.edits, a.budget) {
        (Some(path), _) => {
            let script = EditScript::parse(&read_text(path)?)?;
            (apply_edits(&program, &script)?, script)
        }
        (None, Some(budget)) => {
            let out = auto_repair(&program, &constraints, &env, budget, &mut stream(a.seed))?;
            (out.tree, out.script)
        }
        (None, None) => unreachable!("clap requires a mode"),
    };
    write_atomic(&a.out, format!("{}\n", repaired.serialize_annotated()).as_bytes())?;
    let sampler = StateSampler::default();
    let before = check_constraints(&program, &constraints, &sampler, &env);
    let after = check_constraints(&repaired, &constraints, &sampler, &env);
    let (ret, _) = mean_return(&repaired, &env, &mut stream(a.seed), 25);
    if let Some(path) = &a.report {
        let summary = |r: &[morl_core::repair::ViolationReport]| -> Vec<Value> {
            r.iter()
                .map(|v| json!({ "constraint": v.constraint, "violation_rate": v.violation_rate, "violations_found": v.violations_found }))
                .collect()
        };
        write_json(
            path,
            &json!({
                "edits": script.to_string(),
                "program": repaired.serialize(),
                "before": summary(&before),
                "after": summary(&after),
                "mean_return": ret,
            }),
        )?;
    }
    Ok(vec![
        ("edits", json!(script.len())),
        ("violation_rate_before", json!(total_violation_rate(&before))),
        ("violation_rate", json!(total_violation_rate(&after))),
        ("mean_return", json!(ret)),
    ])
}

fn check(a: CheckArgs, as_json: bool) -> Result<Output, MorlError> {
    let env = default_config();
    let program = load_program(&a.program)?;
    let constraints = resolve_constraints(&a.constraints)?;
    let sampler = match a.sampler {
        SamplerKind::Grid => StateSampler::Grid { points_per_dim: a.points },
        SamplerKind::Uniform => StateSampler::Uniform { n: a.samples, seed: a.seed },
        SamplerKind::Rollout => StateSampler::Rollout { episodes: a.episodes, seed: a.seed },
    };
    let reports = check_constraints(&program, &constraints, &sampler, &env);
    if !as_json {
        for r in &reports {
            println!(
                "constraint={} checked={} applicable={} violations={} violation_rate={:?}",
                r.constraint, r.sampled_states_checked, r.applicable_states_checked, r.violations_found, r.violation_rate
            );
        }
    }
    Ok(vec![
        ("total_violation_rate", json!(total_violation_rate(&reports))),
        ("reports", json!(reports)),
    ])
}

fn clone_cmd(a: CloneArgs) -> Result<Output, MorlError> {
    let env = default_config();
    let program = load_program(&a.program)?;
    let arch = MlpArchitecture::policy(a.hidden.clone());
    arch.validate()?;
    let cfg = BcConfig {
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        dataset_size: a.dataset_size,
        rollout_fraction: a.rollout_fraction,
        holdout_fraction: a.holdout_fraction,
        eval_episodes: a.eval_episodes,
        seed: a.seed,
    };
    cfg.validate()?;
    let (policy, report) = clone_program(&program, &arch, &env, &cfg, a.seed)?;
    policy.save(&a.out)?;
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    Ok(vec![
        ("final_loss", json!(report.final_loss)),
        ("holdout_agreement", json!(report.holdout_agreement)),
        ("cloned_policy_return", json!(report.cloned_policy_return)),
    ])
}

fn train_cmd(a: TrainArgs) -> Result<Output, MorlError> {
    let policy = MlpPolicy::load(&a.checkpoint)?;
    let cfg = TrpoConfig {
        kl_delta: a.kl_delta,
        fvp_damping: a.fvp_damping,
        trajectories_per_iteration: a.trajectories_per_iteration,
        ..TrpoConfig::default()
    };
    write_atomic(&a.metrics, b"")?;
    let mut last = None;
    let mut failure = None;
    let params = train(&policy.params, &policy.arch, &default_config(), &cfg, a.iterations, &mut stream(a.seed), &mut |r| {
        if let Err(e) = append_jsonl(&a.metrics, r) {
            failure.get_or_insert(e);
        }
        last = Some(r.mean_return);
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    MlpPolicy {
        arch: policy.arch,
        params,
    }
    .save(&a.out)?;
    Ok(vec![("iterations", json!(a.iterations)), ("final_mean_return", json!(last))])
}

fn loop_cmd(a: LoopArgs) -> Result<Output, MorlError> {
    let cfg = MorlConfig::load(&a.config)?;
    let report = run_morl(&cfg, &RunDirectory::new(&a.run_dir))?;
    Ok(vec![
        ("cycles", json!(report.cycles_completed)),
        ("stopping_reason", json!(report.stopping_reason)),
        ("final_mean_return", json!(report.final_mean_return)),
    ])
}

fn compare(a: CompareArgs) -> Result<Output, MorlError> {
    let cfg = match &a.config {
        Some(p) => MorlConfig::load(p)?,
        None => MorlConfig::default(),
    };
    let arms = a
        .arms
        .iter()
        .map(|name| Ok((name.clone(), load_program(name)?)))
        .collect::<Result<Vec<_>, MorlError>>()?;
    let report = compare_arms(&cfg, &arms, a.iterations, a.seeds)?;
    write_atomic(&a.out, report.to_csv().as_bytes())?;
    let summary: Vec<Value> = report
        .arms
        .iter()
        .map(|s| {
            json!({
                "arm": s.name,
                "cloned_return": s.cloned_return,
                "final_mean": s.final_mean(),
                "iterations_to_threshold": s.iterations_to_reach(a.threshold),
            })
        })
        .collect();
    Ok(vec![("threshold", json!(a.threshold)), ("arms", json!(summary))])
}

fn serve(a: ServeArgs) -> Result<Output, MorlError> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| MorlError::Io {
        path: a.run_dir.clone(),
        source: e,
    })?;
    let addr = SocketAddr::new(a.host, a.port);
    eprintln!("serving {} on http://{addr}", a.run_dir.display());
    rt.block_on(morl_service::serve(RunDirectory::new(a.run_dir), addr))?;
    Ok(Vec::new())
}

fn render(value: &Value) -> String {
    match value {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Number(n) => match n.as_f64() {
            Some(f) if n.is_f64() => format!("{f:?}"),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

fn print(output: Output, as_json: bool) {
    if as_json {
        let map: Map<String, Value> = output.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        println!("{}", Value::Object(map));
        return;
    }
    let mut line = Vec::new();
    for (k, v) in output {
        match v {
            Value::Array(items) if k != "reports" => {
                for item in items {
                    if let Value::Object(fields) = item {
                        println!("{}", fields.iter().map(|(k, v)| format!("{k}={}", render(v))).collect::<Vec<_>>().join(" "));
                    }
                }
            }
            Value::Array(_) => {}
            v => line.push(format!("{k}={}", render(&v))),
        }
    }
    if !line.is_empty() {
        println!("{}", line.join(" "));
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let json = cli.json;
    let result = match cli.command {
        Command::Evaluate(a) => evaluate(a),
        Command::Synthesize(a) => synthesize(a),
        Command::Repair(a) => repair(a),
        Command::Check(a) => check(a, json),
        Command::Clone(a) => clone_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Loop(a) => loop_cmd(a),
        Command::Compare(a) => compare(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(out) => {
            print(out, json);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
