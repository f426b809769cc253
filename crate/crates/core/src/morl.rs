//! The outer loop: policy → program → repaired program → cloned policy →
//! finetuned policy, with every artifact persisted to a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::env::{default_config, stream, Actor, EnvConfig};
use crate::error::{MorlError, Result};
use crate::imitation::{behavioral_clone, make_bc_dataset, BcConfig, BcReport};
use crate::persist::{append_jsonl, write_atomic, write_json};
use crate::policy::{init_params, MlpArchitecture, MlpPolicy};
use crate::repair::{
    apply_edits, auto_repair, builtin_constraints, check_constraints, resolve_constraints, total_violation_rate, EditScript,
    StateSampler,
};
use crate::synthesis::{extract_program, mean_return, SynthesisConfig};
use crate::tree::{seed_programs, DecisionTreePolicy};
use crate::trpo::{train, TrpoConfig, TrpoRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RepairMode {
    Scripted { path: PathBuf },
    Auto { constraints: Vec<String>, budget: usize },
    Interactive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MorlConfig {
    pub max_outer_iterations: usize,
    pub target_mean_return: f64,
    pub eval_episodes: usize,
    pub repair_mode: RepairMode,
    pub synthesis: SynthesisConfig,
    pub bc: BcConfig,
    pub trpo: TrpoConfig,
    pub trpo_iterations_per_cycle: usize,
    pub master_seed: u64,
    pub policy_hidden: Vec<usize>,
    /// Seed-program name or tree file used as the first cycle's program in
    /// place of extraction from the random initial policy.
    pub initial_program: Option<String>,
}

impl Default for MorlConfig {
    fn default() -> Self {
        Self {
            max_outer_iterations: 3,
            target_mean_return: 195.0,
            eval_episodes: 25,
            repair_mode: RepairMode::Auto {
                constraints: vec!["SameDirectionAsPole".into()],
                budget: 200,
            },
            synthesis: SynthesisConfig::default(),
            bc: BcConfig::default(),
            trpo: TrpoConfig::default(),
            trpo_iterations_per_cycle: 25,
            master_seed: 0,
            policy_hidden: vec![32, 32],
            initial_program: None,
        }
    }
}

impl MorlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iterations == 0 || self.eval_episodes == 0 || self.trpo_iterations_per_cycle == 0 {
            return Err(MorlError::InvalidConfig(
                "max_outer_iterations, eval_episodes and trpo_iterations_per_cycle must be >= 1".into(),
            ));
        }
        if let RepairMode::Auto { constraints, budget } = &self.repair_mode {
            if *budget == 0 {
                return Err(MorlError::InvalidConfig("auto repair budget must be >= 1".into()));
            }
            resolve_constraints(constraints)?;
        }
        self.synthesis.validate()?;
        self.bc.validate()?;
        self.trpo.validate()?;
        self.arch().validate()
    }

    pub fn arch(&self) -> MlpArchitecture {
        MlpArchitecture::policy(self.policy_hidden.clone())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MorlError::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Resolve a seed-program name or a path to a tree file.
pub fn load_program(source: &str) -> Result<DecisionTreePolicy> {
    if let Some(tree) = seed_programs().get(source) {
        return Ok(tree.clone());
    }
    let path = Path::new(source);
    let text = fs::read_to_string(path).map_err(|e| MorlError::io(path, e))?;
    text.parse()
}

// Per-phase seed offsets. Cycle t of phase p uses
// master_seed + SEED_STRIDE * t + p.
pub const SEED_STRIDE: u64 = 1000;
pub const SEED_INIT: u64 = 0;
pub const SEED_SYNTHESIS: u64 = 1;
pub const SEED_REPAIR: u64 = 2;
pub const SEED_BC_DATA: u64 = 3;
pub const SEED_BC_INIT: u64 = 4;
pub const SEED_BC: u64 = 5;
pub const SEED_TRPO: u64 = 6;
pub const SEED_EVAL: u64 = 7;

pub fn phase_seed(master: u64, cycle: usize, offset: u64) -> u64 {
    master.wrapping_add(SEED_STRIDE.wrapping_mul(cycle as u64)).wrapping_add(offset)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Synthesis,
    Repair,
    Imitation,
    Rl,
    Eval,
}

/// One line of metrics.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub outer_iteration: usize,
    pub phase: Phase,
    pub step: usize,
    pub mean_return: f64,
    pub std_return: f64,
    #[serde(default)]
    pub extra: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

impl RunRecord {
    pub fn new(outer_iteration: usize, phase: Phase, step: usize, (mean_return, std_return): (f64, f64)) -> Self {
        Self {
            outer_iteration,
            phase,
            step,
            mean_return,
            std_return,
            extra: BTreeMap::new(),
            wall_time: None,
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.extra.insert(key.to_string(), value.into());
        self
    }

    pub fn from_trpo(outer_iteration: usize, r: &TrpoRecord) -> Self {
        Self::new(outer_iteration, Phase::Rl, r.iteration, (r.mean_return, r.std_return))
            .with("mean_kl", r.mean_kl)
            .with("surrogate_improvement", r.surrogate_improvement)
            .with("accepted_backtrack_index", json!(r.accepted_backtrack_index))
    }
}

/// Held while a process owns a run directory.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone)]
pub struct RunDirectory {
    pub root: PathBuf,
}

impl RunDirectory {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn program(&self, t: usize) -> PathBuf {
        self.root.join("programs").join(format!("P_{t}.tree"))
    }

    pub fn repaired_program(&self, t: usize) -> PathBuf {
        self.root.join("programs").join(format!("P_{t}_repaired.tree"))
    }

    pub fn edits(&self, t: usize) -> PathBuf {
        self.root.join("edits").join(format!("E_{t}.edits"))
    }

    pub fn checkpoint(&self, t: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("pi_{t}.json"))
    }

    pub fn cloned_checkpoint(&self, t: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("pi_{t}_cloned.json"))
    }

    /// Path relative to the root, for provenance records.
    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).display().to_string()
    }

    pub fn lock(&self) -> Result<RunLock> {
        fs::create_dir_all(&self.root).map_err(|e| MorlError::io(&self.root, e))?;
        let path = self.root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(MorlError::Locked(self.root.clone())),
            Err(e) => Err(MorlError::io(&path, e)),
        }
    }

    pub fn append(&self, record: &RunRecord) -> Result<()> {
        append_jsonl(&self.metrics(), record)
    }

    /// Records with index ≥ `after`; a trailing partial line is ignored.
    pub fn read_metrics(&self, after: usize) -> Result<Vec<RunRecord>> {
        let path = self.metrics();
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(MorlError::io(&path, e)),
        };
        let complete = text.rfind('\n').map_or("", |i| &text[..i]);
        complete
            .lines()
            .skip(after)
            .map(|l| serde_json::from_str(l).map_err(MorlError::from))
            .collect()
    }
}

/// Greedy evaluation over fresh episodes.
pub fn evaluate_policy(actor: &dyn Actor, env: &EnvConfig, n_episodes: usize, rng: &mut dyn RngCore) -> Result<(f64, f64)> {
    if n_episodes == 0 {
        return Err(MorlError::InvalidConfig("evaluation needs at least one episode".into()));
    }
    Ok(mean_return(actor, env, rng, n_episodes))
}

/// Clone a program into a fresh randomly initialized policy. `seed` fixes
/// the dataset, the initialization and the holdout split.
pub fn clone_program(
    tree: &DecisionTreePolicy,
    arch: &MlpArchitecture,
    env: &EnvConfig,
    bc: &BcConfig,
    seed: u64,
) -> Result<(MlpPolicy, BcReport)> {
    let cfg = BcConfig {
        seed: phase_seed(seed, 0, SEED_BC),
        ..bc.clone()
    };
    let data = make_bc_dataset(tree, env, &cfg, &mut stream(phase_seed(seed, 0, SEED_BC_DATA)));
    let init = init_params(arch, &mut stream(phase_seed(seed, 0, SEED_BC_INIT)), 1.0);
    let (params, report) = behavioral_clone(&init, arch, tree, &data, env, &cfg)?;
    Ok((
        MlpPolicy {
            arch: arch.clone(),
            params,
        },
        report,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseEval {
    pub outer_iteration: usize,
    pub phase: Phase,
    pub mean_return: f64,
    pub std_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleProvenance {
    pub outer_iteration: usize,
    pub policy_in: String,
    pub program: String,
    pub edits: String,
    pub repaired_program: String,
    pub bc_seed: u64,
    pub bc_config: BcConfig,
    pub cloned_policy: String,
    pub trpo_seed: u64,
    pub trpo_iterations: usize,
    pub policy_out: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingReason {
    TargetReached,
    MaxOuterIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub per_phase_evals: Vec<PhaseEval>,
    pub stopping_reason: StoppingReason,
    pub cycles_completed: usize,
    pub final_mean_return: f64,
    pub provenance: Vec<CycleProvenance>,
    pub phase_seconds: BTreeMap<String, f64>,
}

fn repair_program(cfg: &MorlConfig, env: &EnvConfig, program: &DecisionTreePolicy, cycle: usize) -> Result<(DecisionTreePolicy, EditScript)> {
    match &cfg.repair_mode {
        RepairMode::Scripted { path } => {
            let text = fs::read_to_string(path).map_err(|e| MorlError::io(path, e))?;
            let script = EditScript::parse(&text)?;
            Ok((apply_edits(program, &script)?, script))
        }
        RepairMode::Auto { constraints, budget } => {
            let constraints = resolve_constraints(constraints)?;
            let mut rng = stream(phase_seed(cfg.master_seed, cycle, SEED_REPAIR));
            let out = auto_repair(program, &constraints, env, *budget, &mut rng)?;
            Ok((out.tree, out.script))
        }
        RepairMode::Interactive => Err(MorlError::InvalidConfig(
            "interactive repair needs the repair-console service; use `serve`".into(),
        )),
    }
}

struct Timer(BTreeMap<String, f64>);

impl Timer {
    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f();
        *self.0.entry(phase.to_string()).or_default() += start.elapsed().as_secs_f64();
        out
    }
}

/// Run the full loop. metrics.jsonl depends only on the config, so reruns
/// reproduce it byte for byte; timings go to report.json.
pub fn run_morl(cfg: &MorlConfig, run_dir: &RunDirectory) -> Result<FinalReport> {
    cfg.validate()?;
    if cfg.repair_mode == RepairMode::Interactive {
        return Err(MorlError::InvalidConfig(
            "interactive repair needs the repair-console service; use `serve`".into(),
        ));
    }
    let _lock = run_dir.lock()?;
    write_json(&run_dir.config(), cfg)?;
    write_atomic(&run_dir.metrics(), b"")?;

    let env = default_config();
    let arch = cfg.arch();
    let check_set = builtin_constraints();
    let mut timer = Timer(BTreeMap::new());
    let mut evals = Vec::new();
    let mut provenance = Vec::new();
    let mut policy = MlpPolicy {
        arch: arch.clone(),
        params: init_params(&arch, &mut stream(phase_seed(cfg.master_seed, 0, SEED_INIT)), 1.0),
    };
    policy.save(&run_dir.checkpoint(0))?;
    let mut stopping_reason = StoppingReason::MaxOuterIterations;
    let mut final_mean = f64::NAN;
    let mut cycles = 0;

    for t in 0..cfg.max_outer_iterations {
        let eval_seed = phase_seed(cfg.master_seed, t, SEED_EVAL);
        let record = |r: RunRecord, evals: &mut Vec<PhaseEval>| -> Result<()> {
            if r.phase != Phase::Rl {
                evals.push(PhaseEval {
                    outer_iteration: t,
                    phase: r.phase,
                    mean_return: r.mean_return,
                    std_return: r.std_return,
                });
            }
            run_dir.append(&r)
        };

        // Synthesis.
        let (program, fidelity) = timer.time("synthesis", || match (&cfg.initial_program, t) {
            (Some(source), 0) => Ok((load_program(source)?, None)),
            _ => {
                let mut rng = stream(phase_seed(cfg.master_seed, t, SEED_SYNTHESIS));
                let ex = extract_program(&policy.greedy(), &env, &cfg.synthesis, &mut rng)?;
                Ok((ex.tree, Some(ex.fidelity)))
            }
        })?;
        write_atomic(&run_dir.program(t), program.serialize_annotated().as_bytes())?;
        let stats = program.structural_stats();
        let eval = evaluate_policy(&program, &env, cfg.eval_episodes, &mut stream(eval_seed))?;
        record(
            RunRecord::new(t, Phase::Synthesis, 0, eval)
                .with("fidelity", json!(fidelity))
                .with("depth", stats.depth)
                .with("node_count", stats.node_count),
            &mut evals,
        )?;

        // Repair.
        let (repaired, script) = timer.time("repair", || repair_program(cfg, &env, &program, t))?;
        write_atomic(&run_dir.edits(t), script.to_string().as_bytes())?;
        write_atomic(&run_dir.repaired_program(t), repaired.serialize_annotated().as_bytes())?;
        let reports = check_constraints(&repaired, &check_set, &StateSampler::default(), &env);
        let eval = evaluate_policy(&repaired, &env, cfg.eval_episodes, &mut stream(eval_seed))?;
        record(
            RunRecord::new(t, Phase::Repair, 0, eval)
                .with("violation_rate", total_violation_rate(&reports))
                .with("edit_count", script.len()),
            &mut evals,
        )?;

        // Imitation.
        let bc_seed = phase_seed(cfg.master_seed, t, SEED_BC_DATA);
        let (cloned, bc_report) = timer.time("imitation", || clone_program(&repaired, &arch, &env, &cfg.bc, bc_seed))?;
        cloned.save(&run_dir.cloned_checkpoint(t))?;
        let eval = evaluate_policy(&cloned.greedy(), &env, cfg.eval_episodes, &mut stream(eval_seed))?;
        record(
            RunRecord::new(t, Phase::Imitation, cfg.bc.epochs, eval)
                .with("agreement", bc_report.holdout_agreement)
                .with("final_loss", bc_report.final_loss),
            &mut evals,
        )?;

        // Finetuning.
        let trpo_seed = phase_seed(cfg.master_seed, t, SEED_TRPO);
        let mut rl_records = Vec::with_capacity(cfg.trpo_iterations_per_cycle);
        let params = timer.time("rl", || {
            train(
                &cloned.params,
                &arch,
                &env,
                &cfg.trpo,
                cfg.trpo_iterations_per_cycle,
                &mut stream(trpo_seed),
                &mut |r| rl_records.push(RunRecord::from_trpo(t, r)),
            )
        })?;
        for r in rl_records {
            record(r, &mut evals)?;
        }
        policy = MlpPolicy {
            arch: arch.clone(),
            params,
        };
        policy.save(&run_dir.checkpoint(t + 1))?;

        // Evaluation.
        let eval = evaluate_policy(&policy.greedy(), &env, cfg.eval_episodes, &mut stream(eval_seed))?;
        record(RunRecord::new(t, Phase::Eval, 0, eval), &mut evals)?;
        provenance.push(CycleProvenance {
            outer_iteration: t,
            policy_in: run_dir.relative(&run_dir.checkpoint(t)),
            program: run_dir.relative(&run_dir.program(t)),
            edits: run_dir.relative(&run_dir.edits(t)),
            repaired_program: run_dir.relative(&run_dir.repaired_program(t)),
            bc_seed,
            bc_config: cfg.bc.clone(),
            cloned_policy: run_dir.relative(&run_dir.cloned_checkpoint(t)),
            trpo_seed,
            trpo_iterations: cfg.trpo_iterations_per_cycle,
            policy_out: run_dir.relative(&run_dir.checkpoint(t + 1)),
        });
        cycles = t + 1;
        final_mean = eval.0;
        log::info!("cycle {t}: eval mean {:.2}", eval.0);
        if eval.0 >= cfg.target_mean_return {
            stopping_reason = StoppingReason::TargetReached;
            break;
        }
    }

    let report = FinalReport {
        per_phase_evals: evals,
        stopping_reason,
        cycles_completed: cycles,
        final_mean_return: final_mean,
        provenance,
        phase_seconds: timer.0,
    };
    write_json(&run_dir.report(), &report)?;
    Ok(report)
}

/// A program cloned into a policy, ready for finetuning.
#[derive(Debug, Clone, PartialEq)]
pub struct ClonedArm {
    pub name: String,
    pub policy: MlpPolicy,
    pub report: BcReport,
}

/// Clone every arm with the same seed so only the program differs.
pub fn clone_arms(cfg: &MorlConfig, arms: &[(String, DecisionTreePolicy)]) -> Result<Vec<ClonedArm>> {
    let env = default_config();
    arms.iter()
        .map(|(name, tree)| {
            let (policy, report) = clone_program(tree, &cfg.arch(), &env, &cfg.bc, cfg.master_seed)?;
            log::info!("cloned {name}: return {:.2}", report.cloned_policy_return);
            Ok(ClonedArm {
                name: name.clone(),
                policy,
                report,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub iteration: usize,
    pub arm: String,
    pub seed: u64,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub name: String,
    pub cloned_return: f64,
    /// Per-iteration batch mean return averaged over seeds.
    pub mean_curve: Vec<f64>,
}

impl ArmSummary {
    pub fn final_mean(&self) -> f64 {
        self.mean_curve.last().copied().unwrap_or(f64::NAN)
    }

    /// Number of iterations run when the seed-averaged curve first reaches
    /// `threshold`.
    pub fn iterations_to_reach(&self, threshold: f64) -> Option<usize> {
        self.mean_curve.iter().position(|&m| m >= threshold).map(|i| i + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub iterations: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
    pub arms: Vec<ArmSummary>,
}

impl ComparisonReport {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,arm,seed,mean_return\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:?}", r.iteration, r.arm, r.seed, r.mean_return);
        }
        out
    }
}

/// Finetune each cloned arm from `n_seeds` TRPO seeds.
pub fn compare_cloned(cfg: &MorlConfig, arms: &[ClonedArm], trpo_iterations: usize, n_seeds: usize) -> Result<ComparisonReport> {
    if arms.len() < 2 || n_seeds == 0 {
        return Err(MorlError::InvalidConfig("compare needs at least two arms and one seed".into()));
    }
    if let Some(a) = arms.iter().find(|a| a.name.contains([',', '\n', '"'])) {
        return Err(MorlError::InvalidConfig(format!("arm name `{}` is not CSV-safe", a.name)));
    }
    let env = default_config();
    let seeds: Vec<u64> = (0..n_seeds).map(|s| phase_seed(cfg.master_seed, s, SEED_TRPO)).collect();
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for arm in arms {
        let mut curve = vec![0.0; trpo_iterations];
        for &seed in &seeds {
            train(
                &arm.policy.params,
                &arm.policy.arch,
                &env,
                &cfg.trpo,
                trpo_iterations,
                &mut stream(seed),
                &mut |r| {
                    curve[r.iteration] += r.mean_return / n_seeds as f64;
                    rows.push(ComparisonRow {
                        iteration: r.iteration,
                        arm: arm.name.clone(),
                        seed,
                        mean_return: r.mean_return,
                    });
                },
            )?;
        }
        log::info!("arm {}: final mean {:.2}", arm.name, curve.last().copied().unwrap_or(f64::NAN));
        summaries.push(ArmSummary {
            name: arm.name.clone(),
            cloned_return: arm.report.cloned_policy_return,
            mean_curve: curve,
        });
    }
    Ok(ComparisonReport {
        iterations: trpo_iterations,
        seeds,
        rows,
        arms: summaries,
    })
}

pub fn compare_arms(
    cfg: &MorlConfig,
    arms: &[(String, DecisionTreePolicy)],
    trpo_iterations: usize,
    n_seeds: usize,
) -> Result<ComparisonReport> {
    if arms.len() < 2 {
        return Err(MorlError::InvalidConfig("compare needs at least two arms".into()));
    }
    compare_cloned(cfg, &clone_arms(cfg, arms)?, trpo_iterations, n_seeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::WORST_TO_INTERMEDIATE_EDITS;

    fn quick() -> MorlConfig {
        MorlConfig {
            max_outer_iterations: 2,
            eval_episodes: 3,
            synthesis: SynthesisConfig {
                dagger_iterations: 2,
                traces_per_iteration: 3,
                eval_episodes: 2,
                ..Default::default()
            },
            bc: BcConfig {
                epochs: 20,
                dataset_size: 100,
                eval_episodes: 2,
                ..Default::default()
            },
            trpo: TrpoConfig {
                trajectories_per_iteration: 2,
                value_fit_epochs: 2,
                ..Default::default()
            },
            trpo_iterations_per_cycle: 2,
            repair_mode: RepairMode::Auto {
                constraints: vec!["SameDirectionAsPole".into()],
                budget: 5,
            },
            policy_hidden: vec![8],
            ..Default::default()
        }
    }

    #[test]
    fn config_rejects_unknown_keys_and_round_trips() {
        assert!(MorlConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(MorlConfig::from_json(r#"{"bc": {"epoch": 1}}"#).is_err());
        let cfg = quick();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(MorlConfig::from_json(&text).unwrap(), cfg);
        let scripted = MorlConfig::from_json(r#"{"repair_mode": {"scripted": {"path": "leaf_flips.edits"}}}"#).unwrap();
        assert_eq!(scripted.repair_mode, RepairMode::Scripted { path: "leaf_flips.edits".into() });
        let interactive = MorlConfig::from_json(r#"{"repair_mode": "interactive"}"#).unwrap();
        assert_eq!(interactive.repair_mode, RepairMode::Interactive);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            MorlConfig {
                max_outer_iterations: 0,
                ..quick()
            },
            MorlConfig {
                eval_episodes: 0,
                ..quick()
            },
            MorlConfig {
                repair_mode: RepairMode::Auto {
                    constraints: vec!["Nope".into()],
                    budget: 3,
                },
                ..quick()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn interactive_is_rejected_headless() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = MorlConfig {
            repair_mode: RepairMode::Interactive,
            ..quick()
        };
        assert!(matches!(run_morl(&cfg, &RunDirectory::new(dir.path())), Err(MorlError::InvalidConfig(_))));
    }

    #[test]
    fn run_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let rd = RunDirectory::new(dir.path());
        let report = run_morl(&quick(), &rd).unwrap();
        assert_eq!(report.cycles_completed, 2);
        assert_eq!(report.stopping_reason, StoppingReason::MaxOuterIterations);
        for t in 0..2 {
            for p in [rd.program(t), rd.repaired_program(t), rd.edits(t), rd.checkpoint(t), rd.cloned_checkpoint(t)] {
                assert!(p.exists(), "{}", p.display());
            }
            let repaired: DecisionTreePolicy = fs::read_to_string(rd.repaired_program(t)).unwrap().parse().unwrap();
            let program: DecisionTreePolicy = fs::read_to_string(rd.program(t)).unwrap().parse().unwrap();
            let script = EditScript::parse(&fs::read_to_string(rd.edits(t)).unwrap()).unwrap();
            assert_eq!(apply_edits(&program, &script).unwrap(), repaired);
        }
        assert!(rd.checkpoint(2).exists());
        assert!(!dir.path().join(".lock").exists());
        let metrics = rd.read_metrics(0).unwrap();
        // synthesis, repair, imitation, 2 rl, eval per cycle
        assert_eq!(metrics.len(), 12);
        assert_eq!(metrics[3].phase, Phase::Rl);
        assert_eq!(rd.read_metrics(10).unwrap(), metrics[10..].to_vec());
        let saved: FinalReport = serde_json::from_str(&fs::read_to_string(rd.report()).unwrap()).unwrap();
        assert_eq!(saved.provenance.len(), 2);
        assert_eq!(saved.provenance[1].policy_in, "checkpoints/pi_1.json");
        let cfg: MorlConfig = MorlConfig::load(&rd.config()).unwrap();
        assert_eq!(cfg, quick());
    }

    #[test]
    fn early_stop_after_target() {
        let dir = tempfile::tempdir().unwrap();
        let rd = RunDirectory::new(dir.path());
        let cfg = MorlConfig {
            target_mean_return: 0.0,
            ..quick()
        };
        let report = run_morl(&cfg, &rd).unwrap();
        assert_eq!(report.cycles_completed, 1);
        assert_eq!(report.stopping_reason, StoppingReason::TargetReached);
        assert_eq!(rd.read_metrics(0).unwrap().last().unwrap().phase, Phase::Eval);
        assert!(!rd.program(1).exists());
    }

    #[test]
    fn locked_directory_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let rd = RunDirectory::new(dir.path());
        let _held = rd.lock().unwrap();
        assert!(matches!(run_morl(&quick(), &rd), Err(MorlError::Locked(_))));
    }

    #[test]
    fn scripted_repair_from_seed_program() {
        let dir = tempfile::tempdir().unwrap();
        let edits = dir.path().join("leaf_flips.edits");
        fs::write(&edits, WORST_TO_INTERMEDIATE_EDITS).unwrap();
        let rd = RunDirectory::new(dir.path().join("run"));
        let cfg = MorlConfig {
            max_outer_iterations: 1,
            repair_mode: RepairMode::Scripted { path: edits },
            initial_program: Some("worst".into()),
            eval_episodes: 25,
            ..quick()
        };
        let report = run_morl(&cfg, &rd).unwrap();
        let repair = report.per_phase_evals.iter().find(|e| e.phase == Phase::Repair).unwrap();
        assert!((64.0..=200.0).contains(&repair.mean_return), "{}", repair.mean_return);
        let missing = MorlConfig {
            repair_mode: RepairMode::Scripted { path: dir.path().join("nope") },
            ..cfg
        };
        let rd2 = RunDirectory::new(dir.path().join("run2"));
        assert!(matches!(run_morl(&missing, &rd2), Err(MorlError::Io { .. })));
    }

    #[test]
    fn partial_metrics_line_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let rd = RunDirectory::new(dir.path());
        rd.append(&RunRecord::new(0, Phase::Eval, 0, (1.0, 0.0))).unwrap();
        let mut f = OpenOptions::new().append(true).open(rd.metrics()).unwrap();
        std::io::Write::write_all(&mut f, b"{\"outer_iter").unwrap();
        assert_eq!(rd.read_metrics(0).unwrap().len(), 1);
    }

    #[test]
    fn comparison_csv_shape() {
        let cfg = quick();
        let seeds = seed_programs();
        let arms = vec![("worst".to_string(), seeds.worst), ("near_optimal".to_string(), seeds.near_optimal)];
        let report = compare_arms(&cfg, &arms, 3, 1).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iteration,arm,seed,mean_return");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert_eq!(report.arm("worst").unwrap().mean_curve.len(), 3);
        assert!(compare_arms(&cfg, &arms[..1], 3, 1).is_err());
    }

    #[test]
    fn evaluate_policy_conventions() {
        let env = default_config();
        let near = seed_programs().near_optimal;
        assert_eq!(evaluate_policy(&near, &env, 1, &mut stream(0)).unwrap().1, 0.0);
        assert!(evaluate_policy(&near, &env, 0, &mut stream(0)).is_err());
    }
}
