//! Dataset persistence and run drivers shared by the command line and the
//! integration tests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::evaluation::{ablate_denoising, ablate_wm_kind, run_eval, AblationReport, EvalReport, PdmsWeights, Planner, ScenarioSet};
use crate::microworld::{generate_scenario, ScenarioKind, ScenarioSpec, FORMAT_VERSION};
use crate::planner;
use crate::training::{build_samples, train_phase1, train_phase2, Checkpoint, TrainConfig, TrainOutcome, WmKind};
use crate::{CoreError, Result};

pub const MANIFEST: &str = "manifest.json";

pub fn scenario_file(id: u64) -> String {
    format!("scenario_{id:05}.json")
}

/// Seed of scenario `id` in a set generated from `seed`.
pub fn scenario_seed(seed: u64, id: u64) -> u64 {
    let mut z = seed.wrapping_add(id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub kind: ScenarioKind,
    pub seed: u64,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub count: u64,
    pub seed: u64,
    pub kinds: Vec<ScenarioKind>,
    pub scenarios: Vec<ManifestEntry>,
}

/// Scenario `id` cycles through `kinds`, so every kind appears
/// `count / kinds.len()` or one more times.
pub fn plan_scenarios(count: u64, seed: u64, kinds: &[ScenarioKind]) -> Result<Vec<(u64, ScenarioSpec)>> {
    if kinds.is_empty() {
        return Err(CoreError::Contract("at least one scenario kind is required".into()));
    }
    Ok((0..count)
        .map(|id| {
            let kind = kinds[(id % kinds.len() as u64) as usize];
            (id, generate_scenario(scenario_seed(seed, id), kind))
        })
        .collect())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serialises");
    s.push(b'\n');
    s
}

pub fn gen_scenarios(dir: &Path, count: u64, seed: u64, kinds: &[ScenarioKind]) -> Result<Manifest> {
    let specs = plan_scenarios(count, seed, kinds)?;
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut scenarios = Vec::with_capacity(specs.len());
    for (id, spec) in &specs {
        let file = scenario_file(*id);
        write(&dir.join(&file), &pretty(spec))?;
        scenarios.push(ManifestEntry {
            id: *id,
            kind: spec.kind,
            seed: spec.seed,
            file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        count,
        seed,
        kinds: kinds.to_vec(),
        scenarios,
    };
    write(&dir.join(MANIFEST), &pretty(&manifest))?;
    Ok(manifest)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))
}

pub fn load_scenario(path: &Path) -> Result<ScenarioSpec> {
    let spec: ScenarioSpec = serde_json::from_str(&read(path)?)
        .map_err(|e| CoreError::InvalidScenario(format!("{}: {e}", path.display())))?;
    spec.check()?;
    Ok(spec)
}

pub fn load_scenarios(dir: &Path) -> Result<ScenarioSet> {
    let manifest: Manifest = serde_json::from_str(&read(&dir.join(MANIFEST))?)
        .map_err(|e| CoreError::Format(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CoreError::Format(format!("unsupported manifest version {}", manifest.format_version)));
    }
    let entries = manifest
        .scenarios
        .iter()
        .map(|e| Ok((e.id, load_scenario(&dir.join(&e.file))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioSet::new(entries))
}

/// Training run description: the optimiser and model settings plus the
/// scenario directory, relative to the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenarios: PathBuf,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read(path)?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.train.model = cfg.train.model.resolved();
        cfg.train.check()?;
        Ok(cfg)
    }
}

/// Everything needed to repeat a training run.
#[derive(Clone, Debug, Serialize)]
pub struct TrainEcho<'a> {
    pub command: &'static str,
    pub phase: u8,
    pub scenarios: &'a Path,
    pub scenario_hash: String,
    pub scenario_count: usize,
    pub init: Option<&'a Path>,
    pub init_hash: Option<String>,
    pub out: &'a Path,
    pub train: &'a TrainConfig,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub outcome: TrainOutcome,
}

/// Trains one phase. Phase 2 reuses the frozen encoder and planner of the
/// initial checkpoint, whose model settings must match the config.
pub fn train(cfg: &TrainConfig, phase: u8, init: Option<&Checkpoint>, set: &ScenarioSet) -> Result<TrainRun> {
    let specs: Vec<ScenarioSpec> = set.entries.iter().map(|(_, s)| s.clone()).collect();
    let outcome = match (phase, init) {
        (1, None) => {
            let params = crate::training::init_params(cfg)?;
            let encoder = crate::world_model::GridEncoder::from_store(&params, cfg.model.patch)?;
            let samples = build_samples(&specs, &cfg.model, &encoder)?;
            train_phase1(cfg, &samples, &[])?
        }
        (1, Some(_)) => return Err(CoreError::Contract("phase 1 does not take an initial checkpoint".into())),
        (2, Some(ck)) => {
            if ck.config.model != cfg.model {
                return Err(CoreError::Contract("model settings differ from the initial checkpoint".into()));
            }
            let samples = build_samples(&specs, &cfg.model, &ck.encoder()?)?;
            train_phase2(cfg, &ck.params, &samples)?
        }
        (2, None) => return Err(CoreError::Contract("phase 2 requires an initial checkpoint".into())),
        (p, _) => return Err(CoreError::Contract(format!("unknown phase {p}"))),
    };
    Ok(TrainRun {
        checkpoint: Checkpoint::new(cfg.clone(), outcome.params.clone()),
        outcome,
    })
}

/// Evaluation options echoed next to every report.
#[derive(Clone, Debug, Serialize)]
pub struct EvalEcho<'a> {
    pub command: &'static str,
    pub checkpoints: Vec<(&'a str, &'a Path, String)>,
    pub scenarios: &'a Path,
    pub scenario_hash: String,
    pub t_d: Option<u32>,
    pub steps: Option<&'a [u32]>,
    pub wm: Option<WmKind>,
    pub mode: Option<&'a str>,
    pub weights: PdmsWeights,
    pub out: &'a Path,
}

pub fn eval(ckpt: &Checkpoint, set: &ScenarioSet, wm: WmKind, t_d: u32, weights: &PdmsWeights) -> Result<EvalReport> {
    run_eval(Planner::Model { ckpt, wm, t_d }, set, weights)
}

/// The future source a checkpoint was trained to read.
pub fn native_wm(ckpt: &Checkpoint) -> WmKind {
    if planner::has_phase2(&ckpt.params) {
        ckpt.config.wm_kind
    } else {
        WmKind::None
    }
}

pub fn ablate_steps(ckpt: &Checkpoint, steps: &[u32], set: &ScenarioSet, weights: &PdmsWeights) -> Result<AblationReport> {
    ablate_denoising(ckpt, steps, set, weights)
}

pub fn ablate_wm(runs: &[(String, Checkpoint)], t_d: u32, set: &ScenarioSet, weights: &PdmsWeights) -> Result<AblationReport> {
    let refs: Vec<(&str, &Checkpoint, WmKind)> = runs.iter().map(|(l, c)| (l.as_str(), c, native_wm(c))).collect();
    ablate_wm_kind(&refs, t_d, set, weights)
}

/// `path` with its extension replaced by `suffix` (e.g. `.summary.json`).
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
    }
    write(path, text.as_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_text(path, std::str::from_utf8(&pretty(v)).expect("JSON is UTF-8"))
}
