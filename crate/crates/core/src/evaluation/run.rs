//! Closed-loop evaluation over a scenario set and the ablation sweeps.

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::metrics::{open_loop_metrics, pdms, score_detail, EpisodeTrace, OpenLoopMetrics, PdmsWeights, SubScores};
use crate::microworld::{ScenarioKind, ScenarioSpec, Trajectory};
use crate::planner::{self, PlanOutput};
use crate::training::{Checkpoint, Sample, WmKind};
use crate::world_model::{oracle_future, FutureFeatures, SimpleWm};
use crate::{CoreError, Result};

/// Scenarios evaluated together, addressed by integer id.
#[derive(Clone, Debug)]
pub struct ScenarioSet {
    pub entries: Vec<(u64, ScenarioSpec)>,
}

impl ScenarioSet {
    pub fn new(mut entries: Vec<(u64, ScenarioSpec)>) -> Self {
        entries.sort_by_key(|(id, _)| *id);
        Self { entries }
    }

    pub fn from_specs(specs: Vec<ScenarioSpec>) -> Self {
        Self::new(specs.into_iter().enumerate().map(|(i, s)| (i as u64, s)).collect())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// SHA-256 over ids and canonical scenario JSON, in id order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (id, spec) in &self.entries {
            h.update(id.to_le_bytes());
            h.update(serde_json::to_vec(spec).expect("scenario serialises"));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.entries.iter().map(|(_, s)| s.seed).collect()
    }
}

/// Which planner produces the executed trajectory.
#[derive(Clone, Copy, Debug)]
pub enum Planner<'a> {
    Model { ckpt: &'a Checkpoint, wm: WmKind, t_d: u32 },
    /// Replays the expert rollout; the shortcut used to validate scoring.
    Expert,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub scenario_id: u64,
    pub seed: u64,
    pub kind: ScenarioKind,
    pub scores: SubScores,
    pub pdms: f64,
    pub open_loop: OpenLoopMetrics,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Means {
    pub nc: f64,
    pub dac: f64,
    pub ttc: f64,
    pub comf: f64,
    pub ep: f64,
    pub pdms: f64,
    pub l2_1s: f64,
    pub l2_2s: f64,
    pub l2_3s: f64,
    pub l2_avg: f64,
    pub col_1s: f64,
    pub col_2s: f64,
    pub col_3s: f64,
    pub col_avg: f64,
}

impl Means {
    fn values(r: &EvalRow) -> [f64; 14] {
        let s = &r.scores;
        let o = &r.open_loop;
        [
            s.nc,
            s.dac,
            s.ttc,
            s.comf,
            s.ep,
            r.pdms,
            o.l2[0],
            o.l2[1],
            o.l2[2],
            o.l2_avg,
            o.collision[0],
            o.collision[1],
            o.collision[2],
            o.collision_avg,
        ]
    }

    /// Plain means over rows without an error, folded in id order.
    pub fn of(rows: &[EvalRow]) -> Means {
        let ok: Vec<&EvalRow> = rows.iter().filter(|r| r.error.is_none()).collect();
        let mut acc = [0.0; 14];
        for r in &ok {
            for (a, v) in acc.iter_mut().zip(Self::values(r)) {
                *a += v;
            }
        }
        let n = ok.len().max(1) as f64;
        let m = acc.map(|a| a / n);
        Means {
            nc: m[0],
            dac: m[1],
            ttc: m[2],
            comf: m[3],
            ep: m[4],
            pdms: m[5],
            l2_1s: m[6],
            l2_2s: m[7],
            l2_3s: m[8],
            l2_avg: m[9],
            col_1s: m[10],
            col_2s: m[11],
            col_3s: m[12],
            col_avg: m[13],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub means: Means,
    pub evaluated: usize,
    pub errors: usize,
    pub weights: PdmsWeights,
    pub scenario_hash: String,
    pub scenario_seeds: Vec<u64>,
    pub model_seed: Option<u64>,
    pub wm_kind: Option<WmKind>,
    pub t_d: Option<u32>,
}

pub const REPORT_HEADER: &str =
    "scenario_id,seed,nc,dac,ttc,comf,ep,pdms,l2_1s,l2_2s,l2_3s,col_1s,col_2s,col_3s,error_flag";

fn row_fields(r: &EvalRow) -> String {
    let v = Means::values(r);
    let pick = [0, 1, 2, 3, 4, 5, 6, 7, 8, 10, 11, 12];
    let mut s = format!("{},{}", r.scenario_id, r.seed);
    for &i in &pick {
        if r.error.is_some() {
            s.push_str(",nan");
        } else {
            s.push_str(&format!(",{}", v[i]));
        }
    }
    s.push_str(if r.error.is_some() { ",1" } else { ",0" });
    s
}

impl EvalReport {
    pub fn csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            s.push_str(&row_fields(r));
            s.push('\n');
        }
        s
    }

    /// Summary JSON: means, weights, seeds and configuration.
    pub fn summary_json(&self) -> String {
        let errors: Vec<serde_json::Value> = self
            .rows
            .iter()
            .filter_map(|r| {
                r.error
                    .as_ref()
                    .map(|e| serde_json::json!({ "scenario_id": r.scenario_id, "error": e }))
            })
            .collect();
        let v = serde_json::json!({
            "means": self.means,
            "weights": self.weights,
            "scenario_count": self.rows.len(),
            "evaluated": self.evaluated,
            "errors": self.errors,
            "error_rows": errors,
            "scenario_hash": self.scenario_hash,
            "scenario_seeds": self.scenario_seeds,
            "model_seed": self.model_seed,
            "wm_kind": self.wm_kind,
            "t_d": self.t_d,
        });
        serde_json::to_string_pretty(&v).expect("summary serialises")
    }
}

const PLAN_BATCH: usize = 32;

fn error_row(id: u64, spec: &ScenarioSpec, err: &CoreError) -> EvalRow {
    EvalRow {
        scenario_id: id,
        seed: spec.seed,
        kind: spec.kind,
        scores: SubScores {
            nc: 0.0,
            dac: 0.0,
            ttc: 0.0,
            comf: 0.0,
            ep: 0.0,
        },
        pdms: 0.0,
        open_loop: OpenLoopMetrics {
            l2: [0.0; 3],
            l2_avg: 0.0,
            collision: [0.0; 3],
            collision_avg: 0.0,
        },
        error: Some(err.to_string()),
    }
}

/// Scores `local` (ego frame at t=0). `world` overrides its world-frame
/// image when the caller already holds it exactly.
fn score_row(id: u64, spec: &ScenarioSpec, local: &Trajectory, world: Option<&Trajectory>, weights: &PdmsWeights) -> Result<EvalRow> {
    let trace = EpisodeTrace::new(spec);
    let pose = spec.ego_init.pose();
    let detail = match world {
        Some(w) => score_detail(w, spec, &trace)?,
        None => score_detail(&local.to_world(&pose), spec, &trace)?,
    };
    let gt = trace.expert.to_local(&pose);
    let gt = Trajectory::new(gt.points[..local.len().min(gt.len())].to_vec());
    let open_loop = open_loop_metrics(local, &gt, spec, &trace)?;
    Ok(EvalRow {
        scenario_id: id,
        seed: spec.seed,
        kind: spec.kind,
        pdms: pdms(&detail.scores, weights),
        scores: detail.scores,
        open_loop,
        error: None,
    })
}

/// Future source resolved from a checkpoint for evaluation.
enum EvalFuture {
    None,
    Oracle,
    Simple(SimpleWm),
}

fn resolve_future(ckpt: &Checkpoint, wm: WmKind) -> Result<EvalFuture> {
    let phase2 = planner::has_phase2(&ckpt.params);
    match wm {
        WmKind::None => Ok(EvalFuture::None),
        _ if !phase2 => Err(CoreError::Contract(format!(
            "world model '{}' requested for a checkpoint without the future stage",
            wm.name()
        ))),
        WmKind::Oracle => Ok(EvalFuture::Oracle),
        WmKind::Simple => ckpt
            .simple_wm()?
            .map(EvalFuture::Simple)
            .ok_or_else(|| CoreError::Contract("checkpoint carries no simple world model".into())),
    }
}

fn model_plans(ckpt: &Checkpoint, future: &EvalFuture, t_d: u32, samples: &[&Sample]) -> Result<Vec<PlanOutput>> {
    let cfg = &ckpt.config.model;
    let futures: Option<Vec<FutureFeatures>> = match future {
        EvalFuture::None => None,
        EvalFuture::Oracle => Some(
            samples
                .iter()
                .map(|s| oracle_future(&s.clean_future, t_d, &ckpt.config.schedule, s.noise_seed))
                .collect::<Result<_>>()?,
        ),
        EvalFuture::Simple(wm) => Some(
            samples
                .iter()
                .map(|s| wm.predict(&s.current_enc, &s.cond))
                .collect::<Result<_>>()?,
        ),
    };
    let obs: Vec<_> = samples.iter().map(|s| &s.obs).collect();
    let refs: Option<Vec<&FutureFeatures>> = futures.as_ref().map(|f| f.iter().collect());
    planner::plan_batch(&ckpt.params, cfg, &obs, refs.as_deref())
}

/// Plans once at t=0 for every scenario, executes the selected trajectory
/// against the scripted agents and scores it.
pub fn run_eval(planner: Planner<'_>, set: &ScenarioSet, weights: &PdmsWeights) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(CoreError::Contract("evaluation needs at least one scenario".into()));
    }
    let mut rows = Vec::with_capacity(set.len());
    match planner {
        Planner::Expert => {
            for (id, spec) in &set.entries {
                let trace = EpisodeTrace::new(spec);
                let local = trace.expert.to_local(&spec.ego_init.pose());
                rows.push(
                    score_row(*id, spec, &local, Some(&trace.expert), weights).unwrap_or_else(|e| error_row(*id, spec, &e)),
                );
            }
        }
        Planner::Model { ckpt, wm, t_d } => {
            let future = resolve_future(ckpt, wm)?;
            ckpt.config.schedule.sigma(t_d)?;
            let encoder = ckpt.encoder()?;
            let cfg = &ckpt.config.model;
            for chunk in set.entries.chunks(PLAN_BATCH) {
                let built: Vec<Result<Sample>> = chunk.iter().map(|(_, s)| Sample::build(s, cfg, &encoder)).collect();
                let ok: Vec<&Sample> = built.iter().filter_map(|b| b.as_ref().ok()).collect();
                let mut plans = if ok.is_empty() {
                    Vec::new()
                } else {
                    match model_plans(ckpt, &future, t_d, &ok) {
                        Ok(p) => p.into_iter().map(Ok).collect(),
                        Err(_) => ok.iter().map(|s| model_plans(ckpt, &future, t_d, &[*s]).map(|mut p| p.remove(0))).collect(),
                    }
                }
                .into_iter();
                for ((id, spec), b) in chunk.iter().zip(&built) {
                    let row = match b {
                        Err(e) => error_row(*id, spec, e),
                        Ok(_) => match plans.next().expect("one plan per built sample") {
                            Ok(p) => score_row(*id, spec, p.selected_trajectory(), None, weights)
                                .unwrap_or_else(|e| error_row(*id, spec, &e)),
                            Err(e) => error_row(*id, spec, &e),
                        },
                    };
                    rows.push(row);
                }
            }
        }
    }
    let errors = rows.iter().filter(|r| r.error.is_some()).count();
    let (model_seed, wm_kind, t_d) = match planner {
        Planner::Model { ckpt, wm, t_d } => (Some(ckpt.seed), Some(wm), Some(t_d)),
        Planner::Expert => (None, None, None),
    };
    Ok(EvalReport {
        means: Means::of(&rows),
        evaluated: rows.len() - errors,
        errors,
        rows,
        weights: *weights,
        scenario_hash: set.hash(),
        scenario_seeds: set.seeds(),
        model_seed,
        wm_kind,
        t_d,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub t_d: u32,
    pub wm_kind: WmKind,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub scenario_count: usize,
    pub scenario_hash: String,
    pub scenario_seeds: Vec<u64>,
}

pub const ABLATION_HEADER: &str = "label,t_d,wm_kind,scenario_count,scenario_hash,errors,nc,dac,ttc,comf,ep,pdms,l2_1s,l2_2s,l2_3s,l2_avg,col_1s,col_2s,col_3s,col_avg";

impl AblationReport {
    fn new(rows: Vec<AblationRow>, set: &ScenarioSet) -> Result<Self> {
        let hash = set.hash();
        if rows.iter().any(|r| r.report.scenario_hash != hash) {
            return Err(CoreError::Contract("ablation rows were evaluated on different scenario sets".into()));
        }
        Ok(Self {
            rows,
            scenario_count: set.len(),
            scenario_hash: hash,
            scenario_seeds: set.seeds(),
        })
    }

    /// One line per configuration with mean metrics.
    pub fn csv(&self) -> String {
        let mut s = format!("{ABLATION_HEADER}\n");
        for r in &self.rows {
            let m = &r.report.means;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.label,
                r.t_d,
                r.wm_kind.name(),
                r.report.rows.len(),
                r.report.scenario_hash,
                r.report.errors,
                m.nc,
                m.dac,
                m.ttc,
                m.comf,
                m.ep,
                m.pdms,
                m.l2_1s,
                m.l2_2s,
                m.l2_3s,
                m.l2_avg,
                m.col_1s,
                m.col_2s,
                m.col_3s,
                m.col_avg
            ));
        }
        s
    }

    /// Per-scenario rows of every configuration, prefixed by its label.
    pub fn rows_csv(&self) -> String {
        let mut s = format!("label,t_d,wm_kind,{REPORT_HEADER}\n");
        for r in &self.rows {
            for row in &r.report.rows {
                s.push_str(&format!("{},{},{},{}\n", r.label, r.t_d, r.wm_kind.name(), row_fields(row)));
            }
        }
        s
    }
}

/// Evaluates one checkpoint at each denoising step with shared scenarios
/// and noise streams.
pub fn ablate_denoising(ckpt: &Checkpoint, steps: &[u32], set: &ScenarioSet, weights: &PdmsWeights) -> Result<AblationReport> {
    if steps.is_empty() {
        return Err(CoreError::Contract("denoising ablation needs at least one step".into()));
    }
    let rows = steps
        .iter()
        .map(|&t_d| {
            Ok(AblationRow {
                label: format!("t_d={t_d}"),
                t_d,
                wm_kind: WmKind::Oracle,
                report: run_eval(
                    Planner::Model {
                        ckpt,
                        wm: WmKind::Oracle,
                        t_d,
                    },
                    set,
                    weights,
                )?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    AblationReport::new(rows, set)
}

/// Evaluates labelled checkpoints, each with its own future source, on
/// the same scenarios.
pub fn ablate_wm_kind(runs: &[(&str, &Checkpoint, WmKind)], t_d: u32, set: &ScenarioSet, weights: &PdmsWeights) -> Result<AblationReport> {
    if runs.is_empty() {
        return Err(CoreError::Contract("world-model ablation needs at least one checkpoint".into()));
    }
    let rows = runs
        .iter()
        .map(|&(label, ckpt, wm)| {
            Ok(AblationRow {
                label: label.to_string(),
                t_d,
                wm_kind: wm,
                report: run_eval(Planner::Model { ckpt, wm, t_d }, set, weights)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    AblationReport::new(rows, set)
}
