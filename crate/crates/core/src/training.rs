//! Losses, dataset construction, the two training phases and checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wa_tensor::{AdamW, AdamWHyper, Bound, ParamStore, Tape, Tensor};

use crate::microworld::{rollout_future, Channel, ScenarioSpec, Trajectory};
use crate::nn::V;
use crate::perception::{CurrentObservation, PerceptionBatch};
use crate::planner::{self, future_tokens, ModelConfig};
use crate::world_model::{
    oracle_future, ConditionLatent, DenoiseSchedule, FutureFeatures, GridEncoder, SimpleWm, SimpleWmConfig, WmSample,
    WM_PREFIX,
};
use crate::{CoreError, Result};

/// Logits are clamped to this magnitude before the occupancy loss.
pub const BEV_LOGIT_CLAMP: f64 = 20.0;

/// Which future source a run reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WmKind {
    Oracle,
    Simple,
    None,
}

impl WmKind {
    pub fn name(self) -> &'static str {
        match self {
            WmKind::Oracle => "oracle",
            WmKind::Simple => "simple",
            WmKind::None => "none",
        }
    }
}

impl std::str::FromStr for WmKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(WmKind::Oracle),
            "simple" => Ok(WmKind::Simple),
            "none" => Ok(WmKind::None),
            other => Err(CoreError::Contract(format!("unknown world model kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Denoising step of the oracle features seen in phase 2.
    pub t_d: u32,
    pub wm_kind: WmKind,
    pub schedule: DenoiseSchedule,
    pub simple_wm: SimpleWmConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lr: 1e-4,
            weight_decay: 0.01,
            phase1_epochs: 40,
            phase2_epochs: 10,
            batch_size: 16,
            seed: 0,
            t_d: 100,
            wm_kind: WmKind::Oracle,
            schedule: DenoiseSchedule::default(),
            simple_wm: SimpleWmConfig::default(),
            model: ModelConfig::closed_loop(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.model = cfg.model.resolved();
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn check(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(CoreError::Contract("loss weights must be non-negative".into()));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(CoreError::Contract("learning rate and batch size must be positive".into()));
        }
        if self.t_d > self.schedule.total_steps {
            return Err(CoreError::Contract(format!(
                "t_d {} exceeds the schedule length {}",
                self.t_d, self.schedule.total_steps
            )));
        }
        self.model.check()
    }

    fn hyper(&self) -> AdamWHyper {
        AdamWHyper {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWHyper::default()
        }
    }

    /// Seed of the frozen grid encoder.
    pub fn encoder_seed(&self) -> u64 {
        self.seed ^ 0xE4C0_DE00
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_bev: f64,
    pub l_traj: f64,
    pub l_score: f64,
}

/// Combines the three terms with the configured weights.
pub fn total_loss(l_bev: f64, l_traj: f64, l_score: f64, lambda1: f64, lambda2: f64) -> LossBreakdown {
    LossBreakdown {
        total: lambda1 * l_bev + lambda2 * (l_traj + l_score),
        l_bev,
        l_traj,
        l_score,
    }
}

/// Mode closest to `gt` by mean waypoint distance; lowest index wins ties.
pub fn winner_mode(modes: &[Trajectory], gt: &Trajectory) -> usize {
    let mean_l2 = |t: &Trajectory| {
        t.points
            .iter()
            .zip(&gt.points)
            .map(|(a, b)| (*a - *b).norm())
            .sum::<f64>()
            / gt.len() as f64
    };
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (m, t) in modes.iter().enumerate() {
        let d = mean_l2(t);
        if d < best_d {
            best = m;
            best_d = d;
        }
    }
    best
}

fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * a * a
    } else {
        a - 0.5
    }
}

/// Winner-takes-all regression and mode classification for one plan.
pub fn loss_traj(pred: &planner::PlanOutput, gt: &Trajectory) -> Result<(f64, f64)> {
    if pred.trajectories.iter().any(|t| t.len() != gt.len()) {
        return Err(CoreError::Contract("predicted and target horizons differ".into()));
    }
    let m = winner_mode(&pred.trajectories, gt);
    let l_traj = pred.trajectories[m]
        .points
        .iter()
        .zip(&gt.points)
        .map(|(a, b)| smooth_l1(a.x - b.x) + smooth_l1(a.y - b.y))
        .sum::<f64>()
        / gt.len() as f64;
    let s = &pred.mode_scores;
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = s.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    Ok((l_traj, lse - s[m]))
}

/// Mean binary cross-entropy of clamped logits against a {0,1} target.
pub fn loss_bev(logits: &Tensor, target: &Tensor) -> Result<f64> {
    if logits.shape() != target.shape() {
        return Err(CoreError::Contract(format!(
            "occupancy logits {:?} and target {:?} differ",
            logits.shape(),
            target.shape()
        )));
    }
    let tape = Tape::new();
    let x = tape.constant(logits.clone()).clamp(-BEV_LOGIT_CLAMP, BEV_LOGIT_CLAMP);
    Ok(x.bce_with_logits_mean(target)?.value().item())
}

/// One training example derived from a scenario's initial state.
#[derive(Clone, Debug)]
pub struct Sample {
    pub spec: ScenarioSpec,
    pub obs: CurrentObservation,
    /// Expert waypoints over the planning horizon, ego frame at t=0.
    pub expert: Trajectory,
    /// Encoded ground-truth future frames.
    pub clean_future: Vec<Tensor>,
    /// Encoding of the current grid.
    pub current_enc: Tensor,
    pub cond: ConditionLatent,
    /// Agents channel in patch-major order, `P × p²`.
    pub bev_target: Tensor,
    pub noise_seed: u64,
}

/// Per-scenario noise stream seed shared by every run on that scenario.
pub fn scenario_noise_seed(spec: &ScenarioSpec) -> u64 {
    let mut z = spec.seed ^ (spec.kind as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xA5A5_0000_0000_5A5A;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn agents_patches(obs: &CurrentObservation, patch: usize) -> Result<Tensor> {
    let g = &obs.grid;
    let (h, w) = (g.spec.height, g.spec.width);
    let (ph, pw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w);
    for pr in 0..ph {
        for pc in 0..pw {
            for r in 0..patch {
                for c in 0..patch {
                    data.push(g.get(Channel::Agents, pr * patch + r, pc * patch + c) as f64);
                }
            }
        }
    }
    Ok(Tensor::new(&[ph * pw, patch * patch], data)?)
}

impl Sample {
    pub fn build(spec: &ScenarioSpec, cfg: &ModelConfig, encoder: &GridEncoder) -> Result<Sample> {
        spec.check()?;
        let state = spec.initial_state();
        let obs = CurrentObservation::capture(spec, &state, &cfg.grid, cfg.n_rays);
        let steps = cfg.plan_steps.max(cfg.wm_frames);
        let rollout = rollout_future(spec, &state, steps, &cfg.grid)?;
        let expert = Trajectory {
            points: rollout.expert.points[..cfg.plan_steps].to_vec(),
            headings: rollout.expert.headings.as_ref().map(|h| h[..cfg.plan_steps].to_vec()),
        };
        let clean_future = rollout.grids[..cfg.wm_frames]
            .iter()
            .map(|g| encoder.encode(g))
            .collect::<Result<Vec<_>>>()?;
        Ok(Sample {
            spec: spec.clone(),
            current_enc: encoder.encode(&obs.grid)?,
            cond: ConditionLatent::from_status(&obs.ego),
            bev_target: agents_patches(&obs, cfg.patch)?,
            expert,
            clean_future,
            obs,
            noise_seed: scenario_noise_seed(spec),
        })
    }

    pub fn wm_sample(&self) -> WmSample {
        WmSample {
            current: self.current_enc.clone(),
            cond: self.cond,
            future: self.clean_future.clone(),
        }
    }
}

pub fn build_samples(specs: &[ScenarioSpec], cfg: &ModelConfig, encoder: &GridEncoder) -> Result<Vec<Sample>> {
    specs.iter().map(|s| Sample::build(s, cfg, encoder)).collect()
}

/// Future source used during a training or evaluation pass.
pub enum FutureSource<'a> {
    None,
    Oracle { schedule: &'a DenoiseSchedule, t_d: u32 },
    Fixed(&'a [FutureFeatures]),
}

impl FutureSource<'_> {
    /// Features for sample `i`; `salt` varies the oracle noise draw.
    pub fn features(&self, samples: &[Sample], i: usize, salt: u64) -> Result<Option<FutureFeatures>> {
        match self {
            FutureSource::None => Ok(None),
            FutureSource::Oracle { schedule, t_d } => Ok(Some(oracle_future(
                &samples[i].clean_future,
                *t_d,
                schedule,
                samples[i].noise_seed ^ salt,
            )?)),
            FutureSource::Fixed(f) => Ok(Some(f[i].clone())),
        }
    }
}

/// Losses for a batch, still on the tape.
pub struct BatchLoss<'t> {
    pub total: V<'t>,
    pub breakdown: LossBreakdown,
    pub winners: Vec<usize>,
}

/// Forward pass and Eq.-style weighted loss over `idx`.
pub fn batch_loss<'t>(
    b: &Bound<'_, 't, f64>,
    cfg: &TrainConfig,
    samples: &[Sample],
    idx: &[usize],
    futures: Option<&[FutureFeatures]>,
) -> Result<BatchLoss<'t>> {
    let m = &cfg.model;
    let obs: Vec<&CurrentObservation> = idx.iter().map(|&i| &samples[i].obs).collect();
    let batch = PerceptionBatch::new(&obs, m.patch)?;
    let tokens = match futures {
        Some(f) => Some(future_tokens(&f.iter().collect::<Vec<_>>())?),
        None => None,
    };
    let out = planner::forward(b, m, &batch, tokens.as_ref())?;
    let n = idx.len();
    let (modes, t_f) = (m.modes, m.plan_steps);
    let w = out.decoded.waypoints.value();
    let plans = planner::unpack_plans(m, &w, &out.decoded.scores.value(), n);
    let winners: Vec<usize> = idx
        .iter()
        .zip(&plans)
        .map(|(&i, p)| winner_mode(&p.trajectories, &samples[i].expert))
        .collect();
    let rows: Vec<usize> = winners
        .iter()
        .enumerate()
        .flat_map(|(s, &mw)| (0..t_f).map(move |k| (s * modes + mw) * t_f + k))
        .collect();
    let mut gt = Vec::with_capacity(n * t_f * 2);
    for &i in idx {
        for p in &samples[i].expert.points {
            gt.extend([p.x, p.y]);
        }
    }
    let gt = Tensor::new(&[n * t_f, 2], gt)?;
    let l_traj = out
        .decoded
        .waypoints
        .gather_rows(&rows)?
        .smooth_l1_sum(&gt)?
        .scale(1.0 / (n * t_f) as f64);
    let l_score = out.decoded.scores.cross_entropy_mean(&winners)?;
    let mut target = Vec::new();
    for &i in idx {
        target.extend_from_slice(samples[i].bev_target.data());
    }
    let target = Tensor::new(out.bev_logits.value().shape(), target)?;
    let l_bev = out
        .bev_logits
        .clamp(-BEV_LOGIT_CLAMP, BEV_LOGIT_CLAMP)
        .bce_with_logits_mean(&target)?;
    let total = l_bev
        .scale(cfg.lambda1)
        .add(l_traj.add(l_score)?.scale(cfg.lambda2))?;
    Ok(BatchLoss {
        breakdown: LossBreakdown {
            total: total.value().item(),
            l_bev: l_bev.value().item(),
            l_traj: l_traj.value().item(),
            l_score: l_score.value().item(),
        },
        total,
        winners,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub l_bev: f64,
    pub l_traj: f64,
    pub l_score: f64,
    pub total: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,l_bev,l_traj,l_score,total\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.step, r.l_bev, r.l_traj, r.l_score, r.total));
    }
    s
}

/// Result of a training phase. On divergence `params` hold the last
/// parameters whose loss was finite.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: Vec<LogRow>,
    /// Parameters after each epoch listed in the request, keyed by epoch.
    pub snapshots: BTreeMap<usize, ParamStore>,
    pub diverged: Option<String>,
}

fn wm_params(store: &ParamStore) -> ParamStore {
    store.with_prefix(WM_PREFIX)
}

/// Runs `epochs` of AdamW over the samples. Gradients reaching any
/// world-model parameter abort with [`CoreError::Frozen`].
fn optimise(
    cfg: &TrainConfig,
    mut params: ParamStore,
    samples: &[Sample],
    source: &FutureSource<'_>,
    epochs: usize,
    phase: u64,
    snapshot_at: &[usize],
) -> Result<TrainOutcome> {
    if samples.is_empty() && epochs > 0 {
        return Err(CoreError::Contract("training needs at least one sample".into()));
    }
    let mut opt = AdamW::new(cfg.hyper());
    let mut log = Vec::new();
    let mut snapshots = BTreeMap::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    if snapshot_at.contains(&0) {
        snapshots.insert(0, params.clone());
    }
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (phase << 56) ^ (epoch as u64).wrapping_mul(0x9E37_79B9));
        order.sort_unstable();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let futures = chunk
                .iter()
                .map(|&i| source.features(samples, i, epoch as u64))
                .collect::<Result<Option<Vec<_>>>>()?;
            let tape = Tape::new();
            let bound = Bound::new(&params, &tape, true);
            let loss = batch_loss(&bound, cfg, samples, chunk, futures.as_deref())?;
            step += 1;
            let bd = loss.breakdown;
            if !bd.total.is_finite() {
                drop(bound);
                return Ok(TrainOutcome {
                    params,
                    log,
                    snapshots,
                    diverged: Some(format!("non-finite loss at step {step} (epoch {epoch})")),
                });
            }
            log.push(LogRow {
                step,
                l_bev: bd.l_bev,
                l_traj: bd.l_traj,
                l_score: bd.l_score,
                total: bd.total,
            });
            let grads = tape.backward(loss.total)?;
            let g = bound.collect(&grads);
            drop(bound);
            if let Some(name) = g.keys().find(|k| k.starts_with(WM_PREFIX)) {
                return Err(CoreError::Frozen(format!("gradient reached world-model parameter {name}")));
            }
            if g.values().any(|t| !t.is_finite()) {
                return Ok(TrainOutcome {
                    params,
                    log,
                    snapshots,
                    diverged: Some(format!("non-finite gradient at step {step} (epoch {epoch})")),
                });
            }
            let before = params.clone();
            opt.step(&mut params, &g)?;
            if params.iter().any(|(_, t)| !t.is_finite()) {
                return Ok(TrainOutcome {
                    params: before,
                    log,
                    snapshots,
                    diverged: Some(format!("non-finite parameters after step {step} (epoch {epoch})")),
                });
            }
        }
        if snapshot_at.contains(&(epoch + 1)) {
            snapshots.insert(epoch + 1, params.clone());
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        snapshots,
        diverged: None,
    })
}

/// Fresh phase-1 parameters plus the frozen grid encoder.
pub fn init_params(cfg: &TrainConfig) -> Result<ParamStore> {
    let mut store = planner::init_phase1(&cfg.model, cfg.seed)?;
    GridEncoder::new(cfg.model.patch, cfg.model.wm_channels, cfg.encoder_seed()).register(&mut store);
    Ok(store)
}

/// Phase 1: current-only planner trained for `phase1_epochs`.
pub fn train_phase1(cfg: &TrainConfig, samples: &[Sample], snapshot_at: &[usize]) -> Result<TrainOutcome> {
    cfg.check()?;
    let params = init_params(cfg)?;
    if planner::has_phase2(&params) {
        return Err(CoreError::Contract("phase 1 must start without the future stage".into()));
    }
    optimise(cfg, params, samples, &FutureSource::None, cfg.phase1_epochs, 1, snapshot_at)
}

/// Precomputed simple-world-model predictions for every sample.
pub fn simple_predictions(wm: &SimpleWm, samples: &[Sample]) -> Result<Vec<FutureFeatures>> {
    samples.iter().map(|s| wm.predict(&s.current_enc, &s.cond)).collect()
}

/// Phase 2: attaches the future stage to a phase-1 model and trains every
/// non-world-model parameter with the configured world model frozen.
pub fn train_phase2(cfg: &TrainConfig, init: &ParamStore, samples: &[Sample]) -> Result<TrainOutcome> {
    cfg.check()?;
    let mut params = init.clone();
    if planner::has_phase2(&params) {
        return Err(CoreError::Contract("initial checkpoint already has the future stage".into()));
    }
    planner::attach_phase2(&mut params, &cfg.model, cfg.seed)?;
    let predictions;
    let source = match cfg.wm_kind {
        WmKind::Oracle => FutureSource::Oracle {
            schedule: &cfg.schedule,
            t_d: cfg.t_d,
        },
        WmKind::Simple => {
            let data: Vec<WmSample> = samples.iter().map(Sample::wm_sample).collect();
            let wm = SimpleWm::fit(&data, &cfg.simple_wm)?;
            params.extend(wm.params.clone());
            predictions = simple_predictions(&wm, samples)?;
            FutureSource::Fixed(&predictions)
        }
        WmKind::None => {
            return Err(CoreError::Contract("phase 2 needs a world model (oracle or simple)".into()));
        }
    };
    let frozen = wm_params(&params);
    let out = optimise(cfg, params, samples, &source, cfg.phase2_epochs, 2, &[])?;
    let drift = frozen.abs_diff(&wm_params(&out.params));
    if drift != Some(0.0) {
        return Err(CoreError::Frozen(format!("world-model parameters drifted by {drift:?}")));
    }
    Ok(out)
}

/// Mean losses over a sample set without updating parameters.
pub fn evaluate_losses(cfg: &TrainConfig, params: &ParamStore, samples: &[Sample], source: &FutureSource<'_>) -> Result<LossBreakdown> {
    let mut acc = [0.0; 3];
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(cfg.batch_size) {
        let futures = chunk
            .iter()
            .map(|&i| source.features(samples, i, 0))
            .collect::<Result<Option<Vec<_>>>>()?;
        let tape = Tape::new();
        let bound = Bound::new(params, &tape, false);
        let l = batch_loss(&bound, cfg, samples, chunk, futures.as_deref())?.breakdown;
        let w = chunk.len() as f64;
        acc[0] += l.l_bev * w;
        acc[1] += l.l_traj * w;
        acc[2] += l.l_score * w;
    }
    let n = samples.len() as f64;
    Ok(total_loss(acc[0] / n, acc[1] / n, acc[2] / n, cfg.lambda1, cfg.lambda2))
}

const MAGIC: &[u8; 7] = b"WACKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters plus the configuration and seed that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub seed: u64,
    pub params: ParamStore,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CoreError::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, wide: bool) -> Result<usize> {
        let n = if wide { self.u64()? } else { self.u32()? as u64 };
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len() - self.pos)
            .ok_or_else(|| CoreError::Format(format!("length {n} at byte {} runs past the end", self.pos)))
    }
}

impl Checkpoint {
    pub fn new(config: TrainConfig, params: ParamStore) -> Self {
        Self {
            seed: config.seed,
            config,
            params,
        }
    }

    /// Little-endian layout: magic, version, config JSON, seed, then the
    /// name-sorted parameter table.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("config serialises");
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
            return Err(CoreError::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CoreError::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = r.len(true)?;
        let text = std::str::from_utf8(r.take(n)?).map_err(|e| CoreError::Format(format!("config is not UTF-8: {e}")))?;
        let config = TrainConfig::from_json(text).map_err(|e| CoreError::Format(format!("config echo: {e}")))?;
        let seed = r.u64()?;
        let count = r.u64()?;
        let mut params = ParamStore::new();
        let mut prev: Option<String> = None;
        for _ in 0..count {
            let n = r.len(false)?;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|e| CoreError::Format(format!("parameter name is not UTF-8: {e}")))?;
            if prev.as_ref().is_some_and(|p| *p >= name) {
                return Err(CoreError::Format(format!("parameter table not sorted at '{name}'")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len() - r.pos))
                .ok_or_else(|| CoreError::Format(format!("parameter '{name}' runs past the end")))?;
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| CoreError::Format(format!("parameter '{name}': {e}")))?;
            params.insert(name.clone(), t);
            prev = Some(name);
        }
        if r.pos != bytes.len() {
            return Err(CoreError::Format(format!("{} trailing bytes after parameter table", bytes.len() - r.pos)));
        }
        Ok(Self { config, seed, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn encoder(&self) -> Result<GridEncoder> {
        GridEncoder::from_store(&self.params, self.config.model.patch)
    }

    pub fn simple_wm(&self) -> Result<Option<SimpleWm>> {
        let m = &self.config.model;
        SimpleWm::from_store(&self.params, m.wm_channels, m.feature_rows(), m.feature_cols())
    }
}
