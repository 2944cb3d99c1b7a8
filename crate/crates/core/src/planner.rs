//! Time-indexed state queries decoded into multi-mode trajectories,
//! reading current tokens first and compressed future tokens second.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wa_tensor::{sinusoidal_grid, sinusoidal_table, ParamStore, Tensor};

use crate::geometry::Vec2;
use crate::microworld::{GridSpec, Trajectory};
use crate::nn::{self, B, V};
use crate::perception::{encode_current, init_encoder, CurrentFeatures, PerceptionBatch};
use crate::world_model::FutureFeatures;
use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub modes: usize,
    pub plan_steps: usize,
    pub wm_frames: usize,
    pub wm_queries: usize,
    pub wm_channels: usize,
    pub patch: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub resolution: f64,
    pub n_rays: usize,
    pub enc_blocks: usize,
    pub enc_mlp_ratio: usize,
    pub dec_mlp_ratio: usize,
    /// 2-D sinusoidal positions on patch tokens.
    pub positional: bool,
    /// Sinusoidal time embeddings on state queries and future tokens.
    pub time_embeddings: bool,
    #[serde(skip)]
    pub grid: GridSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::closed_loop()
    }
}

impl ModelConfig {
    pub fn closed_loop() -> Self {
        let grid = GridSpec::default();
        Self {
            dim: 64,
            heads: 4,
            modes: 20,
            plan_steps: 8,
            wm_frames: 8,
            wm_queries: 4,
            wm_channels: 32,
            patch: 8,
            grid_height: grid.height,
            grid_width: grid.width,
            resolution: grid.resolution,
            n_rays: 32,
            enc_blocks: 2,
            enc_mlp_ratio: 4,
            dec_mlp_ratio: 2,
            positional: true,
            time_embeddings: true,
            grid,
        }
    }

    pub fn open_loop() -> Self {
        Self {
            modes: 6,
            ..Self::closed_loop()
        }
    }

    /// Restores the derived grid after deserialisation.
    pub fn resolved(mut self) -> Self {
        self.grid = GridSpec::new(self.grid_height, self.grid_width, self.resolution);
        self
    }

    pub fn with_grid(mut self, height: usize, width: usize, resolution: f64) -> Self {
        self.grid_height = height;
        self.grid_width = width;
        self.resolution = resolution;
        self.resolved()
    }

    pub fn feature_rows(&self) -> usize {
        self.grid.height / self.patch
    }

    pub fn feature_cols(&self) -> usize {
        self.grid.width / self.patch
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Contract(m.to_string()));
        if self.modes == 0 || self.plan_steps == 0 || self.wm_frames == 0 || self.wm_queries == 0 {
            return bad("modes, steps, frames and frame queries must be positive");
        }
        if self.dim % 4 != 0 || self.dim % self.heads != 0 {
            return bad("model width must be a multiple of 4 and of the head count");
        }
        if self.grid.height % self.patch != 0 || self.grid.width % self.patch != 0 {
            return bad("grid must be divisible by the patch size");
        }
        Ok(())
    }
}

/// Parameters of the phase-1 model: encoder, first decoding stage, heads.
pub fn init_phase1(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c = cfg.dim;
    init_encoder(&mut store, cfg, &mut rng);
    store.insert("plan.queries", nn::randn(&[cfg.modes * cfg.plan_steps, c], 1.0, &mut rng));
    nn::init_norm(&mut store, "plan.s1.nq", c);
    nn::init_norm(&mut store, "plan.s1.nkv", c);
    nn::init_attention(&mut store, "plan.s1.attn", c, false, &mut rng);
    nn::init_norm(&mut store, "plan.s1.n2", c);
    nn::init_mlp(&mut store, "plan.s1.mlp", c, cfg.dec_mlp_ratio, false, &mut rng);
    nn::init_norm(&mut store, "plan.dec.n", c);
    nn::init_linear(&mut store, "plan.dec.fc1", c, c, false, &mut rng);
    nn::init_linear(&mut store, "plan.dec.fc2", c, 2, false, &mut rng);
    nn::init_norm(&mut store, "plan.score.n", c);
    nn::init_linear(&mut store, "plan.score", c, 1, false, &mut rng);
    nn::init_linear(&mut store, "aux.bev", c, cfg.patch * cfg.patch, false, &mut rng);
    Ok(store)
}

/// Adds the future-reading parameters. Every residual branch that feeds the
/// state queries ends in a zero projection, so outputs are unchanged until
/// training moves them.
pub fn attach_phase2(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<()> {
    if store.contains("qf.queries") {
        return Err(CoreError::Contract("future-reading stage already attached".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0002);
    let c = cfg.dim;
    nn::init_linear(store, "qf.in", cfg.wm_channels, c, false, &mut rng);
    store.insert("qf.queries", nn::randn(&[cfg.wm_queries, c], 0.02, &mut rng));
    nn::init_norm(store, "qf.sp.nq", c);
    nn::init_norm(store, "qf.sp.nkv", c);
    nn::init_attention(store, "qf.sp.attn", c, false, &mut rng);
    nn::init_norm(store, "qf.sp.n2", c);
    nn::init_mlp(store, "qf.sp.mlp", c, cfg.dec_mlp_ratio, false, &mut rng);
    nn::init_self_block(store, "qf.tp", c, cfg.dec_mlp_ratio, false, &mut rng);
    nn::init_norm(store, "qf.nout", c);
    nn::init_linear(store, "qf.out", c, c, true, &mut rng);
    nn::init_norm(store, "plan.s2.nkv", c);
    nn::init_norm(store, "plan.s2.nq", c);
    nn::init_attention(store, "plan.s2.attn", c, true, &mut rng);
    nn::init_norm(store, "plan.s2.n2", c);
    nn::init_mlp(store, "plan.s2.mlp", c, cfg.dec_mlp_ratio, true, &mut rng);
    Ok(())
}

pub fn has_phase2(store: &ParamStore) -> bool {
    store.contains("qf.queries")
}

/// `rows × C` table of sinusoidal embeddings for steps `1..=rows`, or zeros.
pub fn time_table(rows: usize, cfg: &ModelConfig) -> Result<Tensor> {
    if cfg.time_embeddings {
        Ok(sinusoidal_table(1, rows, cfg.dim)?)
    } else {
        Ok(Tensor::zeros(&[rows, cfg.dim]))
    }
}

/// Future tokens for a batch: per sample, per frame, `H'·W'` rows of
/// `C_wm` features.
pub fn future_tokens(futures: &[&FutureFeatures]) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut c_wm = 0;
    for f in futures {
        let s = f.values.shape();
        let (t, c, hw) = (s[0], s[1], s[2] * s[3]);
        c_wm = c;
        for k in 0..t {
            let frame = &f.values.data()[k * c * hw..(k + 1) * c * hw];
            for i in 0..hw {
                for ch in 0..c {
                    data.push(frame[ch * hw + i]);
                }
            }
            rows += hw;
        }
    }
    Ok(Tensor::new(&[rows, c_wm], data)?)
}

/// Compresses each imagined frame into `N_wm` tokens, then mixes tokens of
/// the same index across frames. Output rows are ordered
/// (sample, frame, query).
pub fn wm_qformer<'t>(b: &B<'_, 't>, cfg: &ModelConfig, tokens: &Tensor, batch: usize) -> Result<V<'t>> {
    let tape = b.tape();
    let hw = cfg.feature_rows() * cfg.feature_cols();
    let t_wm = tokens.rows() / (batch * hw);
    if t_wm * batch * hw != tokens.rows() || t_wm == 0 {
        return Err(CoreError::Contract(format!(
            "future tokens {:?} do not split into {batch} samples of {hw}-token frames",
            tokens.shape()
        )));
    }
    let nq = cfg.wm_queries;
    let frames = batch * t_wm;
    let pos = sinusoidal_grid::<f64>(cfg.feature_rows(), cfg.feature_cols(), cfg.dim)?;
    let x = nn::linear(b, "qf.in", tape.constant(tokens.clone()))?;
    let e_wm = time_table(t_wm, cfg)?;
    let e_rows: Vec<usize> = (0..batch)
        .flat_map(|_| (0..t_wm).flat_map(|k| std::iter::repeat(k).take(nq)))
        .collect();
    let q0 = b
        .get("qf.queries")?
        .gather_rows(&nn::tile_index(nq, frames))?
        .add(tape.constant(e_wm).gather_rows(&e_rows)?)?;
    // spatial: each frame's queries read that frame only
    // positions enter keys and values, so pooled queries keep where content sits
    let kv = nn::norm(b, "qf.sp.nkv", x)?.add(tape.constant(pos).gather_rows(&nn::tile_index(hw, frames))?)?;
    let qn = nn::norm(b, "qf.sp.nq", q0)?;
    let q = q0.add(nn::attend(b, "qf.sp.attn", qn, kv, kv, cfg.heads, frames)?)?;
    let q = q.add(nn::mlp(b, "qf.sp.mlp", nn::norm(b, "qf.sp.n2", q)?)?)?;
    // temporal: regroup as (sample, query, frame)
    let to_temporal: Vec<usize> = (0..batch)
        .flat_map(|s| (0..nq).flat_map(move |n| (0..t_wm).map(move |k| (s * t_wm + k) * nq + n)))
        .collect();
    let mut back = vec![0; to_temporal.len()];
    for (i, &j) in to_temporal.iter().enumerate() {
        back[j] = i;
    }
    let qt = q.gather_rows(&to_temporal)?;
    let qt = nn::self_block(b, "qf.tp", qt, cfg.heads, batch * nq)?;
    let q = qt.gather_rows(&back)?;
    nn::linear(b, "qf.out", nn::norm(b, "qf.nout", q)?)
}

/// Refines tiled state queries over current tokens and, when given, the
/// compressed future. Returns `B·M·T_f × C`.
pub fn factorized_decode<'t>(
    b: &B<'_, 't>,
    cfg: &ModelConfig,
    current: &CurrentFeatures<'t>,
    future: Option<V<'t>>,
    batch: usize,
) -> Result<V<'t>> {
    let tape = b.tape();
    let c = cfg.dim;
    let current_c = current.tokens.shape()[1];
    if current_c != c {
        return Err(CoreError::Contract(format!("current tokens have width {current_c}, queries {c}")));
    }
    let per = cfg.modes * cfg.plan_steps;
    let q0 = b.get("plan.queries")?.gather_rows(&nn::tile_index(per, batch))?;
    let kv = nn::norm(b, "plan.s1.nkv", current.tokens)?;
    let qn = nn::norm(b, "plan.s1.nq", q0)?;
    let q = q0.add(nn::attend(b, "plan.s1.attn", qn, kv, kv, cfg.heads, batch)?)?;
    let mut q = q.add(nn::mlp(b, "plan.s1.mlp", nn::norm(b, "plan.s1.n2", q)?)?)?;
    if let Some(f) = future {
        let fc = f.shape()[1];
        if fc != c {
            return Err(CoreError::Contract(format!("future tokens have width {fc}, queries {c}")));
        }
        let rows = f.shape()[0];
        let t_wm = rows / (batch * cfg.wm_queries);
        let e_wm_rows: Vec<usize> = (0..batch)
            .flat_map(|_| (0..t_wm).flat_map(|k| std::iter::repeat(k).take(cfg.wm_queries)))
            .collect();
        // A zero compressed future normalises to exactly zero, so the
        // zero-initialised projections keep attachment output-preserving.
        let kv = nn::norm(b, "plan.s2.nkv", f)?.add(tape.constant(time_table(t_wm, cfg)?).gather_rows(&e_wm_rows)?)?;
        let e_s_rows: Vec<usize> = (0..batch * cfg.modes).flat_map(|_| 0..cfg.plan_steps).collect();
        let e_s = tape.constant(time_table(cfg.plan_steps, cfg)?).gather_rows(&e_s_rows)?;
        let qn = nn::norm(b, "plan.s2.nq", q)?.add(e_s)?;
        q = q.add(nn::attend(b, "plan.s2.attn", qn, kv, kv, cfg.heads, batch)?)?;
        q = q.add(nn::mlp(b, "plan.s2.mlp", nn::norm(b, "plan.s2.n2", q)?)?)?;
    }
    Ok(q)
}

/// Cumulative waypoints (`B·M·T_f × 2`) and mode logits (`B × M`).
pub struct DecodedVars<'t> {
    pub offsets: V<'t>,
    pub waypoints: V<'t>,
    pub scores: V<'t>,
}

pub fn decode_trajectories<'t>(b: &B<'_, 't>, cfg: &ModelConfig, queries: V<'t>, batch: usize) -> Result<DecodedVars<'t>> {
    let h = nn::norm(b, "plan.dec.n", queries)?;
    let h = nn::linear(b, "plan.dec.fc1", h)?.gelu();
    let offsets = nn::linear(b, "plan.dec.fc2", h)?;
    let waypoints = offsets.cumsum_rows(cfg.plan_steps)?;
    let pooled = queries.mean_rows(cfg.plan_steps)?;
    let scores = nn::linear(b, "plan.score", nn::norm(b, "plan.score.n", pooled)?)?.reshape(&[batch, cfg.modes])?;
    Ok(DecodedVars {
        offsets,
        waypoints,
        scores,
    })
}

/// Everything the planner produces for a batch, still on the tape.
pub struct ForwardVars<'t> {
    pub current: CurrentFeatures<'t>,
    pub decoded: DecodedVars<'t>,
    pub bev_logits: V<'t>,
}

/// Full forward. `future` holds stacked future tokens (see
/// [`future_tokens`]); `None` runs the current-only path.
pub fn forward<'t>(b: &B<'_, 't>, cfg: &ModelConfig, batch: &PerceptionBatch, future: Option<&Tensor>) -> Result<ForwardVars<'t>> {
    let n = batch.size;
    let current = encode_current(b, cfg, batch)?;
    let compressed = match future {
        Some(tokens) => {
            if !b.has("qf.queries") {
                return Err(CoreError::Contract("future features given to a model without the future stage".into()));
            }
            Some(wm_qformer(b, cfg, tokens, n)?)
        }
        None => None,
    };
    let q = factorized_decode(b, cfg, &current, compressed, n)?;
    let decoded = decode_trajectories(b, cfg, q, n)?;
    let patch_tokens = current.tokens.gather_rows(&current.patch_rows(n))?;
    let bev_logits = nn::linear(b, "aux.bev", patch_tokens)?;
    Ok(ForwardVars {
        current,
        decoded,
        bev_logits,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanOutput {
    pub trajectories: Vec<Trajectory>,
    pub mode_scores: Vec<f64>,
    pub selected: usize,
}

impl PlanOutput {
    pub fn selected_trajectory(&self) -> &Trajectory {
        &self.trajectories[self.selected]
    }
}

/// Argmax with the lowest index winning ties.
pub fn select_mode(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Splits batched decoder values into per-sample plans.
pub fn unpack_plans(cfg: &ModelConfig, waypoints: &Tensor, scores: &Tensor, batch: usize) -> Vec<PlanOutput> {
    let (m, t) = (cfg.modes, cfg.plan_steps);
    (0..batch)
        .map(|s| {
            let trajectories = (0..m)
                .map(|mode| {
                    Trajectory::new(
                        (0..t)
                            .map(|k| {
                                let r = (s * m + mode) * t + k;
                                Vec2::new(waypoints.data()[2 * r], waypoints.data()[2 * r + 1])
                            })
                            .collect(),
                    )
                })
                .collect();
            let mode_scores = scores.data()[s * m..(s + 1) * m].to_vec();
            let selected = select_mode(&mode_scores);
            PlanOutput {
                trajectories,
                mode_scores,
                selected,
            }
        })
        .collect()
}

/// Inference for a batch of observations with optional imagined futures.
pub fn plan_batch(params: &ParamStore, cfg: &ModelConfig, obs: &[&crate::perception::CurrentObservation], futures: Option<&[&FutureFeatures]>) -> Result<Vec<PlanOutput>> {
    let tape = wa_tensor::Tape::new();
    let bound = wa_tensor::Bound::new(params, &tape, false);
    let batch = PerceptionBatch::new(obs, cfg.patch)?;
    let tokens = futures.map(future_tokens).transpose()?;
    let out = forward(&bound, cfg, &batch, tokens.as_ref())?;
    let w = out.decoded.waypoints.value();
    let s = out.decoded.scores.value();
    if !w.is_finite() || !s.is_finite() {
        return Err(CoreError::Numeric("planner produced non-finite output".into()));
    }
    Ok(unpack_plans(cfg, &w, &s, obs.len()))
}

/// Single-observation pipeline: imagine the future (if a world model is
/// given), compress it, decode and select a mode.
pub fn plan(
    params: &ParamStore,
    cfg: &ModelConfig,
    obs: &crate::perception::CurrentObservation,
    imagination: Option<(&crate::world_model::WorldModel, &crate::world_model::ImagineInputs<'_>, u32)>,
) -> Result<PlanOutput> {
    let future = match imagination {
        Some((wm, inputs, t_d)) => Some(wm.imagine(inputs, t_d)?),
        None => None,
    };
    let futures: Option<Vec<&FutureFeatures>> = future.as_ref().map(|f| vec![f]);
    let mut plans = plan_batch(params, cfg, &[obs], futures.as_deref())?;
    Ok(plans.remove(0))
}
