//! Current-frame observation and its token encoder.

use rand::Rng;
use wa_tensor::{concat_rows, sinusoidal_grid, ParamStore, Tensor};

use crate::microworld::{
    ego_status, raycast_ranges, render_bev, EgoStatus, GridSpec, OccupancyGrid, ScenarioSpec, WorldState, R_MAX,
    SPEED_SCALE,
};
use crate::nn::{self, B, V};
use crate::planner::ModelConfig;
use crate::world_model::GridEncoder;
use crate::{CoreError, Result};

/// Width of the ego-status feature vector.
pub const EGO_FEATURES: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct CurrentObservation {
    pub grid: OccupancyGrid,
    pub ranges: Vec<f64>,
    pub ego: EgoStatus,
}

impl CurrentObservation {
    pub fn capture(spec: &ScenarioSpec, state: &WorldState, grid: &GridSpec, n_rays: usize) -> Self {
        Self {
            grid: render_bev(spec, state, grid),
            ranges: raycast_ranges(spec, state, n_rays),
            ego: ego_status(spec, state),
        }
    }

    pub fn check(&self) -> Result<()> {
        let finite = self.ranges.iter().all(|r| r.is_finite() && *r > 0.0 && *r <= R_MAX)
            && self.ego.speed.is_finite()
            && self.ego.accel.is_finite()
            && self.ego.yaw_rate.is_finite();
        if !finite {
            return Err(CoreError::Contract("observation has non-finite or out-of-range values".into()));
        }
        Ok(())
    }

    pub fn ego_features(&self) -> Vec<f64> {
        let mut f = vec![self.ego.speed / SPEED_SCALE, self.ego.accel / 3.0, self.ego.yaw_rate, 0.0, 0.0, 0.0];
        f[3 + self.ego.command.index()] = 1.0;
        f
    }

    pub fn range_features(&self) -> Vec<f64> {
        self.ranges.iter().map(|r| r / R_MAX).collect()
    }
}

/// Patch, range and ego inputs for a batch of observations.
#[derive(Clone, Debug)]
pub struct PerceptionBatch {
    pub size: usize,
    /// `B·P × 3p²`
    pub patches: Tensor,
    /// `B × n_rays`
    pub ranges: Tensor,
    /// `B × EGO_FEATURES`
    pub ego: Tensor,
}

impl PerceptionBatch {
    pub fn new(obs: &[&CurrentObservation], patch: usize) -> Result<Self> {
        if obs.is_empty() {
            return Err(CoreError::Contract("empty observation batch".into()));
        }
        let mut patches = Vec::new();
        let mut rows = 0;
        let mut d = 0;
        let n_rays = obs[0].ranges.len();
        let mut ranges = Vec::with_capacity(obs.len() * n_rays);
        let mut ego = Vec::with_capacity(obs.len() * EGO_FEATURES);
        for o in obs {
            o.check()?;
            if o.ranges.len() != n_rays {
                return Err(CoreError::Contract("observations disagree on ray count".into()));
            }
            let p = GridEncoder::patches(&o.grid, patch)?;
            rows += p.rows();
            d = p.cols();
            patches.extend_from_slice(p.data());
            ranges.extend(o.range_features());
            ego.extend(o.ego_features());
        }
        Ok(Self {
            size: obs.len(),
            patches: Tensor::new(&[rows, d], patches)?,
            ranges: Tensor::new(&[obs.len(), n_rays], ranges)?,
            ego: Tensor::new(&[obs.len(), EGO_FEATURES], ego)?,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.patches.rows() / self.size
    }
}

/// Encoded tokens: per sample the patch tokens, then the range token, then
/// the ego token.
pub struct CurrentFeatures<'t> {
    pub tokens: V<'t>,
    pub per_sample: usize,
    pub patches: usize,
}

impl<'t> CurrentFeatures<'t> {
    /// Rows holding patch tokens, in sample-major order.
    pub fn patch_rows(&self, batch: usize) -> Vec<usize> {
        (0..batch)
            .flat_map(|b| (0..self.patches).map(move |i| b * self.per_sample + i))
            .collect()
    }
}

pub fn token_count(cfg: &ModelConfig) -> usize {
    (cfg.grid.height / cfg.patch) * (cfg.grid.width / cfg.patch) + 2
}

pub fn init_encoder(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
    let c = cfg.dim;
    let d_patch = OccupancyGrid::CHANNELS * cfg.patch * cfg.patch;
    nn::init_linear(store, "enc.patch", d_patch, c, false, rng);
    nn::init_linear(store, "enc.range", cfg.n_rays, c, false, rng);
    nn::init_linear(store, "enc.ego", EGO_FEATURES, c, false, rng);
    for i in 0..cfg.enc_blocks {
        nn::init_self_block(store, &format!("enc.block{i}"), c, cfg.enc_mlp_ratio, false, rng);
    }
    nn::init_norm(store, "enc.norm", c);
}

/// Encoder forward over a batch.
pub fn encode_current<'t>(b: &B<'_, 't>, cfg: &ModelConfig, batch: &PerceptionBatch) -> Result<CurrentFeatures<'t>> {
    let tape = b.tape();
    let n = batch.size;
    let p = batch.patch_count();
    let expected = token_count(cfg) - 2;
    if p != expected {
        return Err(CoreError::Contract(format!("expected {expected} patches per sample, got {p}")));
    }
    let mut patch = nn::linear(b, "enc.patch", tape.constant(batch.patches.clone()))?;
    if cfg.positional {
        let pos = sinusoidal_grid::<f64>(cfg.grid.height / cfg.patch, cfg.grid.width / cfg.patch, cfg.dim)?;
        let tiled = tape.constant(pos).gather_rows(&nn::tile_index(p, n))?;
        patch = patch.add(tiled)?;
    }
    let range = nn::linear(b, "enc.range", tape.constant(batch.ranges.clone()))?;
    let ego = nn::linear(b, "enc.ego", tape.constant(batch.ego.clone()))?;
    let all = concat_rows(&[patch, range, ego])?;
    let per = p + 2;
    let order: Vec<usize> = (0..n)
        .flat_map(|s| {
            (0..p)
                .map(move |i| s * p + i)
                .chain([n * p + s, n * p + n + s])
        })
        .collect();
    let mut x = all.gather_rows(&order)?;
    for i in 0..cfg.enc_blocks {
        x = nn::self_block(b, &format!("enc.block{i}"), x, cfg.heads, n)?;
    }
    let tokens = nn::norm(b, "enc.norm", x)?;
    Ok(CurrentFeatures {
        tokens,
        per_sample: per,
        patches: p,
    })
}
