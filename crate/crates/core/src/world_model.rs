//! Future feature imagination.
//!
//! The oracle reads the true future grids, encodes them with a frozen
//! random patch projection and corrupts them with schedule-controlled
//! Gaussian noise. The simple model is a small learned regressor from the
//! pooled current encoding.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use wa_tensor::{AdamW, AdamWHyper, Bound, ParamStore, Tape, Tensor};

use crate::microworld::{Channel, EgoStatus, OccupancyGrid, SPEED_SCALE};
use crate::nn;
use crate::{CoreError, Result};

pub const WM_PREFIX: &str = "wm.";
pub const ENCODER_PARAM: &str = "wm.encoder.proj";
pub const COND_DIM: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleShape {
    Linear,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseSchedule {
    pub total_steps: u32,
    pub sigma_max: f64,
    pub shape: ScheduleShape,
}

impl Default for DenoiseSchedule {
    fn default() -> Self {
        Self {
            total_steps: 100,
            sigma_max: 1.0,
            shape: ScheduleShape::Linear,
        }
    }
}

impl DenoiseSchedule {
    /// Residual noise level after `t_d` denoising steps.
    pub fn sigma(&self, t_d: u32) -> Result<f64> {
        if t_d > self.total_steps || self.total_steps == 0 {
            return Err(CoreError::Contract(format!(
                "denoising step {t_d} outside 0..={}",
                self.total_steps
            )));
        }
        if t_d == self.total_steps {
            return Ok(0.0);
        }
        let r = t_d as f64 / self.total_steps as f64;
        Ok(match self.shape {
            ScheduleShape::Linear => self.sigma_max * (1.0 - r),
            ScheduleShape::Cosine => self.sigma_max * (std::f64::consts::FRAC_PI_2 * r).cos().powi(2),
        })
    }
}

/// Driving condition fed to the world model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionLatent {
    pub command: [f64; 3],
    pub speed: f64,
    pub yaw_rate: f64,
}

impl ConditionLatent {
    pub fn from_status(ego: &EgoStatus) -> Self {
        let mut command = [0.0; 3];
        command[ego.command.index()] = 1.0;
        Self {
            command,
            speed: ego.speed / SPEED_SCALE,
            yaw_rate: ego.yaw_rate,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.command[0], self.command[1], self.command[2], self.speed, self.yaw_rate]
    }
}

/// Frozen patch projection from grids to `channels × rows × cols` maps.
#[derive(Clone, Debug, PartialEq)]
pub struct GridEncoder {
    pub patch: usize,
    pub channels: usize,
    /// `(3·patch²) × channels`
    pub proj: Tensor,
}

impl GridEncoder {
    pub fn new(patch: usize, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_in = OccupancyGrid::CHANNELS * patch * patch;
        Self {
            patch,
            channels,
            // Typical scenes fill about a quarter of each patch, which this
            // spread maps to features of roughly unit second moment.
            proj: nn::randn(&[d_in, channels], 2.0 / patch as f64, &mut rng),
        }
    }

    pub fn from_store(store: &ParamStore, patch: usize) -> Result<Self> {
        let proj = store.get(ENCODER_PARAM)?.clone();
        Ok(Self {
            patch,
            channels: proj.cols(),
            proj,
        })
    }

    pub fn register(&self, store: &mut ParamStore) {
        store.insert(ENCODER_PARAM, self.proj.clone());
    }

    /// Patch-major flattening: row `i` holds patch `i` (row-major over the
    /// patch grid), channel-major then row-major within the patch.
    pub fn patches(grid: &OccupancyGrid, patch: usize) -> Result<Tensor> {
        let (h, w) = (grid.spec.height, grid.spec.width);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(CoreError::Contract(format!(
                "grid {h}×{w} is not divisible into {patch}×{patch} patches"
            )));
        }
        let (ph, pw) = (h / patch, w / patch);
        let d = OccupancyGrid::CHANNELS * patch * patch;
        let mut data = Vec::with_capacity(ph * pw * d);
        for pr in 0..ph {
            for pc in 0..pw {
                for ch in [Channel::Drivable, Channel::Agents, Channel::Ego] {
                    for r in 0..patch {
                        for c in 0..patch {
                            data.push(grid.get(ch, pr * patch + r, pc * patch + c) as f64);
                        }
                    }
                }
            }
        }
        Ok(Tensor::new(&[ph * pw, d], data)?)
    }

    /// `channels × (H/p) × (W/p)` feature map.
    pub fn encode(&self, grid: &OccupancyGrid) -> Result<Tensor> {
        let tokens = Self::patches(grid, self.patch)?.matmul(&self.proj)?;
        let (ph, pw) = (grid.spec.height / self.patch, grid.spec.width / self.patch);
        Ok(tokens.transpose()?.reshape(&[self.channels, ph, pw])?)
    }
}

/// Imagined future volume `T_wm × C_wm × H' × W'`.
#[derive(Clone, Debug, PartialEq)]
pub struct FutureFeatures {
    pub values: Tensor,
    pub t_d: u32,
    pub frame_times: Vec<usize>,
}

impl FutureFeatures {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn stack(frames: &[Tensor], t_d: u32) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| CoreError::Contract("no future frames".into()))?;
        let mut shape = vec![frames.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(frames.len() * first.len());
        for f in frames {
            if f.shape() != first.shape() {
                return Err(CoreError::Contract("future frames differ in shape".into()));
            }
            data.extend_from_slice(f.data());
        }
        Ok(Self {
            values: Tensor::new(&shape, data)?,
            t_d,
            frame_times: (1..=frames.len()).collect(),
        })
    }

    /// Mean squared deviation from another volume of the same shape.
    pub fn mse_to(&self, other: &FutureFeatures) -> Result<f64> {
        let d = self.values.sub(&other.values)?;
        Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64)
    }
}

/// Oracle imagination: clean encodings plus `sigma(t_d)·ε`, where ε comes
/// from a stream seeded by `noise_seed` and does not depend on `t_d`.
pub fn oracle_future(clean: &[Tensor], t_d: u32, schedule: &DenoiseSchedule, noise_seed: u64) -> Result<FutureFeatures> {
    let sigma = schedule.sigma(t_d)?;
    let mut clean = FutureFeatures::stack(clean, t_d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    for v in clean.values.data_mut() {
        let e: f64 = StandardNormal.sample(&mut rng);
        *v += sigma * e;
    }
    Ok(clean)
}

/// Inputs available to a world model for one scenario.
pub struct ImagineInputs<'a> {
    pub current: &'a Tensor,
    pub cond: &'a ConditionLatent,
    /// Encoded ground-truth future; only the oracle consumes it.
    pub clean_future: Option<&'a [Tensor]>,
    pub noise_seed: u64,
}

#[derive(Clone, Debug)]
pub enum WorldModel {
    Oracle(DenoiseSchedule),
    Simple(SimpleWm),
}

impl WorldModel {
    pub fn imagine(&self, inputs: &ImagineInputs<'_>, t_d: u32) -> Result<FutureFeatures> {
        match self {
            WorldModel::Oracle(schedule) => {
                let clean = inputs
                    .clean_future
                    .ok_or_else(|| CoreError::Contract("oracle imagination needs the ground-truth rollout".into()))?;
                oracle_future(clean, t_d, schedule, inputs.noise_seed)
            }
            WorldModel::Simple(wm) => wm.predict(inputs.current, inputs.cond),
        }
    }
}

/// One training example for the simple world model.
#[derive(Clone, Debug)]
pub struct WmSample {
    pub current: Tensor,
    pub cond: ConditionLatent,
    pub future: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimpleWmConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SimpleWmConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 60,
            batch_size: 32,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Per-step two-layer perceptrons over pooled current features and the
/// condition vector.
#[derive(Clone, Debug)]
pub struct SimpleWm {
    pub params: ParamStore,
    pub frames: usize,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
}

fn pooled_input(current: &Tensor, cond: &ConditionLatent) -> Vec<f64> {
    let c = current.shape()[0];
    let per = current.len() / c;
    let mut x: Vec<f64> = current
        .data()
        .chunks(per)
        .map(|ch| ch.iter().sum::<f64>() / per as f64)
        .collect();
    x.extend(cond.to_vec());
    x
}

impl SimpleWm {
    fn step_name(k: usize) -> String {
        format!("wm.simple.{k}")
    }

    fn forward<'t>(&self, b: &nn::B<'_, 't>, x: nn::V<'t>, k: usize) -> Result<nn::V<'t>> {
        let name = Self::step_name(k);
        let h = nn::linear(b, &format!("{name}.fc1"), x)?.gelu();
        nn::linear(b, &format!("{name}.fc2"), h)
    }

    pub fn fit(data: &[WmSample], cfg: &SimpleWmConfig) -> Result<SimpleWm> {
        let first = data
            .first()
            .ok_or_else(|| CoreError::Contract("simple world model needs a non-empty dataset".into()))?;
        let shape = first.current.shape().to_vec();
        let frames = first.future.len();
        let (channels, rows, cols) = (shape[0], shape[1], shape[2]);
        let d_in = channels + COND_DIM;
        let d_out = channels * rows * cols;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        for k in 0..frames {
            let name = Self::step_name(k);
            nn::init_linear(&mut params, &format!("{name}.fc1"), d_in, cfg.hidden, false, &mut rng);
            nn::init_linear(&mut params, &format!("{name}.fc2"), cfg.hidden, d_out, false, &mut rng);
        }
        let mut wm = SimpleWm {
            params,
            frames,
            channels,
            rows,
            cols,
        };
        let inputs: Vec<Vec<f64>> = data.iter().map(|s| pooled_input(&s.current, &s.cond)).collect();
        let mut opt = AdamW::new(AdamWHyper {
            lr: cfg.lr,
            ..AdamWHyper::default()
        });
        let mut order: Vec<usize> = (0..data.len()).collect();
        let bs = cfg.batch_size.max(1);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(bs) {
                let x = Tensor::new(&[chunk.len(), d_in], chunk.iter().flat_map(|&i| inputs[i].clone()).collect())?;
                let tape = Tape::new();
                let bound = Bound::new(&wm.params, &tape, true);
                let xv = tape.constant(x);
                let mut loss = None;
                for k in 0..frames {
                    let target = Tensor::new(
                        &[chunk.len(), d_out],
                        chunk.iter().flat_map(|&i| data[i].future[k].data().to_vec()).collect(),
                    )?;
                    let l = wm.forward(&bound, xv, k)?.mse_mean(&target)?;
                    loss = Some(match loss {
                        None => l,
                        Some(acc) => l.add(acc)?,
                    });
                }
                let loss = loss.expect("at least one frame").scale(1.0 / frames as f64);
                if !loss.value().is_finite() {
                    return Err(CoreError::Numeric("simple world model loss diverged".into()));
                }
                let grads = tape.backward(loss)?;
                let g = bound.collect(&grads);
                drop(bound);
                opt.step(&mut wm.params, &g)?;
            }
        }
        Ok(wm)
    }

    /// Deterministic prediction of all future frames.
    pub fn predict(&self, current: &Tensor, cond: &ConditionLatent) -> Result<FutureFeatures> {
        let x = pooled_input(current, cond);
        let tape = Tape::new();
        let bound = Bound::new(&self.params, &tape, false);
        let xv = tape.constant(Tensor::new(&[1, x.len()], x)?);
        let frames = (0..self.frames)
            .map(|k| {
                let y = self.forward(&bound, xv, k)?.value();
                Ok(y.reshape(&[self.channels, self.rows, self.cols])?)
            })
            .collect::<Result<Vec<_>>>()?;
        FutureFeatures::stack(&frames, 0)
    }

    /// Rebuilds a model from the `wm.simple.*` entries of a store.
    pub fn from_store(store: &ParamStore, channels: usize, rows: usize, cols: usize) -> Result<Option<SimpleWm>> {
        let params = store.with_prefix("wm.simple.");
        if params.is_empty() {
            return Ok(None);
        }
        let frames = (0..).take_while(|k| params.contains(&format!("{}.fc1.w", Self::step_name(*k)))).count();
        Ok(Some(SimpleWm {
            params,
            frames,
            channels,
            rows,
            cols,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microworld::GridSpec;

    #[test]
    fn schedule_endpoints() {
        let s = DenoiseSchedule::default();
        assert_eq!(s.sigma(100).unwrap(), 0.0);
        assert_eq!(s.sigma(0).unwrap(), 1.0);
        assert!((s.sigma(25).unwrap() - 0.75).abs() < 1e-15);
        assert!(s.sigma(101).is_err());
        let c = DenoiseSchedule {
            shape: ScheduleShape::Cosine,
            ..s
        };
        assert_eq!(c.sigma(100).unwrap(), 0.0);
        assert_eq!(c.sigma(0).unwrap(), 1.0);
        for shape in [s, c] {
            for t in 0..100 {
                assert!(shape.sigma(t + 1).unwrap() < shape.sigma(t).unwrap());
            }
        }
    }

    #[test]
    fn encoder_is_linear_without_bias() {
        let enc = GridEncoder::new(8, 32, 7);
        let spec = GridSpec::default();
        let zero = OccupancyGrid::empty(spec);
        let f = enc.encode(&zero).unwrap();
        assert_eq!(f.shape(), &[32, 8, 8]);
        assert!(f.data().iter().all(|&v| v == 0.0));
        let mut g = zero.clone();
        for i in (0..g.cells.len()).step_by(7) {
            g.cells[i] = 1;
        }
        let a = enc.encode(&g).unwrap();
        let scaled = GridEncoder::patches(&g, 8).unwrap().scale(2.0).matmul(&enc.proj).unwrap();
        let direct = a.data().iter().map(|v| 2.0 * v);
        let tok = scaled.transpose().unwrap();
        for (x, y) in tok.data().iter().zip(direct) {
            assert_eq!(*x, y);
        }
        let bad = OccupancyGrid::empty(GridSpec::new(60, 64, 0.5));
        assert!(enc.encode(&bad).is_err());
    }
}
