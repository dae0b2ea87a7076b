//! Loss assembly, learning-rate and loss-weight schedules, and the
//! single-instance (batch 1) training loop.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, normalize_to_unit_box, PointCloud};
use crate::metrics::{chamfer_loss, emd_loss, EmdSolver};
use crate::network::{CompletionOutput, Mode, Network};
use crate::tensor::{Adam, Tensor};

/// Linear ramp of the dense/refined loss weights. Both weights are equal at
/// every step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub start: f64,
    pub end: f64,
    pub ramp_steps: u64,
}

impl LossWeights {
    pub fn new(ramp_steps: u64) -> Self {
        LossWeights {
            start: 0.01,
            end: 1.0,
            ramp_steps,
        }
    }

    /// `(gamma, beta)` at `step`.
    pub fn at(&self, step: u64) -> (f64, f64) {
        let t = if self.ramp_steps == 0 {
            1.0
        } else {
            (step as f64 / self.ramp_steps as f64).min(1.0)
        };
        let g = self.start + (self.end - self.start) * t;
        (g, g)
    }
}

/// Staircase decay: `lr0 * factor^floor(step / decay_steps)`, clamped from
/// below.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub factor: f64,
    pub decay_steps: u64,
    pub min_lr: f64,
}

impl LrSchedule {
    pub fn new(lr0: f64, decay_steps: u64) -> Self {
        LrSchedule {
            lr0,
            factor: 0.7,
            decay_steps,
            min_lr: 1e-6,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        let k = step.checked_div(self.decay_steps).unwrap_or(0);
        (self.lr0 * self.factor.powi(k.min(i32::MAX as u64) as i32)).max(self.min_lr)
    }
}

/// Step count of the reference schedule that the desk-scale schedule is
/// scaled against.
pub const REFERENCE_STEPS: u64 = 100_000;
/// Ramp and decay period of the reference schedule.
pub const REFERENCE_PERIOD: u64 = 50_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr0: f64,
    pub ramp_steps: u64,
    pub decay_steps: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Coarse EMD is solved exactly up to this size, by auction above.
    pub emd_exact_max: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Schedule scaled so ramp and decay periods keep their proportion of
    /// the total run.
    pub fn desk(steps: u64, seed: u64) -> Self {
        let period = (REFERENCE_PERIOD * steps / REFERENCE_STEPS).max(1);
        TrainConfig {
            steps,
            lr0: 1e-4,
            ramp_steps: period,
            decay_steps: period,
            grad_clip: None,
            emd_exact_max: 256,
            seed,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights::new(self.ramp_steps)
    }

    pub fn lr(&self) -> LrSchedule {
        LrSchedule::new(self.lr0, self.decay_steps)
    }
}

/// One input/ground-truth example with its coarse-loss target precomputed.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub input: PointCloud,
    pub gt: PointCloud,
    /// Farthest-point subsample of `gt` at the coarse size.
    pub gt_coarse: PointCloud,
}

impl TrainingPair {
    pub fn new(input: PointCloud, gt: PointCloud, n_coarse: usize) -> Result<Self> {
        if input.is_empty() {
            return Err(Error::Empty("training input"));
        }
        if gt.len() < n_coarse {
            return Err(Error::InvalidArgument(format!(
                "ground truth has {} points, coarse size is {n_coarse}",
                gt.len()
            )));
        }
        let gt_coarse = farthest_point_sample(&gt, n_coarse)?;
        Ok(TrainingPair { input, gt, gt_coarse })
    }

    /// Normalizes a raw scan and its complete cloud into the complete
    /// cloud's unit box first.
    pub fn from_scan(partial: &PointCloud, complete: &PointCloud, n_coarse: usize) -> Result<Self> {
        let (gt, sim) = normalize_to_unit_box(complete, complete)?;
        Self::new(sim.apply_cloud(partial), gt, n_coarse)
    }
}

/// The three loss terms and their weighted sum.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Tensor,
    pub coarse_emd: f64,
    pub dense_cd: f64,
    pub refined_cd: f64,
}

/// `EMD(coarse, gt_coarse) + gamma * CD(dense, gt) + beta * CD(refined, gt)`.
pub fn loss_terms(
    out: &CompletionOutput,
    gt: &PointCloud,
    gt_coarse: &PointCloud,
    (gamma, beta): (f64, f64),
    solver: EmdSolver,
) -> Result<LossTerms> {
    let gt_t = gt.to_tensor()?;
    let (emd, _) = emd_loss(&out.coarse, &gt_coarse.to_tensor()?, solver)?;
    let dense = chamfer_loss(&out.dense, &gt_t)?;
    let refined = chamfer_loss(&out.refined, &gt_t)?;
    let total = emd.add(&dense.scale(gamma)?)?.add(&refined.scale(beta)?)?;
    Ok(LossTerms {
        coarse_emd: emd.item(),
        dense_cd: dense.item(),
        refined_cd: refined.item(),
        total,
    })
}

/// [`loss_terms`] with the coarse target drawn from `gt` by farthest point
/// sampling.
pub fn total_loss(out: &CompletionOutput, gt: &PointCloud, weights: (f64, f64)) -> Result<LossTerms> {
    let gt_coarse = farthest_point_sample(gt, out.coarse.rows())?;
    loss_terms(out, gt, &gt_coarse, weights, EmdSolver::Auto { exact_max: 256 })
}

/// One row of the loss-curve log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub gamma: f64,
    pub coarse_emd: f64,
    pub dense_cd: f64,
    pub refined_cd: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,lr,gamma,coarse_emd,dense_cd,refined_cd";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.lr, self.gamma, self.coarse_emd, self.dense_cd, self.refined_cd
        )
    }
}

/// Loss log as CSV text with a header row.
pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from(LossRecord::CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.to_csv_row());
    }
    s
}

/// Everything that evolves during training. The step counter is the
/// optimizer's, so a checkpointed [`Network`] carries it.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: Network,
    pub cfg: TrainConfig,
    pub log: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(net: Network, cfg: TrainConfig) -> Self {
        TrainState {
            net,
            cfg,
            log: Vec::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.net.params.optimizer_step()
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr().at(self.step())
    }

    /// Example drawn for `step`; a pure function of seed and step so runs
    /// resume exactly.
    fn pick(&self, step: u64, n: usize) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        rng.gen_range(0..n)
    }

    /// One optimizer step on one example.
    pub fn train_step(&mut self, data: &[TrainingPair]) -> Result<LossRecord> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let step = self.step();
        let pair = &data[self.pick(step, data.len())];
        let lr = self.lr();
        let weights = self.cfg.weights().at(step);
        let solver = EmdSolver::Auto {
            exact_max: self.cfg.emd_exact_max,
        };
        let (out, bn) = self.net.forward(&pair.input.to_tensor()?, Mode::Train)?;
        let terms = loss_terms(&out, &pair.gt, &pair.gt_coarse, weights, solver)?;
        let record = LossRecord {
            step,
            lr,
            gamma: weights.0,
            coarse_emd: terms.coarse_emd,
            dense_cd: terms.dense_cd,
            refined_cd: terms.refined_cd,
        };
        if !terms.total.item().is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss terms {record:?}"),
            });
        }
        terms.total.backward()?;
        let scale = match self.cfg.grad_clip {
            Some(max) => {
                let norm = self.net.params.grad_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        Adam::default()
            .step_scaled(&mut self.net.params, lr, scale)
            .map_err(|e| Error::Diverged {
                step,
                detail: format!("{e}; loss terms {record:?}"),
            })?;
        self.net.apply_bn_updates(bn)?;
        self.log.push(record);
        Ok(record)
    }

    /// Trains until `cfg.steps`, calling `on_checkpoint` every
    /// `checkpoint_every` steps (and after the last one).
    pub fn run(
        &mut self,
        data: &[TrainingPair],
        checkpoint_every: Option<u64>,
        mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        while self.step() < self.cfg.steps {
            self.train_step(data)?;
            let s = self.step();
            if let Some(k) = checkpoint_every {
                if k > 0 && s % k == 0 && s < self.cfg.steps {
                    on_checkpoint(self)?;
                }
            }
        }
        on_checkpoint(self)
    }
}

/// Convenience wrapper: trains a fresh state to `cfg.steps`.
pub fn train(net: Network, data: &[TrainingPair], cfg: TrainConfig) -> Result<TrainState> {
    let mut state = TrainState::new(net, cfg);
    state.run(data, None, |_| Ok(()))?;
    Ok(state)
}
