//! Shared minibatch training loop: seeded shuffling, Adam, EMA, loss log.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{DpiError, Result};
use crate::nn::{Adam, Ema, UNet};
use crate::rng::{Domain, RngStreams};

const MODULE: &str = "train";
const DIVERGENCE: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ema_decay: f64,
    pub seed: u64,
    /// Base channel width of the network.
    pub base: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-4, batch_size: 8, epochs: 10, ema_decay: 0.9999, seed: 0, base: 32 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DpiError::param(MODULE, "learning rate must be > 0"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.base == 0 {
            return Err(DpiError::param(MODULE, "batch size, epochs and width must be positive"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(DpiError::param(MODULE, "EMA decay must be in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub raw: UNet,
    pub ema: UNet,
    pub losses: Vec<LossRecord>,
}

impl TrainOutcome {
    /// Mean batch loss per epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.losses.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let v: Vec<f64> = self.losses.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect()
    }
}

pub fn losses_to_csv(losses: &[LossRecord]) -> String {
    let mut s = String::from("epoch,step,loss\n");
    for r in losses {
        s.push_str(&format!("{},{},{:e}\n", r.epoch, r.step, r.loss));
    }
    s
}

/// Runs `epochs` passes over `n_items` in seeded shuffled order.
///
/// `sample_grad(net, item, rng, grads)` must accumulate the gradient of the
/// item's loss into `grads` and return that loss; the batch gradient is the
/// mean over the batch.
pub fn fit(
    mut net: UNet,
    n_items: usize,
    cfg: &TrainConfig,
    mut sample_grad: impl FnMut(&UNet, usize, &mut ChaCha8Rng, &mut [f64]) -> Result<f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if n_items == 0 {
        return Err(DpiError::data(MODULE, "empty dataset"));
    }
    let streams = RngStreams::new(cfg.seed);
    let n_params = net.param_count();
    let mut adam = Adam::new(n_params, cfg.lr);
    let mut ema = Ema::new(net.params().data(), cfg.ema_decay)?;
    let mut grads = vec![0.0; n_params];
    let mut losses = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(&mut streams.stream(Domain::Training, epoch as u64));
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.fill(0.0);
            let mut loss = 0.0;
            for (pos, &item) in batch.iter().enumerate() {
                let draw = (epoch * n_items + b * cfg.batch_size + pos) as u64;
                let mut rng = streams.stream(Domain::Custom(1), draw);
                loss += sample_grad(&net, item, &mut rng, &mut grads)?;
            }
            let scale = 1.0 / batch.len() as f64;
            loss *= scale;
            grads.iter_mut().for_each(|g| *g *= scale);
            if !loss.is_finite() || loss > DIVERGENCE || grads.iter().any(|g| !g.is_finite()) {
                return Err(DpiError::numerical(
                    MODULE,
                    format!("training diverged at epoch {epoch}, step {step}: loss {loss}"),
                ));
            }
            adam.update(net.params_mut().data_mut(), &grads);
            ema.update(net.params().data());
            losses.push(LossRecord { epoch, step, loss });
            log::debug!("epoch {epoch} step {step} loss {loss:.6}");
            step += 1;
        }
        log::info!("epoch {epoch}: mean loss {:.6}", {
            let e: Vec<f64> = losses.iter().filter(|r| r.epoch == epoch).map(|r| r.loss).collect();
            e.iter().sum::<f64>() / e.len() as f64
        });
    }
    let mut ema_net = net.clone();
    ema_net.params_mut().data_mut().copy_from_slice(ema.values());
    Ok(TrainOutcome { raw: net, ema: ema_net, losses })
}
