//! Optimizer wrapper, learning-rate schedule and batching shared by the
//! pre-training and fine-tuning loops.

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{config_err, Error, Result};
use crate::vit::ParamSet;

/// Environment variable that switches on deterministic mode.
pub const DETERMINISTIC_ENV: &str = "FTLAB_DETERMINISTIC";

/// Whether deterministic mode is on (`FTLAB_DETERMINISTIC` set to anything but `0`).
pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v != "0" && !v.is_empty())
}

/// Linear warmup to `base`, then half-cosine decay to `min_lr` at `total`.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, base: f64, min_lr: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    min_lr + (base - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW over a fixed set of variables with a per-step cosine schedule.
pub(crate) struct ScheduledAdamW {
    opt: Option<AdamW>,
    base_lr: f64,
    min_lr: f64,
    warmup: usize,
    total: usize,
    step: usize,
}

impl ScheduledAdamW {
    pub(crate) fn new(vars: Vec<Var>, lr: f64, weight_decay: f64, warmup: usize, total: usize) -> Result<Self> {
        if !(lr >= 0.0) || !(weight_decay >= 0.0) {
            return Err(config_err!("learning rate and weight decay must be >= 0"));
        }
        let opt = if vars.is_empty() {
            None
        } else {
            Some(AdamW::new(
                vars,
                ParamsAdamW {
                    lr,
                    weight_decay,
                    ..Default::default()
                },
            )?)
        };
        Ok(Self {
            opt,
            base_lr: lr,
            min_lr: 0.0,
            warmup,
            total,
            step: 0,
        })
    }

    pub(crate) fn current_lr(&self) -> f64 {
        cosine_lr(self.step, self.total, self.warmup, self.base_lr, self.min_lr)
    }

    /// Backpropagates `loss` and applies one update. Non-finite losses abort.
    pub(crate) fn step(&mut self, loss: &Tensor) -> Result<f64> {
        let value = crate::ops::scalar_f64(loss)?;
        if !value.is_finite() {
            return Err(Error::Eval(format!("non-finite loss {value} at step {}", self.step)));
        }
        let lr = self.current_lr();
        if let Some(opt) = self.opt.as_mut() {
            opt.set_learning_rate(lr);
            opt.backward_step(loss)?;
        }
        self.step += 1;
        Ok(value)
    }
}

/// Shuffled index batches for one epoch. With `drop_last`, a trailing batch
/// smaller than `batch_size` is discarded.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R, drop_last: bool) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Number of batches [`epoch_batches`] yields.
pub fn batches_per_epoch(n: usize, batch_size: usize, drop_last: bool) -> usize {
    let b = batch_size.max(1);
    if drop_last {
        n / b
    } else {
        n.div_ceil(b)
    }
}

/// 1-based epoch with the lowest loss among the final
/// `ceil(window_fraction * E)` epochs; ties go to the latest epoch.
pub fn select_pretrain_checkpoint(history: &[f64], window_fraction: f64) -> Result<usize> {
    if history.is_empty() {
        return Err(crate::error::input_err!("empty loss history"));
    }
    if !(window_fraction > 0.0 && window_fraction <= 1.0) {
        return Err(config_err!("window fraction must lie in (0, 1]"));
    }
    let e = history.len();
    let window = pretrain_window(e, window_fraction);
    let mut best = e - window;
    for i in e - window..e {
        if history[i] <= history[best] {
            best = i;
        }
    }
    Ok(best + 1)
}

/// Size of the selection window for `epochs` epochs, at least one.
pub fn pretrain_window(epochs: usize, window_fraction: f64) -> usize {
    // guard against 0.05 * 60 = 3.0000000000000004 rounding up to 4
    (((window_fraction * epochs as f64) - 1e-9).ceil() as usize).clamp(1, epochs.max(1))
}

/// Outcome of a self-supervised pre-training run.
#[derive(Clone, Debug)]
pub struct PretrainResult {
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    /// 1-based epoch chosen by [`select_pretrain_checkpoint`].
    pub selected_epoch: usize,
    /// Parameters at the selected epoch, including the self-supervised heads.
    pub model: ParamSet,
}

impl PretrainResult {
    /// Encoder groups only, ready for fine-tuning.
    pub fn encoder(&self) -> ParamSet {
        self.model.without_head()
    }
}

/// Keeps snapshots of the epochs inside the selection window and returns the chosen one.
pub(crate) struct WindowSnapshots {
    epochs: usize,
    window: usize,
    kept: Vec<(usize, ParamSet)>,
}

impl WindowSnapshots {
    pub(crate) const FRACTION: f64 = 0.05;

    pub(crate) fn new(epochs: usize) -> Self {
        Self {
            epochs,
            window: pretrain_window(epochs, Self::FRACTION),
            kept: Vec::new(),
        }
    }

    pub(crate) fn offer(&mut self, epoch: usize, params: &ParamSet) -> Result<()> {
        if epoch > self.epochs - self.window {
            let mut snap = params.deep_clone()?;
            snap.freeze_all()?;
            self.kept.push((epoch, snap));
        }
        Ok(())
    }

    pub(crate) fn finish(self, losses: Vec<f64>, method: &str) -> Result<PretrainResult> {
        let selected_epoch = select_pretrain_checkpoint(&losses, Self::FRACTION)?;
        let (_, mut model) = self
            .kept
            .into_iter()
            .find(|(e, _)| *e == selected_epoch)
            .ok_or_else(|| Error::Eval(format!("no snapshot kept for epoch {selected_epoch}")))?;
        model.metadata.insert("ssl_method".into(), method.into());
        model.metadata.insert("pretrain_epochs".into(), losses.len().to_string());
        model.metadata.insert("pretrain_selected_epoch".into(), selected_epoch.to_string());
        model.metadata.insert("pretrain_loss".into(), format!("{:e}", losses[selected_epoch - 1]));
        Ok(PretrainResult {
            losses,
            selected_epoch,
            model,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_window_examples() {
        let mut h: Vec<f64> = (0..100).map(|i| 100.0 - i as f64).collect();
        assert_eq!(select_pretrain_checkpoint(&h, 0.05).unwrap(), 100);
        h[96] = -5.0;
        assert_eq!(select_pretrain_checkpoint(&h, 0.05).unwrap(), 97);
        // a lower loss before the window is ignored
        h[10] = -100.0;
        assert_eq!(select_pretrain_checkpoint(&h, 0.05).unwrap(), 97);
        assert_eq!(select_pretrain_checkpoint(&[3.0], 0.05).unwrap(), 1);
        assert_eq!(select_pretrain_checkpoint(&[1.0, 1.0, 1.0], 1.0).unwrap(), 3);
        assert_eq!(pretrain_window(60, 0.05), 3);
        assert_eq!(pretrain_window(10, 0.05), 1);
        assert_eq!(pretrain_window(21, 0.05), 2);
        assert!(select_pretrain_checkpoint(&[], 0.05).is_err());
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(cosine_lr(0, 100, 10, 1.0, 0.0), 0.1);
        assert_eq!(cosine_lr(9, 100, 10, 1.0, 0.0), 1.0);
        assert_eq!(cosine_lr(10, 100, 10, 1.0, 0.0), 1.0);
        assert!(cosine_lr(100, 100, 10, 1.0, 0.0).abs() < 1e-12);
        assert!((cosine_lr(55, 100, 10, 1.0, 0.0) - 0.5).abs() < 1e-12);
        assert_eq!(cosine_lr(3, 10, 0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn batches_cover_every_index_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = epoch_batches(10, 4, &mut rng, false);
        assert_eq!(b.len(), batches_per_epoch(10, 4, false));
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(epoch_batches(10, 4, &mut rng, true).len(), 2);
    }

    #[test]
    fn zero_lr_keeps_parameters_bit_identical() {
        let v = Var::new(&[0.3f32, -1.7, 2.5], &candle_core::Device::Cpu).unwrap();
        let before = v.as_tensor().to_vec1::<f32>().unwrap();
        let mut opt = ScheduledAdamW::new(vec![v.clone()], 0.0, 0.05, 0, 10).unwrap();
        for _ in 0..5 {
            let loss = v.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss).unwrap();
        }
        assert_eq!(v.as_tensor().to_vec1::<f32>().unwrap(), before);
    }
}
