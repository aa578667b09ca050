//! Mini-batch training of a network on normalized low/high image pairs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::network::{Mode, Network};
use super::ops;
use super::tensor::Tensor4;
use crate::error::{Error, Result};
use crate::geom::NormalizedImage;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Train on random column windows of this width (wrapping around the
    /// panorama) instead of full images.
    pub crop_cols: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 0,
            crop_cols: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(c) = self.crop_cols {
            if c == 0 || c % 8 != 0 {
                return Err(Error::Config(format!("crop_cols must be a positive multiple of 8, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub train_l1: f64,
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub low: NormalizedImage,
    pub high: NormalizedImage,
}

/// Network, optimizer state and loss history; training can be resumed at
/// any epoch boundary.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub network: Network<f32>,
    pub adam: AdamState,
    pub history: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(network: Network<f32>, adam: AdamConfig) -> Self {
        let lens: Vec<usize> = network.params.trainable().iter().map(|t| t.len()).collect();
        Trainer { network, adam: AdamState::new(adam, lens), history: Vec::new() }
    }

    pub fn resume(network: Network<f32>, adam: AdamState, history: Vec<EpochLog>) -> Result<Self> {
        let mut net = network;
        if !adam.matches(&net.params.trainable_mut()) {
            return Err(Error::Format("optimizer state does not match the network parameters".into()));
        }
        Ok(Trainer { network: net, adam, history })
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    /// Runs `cfg.epochs` further epochs. The optimizer keeps its own
    /// hyperparameters; only batching, seed and cropping come from `cfg`.
    pub fn train(&mut self, data: &[TrainPair], cfg: &TrainConfig) -> Result<&[EpochLog]> {
        let start = self.history.len();
        for _ in 0..cfg.epochs {
            self.run_epoch(data, cfg)?;
        }
        Ok(&self.history[start..])
    }

    pub fn run_epoch(&mut self, data: &[TrainPair], cfg: &TrainConfig) -> Result<EpochLog> {
        cfg.validate()?;
        let shape = check_dataset(data, self.network.spec.upscale_factor)?;
        let e = self.history.len();
        let lr = self.adam.config.lr_at_epoch(e);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle = rng::stream(cfg.seed, rng::stream_id([3, e as u16, (e >> 16) as u16, 0]));
        order.shuffle(&mut shuffle);
        let crop = cfg.crop_cols.filter(|&c| c < shape.1);
        let offsets: Vec<usize> = match crop {
            Some(_) => order.iter().map(|_| shuffle.gen_range(0..shape.1)).collect(),
            None => vec![0; order.len()],
        };
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let offs = &offsets[b * cfg.batch_size..b * cfg.batch_size + chunk.len()];
            let (x, y) = make_batch(data, chunk, offs, crop);
            let mut dropout = rng::stream(cfg.seed, rng::stream_id([4, e as u16, b as u16, (b >> 16) as u16]));
            let (pred, tape) = self.network.forward_train(&x, Mode::Train, &mut dropout)?;
            let (loss, dy) = ops::l1_loss(&pred, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss in epoch {}", e + 1)));
            }
            let (grads, _) = self.network.backward(&tape, &dy)?;
            self.network.update_running_stats(&tape);
            self.adam.step(&mut self.network.params.trainable_mut(), &grads, lr)?;
            total += loss * chunk.len() as f64;
        }
        if !self.network.params.all_finite() {
            return Err(Error::Numeric(format!("non-finite parameters after epoch {}", e + 1)));
        }
        let log = EpochLog { epoch: e + 1, lr, train_l1: total / data.len() as f64 };
        log::debug!("epoch {} lr {:.3e} train L1 {:.6}", log.epoch, log.lr, log.train_l1);
        self.history.push(log);
        Ok(log)
    }
}

/// Checks the dataset is non-empty, congruent and matches `factor`; returns
/// the low-resolution `(rows, cols)`.
fn check_dataset(data: &[TrainPair], factor: usize) -> Result<(usize, usize)> {
    let first = data.first().ok_or_else(|| Error::Config("training dataset is empty".into()))?;
    let shape = (first.low.rows(), first.low.cols());
    for (i, p) in data.iter().enumerate() {
        if (p.low.rows(), p.low.cols()) != shape || (p.high.rows(), p.high.cols()) != (shape.0 * factor, shape.1) {
            return Err(Error::shape(
                "train",
                format!("pairs of {}x{} -> {}x{}", shape.0, shape.1, shape.0 * factor, shape.1),
                format!("pair {i}: {}x{} -> {}x{}", p.low.rows(), p.low.cols(), p.high.rows(), p.high.cols()),
            ));
        }
    }
    Ok(shape)
}

fn crop_into(out: &mut Vec<f32>, img: &[f32], rows: usize, cols: usize, offset: usize, width: usize) {
    for r in 0..rows {
        let row = &img[r * cols..(r + 1) * cols];
        for c in 0..width {
            out.push(row[(offset + c) % cols]);
        }
    }
}

fn make_batch(data: &[TrainPair], idx: &[usize], offsets: &[usize], crop: Option<usize>) -> (Tensor4<f32>, Tensor4<f32>) {
    let first = &data[idx[0]];
    let (lr, hr, cols) = (first.low.rows(), first.high.rows(), first.low.cols());
    let width = crop.unwrap_or(cols);
    let mut x = Vec::with_capacity(idx.len() * lr * width);
    let mut y = Vec::with_capacity(idx.len() * hr * width);
    for (&i, &off) in idx.iter().zip(offsets) {
        crop_into(&mut x, data[i].low.as_slice(), lr, cols, off, width);
        crop_into(&mut y, data[i].high.as_slice(), hr, cols, off, width);
    }
    (
        Tensor4::from_vec([idx.len(), 1, lr, width], x).unwrap(),
        Tensor4::from_vec([idx.len(), 1, hr, width], y).unwrap(),
    )
}

/// Loss curve as CSV: `epoch,lr,train_l1`.
pub fn loss_curve_csv(history: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,train_l1\n");
    for h in history {
        out.push_str(&format!("{},{:e},{}\n", h.epoch, h.lr, h.train_l1));
    }
    out
}
