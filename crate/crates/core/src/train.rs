//! Deterministic training loop and inference.
//!
//! Plain SGD with momentum and weight decay; the learning rate decays
//! linearly to zero over the total step count. Batches accumulate per-image
//! losses into one mean-loss graph, so a batch is one optimizer step. The
//! loss log and checkpoint are byte-identical across runs with the same
//! configuration and data.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{downsample_mask_half, load_image_tensor, load_mask_values, DatasetIndex, Split};
use crate::distractor::distractor_targets;
use crate::grafting::GraftPoolKind;
use crate::losses::{structure_loss, total_loss, LossConfig};
use crate::metrics::GrayMap;
use crate::model::{ForwardPass, Network, NetworkConfig};
use crate::nn::sigmoid;
use crate::tensor::{bilinear_resize, eltwise, scalar_mul, EltwiseKind, Tensor};
use crate::{invalid, Error, Result};

fn default_channels() -> Vec<usize> {
    vec![8, 16, 32, 64]
}
fn default_blocks() -> Vec<usize> {
    vec![1, 1, 1, 1]
}
fn default_lr() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    0.0005
}
fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    4
}
fn default_lambda() -> f64 {
    10.0
}
fn default_beta() -> f64 {
    10.0
}
fn default_main_size() -> usize {
    32
}
fn default_max_grad_norm() -> f64 {
    5.0
}
fn default_pool_kind() -> String {
    "max".to_string()
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainFlags {
    #[serde(default)]
    pub swap_balance_weights: bool,
    #[serde(default)]
    pub aux_coarse_loss: bool,
    #[serde(default = "default_pool_kind")]
    pub graft_pool_kind: String,
    #[serde(default = "default_true")]
    pub dam_enabled: bool,
}

impl Default for TrainFlags {
    fn default() -> Self {
        TrainFlags {
            swap_balance_weights: false,
            aux_coarse_loss: false,
            graft_pool_kind: default_pool_kind(),
            dam_enabled: true,
        }
    }
}

/// Training configuration; the JSON config file mirrors these field names.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_main_size")]
    pub main_size: usize,
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "default_blocks")]
    pub blocks: Vec<usize>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Global gradient-norm clip; the summed distractor losses produce
    /// updates far too large for stable SGD at this scale without it.
    /// Zero disables clipping.
    #[serde(default = "default_max_grad_norm")]
    pub max_grad_norm: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub flags: TrainFlags,
    /// Optional paths so one JSON document can drive a whole run; command
    /// line flags take precedence.
    #[serde(default)]
    pub data_index: Option<String>,
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainConfig {
    pub fn from_json_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.main_size == 0 || self.main_size % 32 != 0 {
            return Err(invalid(format!(
                "main_size {} must be a positive multiple of 32",
                self.main_size
            )));
        }
        if self.lr < 0.0 {
            return Err(invalid("lr must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(invalid("weight_decay must be non-negative"));
        }
        if self.batch == 0 {
            return Err(invalid("batch must be positive"));
        }
        if self.channels.len() != 4 || self.blocks.len() != 4 {
            return Err(invalid("channels and blocks must list exactly 4 levels"));
        }
        self.pool_kind()?;
        Ok(())
    }

    fn pool_kind(&self) -> Result<GraftPoolKind> {
        match self.flags.graft_pool_kind.as_str() {
            "max" => Ok(GraftPoolKind::Max),
            "avg" => Ok(GraftPoolKind::Avg),
            other => Err(invalid(format!("unknown graft_pool_kind {other:?}"))),
        }
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        Ok(NetworkConfig {
            main_size: self.main_size,
            channels: [self.channels[0], self.channels[1], self.channels[2], self.channels[3]],
            blocks: [self.blocks[0], self.blocks[1], self.blocks[2], self.blocks[3]],
            graft_channels: 64,
            attn_key_dim: 64,
            graft_pool_kind: self.pool_kind()?,
            dam_enabled: self.flags.dam_enabled,
            seed: self.seed,
        })
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            beta: self.beta,
            swap_balance_weights: self.flags.swap_balance_weights,
            aux_coarse_loss: self.flags.aux_coarse_loss,
        }
    }
}

/// Learning rate at 0-based step `t` of `total`: linear decay to zero.
pub fn lr_at_step(lr0: f64, t: usize, total: usize) -> f64 {
    lr0 * (1.0 - t as f64 / total as f64)
}

/// Loss and logging components for one image.
fn image_loss(pass: &ForwardPass, gt: &Tensor, loss_cfg: &LossConfig) -> Result<(Tensor, [f64; 3])> {
    if pass.dam_active {
        let targets = distractor_targets(&pass.bundle.coarse, gt)?;
        let breakdown = total_loss(&pass.bundle, &targets, gt, loss_cfg)?;
        let parts = [breakdown.l_fp_map, breakdown.l_fn, breakdown.l_fp];
        Ok((breakdown.total, parts))
    } else {
        let l = structure_loss(&pass.bundle.coarse, gt)?;
        let v = l.item();
        Ok((l, [v, 0.0, 0.0]))
    }
}

struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    fn new(net: &Network) -> SgdState {
        SgdState {
            velocity: net.params().iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    fn step(
        &mut self,
        net: &Network,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        max_grad_norm: f64,
    ) -> Result<()> {
        let params = net.params();
        let grads: Vec<Option<Vec<f64>>> = params.iter().map(|p| p.get().grad()).collect();
        let mut clip = 1.0;
        if max_grad_norm > 0.0 {
            let norm2: f64 = grads
                .iter()
                .flatten()
                .flat_map(|g| g.iter())
                .map(|g| g * g)
                .sum();
            let norm = norm2.sqrt();
            if norm > max_grad_norm {
                clip = max_grad_norm / norm;
            }
        }
        for ((param, vel), grad) in params.iter().zip(self.velocity.iter_mut()).zip(grads) {
            let tensor = param.get();
            let mut data = tensor.data().to_vec();
            if let Some(grad) = grad {
                for i in 0..data.len() {
                    let g = clip * grad[i] + weight_decay * data[i];
                    vel[i] = momentum * vel[i] + g;
                    data[i] -= lr * vel[i];
                }
            }
            param.set_data(data)?;
        }
        Ok(())
    }
}

pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub steps: usize,
    pub final_loss: f64,
}

/// Run training on the index's train split, writing `checkpoint.bin`,
/// `config.json`, and `loss_log.csv` into `out_dir`. Aborts with a
/// numerical error if the loss ever stops being finite.
pub fn train(cfg: &TrainConfig, index: &DatasetIndex, out_dir: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let net = Network::new(cfg.network_config()?)?;
    let loss_cfg = cfg.loss_config();

    let entries = index.entries_of(Split::Train);
    if entries.is_empty() {
        return Err(invalid("no training entries in the dataset index"));
    }
    let mut images = Vec::with_capacity(entries.len());
    for entry in &entries {
        let image = load_image_tensor(&index.image_path(entry))?;
        match image.shape() {
            [1, 3, h, w] if *h == cfg.main_size && *w == cfg.main_size => {}
            other => {
                return Err(invalid(format!(
                    "training image {} has shape {other:?}, expected {1}x{1} (main_size)",
                    index.image_path(entry).display(),
                    cfg.main_size,
                )))
            }
        }
        let (mask, mh, mw) = load_mask_values(&index.mask_path(entry))?;
        if mh != cfg.main_size || mw != cfg.main_size {
            return Err(invalid(format!(
                "mask {} is {mh}x{mw}, expected {1}x{1}",
                index.mask_path(entry).display(),
                cfg.main_size,
            )));
        }
        let gt = downsample_mask_half(&mask, mh, mw)?;
        images.push((image, gt));
    }

    let steps_per_epoch = images.len().div_ceil(cfg.batch);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut sgd = SgdState::new(&net);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = String::from("step,total,l_fp_map,l_fn,l_fp,lr\n");
    let mut step = 0usize;
    let mut final_loss = f64::NAN;

    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch) {
            let mut batch_total: Option<Tensor> = None;
            let mut parts = [0.0f64; 3];
            for &i in chunk {
                let (image, gt) = &images[i];
                let pass = net.forward(image)?;
                let (loss, p) = image_loss(&pass, gt, &loss_cfg)?;
                for (acc, v) in parts.iter_mut().zip(p) {
                    *acc += v;
                }
                batch_total = Some(match batch_total {
                    None => loss,
                    Some(acc) => eltwise(&acc, &loss, EltwiseKind::Add)?,
                });
            }
            let scale = 1.0 / chunk.len() as f64;
            let batch_loss = scalar_mul(&batch_total.expect("non-empty batch"), scale)?;
            for p in parts.iter_mut() {
                *p *= scale;
            }
            let loss_value = batch_loss.item();
            if !loss_value.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss became non-finite at step {step}"
                )));
            }
            batch_loss.backward()?;
            let lr = lr_at_step(cfg.lr, step, total_steps);
            sgd.step(&net, lr, cfg.momentum, cfg.weight_decay, cfg.max_grad_norm)?;
            log.push_str(&format!(
                "{step},{loss_value:.12e},{:.12e},{:.12e},{:.12e},{lr:.12e}\n",
                parts[0], parts[1], parts[2]
            ));
            final_loss = loss_value;
            step += 1;
        }
    }

    let checkpoint = out_dir.join("checkpoint.bin");
    net.save(&checkpoint)?;
    let loss_log = out_dir.join("loss_log.csv");
    let mut f = std::fs::File::create(&loss_log)?;
    f.write_all(log.as_bytes())?;
    std::fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(TrainReport {
        checkpoint,
        loss_log,
        steps: step,
        final_loss,
    })
}

/// Probability map for one image at input resolution: sigmoid of the final
/// logits, bilinearly upsampled by 2.
pub fn predict_map(net: &Network, image: &Tensor) -> Result<GrayMap> {
    let pass = net.forward(image)?;
    let probs = sigmoid(pass.final_logits())?;
    let up = bilinear_resize(&probs, 2)?;
    let (h, w) = (up.shape()[2], up.shape()[3]);
    GrayMap::new(w, h, up.data().to_vec())
}

/// Load the network a checkpoint was trained with: reads `config.json`
/// next to the checkpoint file.
pub fn load_trained(checkpoint: &Path) -> Result<(Network, TrainConfig)> {
    let dir = checkpoint
        .parent()
        .ok_or_else(|| invalid(format!("checkpoint {} has no parent", checkpoint.display())))?;
    let cfg = TrainConfig::from_json_file(&dir.join("config.json"))?;
    let net = Network::new(cfg.network_config()?)?;
    net.load(checkpoint)?;
    Ok((net, cfg))
}

/// Run inference over every PNG in `input_dir`, writing 8-bit grayscale
/// prediction maps of the same file names into `out_dir`.
pub fn infer(checkpoint: &Path, input_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (net, cfg) = load_trained(checkpoint)?;
    std::fs::create_dir_all(out_dir)?;
    let mut inputs: Vec<PathBuf> = std::fs::read_dir(input_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    inputs.sort();
    if inputs.is_empty() {
        return Err(invalid(format!("no PNG images in {}", input_dir.display())));
    }
    let mut outputs = Vec::with_capacity(inputs.len());
    for path in inputs {
        let image = load_image_tensor(&path)?;
        match image.shape() {
            [1, 3, h, w] if *h == cfg.main_size && *w == cfg.main_size => {}
            other => {
                return Err(invalid(format!(
                    "{}: shape {other:?} does not match the checkpoint's {1}x{1} input",
                    path.display(),
                    cfg.main_size,
                )))
            }
        }
        let map = predict_map(&net, &image)?;
        let mut img = image::GrayImage::new(map.width as u32, map.height as u32);
        for (i, &v) in map.values.iter().enumerate() {
            let (x, y) = ((i % map.width) as u32, (i / map.width) as u32);
            img.put_pixel(x, y, image::Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8]));
        }
        let out_path = out_dir.join(path.file_name().expect("file name"));
        img.save(&out_path)?;
        outputs.push(out_path);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_generate, SynthConfig};

    fn tiny_cfg(seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            main_size: 32,
            channels: vec![4, 8, 12, 16],
            epochs,
            batch: 2,
            seed,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(dir: &Path) -> DatasetIndex {
        let cfg = SynthConfig::new(4, 32, 11, 0.8).unwrap();
        synth_generate(&cfg, dir).unwrap()
    }

    #[test]
    fn zero_epochs_checkpoint_equals_initialization() {
        let data_dir = tempfile::tempdir().unwrap();
        let index = tiny_dataset(data_dir.path());
        let out = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(3, 0);
        let report = train(&cfg, &index, out.path()).unwrap();
        assert_eq!(report.steps, 0);

        let fresh = Network::new(cfg.network_config().unwrap()).unwrap();
        let trained = Network::new(cfg.network_config().unwrap()).unwrap();
        trained.load(&report.checkpoint).unwrap();
        for (a, b) in fresh.params().iter().zip(trained.params().iter()) {
            assert_eq!(a.get().data(), b.get().data(), "{} changed", a.name());
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let data_dir = tempfile::tempdir().unwrap();
        let index = tiny_dataset(data_dir.path());
        let out = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(4, 2);
        cfg.lr = 0.0;
        let report = train(&cfg, &index, out.path()).unwrap();
        assert!(report.steps > 0);
        let fresh = Network::new(cfg.network_config().unwrap()).unwrap();
        let trained = Network::new(cfg.network_config().unwrap()).unwrap();
        trained.load(&report.checkpoint).unwrap();
        for (a, b) in fresh.params().iter().zip(trained.params().iter()) {
            assert_eq!(a.get().data(), b.get().data(), "{} changed", a.name());
        }
    }

    #[test]
    fn lr_schedule_is_linear() {
        let lr0 = 0.05;
        let total = 500;
        for t in [0usize, 1, 250, 499] {
            let expect = lr0 * (1.0 - t as f64 / total as f64);
            assert!((lr_at_step(lr0, t, total) - expect).abs() < 1e-12);
        }
        assert_eq!(lr_at_step(lr0, 0, 500), lr0);
    }

    #[test]
    fn training_is_deterministic() {
        let data_dir = tempfile::tempdir().unwrap();
        let index = tiny_dataset(data_dir.path());
        let cfg = tiny_cfg(5, 2);
        let out_a = tempfile::tempdir().unwrap();
        let out_b = tempfile::tempdir().unwrap();
        train(&cfg, &index, out_a.path()).unwrap();
        train(&cfg, &index, out_b.path()).unwrap();
        let log_a = std::fs::read(out_a.path().join("loss_log.csv")).unwrap();
        let log_b = std::fs::read(out_b.path().join("loss_log.csv")).unwrap();
        assert_eq!(log_a, log_b);
        let ckpt_a = std::fs::read(out_a.path().join("checkpoint.bin")).unwrap();
        let ckpt_b = std::fs::read(out_b.path().join("checkpoint.bin")).unwrap();
        assert_eq!(ckpt_a, ckpt_b);
    }

    #[test]
    fn training_decreases_loss_and_infer_round_trips() {
        let data_dir = tempfile::tempdir().unwrap();
        let index = tiny_dataset(data_dir.path());
        let out = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(6, 12);
        let report = train(&cfg, &index, out.path()).unwrap();
        let log = std::fs::read_to_string(&report.loss_log).unwrap();
        let losses: Vec<f64> = log
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");

        let pred_dir = tempfile::tempdir().unwrap();
        let outputs = infer(
            &report.checkpoint,
            &data_dir.path().join("images"),
            pred_dir.path(),
        )
        .unwrap();
        assert_eq!(outputs.len(), 4);
        let map = GrayMap::from_png(&outputs[0]).unwrap();
        assert_eq!((map.width, map.height), (32, 32));

        // inference is deterministic
        let pred_dir2 = tempfile::tempdir().unwrap();
        let outputs2 = infer(
            &report.checkpoint,
            &data_dir.path().join("images"),
            pred_dir2.path(),
        )
        .unwrap();
        let a = std::fs::read(&outputs[0]).unwrap();
        let b = std::fs::read(&outputs2[0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dam_toggle_trains_end_to_end() {
        let data_dir = tempfile::tempdir().unwrap();
        let index = tiny_dataset(data_dir.path());
        let out = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(7, 1);
        cfg.flags.dam_enabled = false;
        let report = train(&cfg, &index, out.path()).unwrap();
        assert!(report.steps > 0);
        let log = std::fs::read_to_string(&report.loss_log).unwrap();
        // distractor components must be zero in this mode
        for line in log.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[3].parse::<f64>().unwrap(), 0.0);
            assert_eq!(cols[4].parse::<f64>().unwrap(), 0.0);
        }
    }

    #[test]
    fn config_json_round_trip_mirrors_fields() {
        let json = r#"{
            "main_size": 64,
            "lr": 0.01,
            "epochs": 3,
            "batch": 2,
            "lambda": 5.0,
            "beta": 2.0,
            "seed": 42,
            "flags": {"swap_balance_weights": true, "graft_pool_kind": "avg", "dam_enabled": false}
        }"#;
        let cfg: TrainConfig = serde_json::from_str(json).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.main_size, 64);
        assert_eq!(cfg.lambda, 5.0);
        assert!(cfg.flags.swap_balance_weights);
        assert!(!cfg.flags.dam_enabled);
        assert_eq!(cfg.channels, vec![8, 16, 32, 64]);
        assert!(matches!(cfg.pool_kind().unwrap(), GraftPoolKind::Avg));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = TrainConfig::default();
        cfg.main_size = 40;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.lr = -0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.flags.graft_pool_kind = "median".into();
        assert!(cfg.validate().is_err());
    }
}
