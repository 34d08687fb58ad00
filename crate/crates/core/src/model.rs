//! The assembled network: dual-scale encoders, grafting, fusion decoding,
//! and optional distractor-aware refinement, plus checkpoint persistence.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distractor::{Distractor, PredictionBundle};
use crate::encoders::{EncoderConfig, FeaturePyramid, MainEncoder, SubEncoder};
use crate::fusion::{DecodedFeatures, Fusion};
use crate::grafting::{GraftPoolKind, GraftedPyramid, Grafting};
use crate::nn::Param;
use crate::store;
use crate::tensor::{bilinear_resize, Tensor};
use crate::{invalid, Result};

/// Everything needed to build the network deterministically.
#[derive(Debug, Clone)]
pub struct NetworkConfig {
    pub main_size: usize,
    pub channels: [usize; 4],
    pub blocks: [usize; 4],
    /// Shared width of the grafted and decoded features.
    pub graft_channels: usize,
    /// Key width of the cross-attention graft.
    pub attn_key_dim: usize,
    pub graft_pool_kind: GraftPoolKind,
    /// When false the refinement stage is skipped and the coarse map is the
    /// final prediction.
    pub dam_enabled: bool,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            main_size: 32,
            channels: [8, 16, 32, 64],
            blocks: [1, 1, 1, 1],
            graft_channels: 64,
            attn_key_dim: 64,
            graft_pool_kind: GraftPoolKind::Max,
            dam_enabled: true,
            seed: 0,
        }
    }
}

/// All intermediate and final products of one forward pass.
pub struct ForwardPass {
    pub main_pyramid: FeaturePyramid,
    pub sub_pyramid: FeaturePyramid,
    pub grafted: GraftedPyramid,
    pub decoded: DecodedFeatures,
    pub bundle: PredictionBundle,
    pub dam_active: bool,
}

impl ForwardPass {
    /// The map inference reports: the refined prediction, or the coarse one
    /// when the refinement stage is disabled.
    pub fn final_logits(&self) -> &Tensor {
        if self.dam_active {
            &self.bundle.refined
        } else {
            &self.bundle.coarse
        }
    }
}

pub struct Network {
    pub cfg: NetworkConfig,
    pub encoder_cfg: EncoderConfig,
    pub main_encoder: MainEncoder,
    pub sub_encoder: SubEncoder,
    pub grafting: Grafting,
    pub fusion: Fusion,
    pub distractor: Distractor,
}

impl Network {
    pub fn new(cfg: NetworkConfig) -> Result<Network> {
        let encoder_cfg = EncoderConfig::new(cfg.channels, cfg.blocks, cfg.main_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let main_encoder = MainEncoder::new(&mut rng, &encoder_cfg);
        let sub_encoder = SubEncoder::new(&mut rng, &encoder_cfg);
        let grafting = Grafting::new(
            &mut rng,
            cfg.channels,
            cfg.graft_channels,
            cfg.attn_key_dim,
            cfg.graft_pool_kind,
        );
        let fusion = Fusion::new(&mut rng, cfg.graft_channels);
        let distractor = Distractor::new(&mut rng, cfg.graft_channels);
        Ok(Network {
            cfg,
            encoder_cfg,
            main_encoder,
            sub_encoder,
            grafting,
            fusion,
            distractor,
        })
    }

    /// Single-image forward pass. The sub-scale input is the main image
    /// bilinearly upsampled by 2.
    pub fn forward(&self, image: &Tensor) -> Result<ForwardPass> {
        match image.shape() {
            [1, 3, h, w] if *h == self.cfg.main_size && *w == self.cfg.main_size => {}
            other => {
                return Err(invalid(format!(
                    "expected a [1, 3, {0}, {0}] image, got {other:?}",
                    self.cfg.main_size
                )))
            }
        }
        let sub_image = bilinear_resize(image, 2)?;
        let main_pyramid = self.main_encoder.encode(image)?;
        let sub_pyramid = self.sub_encoder.encode(&sub_image)?;
        let grafted = self.grafting.build_grafted_pyramid(&main_pyramid, &sub_pyramid)?;
        let decoded = self.fusion.decode(&grafted)?;
        let bundle = if self.cfg.dam_enabled {
            self.distractor.refine(&decoded.f_hat[0], &decoded.coarse)?
        } else {
            // Placeholder maps keep the bundle shape contract; they carry no
            // gradient and the loss path never reads them in this mode.
            PredictionBundle {
                coarse: decoded.coarse.clone(),
                refined: decoded.coarse.clone(),
                fn_pred: Tensor::zeros(decoded.coarse.shape()),
                fp_pred: Tensor::zeros(decoded.coarse.shape()),
            }
        };
        Ok(ForwardPass {
            main_pyramid,
            sub_pyramid,
            grafted,
            decoded,
            bundle,
            dam_active: self.cfg.dam_enabled,
        })
    }

    /// All trainable parameters in a fixed order. The refinement parameters
    /// are always included so checkpoints do not depend on the toggle.
    pub fn params(&self) -> Vec<Param> {
        let mut p = self.main_encoder.params();
        p.extend(self.sub_encoder.params());
        p.extend(self.grafting.params());
        p.extend(self.fusion.params());
        p.extend(self.distractor.params());
        p
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::save_params(path, &self.params())
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        store::load_params(path, &self.params())
    }

    /// Spatial side of the decoded features and prediction maps.
    pub fn output_size(&self) -> usize {
        self.cfg.main_size / 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(seed: u64, size: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..3 * size * size).map(|_| rng.random_range(-0.5..0.5)).collect();
        Tensor::new(&[1, 3, size, size], data).unwrap()
    }

    #[test]
    fn forward_shape_contract_main_32() {
        let net = Network::new(NetworkConfig::default()).unwrap();
        let pass = net.forward(&random_image(1, 32)).unwrap();
        let g: Vec<usize> = pass.main_pyramid.levels.iter().map(|l| l.shape()[2]).collect();
        assert_eq!(g, vec![8, 4, 2, 1]);
        let f: Vec<usize> = pass.sub_pyramid.levels.iter().map(|l| l.shape()[2]).collect();
        assert_eq!(f, vec![16, 8, 4, 2]);
        let grafted: Vec<usize> = pass.grafted.levels.iter().map(|l| l.shape()[2]).collect();
        assert_eq!(grafted, vec![16, 8, 4, 2]);
        assert_eq!(pass.decoded.coarse.shape(), &[1, 1, 16, 16]);
        assert_eq!(pass.bundle.refined.shape(), &[1, 1, 16, 16]);
        assert_eq!(net.output_size(), 16);
    }

    #[test]
    fn forward_rejects_wrong_size() {
        let net = Network::new(NetworkConfig::default()).unwrap();
        assert!(net.forward(&random_image(1, 64)).is_err());
    }

    #[test]
    fn dam_toggle_reroutes_final_map() {
        let mut cfg = NetworkConfig::default();
        cfg.dam_enabled = false;
        let net = Network::new(cfg).unwrap();
        let pass = net.forward(&random_image(2, 32)).unwrap();
        assert_eq!(pass.final_logits().data(), pass.decoded.coarse.data());
        assert!(!pass.dam_active);
    }

    #[test]
    fn checkpoint_round_trip_restores_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let net = Network::new(NetworkConfig { seed: 7, ..Default::default() }).unwrap();
        let img = random_image(3, 32);
        let before = net.forward(&img).unwrap().bundle.refined.data().to_vec();
        net.save(&path).unwrap();

        let other = Network::new(NetworkConfig { seed: 8, ..Default::default() }).unwrap();
        let different = other.forward(&img).unwrap().bundle.refined.data().to_vec();
        assert_ne!(before, different);
        other.load(&path).unwrap();
        let restored = other.forward(&img).unwrap().bundle.refined.data().to_vec();
        assert_eq!(before, restored);
    }

    #[test]
    fn param_names_are_unique() {
        let net = Network::new(NetworkConfig::default()).unwrap();
        let params = net.params();
        let mut names: Vec<&str> = params.iter().map(|p| p.name()).collect();
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
        assert!(total > 50, "expected a substantial parameter set, got {total}");
    }
}
