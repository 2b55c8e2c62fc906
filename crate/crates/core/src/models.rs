//! The generator, encoder and refiner bundled with one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::latent_spaces::AverageLatent;
use crate::params::ParamStore;
use crate::smart::{Smart, SmartConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub smart: SmartConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.encoder.validate()?;
        let l = self.generator.num_ws();
        if self.encoder.latent_token_count != l {
            return Err(Error::config(format!(
                "encoder has {} latent tokens but the generator takes {l} style inputs",
                self.encoder.latent_token_count
            )));
        }
        if self.encoder.latent_dim != self.generator.w_dim {
            return Err(Error::config(format!(
                "encoder predicts {}-wide latents, generator expects {}",
                self.encoder.latent_dim, self.generator.w_dim
            )));
        }
        if self.encoder.image_size != self.generator.output_size {
            return Err(Error::config(format!(
                "encoder input {} differs from generator output {}",
                self.encoder.image_size, self.generator.output_size
            )));
        }
        Ok(())
    }
}

pub struct Models {
    pub config: ModelConfig,
    pub generator: Generator,
    pub encoder: Encoder,
    pub smart: Smart,
    pub params: ParamStore,
}

impl std::fmt::Debug for Models {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Models")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .finish()
    }
}

impl Models {
    fn build(config: &ModelConfig) -> Result<(Generator, Encoder, Smart)> {
        config.validate()?;
        let generator = Generator::new(config.generator.clone())?;
        let encoder = Encoder::new(config.encoder.clone())?;
        let smart = Smart::for_models(config.smart.clone(), &generator, &config.encoder)?;
        Ok((generator, encoder, smart))
    }

    /// Fresh parameters for all three networks from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let (generator, encoder, smart) = Self::build(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = generator.init_params(&mut rng)?;
        params.extend(encoder.init_params(&mut rng));
        params.extend(smart.init_params(&mut rng));
        Ok(Self {
            config,
            generator,
            encoder,
            smart,
            params,
        })
    }

    /// Wraps loaded parameters after checking that exactly the expected
    /// names are present with the expected shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let (generator, encoder, smart) = Self::build(&config)?;
        let mut reference = generator.param_layout()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        reference.extend(encoder.init_params(&mut rng));
        reference.extend(smart.init_params(&mut rng));
        for (name, t) in reference.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint {
                    entry: name.clone(),
                    detail: format!("shape {:?}, expected {:?}", got.shape(), t.shape()),
                });
            }
        }
        if let Some(extra) = params.names().find(|n| reference.get(n).is_none()) {
            return Err(Error::Checkpoint {
                entry: extra.clone(),
                detail: "not used by the configured models".into(),
            });
        }
        Ok(Self {
            config,
            generator,
            encoder,
            smart,
            params,
        })
    }

    pub fn w_avg(&self) -> Result<AverageLatent> {
        self.generator.w_avg(&self.params)
    }

    pub fn smart_layer(&self) -> usize {
        self.config.smart.smart_layer
    }
}

/// A model small enough for unit tests.
#[cfg(test)]
pub(crate) fn tiny() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.generator.output_size = 16;
    cfg.generator.w_dim = 8;
    cfg.generator.z_dim = 8;
    cfg.generator.base_feature_channels = 8;
    cfg.generator.mapping_depth = 2;
    cfg.generator.w_avg_samples = 16;
    cfg.encoder = EncoderConfig {
        image_size: 16,
        patch_size: 2,
        window_size: 4,
        stages: 3,
        stage_depths: vec![1, 1, 1],
        base_channels: 4,
        latent_token_count: 6,
        heads_per_stage: vec![1, 1, 2],
        latent_dim: 8,
        mlp_ratio: 2,
        head_hidden: 8,
    };
    cfg.smart.attn_dim = 4;
    cfg
}
