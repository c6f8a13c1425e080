//! The flat TOML run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tdbgan::data::{LabelMode, SyntheticSpec};
use tdbgan::gan::{DiscriminatorConfig, GeneratorConfig, GeneratorLoss, LossWeights};
use tdbgan::identity::{ClassifierConfig, ClassifierRecipe, ExtractorConfig, ExtractorKind};
use tdbgan::train::{ModelConfig, Stage, TrainConfig};

use crate::CliError;

/// Overrides the directory that relative `output_dir` values are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "TDBGAN_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    /// Defaults to `<data_dir>/manifest.csv`.
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub label_mode: LabelMode,
    pub seed: u64,

    pub image_size: usize,
    pub n_identities: usize,
    pub n_images: usize,
    pub attributes: Vec<String>,
    pub deformation_magnitude: f64,

    pub stages: Vec<String>,
    pub batch_size: usize,
    pub n_critic: usize,
    pub flip_prob: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lr_dae: f64,
    pub lr_gan: f64,
    pub epochs_dae: usize,
    pub epochs_gan: usize,
    pub epochs_gan_decay: usize,
    pub epochs_joint: usize,
    pub epochs_joint_decay: usize,
    pub max_batches_per_epoch: Option<usize>,
    pub use_dae: bool,
    pub use_identity_loss: bool,
    pub generator_loss: GeneratorLoss,
    pub freeze_dae_in_joint: bool,

    pub lambda_cls: f64,
    pub lambda_rec: f64,
    pub lambda_ip: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda2p: f64,
    pub lambda3: f64,

    pub dae_channels: Vec<usize>,
    pub gen_base_channels: usize,
    pub gen_res_blocks: usize,
    pub dis_base_channels: usize,
    pub dis_patch_size: usize,

    pub extractor_kind: ExtractorKind,
    pub extractor_weights: Option<PathBuf>,
    pub extractor_epochs: usize,
    pub classifier_epochs: usize,

    pub n_client: usize,
    pub n_impostor: usize,
    /// Source class of the class-transfer protocol; defaults to `neutral` when present.
    pub source_class: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SyntheticSpec::default();
        let weights = LossWeights::default();
        let dae = TrainConfig::paper(Stage::DaeOnly);
        let gan = TrainConfig::paper(Stage::GanFrozenDae);
        let joint = TrainConfig::paper(Stage::Joint);
        let generator = GeneratorConfig::default();
        let discriminator = DiscriminatorConfig::default();
        Self {
            data_dir: "data".into(),
            manifest: None,
            output_dir: "run".into(),
            label_mode: LabelMode::MultiBinary,
            seed: 0,
            image_size: synth.image_size,
            n_identities: synth.n_identities,
            n_images: synth.n_images,
            attributes: synth.attributes,
            deformation_magnitude: synth.deformation_magnitude,
            stages: vec!["dae_only".into(), "gan_frozen_dae".into(), "joint".into()],
            batch_size: gan.batch_size,
            n_critic: gan.n_critic,
            flip_prob: gan.flip_prob,
            adam_beta1: gan.adam_beta1,
            adam_beta2: gan.adam_beta2,
            lr_dae: dae.lr,
            lr_gan: gan.lr,
            epochs_dae: dae.epochs_constant,
            epochs_gan: gan.epochs_constant,
            epochs_gan_decay: gan.epochs_decay,
            epochs_joint: joint.epochs_constant,
            epochs_joint_decay: joint.epochs_decay,
            max_batches_per_epoch: None,
            use_dae: true,
            use_identity_loss: true,
            generator_loss: GeneratorLoss::default(),
            freeze_dae_in_joint: false,
            lambda_cls: weights.lambda_cls,
            lambda_rec: weights.lambda_rec,
            lambda_ip: weights.lambda_ip,
            lambda1: weights.lambda1,
            lambda2: weights.lambda2,
            lambda2p: weights.lambda2p,
            lambda3: weights.lambda3,
            dae_channels: tdbgan::dae::DaeConfig::default().channels,
            gen_base_channels: generator.base_channels,
            gen_res_blocks: generator.res_blocks,
            dis_base_channels: discriminator.base_channels,
            dis_patch_size: discriminator.patch_size,
            extractor_kind: ExtractorKind::TrainedClassifierBackbone,
            extractor_weights: None,
            extractor_epochs: ClassifierRecipe::default().epochs,
            classifier_epochs: ClassifierRecipe::default().epochs,
            n_client: 3000,
            n_impostor: 3000,
            source_class: None,
        }
    }
}

/// A config plus the directory its relative paths are resolved against.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: RunConfig,
    pub base: PathBuf,
}

impl Loaded {
    /// Reads `path`, or the defaults relative to the working directory.
    pub fn from_path(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self {
                config: RunConfig::default(),
                base: PathBuf::from("."),
            }),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                let config: RunConfig = toml::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                Ok(Self {
                    config,
                    base: if base.as_os_str().is_empty() { ".".into() } else { base },
                })
            }
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.resolve(&self.config.data_dir)
    }

    pub fn manifest_path(&self) -> PathBuf {
        match &self.config.manifest {
            Some(m) => self.resolve(m),
            None => self.data_dir().join("manifest.csv"),
        }
    }

    /// `output_dir`, resolved against the output-root variable when it is set.
    pub fn output_dir(&self) -> PathBuf {
        let out = &self.config.output_dir;
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !out.is_absolute() => PathBuf::from(root).join(out),
            _ => self.resolve(out),
        }
    }
}

impl RunConfig {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            image_size: self.image_size,
            n_identities: self.n_identities,
            n_images: self.n_images,
            attributes: self.attributes.clone(),
            deformation_magnitude: self.deformation_magnitude,
            seed: self.seed,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_cls: self.lambda_cls,
            lambda_rec: self.lambda_rec,
            lambda_ip: self.lambda_ip,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda2p: self.lambda2p,
            lambda3: self.lambda3,
        }
    }

    pub fn parsed_stages(&self) -> Result<Vec<Stage>, CliError> {
        parse_stages(&self.stages)
    }

    /// One `TrainConfig` per requested stage.
    pub fn plan(&self) -> Result<Vec<TrainConfig>, CliError> {
        self.parsed_stages()?
            .into_iter()
            .map(|stage| {
                let (epochs_constant, epochs_decay, lr) = match stage {
                    Stage::DaeOnly => (self.epochs_dae, 0, self.lr_dae),
                    Stage::GanFrozenDae => (self.epochs_gan, self.epochs_gan_decay, self.lr_gan),
                    Stage::Joint => (self.epochs_joint, self.epochs_joint_decay, self.lr_gan),
                };
                let c = TrainConfig {
                    stage,
                    epochs_constant,
                    epochs_decay,
                    lr,
                    adam_beta1: self.adam_beta1,
                    adam_beta2: self.adam_beta2,
                    batch_size: self.batch_size,
                    n_critic: self.n_critic,
                    flip_prob: self.flip_prob,
                    weights: self.weights(),
                    seed: self.seed,
                    use_dae: self.use_dae,
                    use_identity_loss: self.use_identity_loss,
                    generator_loss: self.generator_loss,
                    freeze_dae_in_joint: self.freeze_dae_in_joint,
                    max_batches_per_epoch: self.max_batches_per_epoch,
                };
                c.validate()?;
                Ok(c)
            })
            .collect()
    }

    pub fn model(&self, vocabulary: Vec<String>) -> ModelConfig {
        let mut m = ModelConfig::new(self.image_size, vocabulary.len(), self.label_mode, self.seed);
        m.dae.channels = self.dae_channels.clone();
        m.generator = GeneratorConfig {
            base_channels: self.gen_base_channels,
            res_blocks: self.gen_res_blocks,
        };
        m.discriminator = DiscriminatorConfig {
            base_channels: self.dis_base_channels,
            patch_size: self.dis_patch_size,
        };
        m.vocabulary = vocabulary;
        m
    }

    fn recipe(&self, epochs: usize, salt: u64) -> ClassifierRecipe {
        ClassifierRecipe {
            epochs,
            seed: self.seed.wrapping_mul(31).wrapping_add(salt),
            ..Default::default()
        }
    }

    pub fn extractor(&self, base: &Loaded) -> ExtractorConfig {
        ExtractorConfig {
            kind: self.extractor_kind,
            weight_source: self.extractor_weights.as_ref().map(|p| base.resolve(p)),
            frozen: true,
            network: self.classifier_network(),
            recipe: self.recipe(self.extractor_epochs, 1),
        }
    }

    /// Recipe of the independent evaluation classifiers; `salt` separates their seeds.
    pub fn evaluation_recipe(&self, salt: u64) -> ClassifierRecipe {
        self.recipe(self.classifier_epochs, 100 + salt)
    }

    pub fn classifier_network(&self) -> ClassifierConfig {
        ClassifierConfig {
            image_size: self.image_size,
            ..Default::default()
        }
    }
}

pub fn parse_stages<S: AsRef<str>>(names: &[S]) -> Result<Vec<Stage>, CliError> {
    if names.is_empty() {
        return Err(CliError::Usage("no stages selected".into()));
    }
    names
        .iter()
        .map(|s| Stage::parse(s.as_ref().trim()).map_err(CliError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("batch_size = 4\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let l = Loaded {
            config: toml::from_str("data_dir = \"d\"\nmanifest = \"m/x.csv\"").unwrap(),
            base: "/cfg".into(),
        };
        assert_eq!(l.data_dir(), PathBuf::from("/cfg/d"));
        assert_eq!(l.manifest_path(), PathBuf::from("/cfg/m/x.csv"));
    }

    #[test]
    fn plan_follows_stage_list() {
        let c: RunConfig = toml::from_str("stages = [\"dae\", \"joint\"]\nepochs_joint = 2").unwrap();
        let plan = c.plan().unwrap();
        assert_eq!(plan.len(), 2);
        assert_eq!(plan[0].stage, Stage::DaeOnly);
        assert_eq!((plan[1].stage, plan[1].epochs_constant), (Stage::Joint, 2));
        assert!(toml::from_str::<RunConfig>("stages = [\"warp\"]").unwrap().plan().is_err());
    }
}
