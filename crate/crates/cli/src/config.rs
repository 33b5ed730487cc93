//! Strict JSON run configuration.

use std::path::{Path, PathBuf};

use mklab::train::{load_idx, synth_dataset, LabeledDataset, TrainConfig};
use mklab::{Error, KeyKind, KeyVariantSpec, ModelConfig, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// One of `vit-s16`, `vit-b16`, `tiny`, `gradcheck`; exclusive with `model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    /// Replaces the key variant of the preset or model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<KeyVariantSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
    #[serde(default)]
    pub attnmap: AttnmapConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        samples_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        num_classes: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Variants to check; the model's own dims are reused for each.
    pub variants: Vec<KeyKind>,
    pub charts: usize,
    pub samples: usize,
    pub step: f64,
    pub tol: f64,
    /// Evenly strided coordinates checked per parameter; all when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_coords: Option<usize>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            variants: KeyKind::ALL.to_vec(),
            charts: 2,
            samples: 2,
            step: mklab::gradcheck::DEFAULT_STEP,
            tol: mklab::gradcheck::DEFAULT_TOL,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttnmapConfig {
    /// Nearest-neighbour upscale factor of the written PGM files.
    pub upscale: usize,
}

impl Default for AttnmapConfig {
    fn default() -> Self {
        Self { upscale: 8 }
    }
}

impl RunConfig {
    /// Parses, resolves relative paths against the config file's directory
    /// and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(DatasetConfig::Idx { images, labels, .. }) = &mut cfg.dataset {
            for p in [images, labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.train.validate()?;
        if let Some(DatasetConfig::Idx { images, labels, .. }) = &self.dataset {
            for p in [images, labels] {
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "dataset file {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        if let Some(DatasetConfig::Synthetic {
            classes,
            samples_per_class,
            ..
        }) = &self.dataset
        {
            if *classes == 0 || *samples_per_class == 0 {
                return Err(Error::Config(
                    "synthetic dataset sizes must be positive".into(),
                ));
            }
        }
        if self.gradcheck.charts == 0 || self.gradcheck.samples == 0 || self.attnmap.upscale == 0 {
            return Err(Error::Config(
                "gradcheck.charts, gradcheck.samples and attnmap.upscale must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut model = match (&self.preset, &self.model) {
            (Some(name), None) => ModelConfig::preset(name, KeyVariantSpec::baseline())?,
            (None, Some(m)) => m.clone(),
            _ => {
                return Err(Error::Config(
                    "exactly one of `preset` or `model` is required".into(),
                ))
            }
        };
        if let Some(v) = self.variant {
            model.variant = v;
        }
        model.validate()?;
        Ok(model)
    }

    pub fn dataset(&self, model: &ModelConfig) -> Result<LabeledDataset> {
        match &self.dataset {
            None => Err(Error::Config(
                "this command needs a `dataset` section".into(),
            )),
            Some(DatasetConfig::Synthetic {
                classes,
                samples_per_class,
                seed,
            }) => synth_dataset(*classes, *samples_per_class, model.image_size, *seed),
            Some(DatasetConfig::Idx {
                images,
                labels,
                num_classes,
            }) => load_idx(images, labels, *num_classes),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "preset": "tiny",
        "variant": {"kind": "vanillak", "charts": 4, "cb": true},
        "train": {"total_epochs": 2, "batch_size": 8},
        "dataset": {"kind": "synthetic", "classes": 4, "samples_per_class": 4},
        "output_dir": "out"
    }"#;

    #[test]
    fn round_trip_is_fixed_point() {
        let a: RunConfig = serde_json::from_str(SAMPLE).unwrap();
        let text = serde_json::to_string(&a).unwrap();
        let b: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(a, b);
        assert_eq!(text, serde_json::to_string(&b).unwrap());
        assert_eq!(a.model_config().unwrap().variant.charts, 4);
    }

    #[test]
    fn unknown_fields_rejected() {
        let bad = SAMPLE.replace("\"batch_size\"", "\"batchsize\"");
        let err = serde_json::from_str::<RunConfig>(&bad)
            .unwrap_err()
            .to_string();
        assert!(err.contains("batchsize"), "{err}");
        let bad = SAMPLE.replace("\"output_dir\"", "\"outdir\"");
        assert!(serde_json::from_str::<RunConfig>(&bad).is_err());
    }

    #[test]
    fn preset_and_model_are_exclusive() {
        let mut c: RunConfig = serde_json::from_str(SAMPLE).unwrap();
        c.model = Some(ModelConfig::tiny(KeyVariantSpec::baseline()));
        assert!(c.model_config().is_err());
        c.preset = None;
        assert!(c.model_config().is_ok());
    }
}
