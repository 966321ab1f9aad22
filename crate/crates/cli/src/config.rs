use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sparseq::data::{load_idx, synth_dataset, Dataset};
use sparseq::distill::{FactorFn, LabelMode};
use sparseq::numerics::Rng;
use sparseq::pipeline::PipelineConfig;
use sparseq::quant::BitWidth;
use sparseq::vit::ViTConfig;

use crate::CliError;

/// Everything a command needs. Precedence is defaults < file < flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub model: ViTConfig,
    pub data: DataSource,
    pub pipeline: PipelineConfig,
    /// Directory holding checkpoints, packs and metrics.
    pub out: PathBuf,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            model: ViTConfig::desk(),
            data: DataSource::default(),
            pipeline: PipelineConfig::default(),
            out: PathBuf::from("runs/desk"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Gaussian-blob images generated from `seed`; the first `train`
    /// samples train, the next `test` evaluate.
    Synthetic {
        classes: usize,
        train: usize,
        test: usize,
        seed: u64,
    },
    /// IDX files. Images smaller than the model input are zero-padded.
    Idx {
        classes: usize,
        train_images: PathBuf,
        train_labels: Option<PathBuf>,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            classes: 10,
            train: 1500,
            test: 500,
            seed: 7,
        }
    }
}

/// Flag overrides, applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub fmt: Option<BitWidth>,
    pub alpha: Option<f32>,
    pub beta: Option<f32>,
    pub gamma: Option<f32>,
    pub no_weight_factor: bool,
    pub mode: Option<LabelMode>,
    pub epochs: Option<(Workflow, usize)>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Workflow {
    Dense,
    Prune,
    Qat,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        let p = &mut self.pipeline;
        if let Some(s) = o.seed {
            p.seed = s;
        }
        if let Some(f) = o.fmt {
            p.fmt = f;
        }
        if let Some(a) = o.alpha {
            p.weights.alpha = a;
        }
        if let Some(b) = o.beta {
            p.weights.beta = b;
        }
        if let Some(g) = o.gamma {
            p.weights.gamma = g;
        }
        if o.no_weight_factor {
            p.factor = FactorFn::Uniform;
        }
        if let Some(m) = o.mode {
            p.mode = m;
        }
        match o.epochs {
            Some((Workflow::Dense, e)) => p.epochs.dense = e,
            Some((Workflow::Prune, e)) => p.epochs.prune = e,
            Some((Workflow::Qat, e)) => p.epochs.qat = e,
            None => {}
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::usage(e.to_string()))?;
        self.pipeline.validate().map_err(|e| CliError::usage(e.to_string()))?;
        let classes = match &self.data {
            DataSource::Synthetic { classes, train, test, .. } => {
                if *train == 0 || *test == 0 {
                    return Err(CliError::usage("synthetic data needs train > 0 and test > 0"));
                }
                *classes
            }
            DataSource::Idx {
                classes,
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                for p in [Some(train_images), train_labels.as_ref(), Some(test_images), Some(test_labels)]
                    .into_iter()
                    .flatten()
                {
                    if !p.is_file() {
                        return Err(CliError::usage(format!("data file {} does not exist", p.display())));
                    }
                }
                *classes
            }
        };
        if classes != self.model.classes {
            return Err(CliError::usage(format!(
                "data has {classes} classes but the model predicts {}",
                self.model.classes
            )));
        }
        Ok(())
    }

    /// Train and test splits shaped for the model input.
    pub fn load_data(&self) -> Result<(Dataset, Dataset), CliError> {
        let m = &self.model;
        match &self.data {
            DataSource::Synthetic {
                classes,
                train,
                test,
                seed,
            } => {
                if m.channels != 1 {
                    return Err(CliError::usage("synthetic data is single-channel"));
                }
                let all = synth_dataset(&mut Rng::new(*seed), *classes, train + test, m.image_h, m.image_w)?;
                Ok(all.split_at(*train)?)
            }
            DataSource::Idx {
                classes,
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let fit = |d: Dataset| -> Result<Dataset, CliError> {
                    if d.images().c != m.channels {
                        return Err(CliError::usage(format!(
                            "IDX images have {} channels, model expects {}",
                            d.images().c,
                            m.channels
                        )));
                    }
                    Ok(d.pad_to(m.image_h, m.image_w)?)
                };
                let train = fit(load_idx(train_images, train_labels.as_deref(), *classes)?)?;
                let test = fit(load_idx(test_images, Some(test_labels), *classes)?)?;
                Ok((train, test))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_defaults_file_flags() {
        let file = r#"{"pipeline": {"seed": 5, "weights": {"alpha": 1.0, "beta": 3.0, "gamma": 5.0}}}"#;
        let mut c: CliConfig = serde_json::from_str(file).unwrap();
        assert_eq!(c.pipeline.seed, 5);
        assert_eq!(c.pipeline.temperature, PipelineConfig::default().temperature);
        c.apply(&Overrides {
            seed: Some(9),
            gamma: Some(0.0),
            no_weight_factor: true,
            epochs: Some((Workflow::Qat, 2)),
            ..Default::default()
        });
        assert_eq!(c.pipeline.seed, 9);
        assert_eq!(c.pipeline.weights.beta, 3.0);
        assert_eq!(c.pipeline.weights.gamma, 0.0);
        assert_eq!(c.pipeline.factor, FactorFn::Uniform);
        assert_eq!(c.pipeline.epochs.qat, 2);
        assert_eq!(c.pipeline.epochs.prune, PipelineConfig::default().epochs.prune);
    }

    #[test]
    fn unknown_keys_rejected() {
        for bad in [
            r#"{"bogus": 1}"#,
            r#"{"pipeline": {"lr": {"dense": 0.1, "typo": 2}}}"#,
            r#"{"data": {"source": "synthetic", "classes": 10, "train": 1, "test": 1, "seed": 0, "x": 1}}"#,
            r#"{"model": {"image_h": 32}}"#,
        ] {
            assert!(serde_json::from_str::<CliConfig>(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn guide_example_parses() {
        let guide = include_str!("../../../book/src/cli.md");
        let start = guide.find("```json\n").expect("json block") + 8;
        let end = start + guide[start..].find("```").unwrap();
        let c: CliConfig = serde_json::from_str(&guide[start..end]).unwrap();
        assert_eq!(c.model, ViTConfig::desk());
        assert_eq!(c.data, DataSource::default());
        c.validate().unwrap();
    }

    #[test]
    fn round_trips_through_json() {
        let c = CliConfig::default();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(serde_json::from_str::<CliConfig>(&text).unwrap(), c);
    }
}
