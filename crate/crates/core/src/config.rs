//! JSON run configuration: one replayable document per experiment, with
//! per-command flag overrides layered on top. Unknown keys are rejected and
//! every referenced path must exist at load time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{self, DatasetRecord, PlantedModel, PlantedSpec};
use crate::denoiser::{DataSampler, DenoiserModel, GaussianMixture, MlpArch, MlpParams, PoolSampler, TrainConfig};
use crate::error::{Error, Result};
use crate::schedule::{build_schedule, NoiseSchedule, ScheduleKind, ScheduleSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: Option<ScheduleSection>,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub embedder: Option<EmbedderSection>,
    #[serde(default)]
    pub dataset: Option<DatasetSection>,
    #[serde(default)]
    pub trajectory: Option<TrajectorySection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub timesteps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default = "default_cosine_offset")]
    pub cosine_offset: f64,
}

fn default_beta_start() -> f64 {
    1e-4
}

fn default_beta_end() -> f64 {
    0.02
}

fn default_cosine_offset() -> f64 {
    crate::schedule::DEFAULT_COSINE_OFFSET
}

impl ScheduleSection {
    pub fn to_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: self.kind,
            timesteps: self.timesteps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            cosine_offset: self.cosine_offset,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSection {
    /// Analytic mixture oracle.
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<f64>,
    },
    /// Trainable (or trained) noise-prediction MLP.
    Mlp {
        #[serde(default)]
        path: Option<PathBuf>,
        #[serde(default = "default_hidden")]
        hidden: usize,
        #[serde(default = "default_time_features")]
        time_features: usize,
    },
    /// Latent space equals data space; generation is the identity map.
    Identity,
}

fn default_hidden() -> usize {
    128
}

fn default_time_features() -> usize {
    16
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub n_steps: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderSection {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_embedder_hidden")]
    pub hidden: usize,
    #[serde(default = "default_n_pairs")]
    pub n_pairs: usize,
}

fn default_embedder_hidden() -> usize {
    128
}

fn default_n_pairs() -> usize {
    5000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSection {
    /// Annotation CSVs plus optional per-id tensor files.
    Files {
        attributes: PathBuf,
        pose: PathBuf,
        light: PathBuf,
        #[serde(default)]
        samples_dir: Option<PathBuf>,
        #[serde(default)]
        denylist: Option<PathBuf>,
    },
    /// Synthetic dataset with planted latent structure.
    Planted { spec: PlantedSpec },
    /// Draws from a Gaussian mixture (training data for toy models).
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbedKind {
    #[default]
    Identity,
    Ode,
    Net,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    #[default]
    None,
    Planted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySection {
    #[serde(default = "default_span")]
    pub span_degrees: f64,
    #[serde(default = "default_step")]
    pub step_degrees: f64,
    #[serde(default = "default_delta0")]
    pub delta0: f64,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    #[serde(default = "default_max_widenings")]
    pub max_widenings: u32,
    /// Attributes whose values must match the source record's.
    #[serde(default)]
    pub match_attrs: Vec<String>,
    /// Restrict clusters to the source record's light label.
    #[serde(default)]
    pub match_light: bool,
    /// Fixed light filter for cluster retrieval; `match_light` wins when a
    /// source record is in play.
    #[serde(default = "default_light_filter")]
    pub light: crate::dataset::LightFilter,
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    #[serde(default = "default_max_extra_steps")]
    pub max_extra_steps: usize,
    #[serde(default = "default_yaw_tolerance")]
    pub yaw_tolerance: f64,
    #[serde(default = "default_frontalize_threshold")]
    pub frontalize_threshold: f64,
    #[serde(default)]
    pub embed: EmbedKind,
    #[serde(default)]
    pub probe: ProbeKind,
}

fn default_span() -> f64 {
    40.0
}

fn default_step() -> f64 {
    10.0
}

fn default_delta0() -> f64 {
    2.0
}

fn default_min_count() -> usize {
    1000
}

fn default_max_widenings() -> u32 {
    6
}

fn default_n_steps() -> usize {
    8
}

fn default_max_extra_steps() -> usize {
    4
}

fn default_yaw_tolerance() -> f64 {
    2.0
}

fn default_frontalize_threshold() -> f64 {
    20.0
}

fn default_light_filter() -> crate::dataset::LightFilter {
    crate::dataset::LightFilter::Any
}

impl Default for TrajectorySection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all trajectory fields have defaults")
    }
}

/// A parsed configuration plus the digest of the file it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub sha256: String,
    pub path: Option<PathBuf>,
}

impl LoadedConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let config: RunConfig = serde_json::from_slice(&bytes)?;
        config.validate_paths()?;
        Ok(LoadedConfig {
            config,
            sha256: crate::manifest::sha256_hex(&bytes),
            path: Some(path.to_path_buf()),
        })
    }

    /// Empty configuration for commands that run without one.
    pub fn empty() -> Self {
        LoadedConfig {
            config: RunConfig {
                seed: 0,
                schedule: None,
                model: None,
                train: None,
                embedder: None,
                dataset: None,
                trajectory: None,
            },
            sha256: crate::manifest::sha256_hex(b"{}"),
            path: None,
        }
    }
}

impl RunConfig {
    /// Every path named in the config must exist.
    pub fn validate_paths(&self) -> Result<()> {
        let mut paths: Vec<&PathBuf> = Vec::new();
        if let Some(ModelSection::Mlp { path: Some(p), .. }) = &self.model {
            paths.push(p);
        }
        if let Some(EmbedderSection { path: Some(p), .. }) = &self.embedder {
            paths.push(p);
        }
        if let Some(DatasetSection::Files {
            attributes,
            pose,
            light,
            samples_dir,
            denylist,
        }) = &self.dataset
        {
            paths.extend([attributes, pose, light]);
            paths.extend(samples_dir.iter());
            paths.extend(denylist.iter());
        }
        for p in paths {
            if !p.exists() {
                return Err(Error::InvalidSpec(format!(
                    "configured path does not exist: {}",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let section = self
            .schedule
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec("config is missing the schedule section".into()))?;
        build_schedule(&section.to_spec())
    }

    fn model_section(&self) -> Result<&ModelSection> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec("config is missing the model section".into()))
    }

    /// Builds the diffusion model; `Identity` models have no denoiser and
    /// are rejected here (callers that support identity generation check
    /// [`RunConfig::is_identity_model`] first).
    pub fn denoiser_model(&self) -> Result<DenoiserModel> {
        match self.model_section()? {
            ModelSection::Mixture {
                weights,
                means,
                variances,
            } => Ok(DenoiserModel::AnalyticMixture(GaussianMixture::new(
                weights.clone(),
                means.clone(),
                variances.clone(),
            )?)),
            ModelSection::Mlp { path: Some(p), .. } => {
                Ok(DenoiserModel::Mlp(MlpParams::load_dir(p)?))
            }
            ModelSection::Mlp { path: None, .. } => Err(Error::InvalidSpec(
                "mlp model has no trained parameters; set model.path".into(),
            )),
            ModelSection::Identity => Err(Error::InvalidSpec(
                "identity model has no denoiser network".into(),
            )),
        }
    }

    pub fn is_identity_model(&self) -> bool {
        matches!(self.model, Some(ModelSection::Identity))
    }

    pub fn mlp_arch(&self) -> Result<MlpArch> {
        match self.model_section()? {
            ModelSection::Mlp {
                hidden,
                time_features,
                ..
            } => Ok(MlpArch {
                hidden: *hidden,
                time_features: *time_features,
            }),
            other => Err(Error::InvalidSpec(format!(
                "training needs model.kind = mlp, got {other:?}"
            ))),
        }
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let t = self
            .train
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec("config is missing the train section".into()))?;
        Ok(TrainConfig {
            batch_size: t.batch_size,
            n_steps: t.n_steps,
            learning_rate: t.learning_rate,
            seed,
        })
    }

    fn dataset_section(&self) -> Result<&DatasetSection> {
        self.dataset
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec("config is missing the dataset section".into()))
    }

    /// Full records (metadata plus samples). Mixture datasets have no
    /// records; file datasets need `samples_dir`.
    pub fn dataset_records(&self) -> Result<Vec<DatasetRecord>> {
        match self.dataset_section()? {
            DatasetSection::Planted { spec } => PlantedModel::new(spec.clone())?.generate(),
            DatasetSection::Files {
                attributes,
                pose,
                light,
                samples_dir,
                denylist,
            } => {
                let report = dataset::load_annotations(attributes, pose, light)?;
                if report.dropped > 0 {
                    eprintln!(
                        "warning: {} annotation rows missing from at least one label file",
                        report.dropped
                    );
                }
                let dir = samples_dir.as_ref().ok_or_else(|| {
                    Error::InvalidSpec("dataset.samples_dir is required for this command".into())
                })?;
                let deny = match denylist {
                    Some(p) => dataset::load_denylist(p)?,
                    None => Default::default(),
                };
                dataset::load_samples(&report.records, dir, &deny)
            }
            DatasetSection::Mixture { .. } => Err(Error::InvalidSpec(
                "mixture datasets have no labeled records".into(),
            )),
        }
    }

    /// Annotation metadata only (no tensors needed).
    pub fn dataset_metas(&self) -> Result<Vec<dataset::RecordMeta>> {
        match self.dataset_section()? {
            DatasetSection::Files {
                attributes,
                pose,
                light,
                ..
            } => {
                let report = dataset::load_annotations(attributes, pose, light)?;
                if report.dropped > 0 {
                    eprintln!(
                        "warning: {} annotation rows missing from at least one label file",
                        report.dropped
                    );
                }
                Ok(report.records)
            }
            DatasetSection::Planted { spec } => {
                let records = PlantedModel::new(spec.clone())?.generate()?;
                Ok(records
                    .into_iter()
                    .map(|r| dataset::RecordMeta {
                        id: r.id,
                        yaw: r.yaw,
                        pitch: r.pitch,
                        roll: r.roll,
                        light: r.light,
                        attrs: r.attrs,
                    })
                    .collect())
            }
            DatasetSection::Mixture { .. } => Err(Error::InvalidSpec(
                "mixture datasets have no labeled records".into(),
            )),
        }
    }

    /// Training-data source for the denoiser.
    pub fn data_sampler(&self) -> Result<Box<dyn DataSampler>> {
        match self.dataset_section()? {
            DatasetSection::Mixture {
                weights,
                means,
                variances,
            } => Ok(Box::new(GaussianMixture::new(
                weights.clone(),
                means.clone(),
                variances.clone(),
            )?)),
            _ => {
                let samples = self
                    .dataset_records()?
                    .into_iter()
                    .map(|r| r.sample)
                    .collect();
                Ok(Box::new(PoolSampler::new(samples)?))
            }
        }
    }

    /// The planted generator, when the dataset is synthetic (used as the
    /// closed-loop yaw probe).
    pub fn planted_model(&self) -> Result<Option<PlantedModel>> {
        match &self.dataset {
            Some(DatasetSection::Planted { spec }) => Ok(Some(PlantedModel::new(spec.clone())?)),
            _ => Ok(None),
        }
    }

    pub fn trajectory_section(&self) -> TrajectorySection {
        self.trajectory.clone().unwrap_or_default()
    }

    /// Digests of the data files the config points at, for provenance.
    pub fn input_digests(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        if let Some(DatasetSection::Files {
            attributes,
            pose,
            light,
            denylist,
            ..
        }) = &self.dataset
        {
            for p in [attributes, pose, light].into_iter().chain(denylist.iter()) {
                out.insert(
                    p.display().to_string(),
                    crate::manifest::sha256_file(p)?,
                );
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{
                "seed": 7,
                "schedule": {"kind": "cosine", "timesteps": 50},
                "model": {"kind": "identity"}
            }"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert!(cfg.is_identity_model());
        let sched = cfg.schedule().unwrap();
        assert_eq!(sched.timesteps(), 50);
        let t = cfg.trajectory_section();
        assert_eq!(t.min_count, 1000);
        assert_eq!(t.span_degrees, 40.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"seed": 1, "scheduel": {}}"#);
        assert!(err.is_err());
        let err = serde_json::from_str::<RunConfig>(
            r#"{"schedule": {"kind": "cosine", "timesteps": 10, "extra": 1}}"#,
        );
        assert!(err.is_err());
    }

    #[test]
    fn missing_paths_are_flagged() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{
                "dataset": {"kind": "files",
                            "attributes": "/nonexistent/a.csv",
                            "pose": "/nonexistent/p.csv",
                            "light": "/nonexistent/l.csv"}
            }"#,
        )
        .unwrap();
        let err = cfg.validate_paths().unwrap_err();
        assert!(err.to_string().contains("/nonexistent/a.csv"));
    }

    #[test]
    fn mixture_model_builds() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{
                "model": {"kind": "mixture", "weights": [1.0],
                          "means": [[0.0, 0.0]], "variances": [1.0]}
            }"#,
        )
        .unwrap();
        let model = cfg.denoiser_model().unwrap();
        assert_eq!(model.dim(), 2);
    }
}
