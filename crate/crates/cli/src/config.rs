use std::path::{Path, PathBuf};

use mogen_core::cost::{LatencyModel, LatencyProtocol};
use mogen_core::meta::{self, BuildConfig};
use mogen_core::predictors::{PredictorConfig, PredictorTrainConfig};
use mogen_core::sampler::{GuidanceScales, StretchPresets, DEFAULT_CHUNK, GUIDANCE_UNITS, PHASE_BATCH, BASELINE_BATCH};
use mogen_core::score::{ScoreConfig, SdeSchedule, TrainConfig};
use mogen_core::space::SearchSpace;
use mogen_core::tuner::TunerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaSection {
    /// Defaults to 10,000 (NB201) or 20,000 (MBv3).
    pub n: Option<usize>,
    pub bias: f64,
    pub d_task: usize,
    pub oracle_seed: u64,
    pub held_out_tasks: u64,
    pub latency_model: LatencyModel,
    pub latency_protocol: LatencyProtocol,
}

impl Default for MetaSection {
    fn default() -> Self {
        Self {
            n: None,
            bias: meta::DEFAULT_NB201_BIAS,
            d_task: mogen_core::oracle::DEFAULT_D_TASK,
            oracle_seed: 0,
            held_out_tasks: 4,
            latency_model: LatencyModel::default(),
            latency_protocol: LatencyProtocol::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSection {
    pub model: ScoreConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSection {
    pub model: PredictorConfig,
    pub train: PredictorTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub chunk: usize,
    pub units: GuidanceScales,
    pub baseline_batch: usize,
    pub phase_batch: usize,
    pub baseline_scales: GuidanceScales,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            chunk: DEFAULT_CHUNK,
            units: GUIDANCE_UNITS,
            baseline_batch: BASELINE_BATCH,
            phase_batch: PHASE_BATCH,
            baseline_scales: GuidanceScales::diffusionnag(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TunerSection {
    #[serde(flatten)]
    pub search: TunerConfig,
    /// Number of held-out tasks the objective averages over.
    pub tasks: usize,
}

impl Default for TunerSection {
    fn default() -> Self {
        Self {
            search: TunerConfig::default(),
            tasks: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub space: SearchSpace,
    pub seed: u64,
    pub precision: Precision,
    pub artifacts_dir: PathBuf,
    pub meta: MetaSection,
    pub sde: SdeSchedule,
    pub score: ScoreSection,
    pub predictors: PredictorSection,
    pub sampler: SamplerSection,
    /// Stretched-generation presets; the published optima when absent.
    pub scales: Option<StretchPresets>,
    pub tuner: TunerSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            space: SearchSpace::Nb201,
            seed: 0,
            precision: Precision::F64,
            artifacts_dir: PathBuf::from("artifacts"),
            meta: MetaSection::default(),
            sde: SdeSchedule::default(),
            score: ScoreSection::default(),
            predictors: PredictorSection::default(),
            sampler: SamplerSection::default(),
            scales: None,
            tuner: TunerSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    /// Every violated constraint, or nothing.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                out.push(msg);
            }
        };
        if let Err(e) = self.sde.validate() {
            check(false, format!("sde: {e}"));
        }
        check(self.meta.n != Some(0), "meta.n must be at least 1".into());
        check((0.0..=1.0).contains(&self.meta.bias), format!("meta.bias must be in [0, 1], got {}", self.meta.bias));
        check(self.meta.d_task > 0, "meta.d_task must be at least 1".into());
        check(self.meta.held_out_tasks > 0, "meta.held_out_tasks must be at least 1".into());
        if let Err(e) = self.meta.latency_protocol.validate() {
            check(false, format!("meta.latency_protocol: {e}"));
        }
        for (name, d, h) in [
            ("score.model", self.score.model.d_model, self.score.model.heads),
            ("predictors.model", self.predictors.model.d_model, self.predictors.model.heads),
        ] {
            check(h > 0 && d % h == 0, format!("{name}: d_model {d} must be divisible by heads {h}"));
        }
        check(self.score.train.steps > 0 && self.score.train.batch > 0, "score.train: steps and batch must be at least 1".into());
        check(self.score.train.lr > 0.0, "score.train.lr must be positive".into());
        check(
            self.predictors.train.steps > 0 && self.predictors.train.batch > 0,
            "predictors.train: steps and batch must be at least 1".into(),
        );
        check(self.predictors.train.lr > 0.0, "predictors.train.lr must be positive".into());
        check(
            (0.0..1.0).contains(&self.predictors.train.holdout),
            format!("predictors.train.holdout must be in [0, 1), got {}", self.predictors.train.holdout),
        );
        check(self.sampler.chunk > 0, "sampler.chunk must be at least 1".into());
        check(self.sampler.baseline_batch > 0 && self.sampler.phase_batch > 0, "sampler batch sizes must be at least 1".into());
        for (name, s) in [("sampler.units", &self.sampler.units), ("sampler.baseline_scales", &self.sampler.baseline_scales)] {
            if let Err(e) = s.validate() {
                check(false, format!("{name}: {e}"));
            }
        }
        if let Some(p) = &self.scales {
            for (name, s) in [("scales.efficient", &p.efficient), ("scales.accurate", &p.accurate)] {
                if let Err(e) = s.validate() {
                    check(false, format!("{name}: {e}"));
                }
            }
        }
        if let Err(e) = self.tuner.search.validate() {
            check(false, format!("tuner: {e}"));
        }
        check(self.tuner.tasks > 0, "tuner.tasks must be at least 1".into());
        check(
            self.tuner.tasks as u64 <= self.meta.held_out_tasks,
            format!("tuner.tasks ({}) exceeds meta.held_out_tasks ({})", self.tuner.tasks, self.meta.held_out_tasks),
        );
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(format!("invalid configuration:\n  - {}", p.join("\n  - "))))
        }
    }

    /// SHA-256 of the canonical JSON form, hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.artifacts_dir.join(self.short_hash())
    }

    pub fn meta_size(&self) -> usize {
        self.meta.n.unwrap_or_else(|| BuildConfig::default_size(self.space))
    }

    pub fn build_config(&self, n: usize, seed: u64) -> BuildConfig {
        let mut b = BuildConfig::new(self.space, n, seed);
        b.bias = if self.space == SearchSpace::Nb201 { self.meta.bias } else { 0.0 };
        b.d_task = self.meta.d_task;
        b.oracle_seed = self.meta.oracle_seed;
        b.latency_model = self.meta.latency_model;
        b.latency_protocol = self.meta.latency_protocol;
        b
    }

    pub fn presets(&self) -> StretchPresets {
        self.scales.unwrap_or_else(|| StretchPresets::published(self.space))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = RunConfig::default();
        assert!(c.problems().is_empty(), "{:?}", c.problems());
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"spcae": "nb201"}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"sde": {"sigma_mn": 0.1}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"tuner": {"budget": 3, "bogus": 1}}"#).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"space": "mbv3", "score": {"train": {"steps": 5}}, "tuner": {"budget": 4}}"#).unwrap();
        assert_eq!(c.space, SearchSpace::Mbv3);
        assert_eq!(c.score.train.steps, 5);
        assert_eq!(c.score.train.batch, TrainConfig::default().batch);
        assert_eq!(c.tuner.search.budget, 4);
        assert_eq!(c.meta_size(), 20_000);
    }

    #[test]
    fn problems_are_collected() {
        let mut c = RunConfig::default();
        c.sde.sigma_min = 10.0;
        c.score.model.heads = 3;
        c.sampler.chunk = 0;
        assert_eq!(c.problems().len(), 3);
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.short_hash().len(), 16);
    }
}
