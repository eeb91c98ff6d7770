//! Flat run configuration: one JSON document holding every tunable, with
//! unknown keys rejected. CLI flags override file values and the merged
//! result is echoed into each output directory together with the PRNG
//! identifier, so any run can be reproduced from its artifacts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::TrialProtocol;
use crate::pairgen::RangeId;
use crate::pipeline::{Aggregation, ProbeMode, TrainConfig};
use crate::polarimetry::StokesConvention;
use crate::preproc::{DoGConfig, Normalize, PatchGrid};
use crate::rng::PRNG_ID;
use crate::synth::{CrossModalMap, SynthConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // master seed; stage seeds are derived streams
    pub seed: u64,

    // synthetic dataset
    pub n_subjects: usize,
    pub images_per_condition: usize,
    pub image_size: usize,
    pub blur_per_range: Vec<f64>,
    pub noise_std: f64,
    pub noise_scale_per_range: Option<Vec<f64>>,
    pub cross_modal_map: CrossModalMap,

    // preprocessing
    pub sigma0: f64,
    pub sigma1: f64,
    pub dog_radius: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub normalize: Normalize,
    pub convention: StokesConvention,
    pub probe_mode: ProbeMode,

    // training
    pub margin: f64,
    pub distance_epsilon: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub pair_ratio: f64,
    pub same_range: bool,
    pub resample_per_epoch: bool,
    pub width_groups: Vec<Vec<usize>>,
    pub freeze_except_last: Option<usize>,

    // evaluation protocol
    pub trials: usize,
    pub train_subjects: usize,
    pub aggregation: Aggregation,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SynthConfig::default();
        let d = DoGConfig::default();
        let g = PatchGrid::default();
        RunConfig {
            seed: 0,
            n_subjects: s.n_subjects,
            images_per_condition: s.images_per_condition,
            image_size: s.image_size,
            blur_per_range: s.blur_per_range,
            noise_std: s.noise_std,
            noise_scale_per_range: s.noise_scale_per_range,
            cross_modal_map: s.cross_modal_map,
            sigma0: d.sigma0,
            sigma1: d.sigma1,
            dog_radius: d.radius,
            patch_size: g.patch_size,
            stride: g.stride,
            normalize: Normalize::None,
            convention: StokesConvention::Difference,
            probe_mode: ProbeMode::Polarimetric,
            margin: t.margin,
            distance_epsilon: t.distance_epsilon,
            lr: t.lr,
            momentum: t.momentum,
            epochs: t.epochs,
            batch_size: t.batch_size,
            pair_ratio: t.pair_ratio,
            same_range: t.same_range,
            resample_per_epoch: t.resample_per_epoch,
            width_groups: t.width_groups,
            freeze_except_last: None,
            trials: 10,
            train_subjects: 25,
            aggregation: Aggregation::MeanEmbedding,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        self.dog_config().validate()?;
        self.patch_grid().validate()?;
        self.train_config().contrastive().validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Extra checks for the trial protocol; `n_subjects` is the number of
    /// subjects actually present in the evaluated dataset.
    pub fn validate_protocol(&self, n_subjects: usize) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be positive".into()));
        }
        if self.train_subjects == 0 || self.train_subjects >= n_subjects {
            return Err(Error::Config(format!(
                "train_subjects must be in 1..{n_subjects} (subjects in dataset)"
            )));
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_subjects: self.n_subjects,
            images_per_condition: self.images_per_condition,
            image_size: self.image_size,
            ranges: RangeId::all().to_vec(),
            blur_per_range: self.blur_per_range.clone(),
            noise_std: self.noise_std,
            noise_scale_per_range: self.noise_scale_per_range.clone(),
            cross_modal_map: self.cross_modal_map,
            seed: self.seed,
        }
    }

    pub fn dog_config(&self) -> DoGConfig {
        DoGConfig {
            sigma0: self.sigma0,
            sigma1: self.sigma1,
            radius: self.dog_radius,
        }
    }

    pub fn patch_grid(&self) -> PatchGrid {
        PatchGrid {
            patch_size: self.patch_size,
            stride: self.stride,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            margin: self.margin,
            distance_epsilon: self.distance_epsilon,
            lr: self.lr,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            pair_ratio: self.pair_ratio,
            same_range: self.same_range,
            resample_per_epoch: self.resample_per_epoch,
            width_groups: self.width_groups.clone(),
            freeze_except_last: self.freeze_except_last,
        }
    }

    pub fn protocol(&self) -> TrialProtocol {
        TrialProtocol {
            n_train: self.train_subjects,
            n_trials: self.trials,
            seed: self.seed,
        }
    }

    /// Write the fully resolved config (plus the PRNG identifier) into an
    /// output directory as `resolved_config.json`.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Resolved<'a> {
            prng: &'a str,
            #[serde(flatten)]
            config: &'a RunConfig,
        }
        std::fs::create_dir_all(out_dir)?;
        let text = serde_json::to_string_pretty(&Resolved {
            prng: PRNG_ID,
            config: self,
        })
        .map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(out_dir.join("resolved_config.json"), text + "\n")?;
        Ok(())
    }
}
