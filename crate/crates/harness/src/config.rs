//! Experiment configuration: JSON schema, defaults and validation.

use std::path::{Path, PathBuf};

use pfljscc_core::channel::SnrDistribution;
use pfljscc_core::codec::{CodecConfig, CompressionSpec, LossConfig};
use pfljscc_core::data::Sharding;
use pfljscc_core::federation::{Aggregation, FlSchedule};
use pfljscc_core::trainer::ChannelModel;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// What a run does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Ablate,
    VerifyTheory,
    ChannelSweep,
}

/// Where images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Procedural images; the class is the pattern family.
    Synthetic {
        count: usize,
        size: usize,
        classes: usize,
    },
    /// PNG files under `path`, cropped to the configured image size.
    ImageFolder { path: PathBuf },
}

/// Component switches matching the ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub dual_pipeline: bool,
    pub decoder_preprocess: bool,
    /// Keep the personalized block local; when off every parameter is shared.
    pub pfl: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            dual_pipeline: true,
            decoder_preprocess: true,
            pfl: true,
        }
    }
}

impl Toggles {
    /// Sets one toggle from `name=bool`.
    pub fn apply(&mut self, spec: &str) -> Result<()> {
        let (name, value) = spec.split_once('=').ok_or_else(|| {
            HarnessError::config("toggle", format!("expected name=bool, got `{spec}`"))
        })?;
        let value: bool = value
            .trim()
            .parse()
            .map_err(|_| HarnessError::config("toggle", format!("`{value}` is not a bool")))?;
        match name.trim() {
            "dual_pipeline" => self.dual_pipeline = value,
            "decoder_preprocess" => self.decoder_preprocess = value,
            "pfl" => self.pfl = value,
            other => {
                return Err(HarnessError::config(
                    "toggle",
                    format!("unknown toggle `{other}`"),
                ))
            }
        }
        Ok(())
    }

    /// The full system followed by each single-component-off variant.
    pub fn ablation_rows() -> [(&'static str, Toggles); 4] {
        let full = Toggles::default();
        [
            ("full", full),
            (
                "no_dual_pipeline",
                Toggles {
                    dual_pipeline: false,
                    ..full
                },
            ),
            (
                "no_decoder_preprocess",
                Toggles {
                    decoder_preprocess: false,
                    ..full
                },
            ),
            ("no_pfl", Toggles { pfl: false, ..full }),
        ]
    }
}

/// Codec shape and compression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSettings {
    /// Channel symbols per source value as `ratio_num / ratio_den`.
    pub ratio_num: usize,
    pub ratio_den: usize,
    pub patch: usize,
    pub width: usize,
    pub stages: usize,
    pub blocks_per_stage: usize,
}

impl Default for CodecSettings {
    fn default() -> Self {
        Self {
            ratio_num: 1,
            ratio_den: 6,
            patch: 2,
            width: 16,
            stages: 2,
            blocks_per_stage: 2,
        }
    }
}

/// Settings of the theory checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySettings {
    pub horizons: Vec<usize>,
    pub rate_horizons: Vec<usize>,
    pub rate_exponents: Vec<f64>,
    pub local_steps: usize,
    pub lemma7_draws: usize,
    pub positivity_draws: usize,
    pub symmetrize: bool,
}

impl Default for TheorySettings {
    fn default() -> Self {
        Self {
            horizons: vec![10, 20, 50, 100, 200],
            rate_horizons: vec![25, 50, 100, 200, 400],
            rate_exponents: vec![-0.25, -0.5, -0.75],
            local_steps: 5,
            lemma7_draws: 1000,
            positivity_draws: 10_000,
            symmetrize: false,
        }
    }
}

/// Full description of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub clients: usize,
    pub schedule: FlSchedule,
    pub aggregation: Aggregation,
    /// SNR distribution shared by every client unless `client_snr` is set.
    pub snr: SnrDistribution,
    pub client_snr: Option<Vec<SnrDistribution>>,
    /// Side of the square training images.
    pub image_size: usize,
    pub codec: CodecSettings,
    pub loss: LossConfig,
    pub channel: ChannelModel,
    pub batch_size: usize,
    pub dataset: DatasetSource,
    pub sharding: Sharding,
    pub test_fraction: f64,
    pub toggles: Toggles,
    /// SNRs at which test PSNR and MS-SSIM are reported.
    pub eval_snr_db: Vec<f64>,
    /// Evaluate every this many rounds (0: only after the last round).
    pub eval_every: usize,
    /// Record full-batch gradient norms each round.
    pub instrument: bool,
    pub parallel: bool,
    /// Seeds averaged by the ablation.
    pub ablation_seeds: Vec<u64>,
    pub sweep_snr_db: Vec<f64>,
    /// Checkpoint evaluated by the channel sweep; defaults to the output
    /// directory's checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub theory: TheorySettings,
    pub output_dir: PathBuf,
}

/// `lo, lo + step, ..., hi`.
pub fn snr_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| lo + step * i as f64).collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::paper_defaults()
    }
}

impl ExperimentConfig {
    /// Desk-scale task with the published schedule: 300 rounds of 5 local
    /// steps at learning rate 1e-4 with round and step decay.
    pub fn paper_defaults() -> Self {
        Self {
            mode: Mode::Train,
            seed: 1,
            clients: 4,
            schedule: FlSchedule::paper_defaults(),
            aggregation: Aggregation::Uniform,
            snr: SnrDistribution::new(7.5, 2.0).expect("valid default"),
            client_snr: None,
            image_size: 16,
            codec: CodecSettings::default(),
            loss: LossConfig::default(),
            channel: ChannelModel::Awgn,
            batch_size: 8,
            dataset: DatasetSource::Synthetic {
                count: 320,
                size: 16,
                classes: 4,
            },
            sharding: Sharding {
                alpha: Some(0.5),
                min_shard: 20,
            },
            test_fraction: 0.2,
            toggles: Toggles::default(),
            eval_snr_db: vec![-5.0, 0.0, 5.0, 10.0, 20.0],
            eval_every: 0,
            instrument: false,
            parallel: true,
            ablation_seeds: vec![1, 2, 3],
            sweep_snr_db: snr_grid(-5.0, 20.0, 2.5),
            checkpoint: None,
            theory: TheorySettings::default(),
            output_dir: PathBuf::from("out"),
        }
    }

    /// Reads a JSON file, or the built-in defaults for `paper-defaults`.
    pub fn load(source: &str) -> Result<Self> {
        if source == "paper-defaults" {
            return Ok(Self::paper_defaults());
        }
        let text = std::fs::read_to_string(source)
            .map_err(|e| HarnessError::config("config", format!("cannot read {source}: {e}")))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::config(json_field(&e), e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn codec_config(&self) -> Result<CodecConfig> {
        let compression = CompressionSpec::new(
            self.codec.ratio_num,
            self.codec.ratio_den,
            self.image_size,
            self.image_size,
            3,
        );
        let mut c = CodecConfig::new(compression);
        c.patch = self.codec.patch;
        c.width = self.codec.width;
        c.stages = self.codec.stages;
        c.blocks_per_stage = self.codec.blocks_per_stage;
        c.dual_pipeline = self.toggles.dual_pipeline;
        c.decoder_preprocess = self.toggles.decoder_preprocess;
        c.snr_min_db = self.snr.min_db;
        c.snr_max_db = self.snr.max_db;
        Ok(c)
    }

    /// SNR distribution of each client.
    pub fn client_snrs(&self) -> Vec<SnrDistribution> {
        match &self.client_snr {
            Some(list) => list.clone(),
            None => vec![self.snr; self.clients],
        }
    }

    /// Field-level validation; core-side checks run when objects are built.
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, message: String| HarnessError::config(field, message);
        if self.clients == 0 {
            return Err(err("clients", "must be at least 1".into()));
        }
        self.schedule.validate()?;
        self.snr.validate()?;
        if let Some(list) = &self.client_snr {
            if list.len() != self.clients {
                return Err(err(
                    "client_snr",
                    format!("expected {} entries, got {}", self.clients, list.len()),
                ));
            }
            for s in list {
                s.validate()?;
            }
        }
        if self.image_size == 0 {
            return Err(err("image_size", "must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(err(
                "batch_size",
                "contrastive loss needs at least 2 images per batch".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || self.test_fraction == 0.0 {
            return Err(err("test_fraction", "must lie in (0, 1)".into()));
        }
        if !(self.loss.temperature > 0.0) || !(self.loss.contrastive_weight >= 0.0) {
            return Err(err(
                "loss",
                "temperature must be positive and weight nonnegative".into(),
            ));
        }
        match &self.dataset {
            DatasetSource::Synthetic {
                count,
                size,
                classes,
            } => {
                if *count < self.clients * 2 {
                    return Err(err(
                        "dataset.synthetic.count",
                        "need at least two images per client".into(),
                    ));
                }
                if *size < self.image_size {
                    return Err(err(
                        "dataset.synthetic.size",
                        "must be at least image_size".into(),
                    ));
                }
                if !(1..=4).contains(classes) {
                    return Err(err(
                        "dataset.synthetic.classes",
                        "must be between 1 and 4".into(),
                    ));
                }
            }
            DatasetSource::ImageFolder { path } => {
                if path.as_os_str().is_empty() {
                    return Err(err("dataset.image-folder.path", "must not be empty".into()));
                }
            }
        }
        if let Some(a) = self.sharding.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(err("sharding.alpha", "must be positive and finite".into()));
            }
        }
        for (field, grid) in [
            ("eval_snr_db", &self.eval_snr_db),
            ("sweep_snr_db", &self.sweep_snr_db),
        ] {
            if grid.is_empty() || grid.iter().any(|x| !x.is_finite()) {
                return Err(err(
                    field,
                    "must be a nonempty list of finite values".into(),
                ));
            }
        }
        if self.mode == Mode::Ablate && self.ablation_seeds.is_empty() {
            return Err(err("ablation_seeds", "need at least one seed".into()));
        }
        let t = &self.theory;
        if t.horizons.is_empty() || t.horizons.contains(&0) {
            return Err(err("theory.horizons", "need positive horizons".into()));
        }
        if t.rate_horizons.len() < 2 || t.rate_horizons.contains(&0) {
            return Err(err(
                "theory.rate_horizons",
                "need at least two positive horizons".into(),
            ));
        }
        if t.rate_exponents.iter().any(|q| !(*q > -1.0 && *q < 0.0)) {
            return Err(err(
                "theory.rate_exponents",
                "each must lie in (-1, 0)".into(),
            ));
        }
        if t.local_steps == 0 {
            return Err(err("theory.local_steps", "must be at least 1".into()));
        }
        self.codec_config()?;
        Ok(())
    }
}

/// Best-effort field path of a serde error (`unknown field `x``, or the
/// message itself).
fn json_field(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    for marker in ["unknown field `", "missing field `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return name.to_string();
            }
        }
    }
    String::from("config")
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub snr_mean: Option<f64>,
    pub snr_std: Option<f64>,
    pub clients: Option<usize>,
    pub rounds: Option<usize>,
    pub local_steps: Option<usize>,
    pub toggles: Vec<String>,
    pub checkpoint: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(m) = self.snr_mean {
            cfg.snr.mean_db = m;
            if let Some(list) = &mut cfg.client_snr {
                list.iter_mut().for_each(|s| s.mean_db = m);
            }
        }
        if let Some(s) = self.snr_std {
            cfg.snr.std_db = s;
            if let Some(list) = &mut cfg.client_snr {
                list.iter_mut().for_each(|d| d.std_db = s);
            }
        }
        if let Some(n) = self.clients {
            cfg.clients = n;
        }
        if let Some(r) = self.rounds {
            cfg.schedule.rounds = r;
        }
        if let Some(k) = self.local_steps {
            cfg.schedule.local_steps = k;
        }
        for t in &self.toggles {
            cfg.toggles.apply(t)?;
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pfljscc_core::federation::LrRule;

    #[test]
    fn paper_defaults_schedule() {
        let c = ExperimentConfig::paper_defaults();
        assert_eq!(
            (c.schedule.rounds, c.schedule.local_steps, c.schedule.eta_u),
            (300, 5, 1e-4)
        );
        assert_eq!(c.schedule.lr_rule, LrRule::InverseSqrtRound);
        assert!(c.schedule.step_decay);
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip() {
        let c = ExperimentConfig::paper_defaults();
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_json_takes_defaults() {
        let c = ExperimentConfig::from_json(r#"{"clients": 2, "seed": 9}"#).unwrap();
        assert_eq!((c.clients, c.seed), (2, 9));
        assert_eq!(c.schedule, FlSchedule::paper_defaults());
    }

    #[test]
    fn unknown_field_is_named() {
        let e = ExperimentConfig::from_json(r#"{"clientz": 2}"#).unwrap_err();
        match e {
            HarnessError::Config { field, .. } => assert_eq!(field, "clientz"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_names_fields() {
        let mut c = ExperimentConfig::paper_defaults();
        c.clients = 0;
        assert!(
            matches!(c.validate(), Err(HarnessError::Config { ref field, .. }) if field == "clients")
        );
        let mut c = ExperimentConfig::paper_defaults();
        c.schedule.rounds = 0;
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn toggles_parse() {
        let mut t = Toggles::default();
        t.apply("pfl=false").unwrap();
        assert!(!t.pfl);
        assert!(t.apply("pfl").is_err());
        assert!(t.apply("unknown=true").is_err());
        assert!(t.apply("pfl=maybe").is_err());
    }

    #[test]
    fn ablation_rows_differ_in_one_toggle() {
        let rows = Toggles::ablation_rows();
        let full = rows[0].1;
        for (_, t) in &rows[1..] {
            let diffs = [
                t.dual_pipeline != full.dual_pipeline,
                t.decoder_preprocess != full.decoder_preprocess,
                t.pfl != full.pfl,
            ];
            assert_eq!(diffs.iter().filter(|d| **d).count(), 1);
        }
    }

    #[test]
    fn default_sweep_grid_has_eleven_points() {
        let g = snr_grid(-5.0, 20.0, 2.5);
        assert_eq!(g.len(), 11);
        assert_eq!((g[0], g[10]), (-5.0, 20.0));
    }
}
