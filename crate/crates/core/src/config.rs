//! Run configuration: flat `key=value` settings layered as
//! defaults, then a config file, then `MURMUR_*` environment variables,
//! then explicit overrides, the last writer winning.

use std::collections::BTreeMap;
use std::path::Path;

use crate::dataio::SynthConfig;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;
use crate::uncertainty::DEFAULT_MC_PASSES;

/// Prefix of environment overrides: `MURMUR_TRAIN_LR0=…` sets `train_lr0`.
pub const ENV_PREFIX: &str = "MURMUR_";

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "root seed; every random stream derives from it"),
    ("synth_patients", "patients in the synthetic fixture"),
    ("synth_mix", "absent,present,unknown patient proportions"),
    ("synth_min_duration_s", "shortest synthetic recording"),
    ("synth_max_duration_s", "longest synthetic recording"),
    (
        "synth_val_fraction",
        "share of each class held out for validation",
    ),
    (
        "synth_test_fraction",
        "share of each class held out for test",
    ),
    ("feature_hop_s", "hop between 3 s windows"),
    ("feature_normalize", "standardise each Mel bin (true/false)"),
    ("model_preset", "full | desk; base for the model_* keys"),
    ("model_layers", "encoder layers"),
    ("model_heads", "attention heads"),
    ("model_head_dim", "width of each head"),
    ("model_dim", "model width; must equal heads x head_dim"),
    ("model_conv_kernel", "depthwise kernel (odd)"),
    ("model_mlp_expand", "gating branch expansion ratio"),
    ("model_dropout", "dropout probability"),
    (
        "model_subsample_channels",
        "channels of the subsampling convolutions",
    ),
    ("model_max_rel_offset", "clip of relative attention offsets"),
    ("train_class_weights", "absent,present,unknown loss weights"),
    ("train_lr0", "initial learning rate"),
    ("train_weight_decay", "decoupled weight decay"),
    ("train_beta1", "Adam first-moment decay"),
    ("train_beta2", "Adam second-moment decay"),
    ("train_adam_eps", "Adam epsilon"),
    ("train_batch", "segments per step"),
    ("train_epochs", "maximum epochs"),
    (
        "train_patience",
        "epochs without improvement before halving the rate",
    ),
    ("train_lr_factor", "learning-rate multiplier on plateau"),
    (
        "train_max_steps",
        "stop after this many steps (0 = no limit)",
    ),
    ("mc_passes", "stochastic forward passes per segment"),
    (
        "calib_refit_patient",
        "fit a separate temperature on patient-level validation data",
    ),
];

/// Fully resolved settings of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub features: FeatureConfig,
    pub model_preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mc_passes: usize,
    pub calib_refit_patient: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 7;
        Self {
            seed,
            synth: SynthConfig {
                seed,
                ..SynthConfig::default()
            },
            features: FeatureConfig::default(),
            model_preset: "full".into(),
            model: ModelConfig::default(),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            mc_passes: DEFAULT_MC_PASSES,
            calib_refit_patient: false,
        }
    }
}

/// Raw settings in the order they were layered.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if !known(key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        let value = value.trim();
        if key == "model_preset" && !matches!(value, "full" | "desk") {
            return Err(Error::Config(format!("unknown model_preset `{value}`")));
        }
        apply(&mut RunConfig::default(), key, value)
            .map_err(|m| Error::Config(format!("{key}={value}: {m}")))?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Parses `key=value` text; blank lines and `#` comments are skipped.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key=value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_text(&text, &path.display().to_string())
    }

    /// Applies `MURMUR_<KEY>` variables; unrelated variables are ignored.
    pub fn merge_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        for (name, value) in vars {
            if let Some(rest) = name.strip_prefix(ENV_PREFIX) {
                let key = rest.to_ascii_lowercase();
                self.set(&key, &value)
                    .map_err(|e| Error::Config(format!("environment {name}: {e}")))?;
            }
        }
        Ok(())
    }

    /// `key=value` overrides, e.g. from repeated command-line flags.
    pub fn merge_pairs<'a>(&mut self, pairs: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{p}` is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(p) = self.values.get("model_preset") {
            cfg.model = match p.as_str() {
                "full" => ModelConfig::default(),
                "desk" => ModelConfig::desk(),
                other => return Err(Error::Config(format!("unknown model_preset `{other}`"))),
            };
            cfg.model_preset = p.clone();
        }
        for (k, v) in &self.values {
            apply(&mut cfg, k, v).map_err(|m| Error::Config(format!("{k}={v}: {m}")))?;
        }
        cfg.synth.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.features.hop_samples()?;
        if cfg.mc_passes == 0 {
            return Err(Error::Config("mc_passes must be positive".into()));
        }
        Ok(cfg)
    }
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn triple(v: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<f64> = v
        .split(',')
        .map(|s| num(s.trim()))
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| "expected three comma-separated numbers".to_string())
}

fn apply(cfg: &mut RunConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    match key {
        "seed" => cfg.seed = num(v)?,
        "synth_patients" => cfg.synth.n_patients = num(v)?,
        "synth_mix" => cfg.synth.class_mix = triple(v)?,
        "synth_min_duration_s" => cfg.synth.min_duration_s = num(v)?,
        "synth_max_duration_s" => cfg.synth.max_duration_s = num(v)?,
        "synth_val_fraction" => cfg.synth.holdout.0 = num(v)?,
        "synth_test_fraction" => cfg.synth.holdout.1 = num(v)?,
        "feature_hop_s" => cfg.features.hop_s = num(v)?,
        "feature_normalize" => cfg.features.normalize = num(v)?,
        "model_preset" => {}
        "model_layers" => cfg.model.layers = num(v)?,
        "model_heads" => cfg.model.heads = num(v)?,
        "model_head_dim" => cfg.model.head_dim = num(v)?,
        "model_dim" => cfg.model.model_dim = num(v)?,
        "model_conv_kernel" => cfg.model.conv_kernel = num(v)?,
        "model_mlp_expand" => cfg.model.mlp_expand = num(v)?,
        "model_dropout" => cfg.model.dropout_p = num(v)?,
        "model_subsample_channels" => cfg.model.subsample_channels = num(v)?,
        "model_max_rel_offset" => cfg.model.max_rel_offset = num(v)?,
        "train_class_weights" => cfg.train.class_weights = triple(v)?,
        "train_lr0" => cfg.train.lr0 = num(v)?,
        "train_weight_decay" => cfg.train.weight_decay = num(v)?,
        "train_beta1" => cfg.train.beta1 = num(v)?,
        "train_beta2" => cfg.train.beta2 = num(v)?,
        "train_adam_eps" => cfg.train.adam_eps = num(v)?,
        "train_batch" => cfg.train.batch = num(v)?,
        "train_epochs" => cfg.train.epochs = num(v)?,
        "train_patience" => cfg.train.plateau_patience = num(v)?,
        "train_lr_factor" => cfg.train.lr_factor = num(v)?,
        "train_max_steps" => {
            let n: usize = num(v)?;
            cfg.train.max_steps = (n > 0).then_some(n);
        }
        "mc_passes" => cfg.mc_passes = num(v)?,
        "calib_refit_patient" => cfg.calib_refit_patient = num(v)?,
        other => return Err(format!("unhandled key {other}")),
    }
    Ok(())
}

fn join3(v: [f64; 3]) -> String {
    v.map(|x| x.to_string()).join(",")
}

impl RunConfig {
    /// Every key with its resolved value, in documentation order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let (m, t) = (&self.model, &self.train);
        let values = [
            self.seed.to_string(),
            self.synth.n_patients.to_string(),
            join3(self.synth.class_mix),
            self.synth.min_duration_s.to_string(),
            self.synth.max_duration_s.to_string(),
            self.synth.holdout.0.to_string(),
            self.synth.holdout.1.to_string(),
            self.features.hop_s.to_string(),
            self.features.normalize.to_string(),
            self.model_preset.clone(),
            m.layers.to_string(),
            m.heads.to_string(),
            m.head_dim.to_string(),
            m.model_dim.to_string(),
            m.conv_kernel.to_string(),
            m.mlp_expand.to_string(),
            m.dropout_p.to_string(),
            m.subsample_channels.to_string(),
            m.max_rel_offset.to_string(),
            join3(t.class_weights),
            t.lr0.to_string(),
            t.weight_decay.to_string(),
            t.beta1.to_string(),
            t.beta2.to_string(),
            t.adam_eps.to_string(),
            t.batch.to_string(),
            t.epochs.to_string(),
            t.plateau_patience.to_string(),
            t.lr_factor.to_string(),
            t.max_steps.unwrap_or(0).to_string(),
            self.mc_passes.to_string(),
            self.calib_refit_patient.to_string(),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// FNV-1a of the canonical text form.
    pub fn hash(&self) -> u64 {
        self.to_text()
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
                (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
            })
    }

    /// Records the resolved configuration in an output directory.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("run_config.txt");
        let text = format!("# config hash {:016x}\n{}", self.hash(), self.to_text());
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
