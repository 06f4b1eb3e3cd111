//! Run configuration as a flat `section.key = value` document, flag
//! overrides and the canonical config digest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetSpec, Split, SyntheticConfig};
use crate::domain::{TagSet, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::feature_adaptation::FusionStrategy;
use crate::image_adaptation::GanForm;
use crate::metrics::Aggregation;
use crate::objectives::LossWeights;
use crate::trainer::{LrSchedule, ModelConfig, TrainConfig};

pub const SEED_ENV: &str = "SDACD_SEED";

/// SHA-256 (hex) of the value's JSON form with object keys sorted.
pub fn canonical_hash(value: &impl Serialize) -> String {
    // serde_json's map is ordered by key, so this is canonical
    let v = serde_json::to_value(value).expect("config types serialize to JSON");
    let digest = Sha256::digest(v.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub gan_form: GanForm,
    pub fusion: FusionStrategy,
    pub active_tags: TagSet,
    pub ia: bool,
    pub fa: bool,
    /// 0 disables clipping.
    pub grad_clip: f64,
    pub replay_buffer: bool,
    pub lr_schedule: LrSchedule,
    pub augment: bool,
    pub checkpoint_interval: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            gan_form: t.gan_form,
            fusion: t.fusion,
            active_tags: t.active_tags,
            ia: t.ia_enabled,
            fa: t.fa_enabled,
            grad_clip: t.grad_clip.unwrap_or(0.0),
            replay_buffer: t.replay_buffer,
            lr_schedule: t.lr_schedule,
            augment: t.augment,
            checkpoint_interval: t.checkpoint_interval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset root holding `train/`, `val/`, `test/`; empty when unset.
    pub root: String,
    pub train_split: Split,
    /// Validated after every epoch when set.
    pub val_split: Option<Split>,
    pub test_split: Split,
    pub tile_size: usize,
    pub resize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: String::new(),
            train_split: Split::Train,
            val_split: None,
            test_split: Split::Test,
            tile_size: 256,
            resize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub threshold: f64,
    pub aggregation: Aggregation,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            aggregation: Aggregation::Micro,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "runs/default".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainSection,
    pub loss: LossWeights,
    pub model: ModelConfig,
    pub data: DataSection,
    pub synth: SyntheticConfig,
    pub eval: EvalSection,
    pub output: OutputSection,
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, toml::Value)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.clone())),
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn to_value(&self) -> toml::Value {
        toml::Value::try_from(self).expect("run config serializes to TOML")
    }

    /// Every leaf as `(dotted key, value)`, sorted by key.
    pub fn entries(&self) -> Vec<(String, toml::Value)> {
        let mut out = Vec::new();
        flatten("", &self.to_value(), &mut out);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// One `section.key = value` line per leaf, sorted.
    pub fn to_canonical_string(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_canonical_string()).map_err(|e| Error::io(path, e))
    }

    pub fn hash(&self) -> String {
        canonical_hash(self)
    }

    /// Sets one dotted key from its textual flag value.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut root = self.to_value();
        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts.pop().filter(|l| !l.is_empty()).ok_or_else(|| config_err(format!("empty key `{key}`")))?;
        let mut table = root.as_table_mut().expect("root is a table");
        for p in &parts {
            table = table
                .get_mut(*p)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| config_err(format!("unknown config key `{key}`")))?;
        }
        let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"));
        let value = match (table.get(leaf), parsed) {
            (Some(toml::Value::Array(_)), _) => toml::Value::Array(
                raw.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| toml::Value::String(s.to_string()))
                    .collect(),
            ),
            (Some(toml::Value::String(_)), _) | (None, None) => toml::Value::String(raw.to_string()),
            (Some(toml::Value::Float(_)), Some(toml::Value::Integer(i))) => toml::Value::Float(i as f64),
            (_, Some(v)) => v,
            (Some(_), None) => return Err(config_err(format!("cannot parse `{raw}` for `{key}`"))),
        };
        if table.get(leaf).is_none() && !matches!((parts.as_slice(), leaf), (["data"], "val_split")) {
            return Err(config_err(format!("unknown config key `{key}`")));
        }
        table.insert(leaf.to_string(), value);
        let updated: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| config_err(format!("`{key}` = {raw}: {}", e.message())))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Seed precedence: explicit flag, then the environment variable, then
    /// the file. Applies to both the training and the synthesis seed.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<()> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| config_err(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        if let Some(seed) = flag.or(env) {
            self.train.seed = seed;
            self.synth.seed = seed;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            loss_weights: self.loss,
            gan_form: t.gan_form,
            fusion: t.fusion,
            active_tags: t.active_tags.clone(),
            ia_enabled: t.ia,
            fa_enabled: t.fa,
            grad_clip: (t.grad_clip > 0.0).then_some(t.grad_clip),
            replay_buffer: t.replay_buffer,
            lr_schedule: t.lr_schedule,
            augment: t.augment,
            checkpoint_interval: t.checkpoint_interval,
            threshold: self.eval.threshold,
            model: self.model.clone(),
        }
    }

    pub fn dataset(&self, split: Split) -> Result<DatasetSpec> {
        if self.data.root.is_empty() {
            return Err(config_err("no dataset root given (data.root)"));
        }
        Ok(DatasetSpec {
            root: PathBuf::from(&self.data.root),
            split,
            tile_size: Some(self.data.tile_size),
            resize: self.data.resize,
        })
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.output.dir)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.grad_clip < 0.0 || !self.train.grad_clip.is_finite() {
            return Err(config_err(format!("train.grad_clip must be >= 0, got {}", self.train.grad_clip)));
        }
        self.train_config().validate()?;
        self.synth.validate()?;
        if self.data.tile_size == 0 {
            return Err(config_err("data.tile_size must be >= 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_form_is_flat_and_round_trips() {
        let c = RunConfig::default();
        let text = c.to_canonical_string();
        assert!(text.lines().all(|l| !l.starts_with('[')));
        assert!(text.contains("train.lr = 0.0005\n"));
        assert!(text.contains("loss.lambda_cyc = 10.0\n"));
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn sectioned_and_flat_files_agree() {
        let flat = "train.lr = 0.001\nloss.lambda_f = 0.5\n";
        let sectioned = "[loss]\nlambda_f = 0.5\n[train]\nlr = 0.001\n";
        let a = RunConfig::from_toml_str(flat).unwrap();
        let b = RunConfig::from_toml_str(sectioned).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_and_invalid_keys_fail() {
        assert!(matches!(RunConfig::from_toml_str("train.nope = 1"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml_str("train.batch_size = 0").is_err());
        let mut c = RunConfig::default();
        assert!(c.set("train.nope", "1").is_err());
        assert!(c.set("eval.threshold", "1.5").is_err());
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn overrides_parse_by_type() {
        let mut c = RunConfig::default();
        c.set("train.lr", "1").unwrap();
        c.set("train.epochs", "3").unwrap();
        c.set("train.ia", "false").unwrap();
        c.set("train.active_tags", "original").unwrap();
        c.set("train.fusion", "output").unwrap();
        c.set("data.root", "/tmp/x").unwrap();
        c.set("data.val_split", "val").unwrap();
        assert_eq!(c.train.lr, 1.0);
        assert_eq!(c.train.epochs, 3);
        assert!(!c.train.ia);
        assert_eq!(c.train.active_tags, TagSet::original_only());
        assert_eq!(c.train.fusion, FusionStrategy::Output);
        assert_eq!(c.data.val_split, Some(Split::Val));
        assert_eq!(c.dataset(Split::Test).unwrap().root, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn train_config_mapping() {
        let mut c = RunConfig::default();
        c.train.grad_clip = 0.0;
        assert_eq!(c.train_config().grad_clip, None);
        assert_eq!(RunConfig::default().train_config(), TrainConfig::default());
    }

    proptest! {
        #[test]
        fn hash_ignores_key_order(lr in 1e-6f64..1.0, epochs in 1usize..50, seed in 0u64..1000) {
            let lines = [
                format!("train.lr = {lr:?}"),
                format!("train.epochs = {epochs}"),
                format!("synth.seed = {seed}"),
                "eval.threshold = 0.4".to_string(),
            ];
            let fwd = RunConfig::from_toml_str(&lines.join("\n")).unwrap();
            let rev: Vec<String> = lines.iter().rev().cloned().collect();
            let back = RunConfig::from_toml_str(&rev.join("\n")).unwrap();
            prop_assert_eq!(fwd.hash(), back.hash());
            let again = RunConfig::from_toml_str(&fwd.to_canonical_string()).unwrap();
            prop_assert_eq!(&again, &fwd);
            prop_assert_eq!(again.hash(), fwd.hash());
        }
    }
}
