//! Run configuration: one TOML file with `[data]`, `[model]` and `[train]`
//! tables. Command-line `key=value` overrides are applied on top.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ConnaError, Result};
use crate::types::{CreativeShape, TypeOrdering, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub n_slogans: usize,
    pub n_templates: usize,
    /// `K`, the number of historical items per context.
    pub history_len: usize,
    pub items_per_creative: usize,
    pub slogans_per_creative: usize,
    pub latent_dim: usize,
    /// Affinities are `scale · ⟨u, o⟩ / √latent_dim` with standard normal factors.
    pub affinity_scale: f64,
    /// Noise temperature of positive sampling; 0 selects the top objects.
    pub temperature: f64,
    /// History slots filled with random (non-top) items.
    pub history_noise: usize,
    /// Probability that one positive item is drawn from outside the history.
    pub outside_history_prob: f64,
    pub max_negatives: usize,
    /// Temperature of the exposure model that picks negative replacements.
    pub negative_temperature: f64,
    pub n_records: usize,
    /// Train/dev/test proportions by timestamp.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_users: 500,
            n_items: 200,
            n_slogans: 20,
            n_templates: 10,
            history_len: 20,
            items_per_creative: 3,
            slogans_per_creative: 2,
            latent_dim: 8,
            affinity_scale: 1.5,
            temperature: 0.2,
            history_noise: 4,
            outside_history_prob: 0.1,
            max_negatives: 3,
            negative_temperature: 1.0,
            n_records: 20_000,
            split: [0.7, 0.1, 0.2],
        }
    }
}

impl DataConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab {
            users: self.n_users,
            items: self.n_items,
            slogans: self.n_slogans,
            templates: self.n_templates,
        }
    }

    pub fn shape(&self) -> CreativeShape {
        CreativeShape {
            items: self.items_per_creative,
            slogans: self.slogans_per_creative,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("data.{k}");
        if self.n_users == 0 {
            return Err(ConnaError::config(key("n_users"), "must be positive"));
        }
        if self.items_per_creative == 0 {
            return Err(ConnaError::config(
                key("items_per_creative"),
                "must be positive",
            ));
        }
        if self.n_items < self.items_per_creative.max(self.history_len) + 1 {
            return Err(ConnaError::config(
                key("n_items"),
                "must exceed both items_per_creative and history_len",
            ));
        }
        if self.n_slogans < self.slogans_per_creative + 1 {
            return Err(ConnaError::config(
                key("n_slogans"),
                "must exceed slogans_per_creative",
            ));
        }
        if self.n_templates < 2 {
            return Err(ConnaError::config(
                key("n_templates"),
                "needs at least two templates",
            ));
        }
        if self.history_len < self.items_per_creative
            || self.history_noise > self.history_len - self.items_per_creative
        {
            return Err(ConnaError::config(
                key("history_noise"),
                "history must keep at least items_per_creative top items",
            ));
        }
        if self.latent_dim == 0 {
            return Err(ConnaError::config(key("latent_dim"), "must be positive"));
        }
        if !(self.temperature >= 0.0) || !(self.negative_temperature > 0.0) {
            return Err(ConnaError::config(
                key("temperature"),
                "temperatures must be non-negative",
            ));
        }
        if !(0.0..=1.0).contains(&self.outside_history_prob) {
            return Err(ConnaError::config(
                key("outside_history_prob"),
                "must lie in [0, 1]",
            ));
        }
        if self.max_negatives > 3 {
            return Err(ConnaError::config(
                key("max_negatives"),
                "at most three negatives per record",
            ));
        }
        let total: f64 = self.split.iter().sum();
        if self.split.iter().any(|r| *r < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(ConnaError::config(
                key("split"),
                "ratios must be non-negative and sum to 1",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderMode {
    Nar,
    ArBaseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Feed-forward hidden width; 0 means `4 · d_model`.
    pub ffn_hidden: usize,
    pub decoder: DecoderMode,
    pub ar_ordering: TypeOrdering,
    /// Reuse the content embedding tables as output projections.
    pub tie_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 3,
            ffn_hidden: 0,
            decoder: DecoderMode::Nar,
            ar_ordering: TypeOrdering::ITEMS_SLOGANS_TEMPLATE,
            tie_output: false,
        }
    }
}

impl ModelConfig {
    pub fn ffn_width(&self) -> usize {
        if self.ffn_hidden == 0 {
            4 * self.d_model
        } else {
            self.ffn_hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(ConnaError::config("model.d_model", "must be positive"));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(ConnaError::config("model.heads", "must divide d_model"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Set loss plus the contrastive margin term.
    SetContrastive,
    SetOnly,
    IndependentXent,
}

impl Objective {
    pub fn label(self) -> &'static str {
        match self {
            Self::SetContrastive => "full",
            Self::SetOnly => "w/o contrastive",
            Self::IndependentXent => "independent xent",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub objective: Objective,
    /// Hard cap on optimizer steps; 0 means unlimited.
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            lr: 1e-3,
            batch_size: 32,
            epochs: 20,
            patience: 5,
            gamma: 1.0,
            lambda: 0.5,
            objective: Objective::SetContrastive,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ConnaError::config("train.lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(ConnaError::config("train.batch_size", "must be positive"));
        }
        if !(self.gamma >= 0.0) {
            return Err(ConnaError::config(
                "train.gamma",
                "margin must be non-negative",
            ));
        }
        if !(self.lambda >= 0.0) {
            return Err(ConnaError::config("train.lambda", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| toml_error(&e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ConnaError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `section.key=value` overrides; values are parsed as TOML
    /// literals and fall back to bare strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table = toml::Table::try_from(self).expect("config serializes");
        for ov in overrides {
            let ov = ov.as_ref();
            let (key, raw) = ov.split_once('=').ok_or_else(|| {
                ConnaError::config(ov, "override must look like section.key=value")
            })?;
            let key = key.trim();
            let path: Vec<&str> = key.split('.').collect();
            let [section, field] = path.as_slice() else {
                return Err(ConnaError::config(key, "override key must be section.key"));
            };
            let sec = table
                .get_mut(*section)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| ConnaError::config(key, "unknown section"))?;
            if !sec.contains_key(*field) {
                return Err(ConnaError::config(key, "unknown key"));
            }
            let value = parse_value(raw.trim());
            sec.insert((*field).to_string(), value);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| toml_error(&e))?;
        Ok(cfg)
    }

    /// Canonical JSON form; the basis of [`RunConfig::hash`].
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_json().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn toml_error(e: &toml::de::Error) -> ConnaError {
    let msg = e.message().to_string();
    // toml reports the offending field inside backticks for unknown/missing keys
    let key = msg
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<config>".to_string());
    ConnaError::config(key, msg)
}
