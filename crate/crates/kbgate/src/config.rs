//! Configuration: profiles, templates, dialects, providers, defaults.
//!
//! Everything ships with working mock defaults; a TOML file given via
//! `--config` overrides any subset of fields. Secrets are never part of the
//! config — profiles name environment variables instead.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::ScoreScale;
use crate::error::{Error, Result};
use crate::gateway::{EndpointProfile, RetryPolicy};
use crate::retrieval::{ProviderConfig, RetrievalPolicy};
use crate::template::{Dialect, PromptTemplate, TemplateSet, TemplateVariant};

pub const HARD_TEMPLATE: &str = "You are an assistant capable of deciding whether a search is needed in a multimodal question-answering scenario. Below, I will provide you with a multimodal question that includes a text question and an image link.\nPlease respond with \"true\" or \"false,\" indicating whether a search is necessary (true) or not (false) to answer this multimodal question.\n{st_1}\nText question: {question}\n<Image>: {images}\n{st_2}";

pub const SOFT_TEMPLATE: &str = "You are an assistant capable of deciding whether a search is needed in a multimodal question-answering scenario. Below, I will provide you with a multimodal question that includes a text question and an image link.\nPlease respond with a score ranging from 1.0 to 5.0 indicating whether a search is necessary or not to answer this multimodal question.\n\nFollow these guidelines for scoring:\n- Your score has to be between 1.0 and 5.0, where 1.0 stands for an unnecessary search and 5.0 stands for a necessary search.\n- The score does not have to be integer.\nExample Response:\n4.0\n\n{st_1}\nText question: {question}\n<Image>: {images}\n{st_2}\nYour score: ";

pub const JUDGE_TEMPLATE: &str = "You are grading the answer to a question against its reference answer.\nQuestion: {question}\nReference answer: {gold}\nPrediction: {prediction}\nRate the prediction on a scale from 1.0 to 5.0, where 1.0 means completely wrong and 5.0 means fully correct. Partial credit is allowed.\nRespond with only the numeric score.";

pub const PROMPT_BASELINE_TEMPLATE: &str = "You are answering a multimodal question. First decide whether you need an external web search to answer it correctly.\n{st_1}\nText question: {question}\n<Image>: {images}\n{st_2}\nRespond with \"true\" if you need a search or \"false\" if you can answer from your own knowledge.";

pub fn default_template_body(variant: TemplateVariant) -> &'static str {
    match variant {
        TemplateVariant::Hard => HARD_TEMPLATE,
        TemplateVariant::Soft => SOFT_TEMPLATE,
        TemplateVariant::Judge => JUDGE_TEMPLATE,
        TemplateVariant::PromptBaseline => PROMPT_BASELINE_TEMPLATE,
    }
}

/// Pipeline-wide defaults, all overridable per invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Defaults {
    /// Threshold used when constructing hard labels from mean scores.
    pub label_epsilon: f64,
    /// Threshold used by the soft gate at inference time.
    pub skb_epsilon: f64,
    /// Number of repeated samples per query.
    pub samples: u32,
    /// Minimum count of parseable judge scores for a query to keep a mean.
    pub min_valid: u32,
    pub parallelism: usize,
    /// Character budget for the assembled retrieval context.
    pub context_budget: usize,
    /// Optional character budget applied to rendered prompts (0 = unlimited).
    pub prompt_char_budget: usize,
    pub sample_profile: String,
    pub judge_profile: String,
    pub boundary_profile: String,
    pub answer_profile: String,
    pub retrieval_provider: String,
    pub retrieval_policy: RetrievalPolicy,
    pub held_in_tolerance: f64,
}

impl Default for Defaults {
    fn default() -> Self {
        Self {
            label_epsilon: 4.0,
            skb_epsilon: 4.5,
            samples: 30,
            min_valid: 1,
            parallelism: 8,
            context_budget: 4000,
            prompt_char_budget: 0,
            sample_profile: "sampler".into(),
            judge_profile: "judge".into(),
            boundary_profile: "boundary".into(),
            answer_profile: "answerer".into(),
            retrieval_provider: "fixture".into(),
            retrieval_policy: RetrievalPolicy::Image,
            held_in_tolerance: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub scale: ScoreScale,
    pub defaults: Defaults,
    pub retry: RetryPolicy,
    pub profiles: BTreeMap<String, EndpointProfile>,
    pub dialects: BTreeMap<String, Dialect>,
    /// Template bodies keyed by variant name (hard, soft, judge,
    /// prompt-baseline).
    pub templates: BTreeMap<String, String>,
    pub providers: BTreeMap<String, ProviderConfig>,
    /// Max age for cached search results in seconds; 0 keeps entries forever.
    pub search_cache_max_age_secs: u64,
}

impl Default for Config {
    fn default() -> Self {
        let mut profiles = BTreeMap::new();
        for name in ["sampler", "judge", "boundary", "answerer"] {
            profiles.insert(name.to_string(), EndpointProfile::mock(name));
        }
        let mut dialects = BTreeMap::new();
        dialects.insert("plain".to_string(), Dialect::default());
        let templates = TemplateVariant::ALL
            .iter()
            .map(|v| (v.key().to_string(), default_template_body(*v).to_string()))
            .collect();
        let mut providers = BTreeMap::new();
        providers.insert("fixture".to_string(), ProviderConfig::fixture("fixtures/search"));
        Self {
            scale: ScoreScale::default(),
            defaults: Defaults::default(),
            retry: RetryPolicy::default(),
            profiles,
            dialects,
            templates,
            providers,
            search_cache_max_age_secs: 0,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let config: Config = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.scale.validate()?;
        if !self.scale.contains(self.defaults.label_epsilon) {
            return Err(Error::Config(format!(
                "label_epsilon {} outside the score scale",
                self.defaults.label_epsilon
            )));
        }
        for (name, profile) in &self.profiles {
            profile
                .validate()
                .map_err(|e| Error::Config(format!("profile {name:?}: {e}")))?;
            if !self.dialects.contains_key(&profile.dialect) {
                return Err(Error::Config(format!(
                    "profile {name:?} references unknown dialect {:?}",
                    profile.dialect
                )));
            }
        }
        for variant in TemplateVariant::ALL {
            self.template(variant)?.validate()?;
        }
        Ok(())
    }

    pub fn template(&self, variant: TemplateVariant) -> Result<PromptTemplate> {
        let body = self
            .templates
            .get(variant.key())
            .ok_or_else(|| Error::Config(format!("no template for variant {}", variant.key())))?;
        Ok(PromptTemplate::new(variant, body.clone()))
    }

    pub fn template_set(&self) -> Result<TemplateSet> {
        let mut set = TemplateSet::new();
        for variant in TemplateVariant::ALL {
            set.insert(variant, self.template(variant)?);
        }
        Ok(set)
    }

    pub fn profile(&self, name: &str) -> Result<&EndpointProfile> {
        self.profiles
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown profile {name:?}")))
    }

    pub fn dialect(&self, name: &str) -> Result<&Dialect> {
        self.dialects
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown dialect {name:?}")))
    }

    pub fn dialect_for(&self, profile_name: &str) -> Result<&Dialect> {
        self.dialect(&self.profile(profile_name)?.dialect)
    }

    pub fn provider(&self, name: &str) -> Result<&ProviderConfig> {
        self.providers
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown search provider {name:?}")))
    }

    /// Stable digest of the effective configuration. BTreeMap fields keep the
    /// serialization order deterministic.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_hash_stable() {
        let config = Config::default();
        config.validate().unwrap();
        assert_eq!(config.hash(), config.hash());
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let config = Config::default();
        let text = toml::to_string(&config).unwrap();
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(config.hash(), back.hash());
    }

    #[test]
    fn partial_toml_overrides_defaults() {
        let text = "[defaults]\nlabel_epsilon = 3.5\n";
        let config: Config = toml::from_str(text).unwrap();
        assert_eq!(config.defaults.label_epsilon, 3.5);
        assert_eq!(config.defaults.skb_epsilon, 4.5);
        config.validate().unwrap();
    }

    #[test]
    fn epsilon_outside_scale_rejected() {
        let text = "[defaults]\nlabel_epsilon = 9.0\n";
        let config: Config = toml::from_str(text).unwrap();
        assert!(config.validate().is_err());
    }
}
