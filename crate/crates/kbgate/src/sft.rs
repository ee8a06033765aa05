//! Byte-exact SFT export for external boundary-model trainers.
//!
//! Hard records target the literal strings "true"/"false" — "true" for a
//! query outside the boundary (search needed). Soft records target the
//! flipped mean score formatted with exactly one decimal. A sidecar manifest
//! pins everything a trainer needs to reproduce the run: threshold, scale,
//! template hash, and the suggested fine-tuning hyperparameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{BoundaryLabel, ImageRef, QueryRecord, ScoreScale};
use crate::error::{Error, Result};
use crate::template::{render_query, Dialect, PromptTemplate, TemplateVariant};

/// Fine-tuning settings recorded as metadata for the external trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerHints {
    pub method: String,
    pub lora_targets: Vec<String>,
    pub lora_rank: u32,
    pub lora_alpha: u32,
    pub learning_rate: f64,
    pub optimizer: String,
    pub lr_scheduler: String,
    pub precision: String,
    pub batch_size: u32,
    pub gradient_accumulation: u32,
}

impl Default for TrainerHints {
    fn default() -> Self {
        Self {
            method: "lora".into(),
            lora_targets: vec!["q_proj".into(), "k_proj".into(), "v_proj".into()],
            lora_rank: 8,
            lora_alpha: 32,
            learning_rate: 1e-4,
            optimizer: "adamw".into(),
            lr_scheduler: "linear".into(),
            precision: "bf16".into(),
            batch_size: 1,
            gradient_accumulation: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftMeta {
    pub source: String,
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub scale: ScoreScale,
    pub trainer: TrainerHints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub variant: SftVariant,
    pub prompt: String,
    pub images: Vec<ImageRef>,
    pub target: String,
    pub meta: SftMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SftVariant {
    Hard,
    Soft,
}

impl SftVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hard" => Ok(SftVariant::Hard),
            "soft" => Ok(SftVariant::Soft),
            other => Err(Error::Validation(format!("unknown SFT variant {other:?}"))),
        }
    }

    fn template_variant(self) -> TemplateVariant {
        match self {
            SftVariant::Hard => TemplateVariant::Hard,
            SftVariant::Soft => TemplateVariant::Soft,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftManifest {
    pub variant: SftVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub scale: ScoreScale,
    pub template_sha256: String,
    pub record_count: usize,
    pub trainer: TrainerHints,
}

/// Build export records: one per label, ordered by query id so repeated
/// exports are byte-identical. Every label must resolve to a known query.
pub fn build_sft_records(
    labels: &[BoundaryLabel],
    queries: &[QueryRecord],
    variant: SftVariant,
    template: &PromptTemplate,
    dialect: &Dialect,
    scale: ScoreScale,
) -> Result<Vec<SftRecord>> {
    if template.variant != variant.template_variant() {
        return Err(Error::Config(format!(
            "template variant {} does not match export variant",
            template.variant
        )));
    }
    let by_id: BTreeMap<&str, &QueryRecord> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut sorted: Vec<&BoundaryLabel> = labels.iter().collect();
    sorted.sort_by(|a, b| a.query_id.cmp(&b.query_id));

    let mut records = Vec::with_capacity(sorted.len());
    for label in sorted {
        let query = by_id.get(label.query_id.as_str()).ok_or_else(|| {
            Error::Integrity(format!(
                "label references query {:?} absent from the query file",
                label.query_id
            ))
        })?;
        let target = match variant {
            SftVariant::Hard => {
                if label.hard {
                    "true".to_string()
                } else {
                    "false".to_string()
                }
            }
            SftVariant::Soft => {
                let soft = label.soft.ok_or_else(|| {
                    Error::Integrity(format!(
                        "label for query {:?} has no soft score; hard-only labels cannot feed a soft export",
                        label.query_id
                    ))
                })?;
                format!("{soft:.1}")
            }
        };
        let prompt = render_query(template, dialect, query)?.joined_text();
        records.push(SftRecord {
            variant,
            prompt,
            images: query.images.clone(),
            target,
            meta: SftMeta {
                source: query.source.clone(),
                query_id: query.id.clone(),
                epsilon: label.epsilon_used,
                scale,
                trainer: TrainerHints::default(),
            },
        });
    }
    Ok(records)
}

pub fn build_manifest(
    records: &[SftRecord],
    variant: SftVariant,
    epsilon: Option<f64>,
    scale: ScoreScale,
    template: &PromptTemplate,
) -> SftManifest {
    SftManifest {
        variant,
        epsilon,
        scale,
        template_sha256: template.body_sha256(),
        record_count: records.len(),
        trainer: TrainerHints::default(),
    }
}
