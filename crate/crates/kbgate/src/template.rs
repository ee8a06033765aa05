//! Prompt templates and their rendering into wire messages.
//!
//! A template body is UTF-8 text with named `{placeholder}` slots. Dialects
//! describe per-endpoint rendering: the special-token strings and whether
//! image refs become separate message segments or inline text.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{ImageRef, QueryRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateVariant {
    Hard,
    Soft,
    Judge,
    PromptBaseline,
}

impl TemplateVariant {
    pub const ALL: [TemplateVariant; 4] = [
        TemplateVariant::Hard,
        TemplateVariant::Soft,
        TemplateVariant::Judge,
        TemplateVariant::PromptBaseline,
    ];

    pub fn key(&self) -> &'static str {
        match self {
            TemplateVariant::Hard => "hard",
            TemplateVariant::Soft => "soft",
            TemplateVariant::Judge => "judge",
            TemplateVariant::PromptBaseline => "prompt-baseline",
        }
    }

    /// Placeholders the variant's body must contain, exactly once each.
    fn required_placeholders(&self) -> &'static [&'static str] {
        match self {
            TemplateVariant::Judge => &["question", "prediction", "gold"],
            _ => &["st_1", "st_2", "question", "images"],
        }
    }
}

impl fmt::Display for TemplateVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.key())
    }
}

/// How a dialect renders the image slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageMode {
    /// Image refs become text (URI or inline digest) inside the prompt.
    #[default]
    Text,
    /// Image refs become separate image segments in the message.
    Segment,
}

/// Per-endpoint rendering of special tokens and image segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialect {
    #[serde(default)]
    pub st_1: String,
    #[serde(default)]
    pub st_2: String,
    #[serde(default)]
    pub image_mode: ImageMode,
}

impl Default for Dialect {
    fn default() -> Self {
        Self {
            st_1: "<ST_1>".into(),
            st_2: "<ST_2>".into(),
            image_mode: ImageMode::Text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub variant: TemplateVariant,
    pub body: String,
}

impl PromptTemplate {
    pub fn new(variant: TemplateVariant, body: impl Into<String>) -> Self {
        Self {
            variant,
            body: body.into(),
        }
    }

    /// Every required placeholder exactly once, no unknown placeholders.
    pub fn validate(&self) -> Result<()> {
        let required = self.variant.required_placeholders();
        let found = scan_placeholders(&self.body)?;
        for name in required {
            let count = found.iter().filter(|f| f == name).count();
            if count != 1 {
                return Err(Error::Config(format!(
                    "template {:?}: placeholder {{{name}}} must appear exactly once, found {count}",
                    self.variant.key()
                )));
            }
        }
        for name in &found {
            if !required.contains(&name.as_str()) {
                return Err(Error::Config(format!(
                    "template {:?}: unknown placeholder {{{name}}}",
                    self.variant.key()
                )));
            }
        }
        Ok(())
    }

    pub fn body_sha256(&self) -> String {
        hex::encode(Sha256::digest(self.body.as_bytes()))
    }
}

fn scan_placeholders(body: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let end = body[i + 1..]
                .find('}')
                .ok_or_else(|| Error::Config(format!("unterminated '{{' at byte {i}")))?;
            let name = &body[i + 1..i + 1 + end];
            if name.is_empty()
                || !name
                    .chars()
                    .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
            {
                return Err(Error::Config(format!("bad placeholder name {name:?}")));
            }
            out.push(name.to_string());
            i += end + 2;
        } else {
            i += 1;
        }
    }
    Ok(out)
}

/// One piece of a rendered message: text or an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Text(String),
    Image(ImageRef),
}

/// A rendered prompt ready for the wire: ordered text/image segments for a
/// single user turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedMessage {
    pub segments: Vec<Segment>,
}

impl RenderedMessage {
    pub fn from_text(text: impl Into<String>) -> Self {
        Self {
            segments: vec![Segment::Text(text.into())],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.segments.iter().all(|s| match s {
            Segment::Text(t) => t.is_empty(),
            Segment::Image(_) => false,
        })
    }

    /// Concatenated text view: image segments appear via their textual form.
    pub fn joined_text(&self) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Image(i) => out.push_str(&i.display_text()),
            }
        }
        out
    }

    /// Canonical bytes for hashing: length-framed segments with image refs
    /// replaced by their content digests, stable across platforms.
    pub fn canonical_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => {
                    out.extend_from_slice(b"T");
                    out.extend_from_slice(&(t.len() as u64).to_be_bytes());
                    out.extend_from_slice(t.as_bytes());
                }
                Segment::Image(i) => {
                    let digest = i.content_digest()?;
                    out.extend_from_slice(b"I");
                    out.extend_from_slice(&(digest.len() as u64).to_be_bytes());
                    out.extend_from_slice(digest.as_bytes());
                }
            }
        }
        Ok(out)
    }
}

/// Values substituted into a template body.
#[derive(Debug, Default, Clone)]
pub struct Substitutions<'a> {
    pub question: &'a str,
    pub images: &'a [ImageRef],
    pub prediction: Option<&'a str>,
    pub gold: Option<&'a str>,
}

/// Render a template for a query. Deterministic: identical inputs produce
/// byte-identical outputs.
pub fn render_query(
    template: &PromptTemplate,
    dialect: &Dialect,
    query: &QueryRecord,
) -> Result<RenderedMessage> {
    query.validate()?;
    render(
        template,
        dialect,
        &Substitutions {
            question: &query.text,
            images: &query.images,
            ..Default::default()
        },
    )
}

/// Render the judge template: (question, prediction, gold), text only.
pub fn render_judge(
    template: &PromptTemplate,
    question: &str,
    prediction: &str,
    gold: &str,
) -> Result<RenderedMessage> {
    render(
        template,
        &Dialect::default(),
        &Substitutions {
            question,
            images: &[],
            prediction: Some(prediction),
            gold: Some(gold),
        },
    )
}

pub fn render(
    template: &PromptTemplate,
    dialect: &Dialect,
    subs: &Substitutions<'_>,
) -> Result<RenderedMessage> {
    template.validate()?;
    let mut segments: Vec<Segment> = Vec::new();
    let mut text = String::new();
    let body = &template.body;
    let mut rest = body.as_str();
    while let Some(open) = rest.find('{') {
        text.push_str(&rest[..open]);
        let close = rest[open..].find('}').expect("validated template");
        let name = &rest[open + 1..open + close];
        match name {
            "st_1" => text.push_str(&dialect.st_1),
            "st_2" => text.push_str(&dialect.st_2),
            "question" => text.push_str(subs.question),
            "prediction" => text.push_str(subs.prediction.unwrap_or("")),
            "gold" => text.push_str(subs.gold.unwrap_or("")),
            "images" => match dialect.image_mode {
                ImageMode::Text => {
                    let refs: Vec<String> =
                        subs.images.iter().map(|i| i.display_text()).collect();
                    text.push_str(&refs.join(", "));
                }
                ImageMode::Segment => {
                    if !text.is_empty() {
                        segments.push(Segment::Text(std::mem::take(&mut text)));
                    }
                    for image in subs.images {
                        segments.push(Segment::Image(image.clone()));
                    }
                }
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown dialect token {{{other}}}"
                )))
            }
        }
        rest = &rest[open + close + 1..];
    }
    text.push_str(rest);
    if !text.is_empty() {
        segments.push(Segment::Text(text));
    }
    let message = RenderedMessage { segments };
    if message.is_empty() {
        return Err(Error::Validation("rendered message is empty".into()));
    }
    Ok(message)
}

/// Compose the plain answering message for a query: optional retrieved
/// context, then the question, then the images. This is the message both the
/// sampled model and the answering model decode from.
pub fn compose_answer_message(
    query: &QueryRecord,
    context: Option<&str>,
    dialect: &Dialect,
) -> Result<RenderedMessage> {
    query.validate()?;
    let mut segments = Vec::new();
    let mut text = String::new();
    if let Some(k) = context {
        text.push_str("Context:\n");
        text.push_str(k);
        text.push_str("\n\n");
    }
    text.push_str("Question: ");
    text.push_str(&query.text);
    text.push('\n');
    match dialect.image_mode {
        ImageMode::Text => {
            if !query.images.is_empty() {
                let refs: Vec<String> = query.images.iter().map(|i| i.display_text()).collect();
                text.push_str("<Image>: ");
                text.push_str(&refs.join(", "));
                text.push('\n');
            }
            segments.push(Segment::Text(text));
        }
        ImageMode::Segment => {
            segments.push(Segment::Text(text));
            for image in &query.images {
                segments.push(Segment::Image(image.clone()));
            }
        }
    }
    Ok(RenderedMessage { segments })
}

/// Template bodies keyed by variant, as loaded from configuration.
pub type TemplateSet = BTreeMap<TemplateVariant, PromptTemplate>;

pub fn template_hashes(set: &TemplateSet) -> BTreeMap<String, String> {
    set.iter()
        .map(|(v, t)| (v.key().to_string(), t.body_sha256()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_template_body;

    fn query() -> QueryRecord {
        QueryRecord {
            id: "q1".into(),
            source: "mix".into(),
            text: "Who is this?".into(),
            images: vec![ImageRef::uri("https://example.com/a.png")],
            gold_answer: "nobody".into(),
            gold_query: None,
            human_label: None,
        }
    }

    fn template(variant: TemplateVariant) -> PromptTemplate {
        PromptTemplate::new(variant, default_template_body(variant))
    }

    #[test]
    fn hard_template_renders_instruction_and_question() {
        let msg = render_query(&template(TemplateVariant::Hard), &Dialect::default(), &query())
            .unwrap();
        let text = msg.joined_text();
        assert!(text.contains(r#"respond with "true" or "false,""#), "{text}");
        assert!(text.contains("Who is this?"));
        assert!(text.contains("https://example.com/a.png"));
    }

    #[test]
    fn soft_template_renders_scale_and_example() {
        let msg = render_query(&template(TemplateVariant::Soft), &Dialect::default(), &query())
            .unwrap();
        let text = msg.joined_text();
        assert!(text.contains("score ranging from 1.0 to 5.0"));
        assert!(text.contains("Example Response:"));
    }

    #[test]
    fn empty_query_is_a_validation_error() {
        let mut q = query();
        q.text = String::new();
        q.images.clear();
        let err =
            render_query(&template(TemplateVariant::Hard), &Dialect::default(), &q).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn unknown_placeholder_is_a_config_error() {
        let t = PromptTemplate::new(TemplateVariant::Hard, "{st_1}{st_2}{question}{images}{bogus}");
        let err = render_query(&t, &Dialect::default(), &query()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn duplicate_placeholder_rejected() {
        let t = PromptTemplate::new(
            TemplateVariant::Hard,
            "{st_1}{st_2}{question}{question}{images}",
        );
        assert!(t.validate().is_err());
    }

    #[test]
    fn rendering_is_pure() {
        let t = template(TemplateVariant::Soft);
        let d = Dialect::default();
        let a = render_query(&t, &d, &query()).unwrap();
        let b = render_query(&t, &d, &query()).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.canonical_bytes().unwrap(),
            b.canonical_bytes().unwrap()
        );
    }

    #[test]
    fn segment_mode_emits_one_segment_per_image() {
        let mut q = query();
        q.images.push(ImageRef::uri("https://example.com/b.png"));
        let dialect = Dialect {
            image_mode: ImageMode::Segment,
            ..Dialect::default()
        };
        let msg = render_query(&template(TemplateVariant::Hard), &dialect, &q).unwrap();
        let images = msg
            .segments
            .iter()
            .filter(|s| matches!(s, Segment::Image(_)))
            .count();
        assert_eq!(images, 2);
    }

    #[test]
    fn judge_template_takes_three_slots() {
        let msg = render_judge(
            &template(TemplateVariant::Judge),
            "Who?",
            "a cat",
            "a dog",
        )
        .unwrap();
        let text = msg.joined_text();
        assert!(text.contains("a cat") && text.contains("a dog") && text.contains("Who?"));
    }
}
