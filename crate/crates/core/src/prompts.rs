//! Versioned prompt templates.
//!
//! Built-in templates live under `templates/v1/` and are compiled in. A
//! directory with the same file names overrides any subset of them.
//! Placeholders are `{{name}}`; inserted values are not rescanned.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::query::AmbiguityCode;

pub const PROMPT_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template slot `{{{{{0}}}}}` has no value")]
    MissingSlot(String),
    #[error("unterminated placeholder in template")]
    Unterminated,
    #[error("no clarification template for {0}")]
    MissingClarification(AmbiguityCode),
    #[error("template file {path}: {reason}")]
    File { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub version: String,
    pub system: String,
    pub parse: String,
    pub classify: String,
    pub clarify: String,
    pub clarify_templates: BTreeMap<AmbiguityCode, String>,
    pub rewrite: String,
    pub plan: String,
    pub judge: String,
    pub probe: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptSet {
    pub fn builtin() -> Self {
        Self {
            version: PROMPT_VERSION.to_string(),
            system: include_str!("../templates/v1/system.txt").to_string(),
            parse: include_str!("../templates/v1/parse.txt").to_string(),
            classify: include_str!("../templates/v1/classify.txt").to_string(),
            clarify: include_str!("../templates/v1/clarify.txt").to_string(),
            clarify_templates: parse_clarify_toml(include_str!("../templates/v1/clarify.toml"))
                .expect("built-in clarify.toml"),
            rewrite: include_str!("../templates/v1/rewrite.txt").to_string(),
            plan: include_str!("../templates/v1/plan.txt").to_string(),
            judge: include_str!("../templates/v1/judge.txt").to_string(),
            probe: include_str!("../templates/v1/probe.txt").to_string(),
        }
    }

    /// Built-ins overridden by whichever files exist in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        let read = |name: &str| -> Result<Option<String>, TemplateError> {
            let path = dir.join(name);
            if !path.exists() {
                return Ok(None);
            }
            fs::read_to_string(&path)
                .map(Some)
                .map_err(|e| TemplateError::File { path: path.display().to_string(), reason: e.to_string() })
        };
        for (name, slot) in [
            ("system.txt", &mut set.system),
            ("parse.txt", &mut set.parse),
            ("classify.txt", &mut set.classify),
            ("clarify.txt", &mut set.clarify),
            ("rewrite.txt", &mut set.rewrite),
            ("plan.txt", &mut set.plan),
            ("judge.txt", &mut set.judge),
            ("probe.txt", &mut set.probe),
        ] {
            if let Some(text) = read(name)? {
                *slot = text;
            }
        }
        if let Some(text) = read("clarify.toml")? {
            set.clarify_templates = parse_clarify_toml(&text).map_err(|reason| TemplateError::File {
                path: dir.join("clarify.toml").display().to_string(),
                reason,
            })?;
        }
        if let Some(v) = dir.file_name().and_then(|n| n.to_str()) {
            set.version = v.to_string();
        }
        Ok(set)
    }

    pub fn clarify_template(&self, code: AmbiguityCode) -> Result<&str, TemplateError> {
        self.clarify_templates.get(&code).map(String::as_str).ok_or(TemplateError::MissingClarification(code))
    }
}

/// Parse the clarification template config: a flat TOML table `CODE = "template"`.
pub fn parse_clarify_toml(text: &str) -> Result<BTreeMap<AmbiguityCode, String>, String> {
    let table: BTreeMap<String, String> = toml::from_str(text).map_err(|e| e.to_string())?;
    table.into_iter().map(|(k, v)| Ok((k.parse::<AmbiguityCode>()?, v))).collect()
}

pub fn render(template: &str, slots: &[(&str, &str)]) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        let close = after.find("}}").ok_or(TemplateError::Unterminated)?;
        let name = after[..close].trim();
        let value = slots
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| TemplateError::MissingSlot(name.to_string()))?;
        out.push_str(value);
        rest = &after[close + 2..];
    }
    out.push_str(rest);
    Ok(out)
}
