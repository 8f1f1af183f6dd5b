//! Prompt templates with `{placeholder}` substitution.
//!
//! A template file has a `[system]` section followed by a `[user]` section.
//! Built-in templates ship in `templates/`; a configured directory may
//! override any of them with `<purpose>.txt`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::backend::{sha256_hex, Purpose};

pub const PLACEHOLDERS: [&str; 7] = [
    "series_table",
    "summary",
    "caption",
    "consensus",
    "unique",
    "gradient",
    "limit_tokens",
];

const BUILTIN: [(Purpose, &str); 8] = [
    (Purpose::Seed, include_str!("../templates/seed.txt")),
    (Purpose::Stat, include_str!("../templates/stat.txt")),
    (Purpose::Phys, include_str!("../templates/phys.txt")),
    (Purpose::Met, include_str!("../templates/met.txt")),
    (Purpose::Fusion, include_str!("../templates/fusion.txt")),
    (Purpose::Update, include_str!("../templates/update.txt")),
    (Purpose::Compress, include_str!("../templates/compress.txt")),
    (Purpose::Judge, include_str!("../templates/judge.txt")),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("template `{name}`: {detail}")]
    Malformed { name: String, detail: String },
    #[error("template `{name}` uses unknown placeholder `{{{placeholder}}}`")]
    UnknownPlaceholder { name: String, placeholder: String },
    #[error("template `{name}` needs a value for `{{{placeholder}}}`")]
    MissingBinding { name: String, placeholder: String },
    #[error("reading template {path}: {detail}")]
    Io { path: String, detail: String },
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("valid regex"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub purpose: Purpose,
    pub system_text: String,
    pub user_text: String,
    source: String,
}

impl PromptTemplate {
    pub fn parse(purpose: Purpose, source: &str) -> Result<Self, TemplateError> {
        let malformed = |detail: &str| TemplateError::Malformed {
            name: purpose.to_string(),
            detail: detail.to_string(),
        };
        // 0: preamble, 1: system, 2: user
        let mut section = 0;
        let mut sections: [Vec<&str>; 3] = Default::default();
        for line in source.lines() {
            match line.trim_end() {
                "[system]" if section == 0 => section = 1,
                "[user]" if section == 1 => section = 2,
                "[user]" if section == 0 => return Err(malformed("[user] before [system]")),
                _ if section == 0 && !line.trim().is_empty() => return Err(malformed("text before [system]")),
                _ => sections[section].push(line),
            }
        }
        if section != 2 {
            return Err(malformed("needs [system] and [user] sections"));
        }
        let [_, sys_lines, user_lines] = sections;
        let template = Self {
            purpose,
            system_text: sys_lines.join("\n").trim().to_string(),
            user_text: user_lines.join("\n").trim().to_string(),
            source: source.to_string(),
        };
        if template.system_text.is_empty() || template.user_text.is_empty() {
            return Err(malformed("empty section"));
        }
        for name in template.placeholders() {
            if !PLACEHOLDERS.contains(&name.as_str()) {
                return Err(TemplateError::UnknownPlaceholder {
                    name: purpose.to_string(),
                    placeholder: name,
                });
            }
        }
        Ok(template)
    }

    pub fn placeholders(&self) -> Vec<String> {
        let mut names: Vec<String> = placeholder_re()
            .captures_iter(&self.system_text)
            .chain(placeholder_re().captures_iter(&self.user_text))
            .map(|c| c[1].to_string())
            .collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.source.as_bytes())
    }

    /// Substitute bindings into both sections in a single pass; inserted
    /// values are not re-scanned for placeholders.
    pub fn render(&self, bindings: &Bindings) -> Result<(String, String), TemplateError> {
        Ok((
            self.render_text(&self.system_text, bindings)?,
            self.render_text(&self.user_text, bindings)?,
        ))
    }

    fn render_text(&self, text: &str, bindings: &Bindings) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(text.len());
        let mut last = 0;
        for caps in placeholder_re().captures_iter(text) {
            let m = caps.get(0).expect("match");
            let name = &caps[1];
            let value = bindings.get(name).ok_or_else(|| TemplateError::MissingBinding {
                name: self.purpose.to_string(),
                placeholder: name.to_string(),
            })?;
            out.push_str(&text[last..m.start()]);
            out.push_str(value);
            last = m.end();
        }
        out.push_str(&text[last..]);
        Ok(out)
    }
}

/// Placeholder values for one render.
#[derive(Debug, Clone, Default)]
pub struct Bindings(BTreeMap<&'static str, String>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, name: &'static str, value: impl Into<String>) -> Self {
        debug_assert!(PLACEHOLDERS.contains(&name), "unknown placeholder {name}");
        self.0.insert(name, value.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }
}

#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<Purpose, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|&(p, src)| (p, PromptTemplate::parse(p, src).expect("built-in template parses")))
            .collect();
        Self { templates }
    }

    /// Built-ins, with `<dir>/<purpose>.txt` taking precedence when present.
    pub fn load(dir: Option<&Path>) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        let Some(dir) = dir else {
            return Ok(set);
        };
        for purpose in Purpose::ALL {
            let path = dir.join(format!("{purpose}.txt"));
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
            set.templates.insert(purpose, PromptTemplate::parse(purpose, &text)?);
        }
        Ok(set)
    }

    /// Built-ins overridden by `sources`, keyed by purpose name.
    pub fn from_sources(sources: &BTreeMap<String, String>) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        for (name, text) in sources {
            let purpose = Purpose::parse(name).ok_or_else(|| TemplateError::Malformed {
                name: name.clone(),
                detail: "no such template".into(),
            })?;
            set.templates.insert(purpose, PromptTemplate::parse(purpose, text)?);
        }
        Ok(set)
    }

    pub fn get(&self, purpose: Purpose) -> &PromptTemplate {
        &self.templates[&purpose]
    }

    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.templates.iter().map(|(p, t)| (p.to_string(), t.hash())).collect()
    }

    pub fn sources(&self) -> BTreeMap<String, String> {
        self.templates
            .iter()
            .map(|(p, t)| (p.to_string(), t.source().to_string()))
            .collect()
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}
