//! The three specialist agents: prompt rendering, backend calls, and
//! segmentation of their feedback into fragments.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{count_tokens, Backend, BackendError, Purpose};
use crate::embed::EmbeddingVector;
use crate::optimizer::Caption;
use crate::templates::{Bindings, TemplateError, TemplateSet};

/// Minimum whitespace tokens for a fragment to be kept.
pub const MIN_FRAGMENT_TOKENS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    Stat,
    Phys,
    Met,
}

impl AgentRole {
    pub const ALL: [AgentRole; 3] = [AgentRole::Stat, AgentRole::Phys, AgentRole::Met];

    pub fn purpose(self) -> Purpose {
        match self {
            AgentRole::Stat => Purpose::Stat,
            AgentRole::Phys => Purpose::Phys,
            AgentRole::Met => Purpose::Met,
        }
    }

    pub fn as_str(self) -> &'static str {
        self.purpose().as_str()
    }

    pub fn label(self) -> &'static str {
        match self {
            AgentRole::Stat => "Statistical Analyst",
            AgentRole::Phys => "Physics Interpreter",
            AgentRole::Met => "Meteorology Expert",
        }
    }

    fn seed_perspective(self) -> &'static str {
        match self {
            AgentRole::Stat => "Write from a statistical point of view: trends, extremes and key values.",
            AgentRole::Phys => "Write from a physical point of view: how the variables drive one another.",
            AgentRole::Met => "Write from an operational forecasting point of view: weather systems and impacts.",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown agent role `{s}` (expected stat, phys or met)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fragment {
    pub text: String,
    pub source_role: AgentRole,
    pub ordinal: usize,
    /// Byte offset of `text` within the gradient's raw text.
    pub offset: usize,
    #[serde(skip)]
    pub embedding: Option<EmbeddingVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextGradient {
    pub role: AgentRole,
    pub raw_text: String,
    pub fragments: Vec<Fragment>,
    pub iteration: u32,
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("{role} gradient at iteration {iteration} has no usable fragments")]
    EmptyGradient { role: AgentRole, iteration: u32 },
    #[error("{purpose} returned an empty caption")]
    EmptyCaption { purpose: Purpose },
}

/// Trimmed, non-empty segments with their byte offsets, before the token
/// floor is applied.
///
/// A segment ends after `.`, `!`, `?` or `;` when the next character is
/// whitespace or the end of input, and at every newline.
pub fn segments<'a>(raw: &'a str) -> Vec<(usize, &'a str)> {
    let mut out = Vec::new();
    let mut start = 0;
    let push = |from: usize, to: usize, out: &mut Vec<(usize, &'a str)>| {
        let piece = &raw[from..to];
        let trimmed = piece.trim();
        if !trimmed.is_empty() {
            let lead = piece.len() - piece.trim_start().len();
            out.push((from + lead, trimmed));
        }
    };
    let mut chars = raw.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if c == '\n' {
            push(start, i, &mut out);
            start = i + 1;
        } else if matches!(c, '.' | '!' | '?' | ';') {
            let at_boundary = chars.peek().is_none_or(|&(_, next)| next.is_whitespace());
            if at_boundary {
                let end = i + c.len_utf8();
                push(start, end, &mut out);
                start = end;
            }
        }
    }
    push(start, raw.len(), &mut out);
    out
}

/// Sentence-level fragments with at least [`MIN_FRAGMENT_TOKENS`] tokens.
pub fn fragment_split(raw: &str) -> Vec<String> {
    split_with_offsets(raw)
        .into_iter()
        .map(|(_, s)| s.to_string())
        .collect()
}

fn split_with_offsets(raw: &str) -> Vec<(usize, &str)> {
    segments(raw)
        .into_iter()
        .filter(|(_, s)| count_tokens(s) >= MIN_FRAGMENT_TOKENS)
        .collect()
}

impl TextGradient {
    pub fn from_response(role: AgentRole, raw_text: String, iteration: u32) -> Self {
        let fragments = split_with_offsets(&raw_text)
            .into_iter()
            .enumerate()
            .map(|(ordinal, (offset, text))| Fragment {
                text: text.to_string(),
                source_role: role,
                ordinal,
                offset,
                embedding: None,
            })
            .collect();
        Self {
            role,
            raw_text,
            fragments,
            iteration,
        }
    }
}

/// Everything an agent needs besides its role and the current caption.
pub struct AgentContext<'a> {
    pub backend: &'a Backend,
    pub templates: &'a TemplateSet,
    pub series_text: &'a str,
    pub summary_text: &'a str,
    pub limit_tokens: usize,
}

impl AgentContext<'_> {
    fn bindings(&self, caption: &str) -> Bindings {
        Bindings::new()
            .set("series_table", self.series_text)
            .set("summary", self.summary_text)
            .set("caption", caption)
            .set("limit_tokens", self.limit_tokens.to_string())
    }
}

/// One agent's textual gradient for the current caption.
pub fn generate_gradient(
    ctx: &AgentContext<'_>,
    role: AgentRole,
    caption: &Caption,
    iteration: u32,
) -> Result<TextGradient, AgentError> {
    let template = ctx.templates.get(role.purpose());
    let (system, user) = template.render(&ctx.bindings(&caption.text))?;
    let request = ctx.backend.request(role.purpose(), iteration, system, user);
    let response = ctx.backend.complete(&request)?;
    let gradient = TextGradient::from_response(role, response.text, iteration);
    if gradient.fragments.is_empty() {
        return Err(AgentError::EmptyGradient { role, iteration });
    }
    Ok(gradient)
}

/// Gradients for `roles`, returned in stat, phys, met order whatever order
/// the calls finish in.
pub fn generate_gradients(
    ctx: &AgentContext<'_>,
    roles: &[AgentRole],
    caption: &Caption,
    iteration: u32,
    concurrent: bool,
) -> Result<Vec<TextGradient>, AgentError> {
    let mut roles = roles.to_vec();
    roles.sort();
    roles.dedup();
    if !concurrent || roles.len() < 2 {
        return roles
            .into_iter()
            .map(|r| generate_gradient(ctx, r, caption, iteration))
            .collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = roles
            .iter()
            .map(|&r| scope.spawn(move || generate_gradient(ctx, r, caption, iteration)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("agent thread panicked"))
            .collect()
    })
}

/// The starting caption, written by `seed_role`.
pub fn initial_caption(ctx: &AgentContext<'_>, seed_role: AgentRole) -> Result<Caption, AgentError> {
    let template = ctx.templates.get(Purpose::Seed);
    let (system, user) = template.render(&ctx.bindings(""))?;
    let system = format!(
        "You are the {}. {}\n\n{system}",
        seed_role.label(),
        seed_role.seed_perspective()
    );
    let request = ctx.backend.request(Purpose::Seed, 0, system, user);
    let response = ctx.backend.complete(&request)?;
    let text = response.text.trim();
    if text.is_empty() {
        return Err(AgentError::EmptyCaption { purpose: Purpose::Seed });
    }
    Ok(Caption::new(text, 0))
}
