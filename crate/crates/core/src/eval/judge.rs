//! LLM-judge scoring on statistical accuracy, physical coherence,
//! meteorological relevance and overall quality.

use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::backend::{Backend, CallRecord, CompletionProvider, Purpose, RequestDefaults, ResponseCache};
use crate::templates::{Bindings, TemplateSet};

pub const SCORE_KEYS: [&str; 4] = ["SA", "PC", "MR", "OQ"];

const REASK: &str =
    "Your previous reply could not be scored. Reply again and end with exactly four lines of the form `KEY: <score>` for SA, PC, MR and OQ.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub sa: f64,
    pub pc: f64,
    pub mr: f64,
    pub oq: f64,
    pub judge_model: String,
    pub raw_response: String,
}

impl JudgeScore {
    pub fn values(&self) -> [f64; 4] {
        [self.sa, self.pc, self.mr, self.oq]
    }
}

fn score_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^[\s*#>-]*(SA|PC|MR|OQ)\b[*\s]*[:=][*\s]*(\d+(?:\.\d+)?)").expect("valid regex"))
}

/// Scores in SA, PC, MR, OQ order from lines starting with `KEY: value`.
/// The last line for a key wins; values are rounded to one decimal and must
/// fall in [1, 10].
pub fn parse_scores(text: &str) -> Result<[f64; 4], EvalError> {
    let mut found: [Option<f64>; 4] = [None; 4];
    for caps in score_line().captures_iter(text) {
        let slot = SCORE_KEYS.iter().position(|k| *k == &caps[1]).expect("key from regex");
        let value: f64 = caps[2].parse().expect("digits from regex");
        found[slot] = Some((value * 10.0).round() / 10.0);
    }
    let mut out = [0.0; 4];
    for (i, v) in found.into_iter().enumerate() {
        let v = v.ok_or_else(|| EvalError::JudgeParse(format!("no {} line", SCORE_KEYS[i])))?;
        if !(1.0..=10.0).contains(&v) {
            return Err(EvalError::JudgeParse(format!(
                "{} = {v} outside [1, 10]",
                SCORE_KEYS[i]
            )));
        }
        out[i] = v;
    }
    Ok(out)
}

pub fn format_scores(scores: &[f64; 4]) -> String {
    SCORE_KEYS
        .iter()
        .zip(scores)
        .map(|(k, v)| format!("{k}: {v:.1}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Judge backend wiring, shareable across threads.
#[derive(Clone)]
pub struct Judge {
    provider: Arc<dyn CompletionProvider>,
    defaults: RequestDefaults,
    templates: TemplateSet,
    cache: Option<ResponseCache>,
}

impl Judge {
    pub fn new(provider: Arc<dyn CompletionProvider>, defaults: RequestDefaults, templates: TemplateSet) -> Self {
        Self {
            provider,
            defaults,
            templates,
            cache: None,
        }
    }

    pub fn with_cache(mut self, cache: Option<ResponseCache>) -> Self {
        self.cache = cache;
        self
    }

    /// Score `caption` against the rendered series table. A reply that does
    /// not parse is re-asked once; the retry is issued as iteration 1.
    pub fn judge(&self, caption: &str, series_text: &str) -> Result<(JudgeScore, Vec<CallRecord>), EvalError> {
        let backend = Backend::new(self.provider.clone(), self.defaults.clone()).with_cache(self.cache.clone());
        let bindings = Bindings::new().set("series_table", series_text).set("caption", caption);
        let (system, user) = self.templates.get(Purpose::Judge).render(&bindings)?;
        let mut last_error = None;
        for attempt in 0..2u32 {
            let user = if attempt == 0 {
                user.clone()
            } else {
                format!("{user}\n\n{REASK}")
            };
            let request = backend.request(Purpose::Judge, attempt, system.clone(), user);
            let response = backend.complete(&request)?;
            match parse_scores(&response.text) {
                Ok([sa, pc, mr, oq]) => {
                    let score = JudgeScore {
                        sa,
                        pc,
                        mr,
                        oq,
                        judge_model: request.model,
                        raw_response: response.text,
                    };
                    return Ok((score, backend.take_calls()));
                }
                Err(e) => last_error = Some(e),
            }
        }
        Err(last_error.expect("two failed attempts"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ScriptEntry, ScriptedProvider};
    use proptest::prelude::*;

    fn judge(entries: Vec<ScriptEntry>) -> (Judge, Arc<ScriptedProvider>) {
        let p = Arc::new(ScriptedProvider::new(entries).unwrap());
        (
            Judge::new(p.clone(), RequestDefaults::default(), TemplateSet::builtin()),
            p,
        )
    }

    #[test]
    fn parses_plain_score_lines() {
        assert_eq!(
            parse_scores("SA: 8.2\nPC: 8.1\nMR: 8.4\nOQ: 8.3").unwrap(),
            [8.2, 8.1, 8.4, 8.3]
        );
    }

    #[test]
    fn parses_scores_inside_prose() {
        let text = "The caption is mostly right.\n\
                    Scores follow.\n\
                    **SA**: 7 (minor rounding)\n\
                    - PC: 6.5\n\
                    MR = 9\n\
                    OQ: 7.25\n\
                    I would give the OQ: 3 in the text but it is not at line start";
        assert_eq!(parse_scores(text).unwrap(), [7.0, 6.5, 9.0, 7.3]);
        assert!(parse_scores("overall SA: 8, PC: 8, MR: 8, OQ: 8").is_err());
        assert!(parse_scores("SA: 0\nPC: 5\nMR: 5\nOQ: 5").is_err());
    }

    #[test]
    fn scripted_judge_and_retry() {
        let (j, p) = judge(vec![ScriptEntry::role(
            Purpose::Judge,
            0,
            "SA: 8.2\nPC: 8.1\nMR: 8.4\nOQ: 8.3",
        )]);
        let (score, calls) = j.judge("cap", "table").unwrap();
        assert_eq!(score.values(), [8.2, 8.1, 8.4, 8.3]);
        assert_eq!((calls.len(), p.calls()), (1, 1));

        let (j, p) = judge(vec![
            ScriptEntry::role(Purpose::Judge, 0, "SA: 8\nPC: 8\nOQ: 8"),
            ScriptEntry::role(Purpose::Judge, 1, "SA: 8\nPC: 8\nOQ: 8"),
        ]);
        assert!(matches!(j.judge("cap", "table"), Err(EvalError::JudgeParse(_))));
        assert_eq!(p.calls(), 2);

        let (j, _) = judge(vec![
            ScriptEntry::role(Purpose::Judge, 0, "no scores"),
            ScriptEntry::role(Purpose::Judge, 1, "SA: 5\nPC: 6\nMR: 7\nOQ: 8"),
        ]);
        assert_eq!(j.judge("cap", "table").unwrap().0.oq, 8.0);
    }

    proptest! {
        #[test]
        fn format_then_parse_is_exact(raw in prop::array::uniform4(10u32..=100)) {
            let scores = raw.map(|v| v as f64 / 10.0);
            prop_assert_eq!(parse_scores(&format_scores(&scores)).unwrap(), scores);
        }
    }
}
