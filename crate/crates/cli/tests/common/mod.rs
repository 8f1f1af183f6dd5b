//! Synthetic corpus and scripted-backend fixtures shared by the CLI tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use weathertgd::backend::{Purpose, ScriptEntry, ScriptedProvider};
use weathertgd::config::RunConfig;
use weathertgd::embed::LocalEmbedder;
use weathertgd::optimizer::Engine;
use weathertgd::series::{parse_series, InputFormat, WeatherSeries};
use weathertgd::templates::TemplateSet;

pub const CORPUS_SIZE: usize = 10;
pub const HOURS: usize = 72;

/// Hourly CSV for corpus sample `i`: diurnal temperature with a drift, a
/// falling or rising pressure, humidity opposite to temperature, and
/// occasional rain.
pub fn corpus_csv(i: usize) -> String {
    let mut out = String::from("timestamp,temperature_c,pressure_hpa,humidity_pct,wind_speed_ms,precipitation_mm\n");
    let phase = i as f64 * 0.4;
    let drift = (i as f64 - 4.5) * 0.05;
    for h in 0..HOURS {
        let t = h as f64;
        let day = (2.0 * std::f64::consts::PI * t / 24.0 + phase).sin();
        let temp = 8.0 + i as f64 + 5.0 * day + drift * t;
        let pressure = 1012.0 - (i as f64 - 5.0) * 0.08 * t;
        let humidity = (70.0 - 15.0 * day).clamp(0.0, 100.0);
        let wind = 3.0 + (i % 3) as f64 + 0.02 * t;
        let rain = if (h + i).is_multiple_of(17) { 1.5 } else { 0.0 };
        out.push_str(&format!(
            "2024-03-{:02}T{:02}:00:00Z,{temp:.2},{pressure:.2},{humidity:.2},{wind:.2},{rain:.1}\n",
            1 + h / 24,
            h % 24
        ));
    }
    out
}

pub fn corpus_series(i: usize) -> WeatherSeries {
    parse_series(
        corpus_csv(i).as_bytes(),
        InputFormat::Csv,
        false,
        format!("station-{i:02}"),
    )
    .expect("corpus parses")
}

/// Caption text for sample `i` after update `k`; vocabularies of different
/// `k` are disjoint, so successive captions never converge by accident.
pub fn caption_text(i: usize, k: u32, words: usize) -> String {
    let body: Vec<String> = (0..words).map(|w| format!("s{i}r{k}w{w}")).collect();
    format!("{}.", body.join(" "))
}

/// Shape of the scripted responses for one run.
#[derive(Debug, Clone, Copy, Default)]
pub struct Plan {
    /// Iteration whose update repeats the previous update's caption.
    pub repeat_at: Option<u32>,
    /// Tokens in every update response.
    pub update_words: Option<usize>,
    /// Tokens in every compress response.
    pub compress_words: Option<usize>,
}

pub fn script(i: usize, plan: Plan) -> Vec<ScriptEntry> {
    let update_words = plan.update_words.unwrap_or(12);
    let mut out = vec![ScriptEntry::role(
        Purpose::Seed,
        0,
        format!("Station {i} saw a mild and mostly cloudy period with light winds."),
    )];
    for k in 0..5u32 {
        let shared = format!("Mention the pressure drop of six hectopascals overnight at station {i}.");
        out.push(ScriptEntry::role(
            Purpose::Stat,
            k,
            format!("{shared}\nThe mean temperature value is understated by two degrees."),
        ));
        out.push(ScriptEntry::role(
            Purpose::Phys,
            k,
            format!("{shared}\nExplain that falling pressure drives the stronger afternoon wind."),
        ));
        out.push(ScriptEntry::role(
            Purpose::Met,
            k,
            "Add a frost advisory for the early morning hours.\nState the expected rain timing for commuters.",
        ));
        out.push(ScriptEntry::role(
            Purpose::Fusion,
            k,
            format!("Revision {k}: mention the pressure drop, explain the wind and add a frost advisory."),
        ));
        let text_k = match plan.repeat_at {
            Some(r) if k >= r && r > 0 => r - 1,
            _ => k,
        };
        out.push(ScriptEntry::role(
            Purpose::Update,
            k,
            caption_text(i, text_k, update_words),
        ));
        if let Some(w) = plan.compress_words {
            out.push(ScriptEntry::role(Purpose::Compress, k, compressed_text(i, k, w)));
        }
    }
    out
}

/// Compression reply with sentence ends every ten words.
pub fn compressed_text(i: usize, k: u32, words: usize) -> String {
    let mut s = String::new();
    for w in 0..words {
        s.push_str(&format!("c{i}r{k}w{w}"));
        s.push_str(if w % 10 == 9 || w + 1 == words { ". " } else { " " });
    }
    s.trim_end().to_string()
}

pub fn engine(entries: Vec<ScriptEntry>, config: RunConfig) -> Engine {
    let provider = Arc::new(ScriptedProvider::new(entries).expect("valid script"));
    Engine::new(provider, Arc::new(LocalEmbedder), TemplateSet::builtin(), config).expect("engine")
}

pub fn write_script(dir: &Path, name: &str, entries: &[ScriptEntry]) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(entries).unwrap()).unwrap();
    path
}

pub fn write_series(dir: &Path, i: usize) -> PathBuf {
    let path = dir.join(format!("station-{i:02}.csv"));
    std::fs::write(&path, corpus_csv(i)).unwrap();
    path
}

pub fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weathertgd"))
        .current_dir(dir)
        .args(args)
        .env_remove("WEATHERTGD_API_KEY")
        .output()
        .expect("binary runs")
}
