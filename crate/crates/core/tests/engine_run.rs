use std::sync::Arc;

use weathertgd::ablation::{comparison_csv, run_ablation, AblationRow};
use weathertgd::backend::{BackendError, Purpose, ScriptEntry, ScriptedProvider};
use weathertgd::config::RunConfig;
use weathertgd::embed::LocalEmbedder;
use weathertgd::optimizer::Engine;
use weathertgd::series::{parse_series, InputFormat, WeatherSeries};
use weathertgd::templates::TemplateSet;
use weathertgd::trace::{RunTrace, StopReason, TraceWriter};

fn series() -> WeatherSeries {
    let mut csv = String::from("timestamp,temperature_c,wind_speed_ms\n");
    for h in 0..36 {
        csv.push_str(&format!(
            "2024-05-{:02}T{:02}:00:00Z,{},{}\n",
            1 + h / 24,
            h % 24,
            12 + h % 7,
            2 + h % 3
        ));
    }
    parse_series(csv.as_bytes(), InputFormat::Csv, false, "hill-top").unwrap()
}

fn entries(iterations: u32, skip_phys_at: Option<u32>) -> Vec<ScriptEntry> {
    let mut out = vec![ScriptEntry::role(Purpose::Seed, 0, "A mild day on the hill.")];
    for k in 0..iterations {
        out.push(ScriptEntry::role(
            Purpose::Stat,
            k,
            "Quote the 18 degree peak temperature.",
        ));
        if skip_phys_at != Some(k) {
            out.push(ScriptEntry::role(
                Purpose::Phys,
                k,
                "Quote the 18 degree peak temperature.",
            ));
        }
        out.push(ScriptEntry::role(
            Purpose::Met,
            k,
            "Note the breezy afternoons for walkers.",
        ));
        out.push(ScriptEntry::role(
            Purpose::Fusion,
            k,
            "Give the peak and mention breezy afternoons.",
        ));
        out.push(ScriptEntry::role(
            Purpose::Update,
            k,
            format!("Version {k} of the caption, peaking near 18 degrees."),
        ));
    }
    out
}

fn engine(entries: Vec<ScriptEntry>) -> Engine {
    let provider = Arc::new(ScriptedProvider::new(entries).unwrap());
    Engine::new(
        provider,
        Arc::new(LocalEmbedder),
        TemplateSet::builtin(),
        RunConfig::default(),
    )
    .unwrap()
}

#[test]
fn failed_iteration_keeps_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let mut writer = TraceWriter::create(dir.path(), "partial").unwrap();
    let err = engine(entries(5, Some(2)))
        .run(&series(), "partial", Some(&mut writer))
        .unwrap_err();
    assert_eq!(err.iteration, Some(2));
    assert!(matches!(
        err.source.backend_error(),
        Some(BackendError::ScriptMiss {
            purpose: Purpose::Phys,
            ..
        })
    ));

    let on_disk = RunTrace::load(writer.path()).unwrap();
    assert_eq!(on_disk, *err.trace);
    assert_eq!(on_disk.iterations.len(), 2);
    assert_eq!(on_disk.stop_reason(), Some(StopReason::Error));
    let footer = on_disk.footer.as_ref().unwrap();
    assert!(footer.error.as_deref().unwrap().contains("phys"));
    // stat and met answered before the miss surfaced
    assert_eq!(footer.incomplete_calls.len(), 2);
    on_disk.validate().unwrap();
}

#[test]
fn ablation_sweep_without_trace_dir() {
    let outcomes = run_ablation(&engine(entries(5, None)), &series(), "hill", None);
    assert_eq!(outcomes.len(), 8);
    assert!(outcomes.iter().all(|o| o.result.is_ok()));
    let rows: Vec<AblationRow> = outcomes.iter().map(AblationRow::from_outcome).collect();
    let by_name = |n: &str| rows.iter().find(|r| r.variant == n).unwrap();
    assert_eq!(by_name("full").gradient_calls, 15);
    assert_eq!(by_name("no-physics-agent").gradient_calls, 10);
    assert_eq!(by_name("single-pass").iterations, 1);
    assert_eq!(comparison_csv(&rows).lines().count(), 9);
}
