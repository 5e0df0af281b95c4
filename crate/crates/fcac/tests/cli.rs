use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fcac::artifacts::{Aggregate, ReportFile};
use fcac::pipeline::read_curve;
use fcac::plot::{plot_curves, Curve};

fn fcac(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcac"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_tone(path: &Path, freq: f64) {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for i in 0..1600 {
        let v = (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin();
        w.write_sample((v * 12_000.0) as i16).unwrap();
    }
    w.finalize().unwrap();
}

/// Three base classes and one 2-way session of short tones.
fn audio_experiment(dir: &Path) -> PathBuf {
    std::fs::create_dir_all(dir.join("audio")).unwrap();
    let mut manifest = String::from("# path\tlabel\tsession\tsplit\n");
    let classes = [("low", 0, 300.0), ("mid", 0, 900.0), ("high", 0, 2500.0), ("new_a", 1, 5000.0), ("new_b", 1, 6500.0)];
    for (label, session, freq) in classes {
        for i in 0..7 {
            let name = format!("audio/{label}_{i}.wav");
            write_tone(&dir.join(&name), freq + 15.0 * i as f64);
            let split = if i < 6 { "train" } else { "test" };
            manifest.push_str(&format!("{name}\t{label}\t{session}\t{split}\n"));
        }
    }
    std::fs::write(dir.join("manifest.tsv"), manifest).unwrap();
    let config = dir.join("audio.toml");
    std::fs::write(
        &config,
        r#"
experiment_id = "tones"
output_dir = "out"

[dataset]
kind = "manifest"
path = "manifest.tsv"

[features]
n_mels = 8
duration_s = 0.1

[protocol]
n_way = 2
k_shot = 2

[model]
d = 4
backbone = { kind = "cnn", channels = [2, 2, 4] }

[rets]
n_way = 2
k_shot = 2
q_per_class = 2
max_iterations = 3

[evaluation]
seeds = [0]
"#,
    )
    .unwrap();
    config
}

#[test]
fn manifest_features_are_cached_between_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = audio_experiment(dir.path());
    let cfg = config.to_str().unwrap();
    let first = ok(&fcac(dir.path(), &["prepare", "--config", cfg]));
    assert!(first.contains("35 extracted, 0 cached"), "{first}");
    let second = ok(&fcac(dir.path(), &["prepare", "--config", cfg]));
    assert!(second.contains("0 extracted, 35 cached"), "{second}");
    assert!(dir.path().join("out/tones/0/schedule.json").exists());

    ok(&fcac(dir.path(), &["train", "--config", cfg]));
    ok(&fcac(dir.path(), &["eval", "--config", cfg]));
    let report: ReportFile =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/tones/0/report.json")).unwrap()).unwrap();
    assert_eq!(report.prototype_counts, vec![3, 5]);
    assert_eq!(report.config.features.n_mels, 8);
}

#[test]
fn a_missing_audio_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = audio_experiment(dir.path());
    std::fs::remove_file(dir.path().join("audio/mid_3.wav")).unwrap();
    let out = fcac(dir.path(), &["prepare", "--config", config.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("mid_3.wav"), "{err}");
}

#[test]
fn single_session_runs_report_zero_drop_and_consistent_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "--set",
        "dataset.incremental_sessions=0",
        "--set",
        "rets.max_iterations=5",
        "--set",
        "evaluation.seeds=[3, 4]",
    ];
    ok(&fcac(dir.path(), &[&["train"][..], &args].concat()));
    ok(&fcac(dir.path(), &[&["eval"][..], &args].concat()));
    let root = dir.path().join("runs/synthetic");
    let agg: Aggregate = serde_json::from_slice(&std::fs::read(root.join("aggregate.json")).unwrap()).unwrap();
    let mut aa = 0.0;
    for seed in [3, 4] {
        let r: ReportFile =
            serde_json::from_slice(&std::fs::read(root.join(format!("{seed}/report.json"))).unwrap()).unwrap();
        assert_eq!(r.report.sessions.len(), 1);
        assert_eq!(r.report.pd, 0.0);
        assert_eq!(r.seed, seed);
        aa += r.report.aa;
    }
    assert_eq!(agg.mean_aa, aa / 2.0);
    assert_eq!(agg.mean_pd, 0.0);
}

#[test]
fn failed_evaluation_keeps_previous_results() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--set", "rets.max_iterations=4", "--set", "evaluation.seeds=[0]"];
    ok(&fcac(dir.path(), &[&["train"][..], &args].concat()));
    ok(&fcac(dir.path(), &[&["eval"][..], &args].concat()));
    let agg = dir.path().join("runs/synthetic/aggregate.json");
    let before = std::fs::read(&agg).unwrap();

    let out = fcac(dir.path(), &["eval", "--set", "rets.max_iterations=9", "--set", "evaluation.seeds=[0]"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("different model or training config"));
    assert_eq!(std::fs::read(&agg).unwrap(), before);

    let out = fcac(dir.path(), &["train", "--set", "model.d=7"]);
    assert!(!out.status.success());
}

#[test]
fn table_values_plot_from_a_typed_report() {
    let dir = tempfile::tempdir().unwrap();
    let acc = [0.9996, 0.9595, 0.9360, 0.9206, 0.9032, 0.8914, 0.8616, 0.8347, 0.8228, 0.7969];
    let sessions: Vec<_> = acc.iter().map(|a| serde_json::json!({ "accuracy": a })).collect();
    let report = serde_json::json!({
        "experiment_id": "nsynth-table",
        "method": "proposed",
        "report": { "sessions": sessions },
    });
    let path = dir.path().join("typed.json");
    std::fs::write(&path, report.to_string()).unwrap();

    let (label, accuracy) = read_curve(&path).unwrap();
    let curve = Curve { label, accuracy };
    let points = curve.points();
    assert!((points[0].1 - 99.96).abs() < 1e-9);
    assert!((points[9].1 - 79.69).abs() < 1e-9);
    assert_eq!(points[9].0, 9.0);
    plot_curves(&[curve], &dir.path().join("direct.svg")).unwrap();

    let out = dir.path().join("figs/acc.svg");
    ok(&fcac(dir.path(), &["plot", path.to_str().unwrap(), "--output", out.to_str().unwrap()]));
    let svg = std::fs::read_to_string(out).unwrap();
    assert!(svg.contains("nsynth-table"));

    let missing = fcac(dir.path(), &["plot", "nope.json"]);
    assert!(!missing.status.success());
}

#[test]
fn ablation_covers_every_variant_and_parallel_eval_matches() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--set", "rets.max_iterations=3", "--set", "evaluation.seeds=[0, 1]", "--set", "finetune.steps=3"];
    let out = ok(&fcac(dir.path(), &[&["ablate"][..], &args].concat()));
    for v in ["proposed", "no_drpm", "no_rets", "finetune"] {
        assert!(out.contains(v), "{out}");
        assert!(dir.path().join(format!("runs/synthetic-{v}/aggregate.json")).exists());
    }
    let rows: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("runs/synthetic/ablation.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);

    let root = dir.path().join("runs/synthetic-proposed");
    let sequential = std::fs::read(root.join("aggregate.json")).unwrap();
    let par = [&args[..], &["--set", "evaluation.parallel=true", "--set", "experiment_id=synthetic-proposed"]].concat();
    ok(&fcac(dir.path(), &[&["eval"][..], &par].concat()));
    let parallel: Aggregate = serde_json::from_slice(&std::fs::read(root.join("aggregate.json")).unwrap()).unwrap();
    let sequential: Aggregate = serde_json::from_slice(&sequential).unwrap();
    assert_eq!(parallel.seeds, sequential.seeds);
    assert_eq!(parallel.mean_accuracy, sequential.mean_accuracy);
}
