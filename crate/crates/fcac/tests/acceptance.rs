//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits nonzero when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fcac::artifacts::{Aggregate, ReportFile};
use fcac_core::backbone::{BackboneKind, Embedding};
use fcac_core::drpm::{refine, relation_weights, DrpmParams};
use fcac_core::evaluation::{average_accuracy, performance_drop};
use fcac_core::features::{FeatureMap, FeatureStore};
use fcac_core::layers::NormMode;
use fcac_core::prototype::{compute_prototype, merge, pseudo_base_subset, PrototypeMatrix};
use fcac_core::protocol::{
    build_schedule, cumulative_test_set, sample_episode, ClassId, LabelSpace, Labeled, SampleRef,
    SessionManifest,
};
use fcac_core::training::{loss_and_grads, sample_iteration, AblationFlags, Reduction, RetsConfig};
use fcac_core::{seeded_rng, ModelBundle, ModelConfig, Tensor};
use nalgebra::DMatrix;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn criterion_1() -> Outcome {
    let nsynth = [99.96, 95.95, 93.60, 92.06, 90.32, 89.14, 86.16, 83.47, 82.28, 79.69];
    let fsc = [42.04, 39.95, 37.01, 34.68, 32.97, 31.45, 30.09];
    let (aa1, pd1) = (average_accuracy(&nsynth).unwrap(), performance_drop(&nsynth).unwrap());
    let (aa2, pd2) = (average_accuracy(&fsc).unwrap(), performance_drop(&fsc).unwrap());
    check(close(aa1, 89.26, 0.01) && close(pd1, 20.27, 0.01), format!("Table 2: AA {aa1:.4} PD {pd1:.4}"))?;
    check(close(aa2, 35.46, 0.01) && close(pd2, 11.95, 0.01), format!("Table 3: AA {aa2:.4} PD {pd2:.4}"))?;
    Ok(format!("Table 2 AA {aa1:.2} PD {pd1:.2}; Table 3 AA {aa2:.2} PD {pd2:.2}"))
}

fn criterion_2() -> Outcome {
    let mut rng = seeded_rng(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(1..=10);
        let d = rng.random_range(1..=128);
        let support: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(-100.0..100.0)).collect())
            .collect();
        let emb: Vec<Embedding> = support.iter().cloned().map(Embedding).collect();
        let got = compute_prototype(&emb).map_err(|e| e.to_string())?;
        check(got.len() == d, "wrong prototype width")?;
        for j in 0..d {
            let mut expected = 0.0;
            for row in support.iter().rev() {
                expected += row[j] / k as f64;
            }
            worst = worst.max((got[j] - expected).abs());
        }
    }
    check(worst <= 1e-6, format!("max deviation {worst:e}"))?;
    Ok(format!("1000 support sets, max deviation {worst:.1e}"))
}

fn matrix(rows: &[Vec<f64>]) -> PrototypeMatrix {
    let labels = (0..rows.len()).map(|i| ClassId(format!("r{i}"))).collect();
    PrototypeMatrix::from_vectors(labels, rows, rows[0].len()).unwrap()
}

fn rank(rows: &[&[f64]]) -> usize {
    let d = rows[0].len();
    let m = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let top = m.clone().svd(false, false).singular_values.max();
    m.rank(1e-8 * top.max(1.0))
}

fn criterion_3() -> Outcome {
    let eye = DrpmParams::identity(2);
    let i2 = matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let m = relation_weights(&i2, &i2, &eye).unwrap();
    check(m.values == Tensor::identity(2), "identity self-similarity")?;

    let pre = matrix(&[vec![1.0, 1.0], vec![0.0, 2.0]]);
    let init = matrix(&[vec![2.0, 0.0]]);
    let m = relation_weights(&init, &pre, &eye).unwrap();
    check(m.values.data() == [2.0, 0.0], format!("M = {:?}", m.values.data()))?;
    let re = refine(&init, &pre, &eye).unwrap();
    check(re.rows().data() == [2.0, 2.0], format!("P_re = {:?}", re.rows().data()))?;

    let mut rng = seeded_rng(3);
    for _ in 0..20 {
        let n = rng.random_range(1..5);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| rng.random_range(0.0..5.0)).collect()).collect();
        let p = matrix(&rows);
        let re = refine(&p, &i2, &eye).unwrap();
        check(re.rows() == p.rows(), "unit previous prototypes must reproduce P_init")?;
    }

    for _ in 0..100 {
        let d = rng.random_range(2..8);
        let n_pre = rng.random_range(1..d);
        let n_init = rng.random_range(1..6);
        let gen = |rng: &mut fcac_core::SeededRng, n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
        };
        let pre = matrix(&gen(&mut rng, n_pre));
        let init = matrix(&gen(&mut rng, n_init));
        let re = refine(&init, &pre, &DrpmParams::identity(d)).unwrap();
        let pre_rows: Vec<&[f64]> = (0..pre.len()).map(|i| pre.row(i)).collect();
        let mut stacked = pre_rows.clone();
        stacked.extend((0..re.len()).map(|i| re.row(i)));
        check(
            rank(&stacked) == rank(&pre_rows),
            format!("span violated at d={d}, n_pre={n_pre}"),
        )?;
    }
    Ok("hand examples exact; span holds on 100 random instances".into())
}

fn criterion_4() -> Outcome {
    let (n0, per_class, frames, bins) = (4, 6, 8, 8);
    let mut rng = seeded_rng(4);
    let mut features = FeatureStore::new();
    let mut base = Vec::new();
    for c in 0..n0 {
        let center: Vec<f64> = (0..frames * bins).map(|_| rng.random_range(-1.0..1.0)).collect();
        for i in 0..per_class {
            let sample = SampleRef(format!("c{c}/{i}"));
            let values = center.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
            features.insert(sample.clone(), FeatureMap::new(frames, bins, values, 7)).unwrap();
            base.push(Labeled {
                sample,
                label: ClassId(format!("c{c}")),
            });
        }
    }
    let labels: Vec<ClassId> = LabelSpace::from_records(&base).into();
    let cfg = ModelConfig {
        d: 4,
        backbone: BackboneKind::Cnn { channels: [2, 2, 4] },
        rm_hidden: [6, 5],
        dropout: 0.2,
        d_latent: None,
        row_softmax: false,
    };
    let mut bundle = ModelBundle::new(cfg, (frames, bins), &labels, 11).map_err(|e| e.to_string())?;
    bundle.set_norm_mode(NormMode::Train);
    let rets = RetsConfig {
        t: 1,
        n_way: 2,
        k_shot: 2,
        q_per_class: 2,
        ..RetsConfig::default()
    };
    let flags = AblationFlags::default();
    let batch = sample_iteration(&base, &rets, flags, &mut seeded_rng(5)).map_err(|e| e.to_string())?;
    check(batch.episodes.len() == 1, "expected one episode")?;
    let loss = |b: &ModelBundle| {
        loss_and_grads(b, &batch, &features, Reduction::Sum, flags, Some(99))
            .unwrap()
            .loss
    };
    let analytic = loss_and_grads(&bundle, &batch, &features, Reduction::Sum, flags, Some(99))
        .map_err(|e| e.to_string())?
        .grads;

    let sets = [
        ("theta", bundle.backbone.params().len()),
        ("phi", bundle.drpm.params().len()),
        ("psi", bundle.relation.params().len()),
        ("P0", 1),
    ];
    let h = 1e-5;
    let mut offset = 0;
    let mut summary = Vec::new();
    for (name, count) in sets {
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for p in offset..offset + count {
            let g = analytic[p].as_ref().ok_or(format!("{name}: missing gradient"))?;
            for j in 0..g.len() {
                let mut plus = bundle.clone();
                plus.params_mut()[p].data_mut()[j] += h;
                let mut minus = bundle.clone();
                minus.params_mut()[p].data_mut()[j] -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let a = g.data()[j];
                diff2 += (a - numeric) * (a - numeric);
                a2 += a * a;
                n2 += numeric * numeric;
            }
        }
        offset += count;
        let rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-12);
        check(a2 > 0.0, format!("{name}: gradient is identically zero"))?;
        check(rel < 1e-4, format!("{name}: relative error {rel:e}"))?;
        summary.push(format!("{name} {rel:.1e}"));
    }
    Ok(format!("relative errors: {}", summary.join(", ")))
}

fn criterion_5() -> Outcome {
    let mut rng = seeded_rng(5);
    let record = |split: &str, c: usize, i: usize| Labeled {
        sample: SampleRef(format!("{split}/{c}/{i}")),
        label: ClassId(format!("c{c}")),
    };
    for trial in 0..300 {
        let n0 = rng.random_range(2..10);
        let n_way = rng.random_range(1..4);
        let k = rng.random_range(1..5);
        let sessions = rng.random_range(0..5);
        let per_class = k + rng.random_range(0..3);
        let mut next = 0;
        let mut class_block = |n: usize, rng: &mut fcac_core::SeededRng| {
            let mut m = SessionManifest::default();
            for _ in 0..n {
                let c = next;
                next += 1;
                m.train.extend((0..per_class).map(|i| record("train", c, i)));
                m.test.extend((0..rng.random_range(0..4)).map(|i| record("test", c, i)));
            }
            m
        };
        let base = class_block(n0, &mut rng);
        let inc: Vec<SessionManifest> = (0..sessions).map(|_| class_block(n_way, &mut rng)).collect();

        if sessions > 0 {
            let mut bad = inc.clone();
            let stolen = base.train[0].label.clone();
            bad[0].train.iter_mut().for_each(|r| r.label = stolen.clone());
            bad[0].test.clear();
            check(
                build_schedule(base.clone(), bad, n_way, k, &mut rng).is_err(),
                format!("trial {trial}: overlapping labels accepted"),
            )?;
        }

        let s = build_schedule(base.clone(), inc, n_way, k, &mut rng).map_err(|e| format!("trial {trial}: {e}"))?;
        for (i, a) in s.sessions.iter().enumerate() {
            for b in &s.sessions[i + 1..] {
                check(a.label_space.is_disjoint(&b.label_space), "label spaces overlap")?;
            }
        }
        let mut total = 0;
        for l in 0..s.len() {
            total += s.sessions[l].test_manifest.len();
            check(cumulative_test_set(&s, l).unwrap().len() == total, "cumulative size not additive")?;
        }

        let n = n_way.min(n0 - 1);
        let ep = sample_episode(&s.base().train_manifest, n, k, &mut rng).map_err(|e| e.to_string())?;
        check(ep.support.len() == n * k && ep.label_set.len() == n, "episode shape")?;
        for l in ep.label_set.labels() {
            check(ep.support.iter().filter(|r| r.label == *l).count() == k, "per-label count")?;
        }
        let p0_rows: Vec<Vec<f64>> = (0..n0).map(|i| vec![i as f64; 3]).collect();
        let p0 = PrototypeMatrix::from_vectors(s.base().label_space.labels().to_vec(), &p0_rows, 3).unwrap();
        let pre = pseudo_base_subset(&p0, ep.label_set.labels()).unwrap();
        let new_rows: Vec<Vec<f64>> = (0..n).map(|_| vec![0.5; 3]).collect();
        let fresh = PrototypeMatrix::from_vectors(ep.label_set.labels().to_vec(), &new_rows, 3).unwrap();
        check(merge(&pre, &fresh).unwrap().len() == n0, "merged episode prototype count")?;
    }
    Ok("300 randomized schedules".into())
}

struct Workspace {
    _dir: tempfile::TempDir,
    config: PathBuf,
    runs: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("experiment.toml");
    std::fs::write(&config, "experiment_id = \"accept\"\noutput_dir = \"runs\"\n").unwrap();
    Workspace {
        runs: dir.path().join("runs"),
        config,
        _dir: dir,
    }
}

fn fcac(config: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fcac"))
        .args(args)
        .arg("--config")
        .arg(config)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("fcac {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// Proposed and finetune runs of the default synthetic config.
struct EndToEnd {
    ws: Workspace,
    proposed: Aggregate,
    finetune: Aggregate,
    elapsed: Duration,
}

fn end_to_end() -> Result<EndToEnd, String> {
    let ws = workspace();
    let start = Instant::now();
    fcac(&ws.config, &["prepare"])?;
    fcac(&ws.config, &["train"])?;
    fcac(&ws.config, &["eval"])?;
    let ft = ["--set", "method=finetune", "--set", "experiment_id=accept-finetune"];
    fcac(&ws.config, &[&["train"][..], &ft].concat())?;
    fcac(&ws.config, &[&["eval"][..], &ft].concat())?;
    let elapsed = start.elapsed();
    Ok(EndToEnd {
        proposed: read(&ws.runs.join("accept/aggregate.json")),
        finetune: read(&ws.runs.join("accept-finetune/aggregate.json")),
        ws,
        elapsed,
    })
}

fn criterion_7(e2e: &Result<EndToEnd, String>) -> Outcome {
    let e = e2e.as_ref().map_err(Clone::clone)?;
    let cfg = &e.proposed.config;
    let fcac::config::DatasetConfig::Synthetic(spec) = &cfg.dataset else {
        return Err("expected a synthetic dataset".into());
    };
    check(
        spec.base_classes == 10
            && spec.incremental_sessions == 3
            && cfg.protocol.n_way == 2
            && cfg.protocol.k_shot == 5
            && spec.between_std / spec.within_std >= 10.0
            && matches!(cfg.model.backbone, BackboneKind::Cnn { .. })
            && e.proposed.seeds.len() == 5,
        "config does not match the 10 + 3x2-way 5-shot, 5-seed setup",
    )?;
    let per_seed: Vec<String> = e
        .proposed
        .seeds
        .iter()
        .zip(&e.finetune.seeds)
        .map(|(p, f)| format!("seed {}: AA {:.3} PD {:.3} vs finetune PD {:.3}", p.seed, p.aa, p.pd, f.pd))
        .collect();
    let detail = format!(
        "mean AA {:.4}, mean PD {:.4}, finetune mean PD {:.4}, {:.0?} [{}]",
        e.proposed.mean_aa,
        e.proposed.mean_pd,
        e.finetune.mean_pd,
        e.elapsed,
        per_seed.join("; ")
    );
    check(e.proposed.mean_aa >= 0.90, format!("AA below 0.90: {detail}"))?;
    for (p, f) in e.proposed.seeds.iter().zip(&e.finetune.seeds) {
        check(p.seed == f.seed && f.pd > p.pd, format!("seed {}: finetune PD not above proposed: {detail}", p.seed))?;
    }
    check(e.elapsed < Duration::from_secs(300), format!("too slow: {detail}"))?;
    Ok(detail)
}

fn criterion_6(e2e: &Result<EndToEnd, String>) -> Outcome {
    let e = e2e.as_ref().map_err(Clone::clone)?;
    for s in &e.proposed.seeds {
        let r: ReportFile = read(&e.ws.runs.join(format!("accept/{}/report.json", s.seed)));
        let after = r.digests_after.as_ref().ok_or("report lacks final digests")?;
        check(&r.digests_before == after, format!("seed {}: frozen modules changed", s.seed))?;
        let expected: Vec<usize> = (0..4).map(|l| 10 + 2 * l).collect();
        check(
            r.prototype_counts == expected,
            format!("seed {}: prototype counts {:?}", s.seed, r.prototype_counts),
        )?;
    }
    Ok("digests unchanged and rows grow 10, 12, 14, 16 on every seed".into())
}

fn criterion_8(e2e: &Result<EndToEnd, String>) -> Outcome {
    let e = e2e.as_ref().map_err(Clone::clone)?;
    let first = e.ws.runs.join("accept");
    let saved = e.ws.runs.join("first-run");
    std::fs::rename(&first, &saved).map_err(|err| err.to_string())?;
    fcac(&e.ws.config, &["train"])?;
    fcac(&e.ws.config, &["eval"])?;
    let mut files = vec!["checkpoint.json".to_string(), "train_log.ndjson".into(), "aggregate.json".into()];
    files.extend(e.proposed.seeds.iter().map(|s| format!("{}/report.json", s.seed)));
    for f in &files {
        let a = std::fs::read(saved.join(f)).map_err(|err| format!("{f}: {err}"))?;
        let b = std::fs::read(first.join(f)).map_err(|err| format!("{f}: {err}"))?;
        check(a == b, format!("{f} differs between runs"))?;
    }
    Ok(format!("{} artifacts bit-identical across two runs", files.len()))
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(msg) => {
            println!("PASS {name} ({secs:.1}s): {msg}");
            true
        }
        Err(msg) => {
            println!("FAIL {name} ({secs:.1}s): {msg}");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= run("criterion 1 metric arithmetic", criterion_1);
    ok &= run("criterion 2 prototype oracle", criterion_2);
    ok &= run("criterion 3 projection identity oracle", criterion_3);
    ok &= run("criterion 4 gradient check", criterion_4);
    ok &= run("criterion 5 protocol invariants", criterion_5);
    let e2e = catch_unwind(end_to_end).unwrap_or_else(|_| Err("end-to-end run panicked".into()));
    ok &= run("criterion 6 freezing integrity", || criterion_6(&e2e));
    ok &= run("criterion 7 end-to-end synthetic", || criterion_7(&e2e));
    ok &= run("criterion 8 determinism", || criterion_8(&e2e));
    if !ok {
        std::process::exit(1);
    }
}
