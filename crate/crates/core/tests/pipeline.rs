use std::collections::HashMap;
use std::fs;

use conna_core::cli::main_with_args;
use conna_core::config::{DataConfig, RunConfig};
use conna_core::datagen::generate_dataset;
use conna_core::eval::hit_ratio;
use conna_core::trainer::AblationTable;
use conna_core::types::{BundleCreative, ObjectType};

fn top(counts: &HashMap<usize, usize>, k: usize) -> Vec<usize> {
    let mut v: Vec<_> = counts.iter().map(|(&id, &c)| (c, id)).collect();
    v.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    v.into_iter().take(k).map(|(_, id)| id).collect()
}

/// With τ = 0 a user's positive is fixed, so predicting each user's most
/// frequent training objects must recover nearly all of it.
#[test]
fn frequency_oracle_recovers_deterministic_positives() {
    let data = DataConfig {
        temperature: 0.0,
        outside_history_prob: 0.0,
        n_records: 4000,
        ..Default::default()
    };
    let shape = data.shape();
    let (_, ds) = generate_dataset(&data).unwrap();
    let mut counts: HashMap<(usize, ObjectType), HashMap<usize, usize>> = HashMap::new();
    for r in &ds.train {
        for t in [ObjectType::Item, ObjectType::Slogan, ObjectType::Template] {
            for id in r.positive.ids(t) {
                *counts
                    .entry((r.context.user, t))
                    .or_default()
                    .entry(id)
                    .or_default() += 1;
            }
        }
    }
    let (mut total, mut seen) = (0.0, 0);
    for r in &ds.test {
        let Some(items) = counts.get(&(r.context.user, ObjectType::Item)) else {
            continue;
        };
        let pred = BundleCreative {
            items: top(items, shape.items),
            slogans: top(
                &counts[&(r.context.user, ObjectType::Slogan)],
                shape.slogans,
            ),
            template: top(&counts[&(r.context.user, ObjectType::Template)], 1)[0],
        };
        total += hit_ratio(&r.positive, &pred, shape).unwrap();
        seen += 1;
    }
    assert!(seen > ds.test.len() / 2);
    assert!(
        total / seen as f64 >= 0.9,
        "oracle HitRatio {}",
        total / seen as f64
    );
}

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("conna").chain(args.iter().copied()))
}

#[test]
fn cli_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    let small = [
        "--set",
        "data.n_users=20",
        "--set",
        "data.n_items=30",
        "--set",
        "data.n_records=120",
        "--set",
        "model.d_model=8",
        "--set",
        "model.heads=2",
        "--set",
        "model.layers=1",
        "--set",
        "train.epochs=1",
    ];
    let with = |base: &[&str]| -> Vec<String> {
        base.iter()
            .chain(small.iter())
            .map(|s| s.to_string())
            .collect()
    };
    let call = |v: Vec<String>| run(&v.iter().map(String::as_str).collect::<Vec<_>>());

    assert_eq!(call(with(&["datagen", "--out", &p("data")])), 0);
    for s in [
        "train.jsonl",
        "dev.jsonl",
        "test.jsonl",
        "manifest.json",
        "config.toml",
    ] {
        assert!(tmp.path().join("data").join(s).is_file(), "{s}");
    }
    assert_eq!(
        call(with(&["train", "--data", &p("data"), "--out", &p("train")])),
        0
    );
    let ckpt = p("train/model.ckpt");
    let metrics = fs::read_to_string(p("train/metrics.jsonl")).unwrap();
    assert!(metrics.lines().count() > 0 && metrics.contains("l_total"));

    assert_eq!(
        call(with(&[
            "eval",
            "--data",
            &p("data"),
            "--checkpoint",
            &ckpt,
            "--out",
            &p("eval")
        ])),
        0
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p("eval/eval.json")).unwrap()).unwrap();
    let hr = report["hit_ratio"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&hr));

    assert_eq!(
        call(with(&[
            "generate",
            "--checkpoint",
            &ckpt,
            "--users",
            "0,3",
            "--out",
            &p("gen")
        ])),
        0
    );
    assert_eq!(
        call(with(&[
            "generate",
            "--checkpoint",
            &ckpt,
            "--users",
            "99",
            "--out",
            &p("gen")
        ])),
        1
    );

    assert_eq!(
        call(with(&[
            "bench",
            "--checkpoint",
            &ckpt,
            "--runs",
            "30",
            "--warmup",
            "2",
            "--out",
            &p("bench")
        ])),
        0
    );
    let bench: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p("bench/bench.json")).unwrap()).unwrap();
    assert_eq!(bench["nar"]["passes"], 1);
    assert_eq!(bench["ar"]["passes"], 6);
    assert_eq!(
        call(with(&["bench", "--runs", "5", "--out", &p("bench")])),
        1
    );

    assert_eq!(
        call(with(&[
            "ablate",
            "--data",
            &p("data"),
            "--mode",
            "objective",
            "--out",
            &p("abl")
        ])),
        0
    );
    let table: AblationTable =
        serde_json::from_str(&fs::read_to_string(p("abl/ablation_objective.json")).unwrap())
            .unwrap();
    let labels: Vec<_> = table.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["full", "w/o contrastive", "independent xent"]);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p("train/manifest.json")).unwrap()).unwrap();
    let cfg = RunConfig::default()
        .with_overrides(&small.iter().skip(1).step_by(2).collect::<Vec<_>>())
        .unwrap();
    assert_eq!(manifest["config_hash"], cfg.hash_hex());
}

#[test]
fn datagen_seed_flag_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let read = |d: &str| fs::read(tmp.path().join(d).join("train.jsonl")).unwrap();
    for (dir, seed) in [("a", "7"), ("b", "7"), ("c", "8")] {
        let out = tmp.path().join(dir);
        let args = [
            "datagen",
            "--seed",
            seed,
            "--set",
            "data.n_records=200",
            "--out",
            out.to_str().unwrap(),
        ];
        assert_eq!(run(&args), 0);
    }
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}
