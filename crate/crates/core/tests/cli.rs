mod common;

use std::fs;

use common::*;
use serde_json::Value;

fn read_json(path: &std::path::Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_splits_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(&[
        "gen-data",
        "--motif",
        "GATAA",
        "--n",
        "200",
        "--len",
        "40",
        "--seed",
        "7",
        "--out-dir",
        p(d),
    ]);
    assert!(stdout(&out).contains("train.tsv"));
    for f in ["train.tsv", "val.tsv", "test.tsv", "gen-data.manifest.json"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let m = read_json(&d.join("gen-data.manifest.json"));
    assert_eq!(m["schema_version"], 1);
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["motif"], "GATAA");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 3);
    assert_eq!(m["results"]["train_examples"], 140);
    assert!(m.get("timestamp").is_none());

    let again = tempfile::tempdir().unwrap();
    ok(&[
        "gen-data",
        "--motif",
        "GATAA",
        "--n",
        "200",
        "--len",
        "40",
        "--seed",
        "7",
        "--out-dir",
        p(again.path()),
    ]);
    for f in ["train.tsv", "val.tsv", "test.tsv"] {
        assert_eq!(
            fs::read(d.join(f)).unwrap(),
            fs::read(again.path().join(f)).unwrap()
        );
    }
}

#[test]
fn gen_data_rejects_illegal_motif() {
    let dir = tempfile::tempdir().unwrap();
    let out = tfbs(&[
        "gen-data",
        "--motif",
        "GATAAX",
        "--seed",
        "1",
        "--out-dir",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("'X'"), "{}", stderr(&out));
}

#[test]
fn missing_seed_warns_and_uses_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "gen-data",
        "--motif",
        "GATAA",
        "--n",
        "60",
        "--len",
        "20",
        "--out-dir",
        p(dir.path()),
    ]);
    assert!(stderr(&out).contains("seed 0"));
    let m = read_json(&dir.path().join("gen-data.manifest.json"));
    assert_eq!(m["seed"], 0);
    assert_eq!(m["warnings"].as_array().unwrap().len(), 1);
}

#[test]
fn config_file_fills_unset_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("cfg.json");
    fs::write(
        &cfg,
        r#"{"motif": "CCGTA", "n": 80, "len": 25, "seed": 3, "mutation_rate": 0.0}"#,
    )
    .unwrap();
    ok(&[
        "gen-data",
        "--config",
        p(&cfg),
        "--n",
        "60",
        "--out-dir",
        p(d),
    ]);
    let m = read_json(&d.join("gen-data.manifest.json"));
    assert_eq!(m["config"]["n"], 60);
    assert_eq!(m["config"]["len"], 25);
    assert_eq!(m["config"]["motif"], "CCGTA");
    assert_eq!(m["seed"], 3);
    let bad = d.join("bad.json");
    fs::write(&bad, r#"{"momentum": 1.5}"#).unwrap();
    let out = tfbs(&[
        "train-expert",
        "--config",
        p(&bad),
        "--train",
        "x",
        "--val",
        "y",
        "--out",
        p(&d.join("m.json")),
        "--seed",
        "1",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn pipeline_commands() {
    let pl = Pipeline::build();
    let d = pl.dir.path();

    // train-expert artifacts
    for f in [
        "a_expert.json",
        "a_expert.stripped.json",
        "a_expert.history.csv",
        "a_expert.manifest.json",
    ] {
        assert!(d.join(f).exists(), "{f}");
    }
    let m = read_json(&d.join("a_expert.manifest.json"));
    assert!(m["results"]["history"]["best_val_auc"].as_f64().unwrap() > 0.5);
    assert!(m["warnings"]
        .as_array()
        .unwrap()
        .iter()
        .any(|w| w.as_str().unwrap().contains("embed_dim")));
    let csv = fs::read_to_string(d.join("a_expert.history.csv")).unwrap();
    assert!(csv.starts_with("epoch,train_loss,val_auc,is_best\n"));

    // train-moe preconditions
    let one = tfbs(&[
        "train-moe",
        "--experts",
        p(&d.join("a_expert.stripped.json")),
        "--train",
        p(&d.join("a_train.tsv")),
        "--val",
        p(&d.join("a_val.tsv")),
        "--out",
        p(&d.join("x.json")),
        "--seed",
        "1",
    ]);
    assert_eq!(code(&one), 1);
    let unstripped = tfbs(&[
        "train-moe",
        "--experts",
        p(&d.join("a_expert.json")),
        p(&d.join("b_expert.json")),
        "--train",
        p(&d.join("a_train.tsv")),
        "--val",
        p(&d.join("a_val.tsv")),
        "--out",
        p(&d.join("x.json")),
        "--seed",
        "1",
    ]);
    assert_eq!(code(&unstripped), 1);
    assert!(stderr(&unstripped).contains("stripped"));
    let moe = read_json(&d.join("moe.json"));
    assert_eq!(moe["kind"], "moe");
    assert_eq!(moe["experts"][0]["path"], "a_expert.stripped.json");

    // evaluate
    let report = d.join("report.json");
    ok(&[
        "evaluate",
        "--models",
        p(&d.join("a_expert.json")),
        p(&d.join("b_expert.json")),
        p(&d.join("moe.json")),
        "--test",
        p(&d.join("a_test.tsv")),
        "--out",
        p(&report),
        "--trials",
        "5",
        "--seed",
        "9",
        "--roc-dir",
        p(&d.join("roc")),
    ]);
    let r = read_json(&report);
    assert_eq!(r["trials"], 5);
    assert_eq!(r["models"].as_array().unwrap().len(), 3);
    assert_eq!(r["models"][0]["aucs"].as_array().unwrap().len(), 5);
    assert!(r["ci_method"].as_str().unwrap().contains("t-interval"));
    assert!(r["anova"]["p_value"].is_number());
    assert_eq!(fs::read_dir(d.join("roc")).unwrap().count(), 3);
    let report2 = d.join("report2.json");
    ok(&[
        "evaluate",
        "--models",
        p(&d.join("a_expert.json")),
        p(&d.join("b_expert.json")),
        p(&d.join("moe.json")),
        "--test",
        p(&d.join("a_test.tsv")),
        "--out",
        p(&report2),
        "--trials",
        "5",
        "--seed",
        "9",
    ]);
    assert_eq!(fs::read(&report).unwrap(), fs::read(&report2).unwrap());
    let one_model = d.join("one.json");
    ok(&[
        "evaluate",
        "--models",
        p(&d.join("a_expert.json")),
        "--test",
        p(&d.join("a_test.tsv")),
        "--out",
        p(&one_model),
        "--seed",
        "1",
    ]);
    let r1 = read_json(&one_model);
    assert_eq!(r1["models"][0]["aucs"].as_array().unwrap().len(), 30);
    assert!(r1["anova"].is_null());
    let missing = tfbs(&[
        "evaluate",
        "--models",
        p(&d.join("nope.json")),
        "--test",
        p(&d.join("a_test.tsv")),
        "--out",
        p(&d.join("z.json")),
        "--seed",
        "1",
    ]);
    assert_eq!(code(&missing), 1);

    // compare
    let out = ok(&["compare", "--report", p(&report)]);
    assert!(stdout(&out).contains("one-way ANOVA over 3 groups"));
    assert!(d.join("report.anova.json").exists());
    let out = tfbs(&["compare", "--report", p(&one_model)]);
    assert_eq!(code(&out), 1);

    // explain
    let seq = "ACGTGATAAGCCATGCATTACGGATCCATG";
    let ex = d.join("ex");
    let van = ok(&[
        "explain",
        "--model",
        p(&d.join("moe.json")),
        "--sequence",
        seq,
        "--method",
        "vanilla",
        "--out-dir",
        p(&ex),
    ]);
    assert!(stdout(&van).contains("y_hat"));
    ok(&[
        "explain",
        "--model",
        p(&d.join("moe.json")),
        "--sequence",
        seq,
        "--method",
        "shiftsmooth",
        "--N",
        "0",
        "--out-dir",
        p(&ex),
    ]);
    let scores = |f: &str| -> Vec<String> {
        fs::read_to_string(ex.join(f))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split('\t').nth(2).unwrap().to_string())
            .collect()
    };
    assert_eq!(
        scores("moe_vanilla_N0.tsv"),
        scores("moe_shiftsmooth_N0.tsv")
    );
    assert_eq!(scores("moe_vanilla_N0.tsv").len(), seq.len());
    ok(&[
        "explain",
        "--model",
        p(&d.join("a_expert.json")),
        "--sequence",
        seq,
        "--method",
        "saliency",
        "--out-dir",
        p(&ex),
    ]);
    assert!(scores("a_expert_saliency_N0.tsv")
        .iter()
        .all(|s| s.parse::<f64>().unwrap() >= 0.0));
    ok(&[
        "explain",
        "--model",
        p(&d.join("a_expert.json")),
        "--sequence",
        seq,
        "--method",
        "shiftsmooth",
        "--out-dir",
        p(&ex),
    ]);
    assert!(ex.join("a_expert_shiftsmooth_N2.tsv").exists());
    let svg = fs::read_to_string(ex.join("a_expert_shiftsmooth_N2.svg")).unwrap();
    assert_eq!(svg.matches("<rect class=\"bar\"").count(), seq.len());
    let bad = tfbs(&[
        "explain",
        "--model",
        p(&d.join("a_expert.json")),
        "--sequence",
        "ACGTZ",
        "--out-dir",
        p(&ex),
    ]);
    assert_eq!(code(&bad), 2);

    let input = d.join("seqs.txt");
    fs::write(&input, format!("# two sequences\n{seq}\n{seq}\t1\n")).unwrap();
    ok(&[
        "explain",
        "--model",
        p(&d.join("a_expert.json")),
        "--input",
        p(&input),
        "--method",
        "vanilla",
        "--format",
        "tsv",
        "--out-dir",
        p(&d.join("multi")),
    ]);
    assert!(d.join("multi/a_expert_vanilla_N0_1.tsv").exists());
}

#[test]
fn compare_fixture_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let write = |name: &str, groups: &[(&str, Vec<f64>)]| {
        let models: Vec<Value> = groups
            .iter()
            .map(|(n, a)| serde_json::json!({"name": n, "aucs": a}))
            .collect();
        let path = d.join(name);
        fs::write(&path, serde_json::json!({"models": models}).to_string()).unwrap();
        path
    };
    let fixture = write(
        "fixture.json",
        &[("a", vec![1.0, 2.0, 3.0]), ("b", vec![2.0, 3.0, 4.0])],
    );
    let out = ok(&["compare", "--report", p(&fixture)]);
    assert!(stdout(&out).contains("F = 1.5 "), "{}", stdout(&out));
    let doc = read_json(&d.join("fixture.anova.json"));
    assert_eq!(doc["anova"]["f_statistic"], 1.5);

    let same = vec![0.7, 0.72, 0.69];
    let ident = write(
        "ident.json",
        &[("a", same.clone()), ("b", same.clone()), ("c", same)],
    );
    let out = ok(&["compare", "--report", p(&ident)]);
    assert!(stdout(&out).contains("p = 1\n"));
    assert!(stdout(&out).contains("not significant"));

    let degen = write(
        "degen.json",
        &[("a", vec![0.9, 0.9]), ("b", vec![0.8, 0.8])],
    );
    let out = ok(&["compare", "--report", p(&degen)]);
    assert!(stdout(&out).contains("F = inf"));
    assert!(stderr(&out).contains("degenerate"));
    let doc = read_json(&d.join("degen.anova.json"));
    assert!(doc["anova"]["f_statistic"].is_null());
    assert_eq!(doc["anova"]["degenerate"], "unequal_means");
}
