use std::path::Path;
use std::process::{Command, Output};

use damage_cot::dataset::corpus_dir_files;
use damage_cot::imageio::write_pnm;
use damage_cot::Tensor;
use serde_json::Value;

const TINY: &str = r#"{
  "synthetic": {"per_class": 3},
  "segmenter_train": {"steps": 2},
  "scratch": {"steps": 3},
  "finetune": {"steps": 2, "regime": "paper-finetune"},
  "template": {"max_new_tokens": 6}
}"#;

fn cli(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_damage-cot"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    assert_eq!(text.trim_end().lines().count(), 1, "single-line error: {text}");
    serde_json::from_str(text.trim_end()).expect("stderr is JSON")
}

fn without_times(mut v: Value) -> Value {
    let o = v.as_object_mut().unwrap();
    o.remove("started_unix_ms");
    o.remove("finished_unix_ms");
    v
}

fn trained(dir: &Path) {
    std::fs::write(dir.join("cfg.json"), TINY).unwrap();
    assert!(cli(
        &["synth", "--config", "cfg.json", "--seed", "5", "--out", "corpus"],
        dir
    )
    .status
    .success());
    let out = cli(
        &["train", "--config", "cfg.json", "--data", "corpus", "--out", "ckpt"],
        dir,
    );
    stdout_json(&out);
}

#[test]
fn synth_is_deterministic_up_to_manifest_times() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), TINY).unwrap();
    for out in ["a", "b"] {
        let o = cli(
            &["synth", "--config", "cfg.json", "--seed", "9", "--out", out],
            dir.path(),
        );
        assert_eq!(stdout_json(&o)["records"], 21);
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let rel = |root: &Path| -> Vec<_> {
        corpus_dir_files(root)
            .into_iter()
            .map(|p| p.strip_prefix(root).unwrap().to_path_buf())
            .collect()
    };
    let files = rel(&a);
    assert_eq!(files, rel(&b));
    for f in &files {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        if f.ends_with("run_manifest.json") {
            let parse = |bytes: &[u8]| without_times(serde_json::from_slice(bytes).unwrap());
            assert_eq!(parse(&x), parse(&y));
        } else {
            assert_eq!(x, y, "{}", f.display());
        }
    }

    let o = cli(
        &["synth", "--config", "cfg.json", "--seed", "10", "--out", "c"],
        dir.path(),
    );
    stdout_json(&o);
    let first = |d: &str| std::fs::read(dir.path().join(d).join("corpus.json")).unwrap();
    assert_ne!(first("a"), first("c"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["gradcheck", "--seed", "2", "--seeds", "1"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert!(v["softmax_max_deviation"].as_f64().unwrap() <= 1e-12);
    assert!(v["failed"].as_array().unwrap().is_empty());
}

#[test]
fn usage_errors_exit_2_with_json() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["bogus"][..], &["infer", "--ckpt", "x"], &["synth"]] {
        let out = cli(args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(stderr_json(&out)["error"], "usage");
    }
}

#[test]
fn train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    assert!(d.join("ckpt/run_manifest.json").exists());
    let image = "corpus/images/00000.ppm";

    let cot = stdout_json(&cli(
        &["infer", "--ckpt", "ckpt", "--image", image, "--out", "vr.pgm"],
        d,
    ));
    for key in [
        "vr_mask",
        "rationale",
        "answer",
        "rationale_logprob",
        "answer_logprob",
        "joint_logprob",
    ] {
        assert!(cot.get(key).is_some(), "missing {key}");
    }
    let joint = cot["joint_logprob"].as_f64().unwrap();
    let sum = cot["rationale_logprob"].as_f64().unwrap() + cot["answer_logprob"].as_f64().unwrap();
    assert!((joint - sum).abs() <= 1e-10);
    assert!(d.join("vr.pgm").exists());

    let plain = stdout_json(&cli(&["infer", "--ckpt", "ckpt", "--image", image, "--no-cot"], d));
    for key in ["vr_mask", "rationale", "rationale_logprob", "joint_logprob"] {
        assert!(plain.get(key).is_none(), "unexpected {key}");
    }
    assert!(plain.get("answer").is_some() && plain.get("answer_logprob").is_some());

    let again = stdout_json(&cli(
        &["infer", "--ckpt", "ckpt", "--image", image, "--out", "vr.pgm"],
        d,
    ));
    assert_eq!(again["answer"], cot["answer"]);
    assert_eq!(again["joint_logprob"], cot["joint_logprob"]);

    let eval = stdout_json(&cli(&["eval", "--ckpt", "ckpt", "--data", "corpus", "--ablate"], d));
    let all = &eval["report"]["all"];
    assert_eq!(all["cot"]["rows"].as_array().unwrap().len(), 7);
    assert_eq!(all["cot"]["total"], 7);
    let diff = all["difference"].as_f64().unwrap();
    let expect = all["cot"]["accuracy"].as_f64().unwrap() - all["plain"]["accuracy"].as_f64().unwrap();
    assert_eq!(diff, expect);

    let seg = stdout_json(&cli(
        &["segment", "--ckpt", "ckpt", "--image", image, "--out", "m.pgm"],
        d,
    ));
    assert_eq!(seg["height"], 32);
    let blob = std::fs::read(d.join("m.prob.f64")).unwrap();
    assert_eq!(blob.len(), 32 * 32 * 8);
    assert!(blob
        .chunks(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .all(|p| (0.0..=1.0).contains(&p)));
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(d.join("m.prob.json")).unwrap()).unwrap();
    assert_eq!(meta["shape"], serde_json::json!([32, 32]));
    assert_eq!(meta["file"], "m.prob.f64");
}

#[test]
fn bad_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let out = cli(&["infer", "--ckpt", "ckpt", "--image", "missing.ppm"], d);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"], "data");

    write_pnm(&d.join("small.ppm"), &Tensor::zeros(&[16, 16, 3])).unwrap();
    let out = cli(&["infer", "--ckpt", "ckpt", "--image", "small.ppm"], d);
    assert_eq!(out.status.code(), Some(3));

    let out = cli(&["eval", "--ckpt", "nowhere", "--data", "corpus"], d);
    assert_eq!(out.status.code(), Some(3));
}
