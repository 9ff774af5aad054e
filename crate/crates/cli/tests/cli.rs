use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
    "data.per_class": 6,
    "data.points": 256,
    "model.dim": 24,
    "model.heads": 4,
    "model.num_patches": 16,
    "model.patch_k": 16,
    "model.encoder_blocks": 2,
    "model.decoder_blocks": 1,
    "model.tokenizer_hidden": [16, 32],
    "model.pos_hidden": 16,
    "model.head_hidden": 32,
    "teacher.dim": 32,
    "teacher.heads": 4,
    "teacher.encoder_blocks": 1,
    "teacher.decoder_blocks": 1,
    "teacher.tokenizer_hidden": [16, 32],
    "teacher.pos_hidden": 16,
    "teacher.head_hidden": 32,
    "train.batch_size": 8
}"#;

fn pmtmae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmtmae"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> String {
    let o = pmtmae(args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_dataset(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let config = root.join("tiny.json");
    std::fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    ok(&["gen-data", "--config", s(&config), "--seed", "3", "--out", s(&data)]);
    (config, data)
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = tiny_dataset(dir.path());
    assert!(data.join("manifest.json").exists());
    assert!(data.join("effective-config.json").exists());

    let teacher = dir.path().join("teacher");
    ok(&[
        "make-teacher",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--out",
        s(&teacher),
    ]);
    let records = teacher.join("teacher.pmtt");
    assert!(records.exists() && teacher.join("teacher.json").exists());

    let pre = dir.path().join("pre");
    let args = [
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--teacher-records",
        s(&records),
    ];
    ok(&[&["pretrain", "--epochs", "2", "--out", s(&pre)][..], &args].concat());
    let metrics = std::fs::read_to_string(pre.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(metrics.contains("\"feat\""));
    let effective: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(pre.join("effective-config.json")).unwrap()).unwrap();
    assert_eq!(effective["train"]["epochs"], 2);
    assert_eq!(effective["model"]["dim"], 24);
    assert_eq!(effective["model"]["teacher_dim"], 32);

    let ft = dir.path().join("ft");
    let ckpt = pre.join("checkpoint.pmtc");
    let out = ok(&[
        &[
            "finetune",
            "--epochs",
            "2",
            "--beta",
            "0.01",
            "--checkpoint",
            s(&ckpt),
            "--out",
            s(&ft),
        ][..],
        &args,
    ]
    .concat());
    assert!(out.contains("test accuracy"), "{out}");
    let ft_ckpt = ft.join("checkpoint.pmtc");

    let ev = dir.path().join("eval");
    let report = ok(&["eval", "--checkpoint", s(&ft_ckpt), "--data", s(&data), "--out", s(&ev)]);
    let e: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(e["total"], 5);
    assert!(ev.join("eval.json").exists());

    let an = dir.path().join("analysis");
    let common = ["--checkpoint", s(&ft_ckpt), "--data", s(&data), "--out", s(&an)];
    ok(&[&["corr-hist", "--masked"][..], &common].concat());
    let csv = std::fs::read_to_string(an.join("corr_hist.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 41);
    ok(&[&["export-features"][..], &common].concat());
    let features = std::fs::read_to_string(an.join("features.csv")).unwrap();
    assert_eq!(features.lines().count(), 1 + 30);
    assert!(features.starts_with("sample_id,label,f0,"));
    ok(&[&["reconstruct", "--sample", "4"][..], &common].concat());
    assert!(an.join("reconstruction.pmts").exists());
}

#[test]
fn resumed_training_matches_an_unbroken_run() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let data = dir.path().join("data");
    let cadence = dir.path().join("every.json");
    let mut cfg: serde_json::Value = serde_json::from_str(TINY).unwrap();
    cfg["train.checkpoint_every"] = 1.into();
    std::fs::write(&cadence, cfg.to_string()).unwrap();

    let whole = dir.path().join("whole");
    ok(&[
        "pretrain",
        "--config",
        s(&cadence),
        "--data",
        s(&data),
        "--epochs",
        "3",
        "--out",
        s(&whole),
    ]);
    let resumed = dir.path().join("resumed");
    std::fs::create_dir_all(&resumed).unwrap();
    std::fs::copy(whole.join("checkpoint-e001.pmtc"), resumed.join("start.pmtc")).unwrap();
    let start = resumed.join("start.pmtc");
    ok(&[
        "pretrain",
        "--data",
        s(&data),
        "--resume",
        "--checkpoint",
        s(&start),
        "--out",
        s(&resumed),
    ]);

    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(
        read(&whole.join("checkpoint.pmtc")),
        read(&resumed.join("checkpoint.pmtc"))
    );
    assert_eq!(
        read(&whole.join("checkpoint-e002.pmtc")),
        read(&resumed.join("checkpoint-e002.pmtc"))
    );
    let tail = std::fs::read_to_string(resumed.join("metrics.jsonl")).unwrap();
    assert!(std::fs::read_to_string(whole.join("metrics.jsonl"))
        .unwrap()
        .ends_with(&tail));
    assert_eq!(tail.lines().count(), 2);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = tiny_dataset(dir.path());

    assert_eq!(code(&pmtmae(&["eval", "--bogus"])), 1);
    assert_eq!(code(&pmtmae(&["nope"])), 1);
    assert_eq!(code(&pmtmae(&["--help"])), 0);
    let bad_key = dir.path().join("bad.json");
    std::fs::write(&bad_key, r#"{"train.nonsense": 1}"#).unwrap();
    let o = pmtmae(&["gen-data", "--config", s(&bad_key), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.nonsense"));

    let run = dir.path().join("run");
    ok(&[
        "pretrain",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--epochs",
        "1",
        "--out",
        s(&run),
    ]);
    let ckpt = std::fs::read(run.join("checkpoint.pmtc")).unwrap();
    let eval_of = |bytes: &[u8], name: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, bytes).unwrap();
        pmtmae(&[
            "eval",
            "--checkpoint",
            s(&p),
            "--data",
            s(&data),
            "--out",
            s(&dir.path().join("e")),
        ])
    };
    let mut magic = ckpt.clone();
    magic[..4].copy_from_slice(b"XXXX");
    let o = eval_of(&magic, "magic.pmtc");
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad file format"));
    let mut version = ckpt.clone();
    version[4] = 9;
    assert_eq!(code(&eval_of(&version, "version.pmtc")), 2);
    let o = eval_of(&ckpt[..ckpt.len() - 5], "short.pmtc");
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncated"));
    assert_eq!(code(&pmtmae(&["eval", "--data", s(&data)])), 1);

    let cloud = std::fs::read_dir(data.join("clouds"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let mut bytes = std::fs::read(&cloud).unwrap();
    bytes[8..12].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&cloud, bytes).unwrap();
    let o = pmtmae(&[
        "pretrain",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--epochs",
        "1",
        "--out",
        s(&run),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn grad_check_passes_and_reports_every_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["grad-check", "--seeds", "2", "--seed", "5", "--out", s(dir.path())]);
    for op in [
        "matmul",
        "softmax",
        "layer_norm",
        "gelu",
        "dual_block",
        "chamfer_l2",
        "ce_loss",
    ] {
        assert!(out.contains(op), "{op} missing from {out}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("grad-check.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 12);
}
