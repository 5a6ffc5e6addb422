//! End-to-end exercises of the `capgen` binary: train on a toy dataset,
//! then caption, evaluate, and export attention from the written
//! checkpoint, checking outputs and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use capgen_core::data::image::{encode_ppm, PpmImage};

fn capgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capgen"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is UTF-8")
}

fn write_dataset(root: &Path) {
    let colors: [(&str, [u8; 3]); 4] = [
        ("đỏ", [220, 30, 30]),
        ("xanh", [30, 220, 30]),
        ("lam", [30, 30, 220]),
        ("tím", [180, 30, 220]),
    ];
    let mut jsonl = String::new();
    for (i, (word, rgb)) in colors.iter().enumerate() {
        let img = PpmImage {
            width: 8,
            height: 8,
            maxval: 255,
            pixels: std::iter::repeat(*rgb).take(64).flatten().collect(),
        };
        let file = format!("img{i}.ppm");
        std::fs::write(root.join(&file), encode_ppm(&img)).unwrap();
        jsonl.push_str(&format!(
            "{{\"id\":\"s{i}\",\"file\":\"{file}\",\"caption\":\"khối màu {word}\"}}\n"
        ));
    }
    std::fs::write(root.join("captions.jsonl"), jsonl).unwrap();
}

const TOY_CONFIG: &str = r#"{
    "encoder": {
        "image_size": 8, "patch_size": 2, "embed_dim": 4,
        "stages": [[1, 2]], "window_size": 2
    },
    "decoder": {"embed_dim": 8, "hidden_dim": 12},
    "batch_size": 2,
    "epochs": 2,
    "folds": 1,
    "seed": 5
}"#;

struct Workspace {
    _dir: tempfile::TempDir,
    data: std::path::PathBuf,
    out: std::path::PathBuf,
    config: std::path::PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    std::fs::create_dir_all(&data).unwrap();
    write_dataset(&data);
    let config = dir.path().join("toy.json");
    std::fs::write(&config, TOY_CONFIG).unwrap();
    Workspace {
        data,
        out,
        config,
        _dir: dir,
    }
}

fn train_args(ws: &Workspace) -> Vec<String> {
    vec![
        "train".into(),
        "--config".into(),
        ws.config.display().to_string(),
        "--data".into(),
        ws.data.display().to_string(),
        "--out".into(),
        ws.out.display().to_string(),
    ]
}

#[test]
fn train_caption_eval_attention_roundtrip() {
    let ws = workspace();
    let args: Vec<String> = train_args(&ws);
    let argrefs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = capgen(&argrefs);
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    let ckpt = ws.out.join("fold0.vckp");
    assert!(ckpt.exists());
    assert!(ws.out.join("train_log.jsonl").exists());

    let ckpt_s = ckpt.display().to_string();
    let img = ws.data.join("img0.ppm").display().to_string();

    // Captioning is deterministic, and --beam 1 takes the greedy path.
    let one = capgen(&["caption", &ckpt_s, &img, "--beam", "1"]);
    assert!(one.status.success());
    let two = capgen(&["caption", &ckpt_s, &img, "--beam", "1"]);
    assert_eq!(stdout(&one), stdout(&two));
    let wide = capgen(&["caption", &ckpt_s, &img, "--beam", "3", "--max-len", "6"]);
    assert!(wide.status.success());

    // Eval prints a parseable BLEU report and can copy it to a file.
    let report_path = ws.out.join("report.json");
    let eval = capgen(&[
        "eval",
        &ckpt_s,
        "--data",
        &ws.data.display().to_string(),
        "--out",
        &report_path.display().to_string(),
    ]);
    assert!(
        eval.status.success(),
        "eval failed: {}",
        String::from_utf8_lossy(&eval.stderr)
    );
    let report: serde_json::Value = serde_json::from_str(stdout(&eval).trim()).unwrap();
    for key in ["bleu4", "p", "bp", "hyp_len", "ref_len"] {
        assert!(report.get(key).is_some(), "report missing {key}");
    }
    let on_disk: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report, on_disk);

    // Attention export writes one P5 map per generated token.
    let maps_dir = ws.out.join("maps");
    let att = capgen(&[
        "attention",
        &ckpt_s,
        &img,
        "--out",
        &maps_dir.display().to_string(),
        "--max-len",
        "6",
    ]);
    assert!(att.status.success());
    let maps: Vec<_> = std::fs::read_dir(&maps_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert!(!maps.is_empty());
    for map in maps {
        assert_eq!(map.extension().unwrap(), "pgm");
        assert!(std::fs::read(&map).unwrap().starts_with(b"P5\n"));
    }
}

#[test]
fn ablation_flags_are_recorded_in_the_log() {
    let ws = workspace();
    let mut args = train_args(&ws);
    args.extend(["--no-noise", "--no-augment", "--no-preprocess"].map(String::from));
    let argrefs: Vec<&str> = args.iter().map(String::as_str).collect();
    assert!(capgen(&argrefs).status.success());

    let log = std::fs::read_to_string(ws.out.join("train_log.jsonl")).unwrap();
    let config_line: serde_json::Value =
        serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(config_line["event"], "config");
    let ablation = &config_line["config"]["ablation"];
    assert_eq!(ablation["noise"], false);
    assert_eq!(ablation["augment"], false);
    assert_eq!(ablation["preprocess"], false);
    assert_eq!(ablation["beam"], true);

    // No fake-loss term when noise is ablated.
    for line in log.lines().skip(1) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["event"] == "step" {
            assert!(v["fake"].is_null());
        }
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(capgen(&["train"]).status.code(), Some(1)); // missing flags
    assert_eq!(capgen(&["bogus"]).status.code(), Some(1));
    assert_eq!(capgen(&[]).status.code(), Some(1));
    assert_eq!(capgen(&["--help"]).status.code(), Some(0));

    // A config file with unknown keys is a usage error too.
    let ws = workspace();
    std::fs::write(&ws.config, r#"{"bogus_knob": 1}"#).unwrap();
    let args = train_args(&ws);
    let argrefs: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(capgen(&argrefs).status.code(), Some(1));
}

#[test]
fn data_errors_exit_two() {
    let ws = workspace();
    let mut args = train_args(&ws);
    let missing = ws.data.join("not-there");
    args[4] = missing.display().to_string(); // --data value
    let argrefs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = capgen(&argrefs);
    assert_eq!(out.status.code(), Some(2));

    let ghost_ckpt = ws.out.join("ghost.vckp").display().to_string();
    let img = ws.data.join("img0.ppm").display().to_string();
    assert_eq!(capgen(&["caption", &ghost_ckpt, &img]).status.code(), Some(2));
}
