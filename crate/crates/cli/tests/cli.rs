//! End-to-end runs of the `rpnt` binary: data generation, pretraining,
//! finetuning, sweeps, connectivity export, and exit-code contracts.

use std::path::Path;
use std::process::{Command, Output};

fn rpnt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpnt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_data(dir: &Path) {
    let out = rpnt(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--sites",
        "3",
        "--neurons",
        "6",
        "--trials",
        "24",
        "--seed",
        "5",
    ]);
    assert_ok(&out, "gen-data");
    assert!(dir.join("manifest.json").exists());
    assert!(dir.join("pretrain_train_spikes.bin").exists());
    assert!(dir.join("heldout_truth.json").exists());
}

#[test]
fn full_pipeline_via_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    gen_data(&data);

    // pretrain a tiny model with the spatial encoder on
    let out = rpnt(&[
        "pretrain",
        "--data",
        data.to_str().unwrap(),
        "--preset",
        "tiny",
        "--epochs",
        "2",
        "--batch",
        "4",
        "--mu",
        "0.1",
        "--seed",
        "9",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_ok(&out, "pretrain");
    let ckpt = run.join("best.rpnt");
    assert!(ckpt.exists());
    assert!(run.join("pretrain_metrics.ndjson").exists());
    assert!(run.join("pretrain_record.json").exists());
    assert!(run.join("pretrain_loss.svg").exists());
    // metrics stream is valid newline-delimited json with the agreed fields
    let metrics = std::fs::read_to_string(run.join("pretrain_metrics.ndjson")).unwrap();
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["epoch", "step", "loss_recon", "loss_contrast", "loss_total", "lr", "grad_norm"] {
        assert!(first.get(key).is_some(), "metrics line missing {key}");
    }

    // finetune from the checkpoint
    let ft = tmp.path().join("ft");
    let out = rpnt(&[
        "finetune",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--mode",
        "fs_sft",
        "--ratio",
        "0.2",
        "--epochs",
        "2",
        "--batch",
        "2",
        "--out",
        ft.to_str().unwrap(),
    ]);
    assert_ok(&out, "finetune");
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("r2 ="), "{text}");
    assert!(ft.join("finetuned.rpnt").exists());

    // connectivity export from the spatial-encoder checkpoint
    let fc = tmp.path().join("fc");
    let out = rpnt(&[
        "export-fc",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--at-ms",
        "0,300,600",
        "--out",
        fc.to_str().unwrap(),
    ]);
    assert_ok(&out, "export-fc");
    assert!(fc.join("fc.bin").exists());
    assert!(fc.join("fc.json").exists());
    assert!(fc.join("fc_0000ms.png").exists());
    assert!(fc.join("fc_0300ms.png").exists());
    assert!(fc.join("fc_0600ms.png").exists());
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(fc.join("fc.json")).unwrap()).unwrap();
    assert_eq!(meta["shape"][0], 50);
    // rows of the exported matrix sum to 1
    let bytes = std::fs::read(fc.join("fc.bin")).unwrap();
    let vals: Vec<f64> = bytes.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let s = meta["shape"][1].as_u64().unwrap() as usize;
    for row in vals.chunks(s).take(20) {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "fc row sums to {sum}");
    }
}

#[test]
fn sweep_emits_table_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("sweep");
    gen_data(&data);
    let out = rpnt(&[
        "sweep",
        "--data",
        data.to_str().unwrap(),
        "--axis",
        "attention",
        "--preset",
        "tiny",
        "--epochs",
        "1",
        "--batch",
        "4",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_ok(&out, "sweep");
    assert!(run.join("sweep_attention_kind.json").exists());
    assert!(run.join("sweep_attention_kind.svg").exists());
    let table: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("sweep_attention_kind.json")).unwrap())
            .unwrap();
    assert_eq!(table["points"].as_array().unwrap().len(), 2);
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);

    // usage error: finetune without a checkpoint in a pretrained mode
    let out = rpnt(&["finetune", "--data", data.to_str().unwrap(), "--mode", "fs_sft"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));

    // configuration error: unknown positional encoding
    let out = rpnt(&[
        "pretrain",
        "--data",
        data.to_str().unwrap(),
        "--pe",
        "bogus",
    ]);
    assert_eq!(out.status.code(), Some(1));

    // check failure: impossible gradcheck threshold exits with 3
    let out = rpnt(&["gradcheck", "--threshold", "1e-12"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn gradcheck_passes_at_the_contract_threshold() {
    let out = rpnt(&["gradcheck"]);
    assert_ok(&out, "gradcheck");
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("worst:"), "{text}");
    // per-parameter report lines
    assert!(text.lines().filter(|l| l.contains("model.")).count() > 20, "{text}");
}
