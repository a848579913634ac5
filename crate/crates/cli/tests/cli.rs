use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use patchlab::experiment::{Preset, SweepManifest};
use patchlab::patching::sha256_hex;

fn patchlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchlab")).arg("--log").arg("warn").args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = patchlab(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn failure(args: &[&str]) -> String {
    let out = patchlab(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
    }
    out
}

/// A config small enough for a whole sweep to finish in seconds.
fn tiny_config(root: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "seed": 4,
        "paths": {
            "corpus": root.join("corpus"),
            "checkpoints": root.join("ckpt"),
            "output": root.join("out"),
        },
        "corpus": { "private_docs": 80, "public_docs": 40 },
        "model": { "n_layers": 1, "n_heads": 2, "d_model": 16, "d_head": 8, "d_mlp": 32, "max_seq_len": 64 },
        "pretrain": { "epochs": 1 },
        "finetune": { "epochs": 1, "learning_rate": 0.01 },
        "discovery": { "n_pairs": 4, "ig_steps": 1 },
        "attack": { "n_queries": 6, "max_new_tokens": 10, "repetitions": 2, "exclusion_factor": 1 },
    });
    let path = root.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn gen_corpus_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let listed = ok(&["gen-corpus", "--seed", "7", "--corpus-dir", a.to_str().unwrap()]);
    ok(&["gen-corpus", "--seed", "7", "--corpus-dir", b.to_str().unwrap()]);
    assert_eq!(listed.lines().count(), 9);
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 9);
    assert_eq!(fa, fb);
    let c = dir.path().join("c");
    ok(&["gen-corpus", "--seed", "8", "--corpus-dir", c.to_str().unwrap()]);
    assert_ne!(files(&c), fa);
}

#[test]
fn sweep_lists_four_cells_per_preset_and_cells_rerun_alone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let stdout = ok(&["sweep", "--config", cfg.to_str().unwrap()]);
    assert!(stdout.contains("| defense | variant |"));
    let sweep = dir.path().join("out/sweep.json");
    let manifest = SweepManifest::load(&sweep).unwrap();
    for preset in Preset::ALL {
        assert_eq!(manifest.cells_for(preset).count(), 4, "{preset}");
    }
    assert_eq!(manifest.cells.len(), 8);

    let cell = manifest.cells.iter().find(|c| c.preset == Preset::PatchDp && c.percentile == 99.0).unwrap();
    std::fs::remove_dir_all(&cell.dir).unwrap();
    ok(&[
        "patch",
        "--manifest",
        sweep.to_str().unwrap(),
        "--preset",
        "patch-dp",
        "--mode",
        &cell.mode.to_string(),
        "--percentile",
        "99",
    ]);
    let bytes = std::fs::read(cell.dir.join("manifest.json")).unwrap();
    assert_eq!(sha256_hex(&bytes), cell.manifest_sha256);
}

#[test]
fn stage_commands_chain_into_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    ok(&["gen-corpus", "--config", c]);
    ok(&["pretrain", "--config", c]);
    ok(&["finetune", "--config", c, "--defense", "none"]);
    ok(&["discover", "--config", c]);
    let circuits = ok(&["circuits", "--config", c]);
    assert!(circuits.starts_with("type_a,type_b,nodes,edges\n"));
    ok(&["patch", "--config", c, "--mode", "mean", "--percentile", "99"]);
    ok(&["evaluate", "--config", c, "--defense", "none"]);
    ok(&["attack", "--config", c, "--defense", "none"]);
    ok(&["evaluate", "--config", c, "--preset", "patch-baseline", "--mode", "mean", "--percentile", "99"]);
    ok(&["attack", "--config", c, "--preset", "patch-baseline", "--mode", "mean", "--percentile", "99"]);
    let table = ok(&["report", "--config", c]);
    let rows = patchlab::report::parse_tradeoff_table(&table).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].defense.as_str(), rows[0].variant.as_str()), ("none", "-"));
    assert_eq!((rows[1].defense.as_str(), rows[1].variant.as_str()), ("patch-baseline", "mean-99"));
    assert!(rows.iter().all(|r| r.perplexity.is_some()));

    // Rerunning a stage leaves its artifacts unchanged.
    let cell = dir.path().join("out/patch-baseline/mean-99");
    let before = files(&cell);
    ok(&["patch", "--config", c, "--mode", "mean", "--percentile", "99"]);
    ok(&["attack", "--config", c, "--preset", "patch-baseline", "--mode", "mean", "--percentile", "99"]);
    assert_eq!(files(&cell), before);
}

#[test]
fn bad_invocations_fail_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();

    let err = failure(&["gen-corpus", "--no-such-flag"]);
    assert!(err.contains("--no-such-flag"), "{err}");
    assert!(!failure(&["frobnicate"]).is_empty());
    assert!(failure(&["finetune", "--config", c, "--defense", "noise"]).contains("noise"));

    let err = failure(&["gen-corpus", "--config", c, "--set", "patch.percentile=90"]);
    assert!(err.contains("patch.percentile"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(failure(&["gen-corpus", "--config", c, "--set", "model.n_heads=0"]).contains("model.n_heads"));
    assert!(failure(&["gen-corpus", "--config", c, "--set", "patch.percentil=99"]).contains("patch.percentil"));
    assert!(failure(&["patch", "--config", c, "--percentile", "50"]).contains("percentile"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"discovery": {"n_pairs": 0}}"#).unwrap();
    assert!(failure(&["gen-corpus", "--config", bad.to_str().unwrap()]).contains("discovery.n_pairs"));
    std::fs::write(&bad, r#"{"attack": {"queries": 3}}"#).unwrap();
    assert!(failure(&["gen-corpus", "--config", bad.to_str().unwrap()]).contains("queries"));

    // Stages report what is missing instead of panicking.
    assert!(failure(&["pretrain", "--config", c]).contains("gen-corpus"));
}
