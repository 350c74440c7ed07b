//! Runs the `fghash` binary through the documented pipelines.

use std::path::Path;
use std::process::{Command, Output};

fn fghash(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fghash"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn fghash")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fghash(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn map_line(stdout: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("map "))
        .expect("map line")
        .parse()
        .unwrap()
}

#[test]
fn solver_codes_evaluate_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "solve-codes",
            "--bits",
            "12",
            "--sigma",
            "1.0",
            "--seed",
            "7",
            "--out",
            "codes.bin",
        ],
    );
    assert_eq!(map_line(&ok(d, &["eval-map", "--codes", "codes.bin"])), 1.0);
    ok(d, &["index", "--codes", "codes.bin", "--out", "codes.idx"]);
    assert_eq!(
        map_line(&ok(
            d,
            &["eval-map", "--codes", "codes.bin", "--index", "codes.idx"]
        )),
        1.0
    );
    let top = ok(
        d,
        &[
            "query",
            "--index",
            "codes.idx",
            "--codes",
            "codes.bin",
            "--id",
            "3",
            "--top",
            "5",
        ],
    );
    let rows: Vec<&str> = top.lines().skip(2).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.ends_with(" 3 0")), "{top}");
}

#[test]
fn train_encode_index_query() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-data",
            "--out",
            "data",
            "--classes",
            "4",
            "--train-per-class",
            "4",
            "--test-per-class",
            "2",
        ],
    );
    ok(
        d,
        &[
            "train",
            "--manifest",
            "data/manifest.txt",
            "--out",
            "init.ckpt",
            "--epochs",
            "0",
        ],
    );
    assert!(d.join("init.ckpt").exists());

    let train = [
        "train",
        "--manifest",
        "data/manifest.txt",
        "--out",
        "m.ckpt",
        "--epochs",
        "2",
        "--batch-size",
        "8",
        "--stages",
        "3,2",
        "--metrics",
        "metrics.txt",
        "--probe",
    ];
    let log = ok(d, &train);
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch=")).count(), 2);
    let metrics = std::fs::read_to_string(d.join("metrics.txt")).unwrap();
    assert!(metrics.contains("probe_map="));

    ok(
        d,
        &[
            "encode",
            "--checkpoint",
            "m.ckpt",
            "--manifest",
            "data/manifest.txt",
            "--out",
            "q.bin",
            "--dump-attention",
            "att",
            "--dump-limit",
            "1",
        ],
    );
    ok(
        d,
        &[
            "encode",
            "--checkpoint",
            "m.ckpt",
            "--manifest",
            "data/manifest.txt",
            "--out",
            "q2.bin",
        ],
    );
    assert_eq!(
        std::fs::read(d.join("q.bin")).unwrap(),
        std::fs::read(d.join("q2.bin")).unwrap()
    );
    for f in [
        "0000_attention.pgm",
        "0000_saliency.pgm",
        "0000_grid.pgm",
        "0000_input.png",
        "0000_zoomed.png",
    ] {
        assert!(d.join("att").join(f).exists(), "{f}");
    }

    ok(
        d,
        &[
            "encode",
            "--checkpoint",
            "m.ckpt",
            "--manifest",
            "data/manifest.txt",
            "--split",
            "train",
            "--out",
            "db.bin",
        ],
    );
    ok(d, &["index", "--codes", "db.bin", "--out", "db.idx"]);
    let m = map_line(&ok(
        d,
        &[
            "eval-map", "--codes", "q.bin", "--index", "db.idx", "--report", "r.txt",
        ],
    ));
    assert!((0.0..=1.0).contains(&m));
    assert!(std::fs::read_to_string(d.join("r.txt"))
        .unwrap()
        .starts_with("fghash-eval v1"));
    let q = ok(
        d,
        &[
            "query", "--index", "db.idx", "--codes", "q.bin", "--top", "4",
        ],
    );
    assert_eq!(q.lines().count(), 6);

    ok(
        d,
        &["plot-metrics", "--metrics", "metrics.txt", "--out", "plots"],
    );
    let svg = std::fs::read_to_string(d.join("plots/weights.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("alpha"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck"]);
    assert!(out.contains("full model L_TOTAL"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn usage_and_format_errors_exit_distinctly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        fghash(d, &["train", "--no-such-flag"]).status.code(),
        Some(2)
    );
    assert_eq!(
        fghash(d, &["solve-codes", "--bits", "0"]).status.code(),
        Some(2)
    );

    ok(
        d,
        &[
            "solve-codes",
            "--classes",
            "3",
            "--per-class",
            "4",
            "--out",
            "c.bin",
        ],
    );
    let mut bytes = std::fs::read(d.join("c.bin")).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(d.join("c.bin"), bytes).unwrap();
    let out = fghash(d, &["eval-map", "--codes", "c.bin"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.contains("proxies"), "{err}");
}
