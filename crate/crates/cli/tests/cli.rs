use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cassi-fusion"));
    c.env("CASSI_FUSION_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn cassi-fusion")
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn simulate_config(dir: &Path, name: &str, seed: u64) -> std::path::PathBuf {
    let cfg = dir.join(format!("{name}.json"));
    write(
        &cfg,
        &format!(
            r#"{{
  "synthetic": {{"rows": 16, "cols": 16, "bands": 8, "seed": {seed}}},
  "output_dir": "{}",
  "p": 4, "q": 2, "ratio": 0.5, "snr_db": 30.0,
  "aperture_seed": 11, "noise_seed": {seed}
}}"#,
            dir.join(name).display()
        ),
    );
    cfg
}

#[test]
fn simulate_train_fuse_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&run(&[
        "simulate",
        "--config",
        simulate_config(d, "s0", 1).to_str().unwrap(),
    ]));
    ok(&run(&[
        "simulate",
        "--config",
        simulate_config(d, "s1", 2).to_str().unwrap(),
    ]));
    let manifest = std::fs::read_to_string(d.join("s0/manifest.json")).unwrap();
    assert!(
        manifest.contains("\"W\": 4") && manifest.contains("\"W\": 2"),
        "{manifest}"
    );

    let train = d.join("train.json");
    write(
        &train,
        &format!(
            r#"{{
  "scenes": ["{}", "{}"],
  "depth": 2, "feature_maps": 2, "init_seed": 5,
  "training": {{"learning_rate": 0.001, "epochs": 2, "batch_size": 1, "gamma": 0.1, "shuffle_seed": 3}},
  "checkpoint": "{}",
  "history_csv": "{}"
}}"#,
            d.join("s0").display(),
            d.join("s1").display(),
            d.join("net.ckpt").display(),
            d.join("history.csv").display()
        ),
    );
    ok(&run(&["train", "--config", train.to_str().unwrap()]));
    let hist = std::fs::read_to_string(d.join("history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 3);

    let fused = d.join("fused.cube");
    ok(&run(&[
        "fuse",
        "--scene",
        d.join("s0").to_str().unwrap(),
        "--checkpoint",
        d.join("net.ckpt").to_str().unwrap(),
        "--output",
        fused.to_str().unwrap(),
        "--rgb-png",
        d.join("fused.png").to_str().unwrap(),
        "--rgb-bands",
        "7,3,0",
    ]));
    assert!(d.join("fused.png").exists());

    let eval = d.join("eval.json");
    write(
        &eval,
        &format!(
            r#"{{"entries": [
  {{"name": "identity", "reference": "{t}", "estimate": "{t}"}},
  {{"name": "net", "reference": "{t}", "estimate": "{f}"}}
], "output_csv": "{c}"}}"#,
            t = d.join("s0/truth.cube").display(),
            f = fused.display(),
            c = d.join("metrics.csv").display()
        ),
    );
    ok(&run(&["evaluate", "--config", eval.to_str().unwrap()]));
    let csv = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "name,psnr,ssim,sam,runtime_s");
    assert_eq!(lines[1], "identity,inf,1.0000,0.0000,");
    let net: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(net[0], "net");
    assert_eq!(
        net[1].split('.').nth(1).map(str::len),
        Some(2),
        "{}",
        lines[2]
    );
    assert!(!net[4].is_empty());
}

#[test]
fn fuse_with_wrong_checkpoint_fails_with_dimension_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&run(&[
        "simulate",
        "--config",
        simulate_config(d, "s", 4).to_str().unwrap(),
    ]));
    // a checkpoint trained on a differently sized scene
    let cfg = d.join("small.json");
    write(
        &cfg,
        &format!(
            r#"{{"synthetic": {{"rows": 8, "cols": 8, "bands": 8, "seed": 1}}, "output_dir": "{}",
  "p": 4, "q": 2, "ratio": 0.5, "aperture_seed": 1}}"#,
            d.join("small").display()
        ),
    );
    ok(&run(&["simulate", "--config", cfg.to_str().unwrap()]));
    let train = d.join("train.json");
    write(
        &train,
        &format!(
            r#"{{"scenes": ["{}"], "depth": 1, "feature_maps": 2, "init_seed": 0,
  "training": {{"learning_rate": 0.0, "epochs": 1, "batch_size": 1, "gamma": 0.1, "shuffle_seed": 0}},
  "checkpoint": "{}"}}"#,
            d.join("small").display(),
            d.join("small.ckpt").display()
        ),
    );
    ok(&run(&["train", "--config", train.to_str().unwrap()]));
    let out = run(&[
        "fuse",
        "--scene",
        d.join("s").to_str().unwrap(),
        "--checkpoint",
        d.join("small.ckpt").to_str().unwrap(),
        "--output",
        d.join("x.cube").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("\"error\":\"dimension_mismatch\""), "{err}");
}

#[test]
fn unknown_config_key_is_rejected_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    write(
        &cfg,
        &format!(
            r#"{{"synthetic": {{"rows": 8, "cols": 8, "bands": 4, "seed": 1}}, "output_dir": "{}",
  "p": 2, "q": 2, "ratio": 0.5, "aperture_seed": 1, "turbo": true}}"#,
            dir.path().join("out").display()
        ),
    );
    let out = run(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"error\":\"config\""));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn classical_fuse_without_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&run(&[
        "simulate",
        "--config",
        simulate_config(d, "s", 7).to_str().unwrap(),
    ]));
    let cfg = d.join("fuse.json");
    write(
        &cfg,
        &format!(
            r#"{{"scene": "{}", "solver": {{"max_iters": 20}}, "output": "{}"}}"#,
            d.join("s").display(),
            d.join("classical.cube").display()
        ),
    );
    ok(&run(&["fuse", "--config", cfg.to_str().unwrap()]));
    let rec = std::fs::read_to_string(d.join("classical.cube.run.json")).unwrap();
    assert!(rec.contains("ladmm"), "{rec}");
}

#[test]
fn cs_train_and_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("images");
    std::fs::create_dir(&data).unwrap();
    for k in 0..2 {
        cassi_fusion::synthetic::synthetic_image(40, 40, k)
            .unwrap()
            .write(data.join(format!("img{k}.png")))
            .unwrap();
    }
    let cfg = d.join("cs.json");
    write(
        &cfg,
        &format!(
            r#"{{"dataset_dir": "{}", "checkpoint": "{}",
  "cs": {{"ratio": 0.1, "matrix_seed": 9, "init_seed": 1, "feature_maps": 2, "depth": 2, "stride": 7,
          "training": {{"learning_rate": 0.001, "epochs": 1, "batch_size": 2, "gamma": 0.1, "shuffle_seed": 0}}}}}}"#,
            data.display(),
            d.join("cs.ckpt").display()
        ),
    );
    ok(&run(&["cs-train", "--config", cfg.to_str().unwrap()]));
    assert!(d.join("cs.ckpt.matrix.json").exists());
    let test = d.join("test.pgm");
    cassi_fusion::synthetic::synthetic_image(45, 50, 99)
        .unwrap()
        .write(&test)
        .unwrap();
    let recon = |seed: &str| {
        run(&[
            "cs-recon",
            "--ratio",
            "0.1",
            "--matrix-seed",
            seed,
            "--checkpoint",
            d.join("cs.ckpt").to_str().unwrap(),
            "--input",
            test.to_str().unwrap(),
            "--output",
            d.join("rec.png").to_str().unwrap(),
        ])
    };
    ok(&recon("9"));
    let img = cassi_fusion::cube_io::GrayImage::read(d.join("rec.png")).unwrap();
    assert_eq!((img.rows(), img.cols()), (45, 50));
    let bad = recon("10");
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("dimension_mismatch"));
}
