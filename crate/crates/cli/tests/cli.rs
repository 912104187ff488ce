use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use srlvc::volume::{read_rvf, synth_volume, write_rvf, SynthKind};

fn srlvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srlvc"))
        .args(args)
        .output()
        .expect("failed to run srlvc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("terminated by signal")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes two small volumes into `dir` and trains one epoch on them.
fn trained_weights(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    fs::create_dir_all(&data).unwrap();
    for seed in 0..2 {
        let v = synth_volume(SynthKind::Smooth3d, seed, (3, 8, 8), 8).unwrap();
        fs::write(data.join(format!("v{seed}.rvf")), write_rvf(&v)).unwrap();
    }
    let w = dir.join("model.srlw");
    let o = srlvc(&[
        "train",
        "--data-dir",
        p(&data),
        "--out",
        p(&w),
        "--epochs",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    w
}

#[test]
fn train_writes_weights_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir_all(&data).unwrap();
    for seed in 0..2 {
        let v = synth_volume(SynthKind::Smooth3d, seed, (3, 8, 8), 8).unwrap();
        fs::write(data.join(format!("v{seed}.rvf")), write_rvf(&v)).unwrap();
    }
    let cfg = dir.path().join("train.cfg");
    fs::write(&cfg, "# tiny run\nepochs = 2\nlearning_rate = 0.001\n").unwrap();
    let w = dir.path().join("model.srlw");
    let o = srlvc(&[
        "train",
        "--config",
        p(&cfg),
        "--data-dir",
        p(&data),
        "--out",
        p(&w),
        "--epochs",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).lines().any(|l| l == "parameter_count\t4866"));
    assert!(w.exists());
    let csv = fs::read_to_string(w.with_extension("csv")).unwrap();
    // flag wins over the file: one epoch, not two
    assert_eq!(csv.lines().count(), 2, "{csv}");
    assert!(csv.starts_with("epoch,mean_loss_bits,mean_bpp"));
}

#[test]
fn train_config_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir_all(&data).unwrap();
    let v8 = synth_volume(SynthKind::Noise, 0, (2, 8, 8), 8).unwrap();
    fs::write(data.join("a.rvf"), write_rvf(&v8)).unwrap();
    let w = dir.path().join("m.srlw");

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 1\nbatch_size = 8\n").unwrap();
    let o = srlvc(&[
        "train",
        "--config",
        p(&cfg),
        "--data-dir",
        p(&data),
        "--out",
        p(&w),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch_size"));

    let v12 = synth_volume(SynthKind::Noise, 0, (2, 8, 8), 12).unwrap();
    fs::write(data.join("b.rvf"), write_rvf(&v12)).unwrap();
    let o = srlvc(&[
        "train",
        "--data-dir",
        p(&data),
        "--out",
        p(&w),
        "--epochs",
        "1",
    ]);
    assert_eq!(code(&o), 3);

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let o = srlvc(&[
        "train",
        "--data-dir",
        p(&empty),
        "--out",
        p(&w),
        "--epochs",
        "1",
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn compress_decompress_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let w = trained_weights(dir.path());
    let input = dir.path().join("data/v1.rvf");
    let packed = dir.path().join("v1.srlv");
    let restored = dir.path().join("v1.out.rvf");

    let o = srlvc(&["compress", "--weights", p(&w), p(&input), p(&packed)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split('\t').collect();
    let printed: f64 = row[2].parse().unwrap();
    let v = read_rvf(&fs::read(&input).unwrap()).unwrap();
    let size = fs::metadata(&packed).unwrap().len();
    assert_eq!(row[1].parse::<u64>().unwrap(), size);
    assert!((printed - srlvc::volume::bpp(&v, size)).abs() < 1e-6);

    let o = srlvc(&["decompress", "--weights", p(&w), p(&packed), p(&restored)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&input).unwrap(), fs::read(&restored).unwrap());
}

#[test]
fn decompress_errors() {
    let dir = tempfile::tempdir().unwrap();
    let w = trained_weights(dir.path());
    let input = dir.path().join("data/v0.rvf");
    let packed = dir.path().join("v0.srlv");
    assert_eq!(
        code(&srlvc(&[
            "compress",
            "--weights",
            p(&w),
            p(&input),
            p(&packed)
        ])),
        0
    );

    let other = dir.path().join("other.srlw");
    let p_other = srlvc::model::init_params(99, 16, 8, 1.0);
    fs::write(
        &other,
        srlvc::weights::save_weights(&p_other, srlvc::weights::WeightDtype::F32),
    )
    .unwrap();
    let out = dir.path().join("x.rvf");
    let o = srlvc(&["decompress", "--weights", p(&other), p(&packed), p(&out)]);
    assert_eq!(code(&o), 5);

    let mut bytes = fs::read(&packed).unwrap();
    bytes.truncate(bytes.len() - 3);
    let cut = dir.path().join("cut.srlv");
    fs::write(&cut, &bytes).unwrap();
    let o = srlvc(&["decompress", "--weights", p(&w), p(&cut), p(&out)]);
    assert_eq!(code(&o), 6);
}

#[test]
fn eval_preserves_order_across_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let w = trained_weights(dir.path());
    let data = dir.path().join("data");
    let one = srlvc(&["eval", "--weights", p(&w), p(&data)]);
    let many = srlvc(&["eval", "--weights", p(&w), p(&data), "--jobs", "3"]);
    assert_eq!(code(&one), 0);
    assert_eq!(stdout(&one), stdout(&many));
    let out = stdout(&one);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].contains("v0.rvf") && lines[2].contains("v1.rvf"));
    assert!(lines[3].starts_with("mean\t"));
}

#[test]
fn gradcheck_default_seed_passes() {
    let o = srlvc(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    let all = out.lines().find(|l| l.starts_with("all\t")).unwrap();
    let err: f64 = all.split('\t').nth(3).unwrap().parse().unwrap();
    assert!(err <= 1e-4);
}

#[test]
fn synth_is_deterministic_and_inspectable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.rvf");
    let b = dir.path().join("b.rvf");
    for path in [&a, &b] {
        let o = srlvc(&[
            "synth",
            "--kind",
            "smooth3d",
            "--dims",
            "2x8x16",
            "--depth",
            "12",
            "--seed",
            "4",
            p(path),
        ]);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let o = srlvc(&["inspect", p(&a)]);
    let out = stdout(&o);
    assert!(
        out.contains("format\tRVF1") && out.contains("depth_bits\t12") && out.contains("w\t16")
    );

    let o = srlvc(&["synth", "--kind", "plaid", "--dims", "1x1x1", p(&a)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn inspect_stream_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let w = trained_weights(dir.path());
    let packed = dir.path().join("v0.srlv");
    let input = dir.path().join("data/v0.rvf");
    assert_eq!(
        code(&srlvc(&[
            "compress",
            "--weights",
            p(&w),
            p(&input),
            p(&packed)
        ])),
        0
    );

    let out = stdout(&srlvc(&["inspect", p(&packed)]));
    for key in [
        "format\tSRLV",
        "depth_bits\t8",
        "t\t3",
        "h\t8",
        "w\t8",
        "escape_count\t",
    ] {
        assert!(out.contains(key), "{key} missing from\n{out}");
    }
    let out = stdout(&srlvc(&["inspect", p(&w)]));
    assert!(out.contains("format\tSRLW") && out.contains("parameter_count\t4866"));

    let junk = dir.path().join("junk");
    fs::write(&junk, b"hello").unwrap();
    assert_eq!(code(&srlvc(&["inspect", p(&junk)])), 3);
}
