use std::path::Path;
use std::process::{Command, Output};

fn rtformer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtformer"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_setup(dir: &Path) {
    std::fs::write(dir.join("small.cfg"), "depth=1\ndim=16\nheads=2\nepochs=3\nlr=0.1\n").unwrap();
    let o = rtformer(
        dir,
        &["--config", "small.cfg", "gen-data", "--out", "ev", "--samples", "60"],
    );
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let o = rtformer(
        dir,
        &["--config", "small.cfg", "train", "--data", "ev", "--out", "m.rtfs"],
    );
    assert_eq!(o.status.code(), Some(0), "{o:?}");
}

#[test]
fn train_fuse_verify_energy() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_setup(dir);
    let metrics = std::fs::read_to_string(dir.join("m.metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(metrics.starts_with("epoch,loss,train_accuracy,test_accuracy"));

    let o = rtformer(dir, &["eval", "m.rtfs", "--data", "ev"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("accuracy"));

    let o = rtformer(dir, &["fuse", "m.rtfs", "--out", "f.rtfs"]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert!(dir.join("f.params.txt").exists());
    assert!(stdout(&o).contains("stored floats"));

    let o = rtformer(dir, &["verify", "m.rtfs", "--fused", "f.rtfs", "--samples", "40"]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert!(stdout(&o).contains("0 mismatches outside boundary band"));

    let o = rtformer(dir, &["energy", "m.rtfs", "--probe", "zeros", "--out", "zero"]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let csv = std::fs::read_to_string(dir.join("zero.csv")).unwrap();
    for row in csv.lines().skip(1) {
        let acs: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(acs, 0.0, "{row}");
    }
    assert!(std::fs::read_to_string(dir.join("zero.svg")).unwrap().contains("<svg"));
    assert!(std::fs::read_to_string(dir.join("zero.txt"))
        .unwrap()
        .contains("E_MAC = 4.6 pJ"));

    let o = rtformer(
        dir,
        &["energy", "f.rtfs", "--probe", "data", "--data", "ev", "--out", "fe"],
    );
    assert_eq!(o.status.code(), Some(0), "{o:?}");
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(rtformer(dir, &["bogus"]).status.code(), Some(2));
    assert_eq!(rtformer(dir, &[]).status.code(), Some(2));
    assert_eq!(rtformer(dir, &["verify"]).status.code(), Some(2));
    std::fs::write(dir.join("bad.cfg"), "no_such_key=1\n").unwrap();
    assert_eq!(
        rtformer(dir, &["--config", "bad.cfg", "gen-data"]).status.code(),
        Some(2)
    );
    assert_eq!(rtformer(dir, &["--help"]).status.code(), Some(0));
}

#[test]
fn fusing_twice_and_wrong_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_setup(dir);
    assert_eq!(
        rtformer(dir, &["fuse", "m.rtfs", "--out", "f.rtfs"]).status.code(),
        Some(0)
    );
    let o = rtformer(dir, &["fuse", "f.rtfs"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("already fused"));

    // A fused net from a different seed must not verify against `m`.
    let o = rtformer(
        dir,
        &[
            "--config",
            "small.cfg",
            "--seed",
            "9",
            "train",
            "--data",
            "ev",
            "--out",
            "other.rtfs",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        rtformer(dir, &["fuse", "other.rtfs", "--out", "of.rtfs"]).status.code(),
        Some(0)
    );
    let o = rtformer(dir, &["verify", "m.rtfs", "--fused", "of.rtfs", "--samples", "20"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
}

#[test]
fn corrupt_checkpoint_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_setup(dir);
    let mut bytes = std::fs::read(dir.join("m.rtfs")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(dir.join("bad.rtfs"), bytes).unwrap();
    let o = rtformer(dir, &["eval", "bad.rtfs", "--data", "ev"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));
}
