use std::process::Command;

fn grip() -> Command {
    Command::new(env!("CARGO_BIN_EXE_grip"))
}

#[test]
fn gen_shapes_writes_one_file_per_preset_and_scale() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("shapes");
    let status = grip()
        .args(["gen-shapes", "--out"])
        .arg(&out)
        .args(["--presets", "square,tee", "--scales", "20,30"])
        .status()
        .unwrap();
    assert!(status.success());
    let mut names: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.len(), 4);
    assert!(names.iter().all(|n| n.ends_with(".shape")));
}

#[test]
fn bad_input_exits_nonzero() {
    assert!(!grip().arg("no-such-command").status().unwrap().success());
    let dir = tempfile::tempdir().unwrap();
    let status = grip()
        .args(["design", "--task", "right", "--method", "sgd", "--out"])
        .arg(dir.path().join("d"))
        .arg("--dynamics")
        .arg(dir.path().join("missing.ckpt"))
        .status()
        .unwrap();
    assert!(!status.success());
}
