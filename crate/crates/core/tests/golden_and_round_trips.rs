use std::fmt::Write as _;
use std::path::Path;

use grip_core::diffusion::{train_denoiser, DiffusionConfig};
use grip_core::dynamics::{generate_dataset, train, DynamicsConfig};
use grip_core::geometry::make_shape;
use grip_core::io::{format_design, load_design, load_shape, save_shape, Design};
use grip_core::simulator::{rollout, Jaw, SimConfig};
use grip_core::{Config, ControlVector, Denoiser, DynamicsModel, FingerGeometry, InteractionDataset, Pose, PoseGrid, ShapePreset};

const GOLDEN: &str = "tests/data/rollout_tee25.txt";

fn golden_rollout() -> String {
    let shape = make_shape(ShapePreset::Tee, 25.0).unwrap();
    let m = ControlVector::new((0..32).map(|i| ((i * 11) % 9) as f64 / 4.0 - 1.0).collect(), 16).unwrap();
    let jaw = Jaw::new(&m, &FingerGeometry::default()).unwrap();
    let r = rollout(&shape, &jaw, &Pose::new(0.9, 1.0, -2.0), 8, &SimConfig::default());
    let mut out = format!("truncated {}\n", r.truncated);
    for (p, rot) in r.poses.iter().zip(&r.total_rotation) {
        let _ = writeln!(out, "{:?} {:?} {:?} {:?}", p.theta, p.x, p.y, rot);
    }
    out
}

/// Regression against a stored rollout. Regenerate with `GRIP_BLESS=1`.
#[test]
fn rollout_matches_golden_file() {
    let got = golden_rollout();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(GOLDEN);
    if std::env::var_os("GRIP_BLESS").is_some() {
        std::fs::write(&path, &got).unwrap();
    }
    let want = std::fs::read_to_string(&path).expect("golden file");
    assert_eq!(got, want);
}

fn tiny_dataset() -> (Vec<grip_core::ObjectShape>, InteractionDataset) {
    let shapes = vec![make_shape(ShapePreset::Square, 25.0).unwrap(), make_shape(ShapePreset::Triangle, 25.0).unwrap()];
    let grid = PoseGrid::new(6, 2, 1, 3.0).unwrap();
    let (ds, _) = generate_dataset(&shapes, 3, &FingerGeometry::default(), &grid, &SimConfig::default(), 17).unwrap();
    (shapes, ds)
}

#[test]
fn dataset_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ds) = tiny_dataset();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    ds.save(&a).unwrap();
    let back = InteractionDataset::load(&a).unwrap();
    assert_eq!(back, ds);
    back.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn checkpoints_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (shapes, ds) = tiny_dataset();
    let cfg = DynamicsConfig { width: 8, trunk_layers: 2, bands: 2, epochs: 2, lr: 1e-3, batch: 8, augment: false };
    let (model, _) = train(&ds, &shapes, 3.0, &cfg, 5).unwrap();
    let p = dir.path().join("dyn.ckpt");
    model.save(&p).unwrap();
    let back = DynamicsModel::load(&p).unwrap();
    let q = dir.path().join("dyn2.ckpt");
    back.save(&q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    let m = ControlVector::uniform(&mut grip_core::util::rng(3), 16).unwrap();
    let pose = Pose::new(0.2, 0.5, -1.0);
    assert_eq!(model.predict(&shapes[0], &m, &pose).unwrap(), back.predict(&shapes[0], &m, &pose).unwrap());

    let dcfg = DiffusionConfig { width: 8, hidden_layers: 2, epochs: 2, n_samples: 64, batch: 16, ..DiffusionConfig::default() };
    let (den, _) = train_denoiser(16, &dcfg, 9).unwrap();
    let p = dir.path().join("den.ckpt");
    den.save(&p).unwrap();
    let back = Denoiser::load(&p).unwrap();
    let q = dir.path().join("den2.ckpt");
    back.save(&q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
}

#[test]
fn shape_and_design_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for preset in ShapePreset::ALL {
        let s = make_shape(preset, 30.0).unwrap();
        let p = dir.path().join(format!("{}.shape", s.id));
        save_shape(&s, &p).unwrap();
        assert_eq!(load_shape(&p).unwrap(), s);
    }
    let d = Design {
        method: "cmaes".into(),
        task: "sum(neg(dtheta), neg(dx))".into(),
        objects: vec!["ell_30".into()],
        scale: 0.0,
        seed: u64::MAX,
        index: 15,
        theta_target: None,
        predicted_f: 1e-300,
        m: ControlVector::uniform(&mut grip_core::util::rng(8), 16).unwrap(),
    };
    let p = dir.path().join("x.design");
    std::fs::write(&p, format_design(&d)).unwrap();
    assert_eq!(load_design(&p).unwrap(), d);
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config::from_json("{}", &["seeds.master=99".into(), "grid.n_theta=36".into()]).unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, cfg.to_json()).unwrap();
    let back = Config::load(&p, &[]).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_json(), cfg.to_json());
}
