use grip_core::geometry::make_shape;
use grip_core::simulator::{close_once, close_once_traced, Jaw, SimConfig};
use grip_core::{ControlVector, DeltaPose, Error, FingerGeometry, Pose, ShapePreset};
use proptest::prelude::*;

fn preset() -> impl Strategy<Value = ShapePreset> {
    prop::sample::select(ShapePreset::ALL.to_vec())
}

fn control() -> impl Strategy<Value = ControlVector> {
    prop::collection::vec(-1.0..=1.0f64, 32).prop_map(|v| ControlVector::new(v, 16).unwrap())
}

fn pose() -> impl Strategy<Value = Pose> {
    (-std::f64::consts::PI..std::f64::consts::PI, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(t, x, y)| Pose::new(t, x, y))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn repeated_runs_are_bitwise_equal(p in preset(), scale in 20.0..30.0f64, m in control(), pose in pose()) {
        let shape = make_shape(p, scale).unwrap();
        let jaw = Jaw::new(&m, &FingerGeometry::default()).unwrap();
        let cfg = SimConfig::default();
        let a = close_once(&shape, &jaw, &pose, &cfg);
        let b = close_once(&shape, &jaw, &pose, &cfg);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.delta.dtheta.to_bits(), b.delta.dtheta.to_bits());
                prop_assert_eq!(a.delta.dx.to_bits(), b.delta.dx.to_bits());
                prop_assert_eq!(a.delta.dy.to_bits(), b.delta.dy.to_bits());
                prop_assert_eq!(a, b);
            }
            (Err(Error::OutOfWorkspace(_)), Err(Error::OutOfWorkspace(_))) => {}
            (a, b) => prop_assert!(false, "diverging outcomes {a:?} / {b:?}"),
        }
    }

    #[test]
    fn mirrored_instances_move_mirrored(p in preset(), scale in 20.0..30.0f64, m in control(), pose in pose()) {
        let shape = make_shape(p, scale).unwrap();
        let jaw = Jaw::new(&m, &FingerGeometry::default()).unwrap();
        let cfg = SimConfig::default();
        let a = close_once(&shape, &jaw, &pose, &cfg);
        let b = close_once(&shape.mirrored(), &jaw.mirrored(), &pose.mirrored(), &cfg);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert!((a.delta.dtheta + b.delta.dtheta).abs() <= 1e-9, "{:?} {:?}", a.delta, b.delta);
                prop_assert!((a.delta.dx - b.delta.dx).abs() <= 1e-9, "{:?} {:?}", a.delta, b.delta);
                prop_assert!((a.delta.dy + b.delta.dy).abs() <= 1e-9, "{:?} {:?}", a.delta, b.delta);
                prop_assert_eq!(a.jammed, b.jammed);
            }
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "mirror changed validity: {a:?} / {b:?}"),
        }
    }

    #[test]
    fn accepted_energies_never_increase(p in preset(), scale in 20.0..30.0f64, m in control(), pose in pose()) {
        let shape = make_shape(p, scale).unwrap();
        let jaw = Jaw::new(&m, &FingerGeometry::default()).unwrap();
        if let Ok((_, trace)) = close_once_traced(&shape, &jaw, &pose, &SimConfig::default()) {
            for level in &trace {
                for w in level.windows(2) {
                    prop_assert!(w[1] <= w[0], "energy rose {} -> {}", w[0], w[1]);
                }
            }
        }
    }

    #[test]
    fn receded_fingers_leave_small_objects_still(p in preset(), scale in 10.0..16.0f64, t in -3.1..3.1f64, x in -3.0..3.0f64, y in -1.5..1.5f64) {
        let shape = make_shape(p, scale).unwrap();
        prop_assume!(shape.radius() + y.abs() < 15.0);
        let jaw = Jaw::new(&ControlVector::new(vec![-1.0; 32], 16).unwrap(), &FingerGeometry::default()).unwrap();
        let r = close_once(&shape, &jaw, &Pose::new(t, x, y), &SimConfig::default()).unwrap();
        prop_assert_eq!(r.delta, DeltaPose::default());
        prop_assert!(!r.jammed);
    }
}
