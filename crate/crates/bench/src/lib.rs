//! Shared fixtures for the criterion benches.

use grip_core::diffusion::{Denoiser, NoiseSchedule};
use grip_core::dynamics::{DeltaStats, DynamicsConfig};
use grip_core::geometry::make_shape;
use grip_core::util::rng;
use grip_core::{ControlVector, DynamicsModel, FingerGeometry, ObjectShape, PoseGrid, ShapePreset};

/// Desk-sized, untrained networks; timing does not depend on the weights.
pub struct Fixture {
    pub geom: FingerGeometry,
    pub shape: ObjectShape,
    pub m: ControlVector,
    pub grid: PoseGrid,
    pub model: DynamicsModel,
    pub denoiser: Denoiser,
}

impl Fixture {
    pub fn desk() -> Self {
        let geom = FingerGeometry::default();
        let n = geom.n_per_finger;
        let stats = DeltaStats { mean: [0.0; 3], std: [0.1, 1.0, 1.0] };
        Self {
            geom,
            shape: make_shape(ShapePreset::Tee, 25.0).expect("preset"),
            m: ControlVector::uniform(&mut rng(1), n).expect("control vector"),
            grid: PoseGrid::new(72, 3, 3, 3.0).expect("grid"),
            model: DynamicsModel::new(n, 3.0, stats, &DynamicsConfig::default(), 2).expect("model"),
            denoiser: Denoiser::new(n, NoiseSchedule::new(15).expect("schedule"), 64, 4, 3).expect("denoiser"),
        }
    }
}
