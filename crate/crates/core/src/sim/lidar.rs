//! Column-synchronous ray casting of a rotating multi-beam LiDAR.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::geometry::Vec3;
use crate::scan::{Sweep, TimedPoint};

use super::building::{BuildingModel, PatchBvh};
use super::trajectory::Trajectory;
use super::SensorRig;

/// Building geometry with its ray-casting acceleration structure.
#[derive(Clone, Debug)]
pub struct Scene {
    pub model: BuildingModel,
    bvh: PatchBvh,
}

impl Scene {
    pub fn new(model: BuildingModel) -> Self {
        let bvh = PatchBvh::new(&model.patches);
        Self { model, bvh }
    }

    /// Nearest hit in the world frame: (range, patch index).
    pub fn cast(&self, origin: &Vec3, dir: &Vec3, min_range: f64, max_range: f64) -> Option<(f64, usize)> {
        self.bvh.cast(&self.model.patches, origin, dir, min_range, max_range)
    }
}

/// Unit ray directions in the sensor frame for one column, ring order.
fn column_directions(rig: &SensorRig, column: usize) -> Vec<Vec3> {
    let lidar = &rig.lidar;
    let az = std::f64::consts::TAU * column as f64 / lidar.columns as f64;
    (0..lidar.rings)
        .map(|r| {
            let el = lidar.elevation(r);
            Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
        })
        .collect()
}

/// RNG for one column, independent of evaluation order.
pub fn column_rng(seed: u64, sweep_index: u64, column: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((sweep_index << 20) | column);
    rng
}

/// Raw (motion-distorted) sweep starting at `t_start`. Each column is fired
/// from the true sensor pose at its own timestamp; points are in that
/// instantaneous sensor frame. Misses are dropped.
pub fn simulate_sweep(scene: &Scene, trajectory: &Trajectory, t_start: f64, rig: &SensorRig, seed: u64) -> Sweep {
    let lidar = &rig.lidar;
    let period = lidar.sweep_period();
    let sweep_index = (t_start * lidar.rate).round().max(0.0) as u64;
    let noise = (lidar.range_noise > 0.0).then(|| Normal::new(0.0, lidar.range_noise).unwrap());
    let columns: Vec<Vec<TimedPoint>> = (0..lidar.columns)
        .into_par_iter()
        .map(|c| {
            let t = t_start + period * c as f64 / lidar.columns as f64;
            let sensor = trajectory.pose(t).compose(&rig.extrinsic);
            let rot = sensor.rotation_matrix();
            let mut rng = column_rng(seed, sweep_index, c as u64);
            let mut out = Vec::with_capacity(lidar.rings);
            for (ring, dir) in column_directions(rig, c).iter().enumerate() {
                let world_dir = rot * dir;
                if let Some((range, _)) = scene.cast(&sensor.translation, &world_dir, lidar.min_range, lidar.max_range)
                {
                    let noisy = match &noise {
                        Some(n) => range + n.sample(&mut rng),
                        None => range,
                    };
                    out.push(TimedPoint::new(dir * noisy, ring as u16, t));
                }
            }
            out
        })
        .collect();
    Sweep::new(columns.into_iter().flatten().collect(), t_start, t_start + period)
}
