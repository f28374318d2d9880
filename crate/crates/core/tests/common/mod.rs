//! Fixtures shared by the integration tests: bulk optics tables built once
//! per test binary, and a wide-angle camera for framing whole test clouds.

#![allow(dead_code)]

use std::sync::OnceLock;

use cloudtomo_core::constants::WATER_REFRACTIVE_INDEX;
use cloudtomo_core::geometry::{Camera, CameraIntrinsics, Sun};
use cloudtomo_core::optics::{BulkOpticsTable, TableSpec};
use nalgebra::Vector3;

fn table_spec(re_min: f64, re_max: f64, re_step: f64) -> TableSpec {
    TableSpec {
        re_min,
        re_max,
        re_step,
        v_e: 0.1,
        wavelength_um: 0.645,
        refractive_index: WATER_REFRACTIVE_INDEX,
        radius_nodes: 64,
        angles_deg: angle_grid(),
    }
}

/// 0.05° steps through the forward peak, 0.5° beyond.
pub fn angle_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=200).map(|k| k as f64 * 0.05).collect();
    grid.extend((21..=360).map(|k| k as f64 * 0.5));
    grid
}

/// Bulk table over r_e in [8, 12] µm.
pub fn mid_table() -> &'static BulkOpticsTable {
    static TABLE: OnceLock<BulkOpticsTable> = OnceLock::new();
    TABLE.get_or_init(|| BulkOpticsTable::build(&table_spec(8.0, 12.0, 1.0)).unwrap())
}

/// Bulk table over r_e in [2.5, 7] µm, the range shallow monotonic
/// initialization profiles reach.
pub fn low_table() -> &'static BulkOpticsTable {
    static TABLE: OnceLock<BulkOpticsTable> = OnceLock::new();
    TABLE.get_or_init(|| BulkOpticsTable::build(&table_spec(2.5, 7.0, 0.5)).unwrap())
}

/// Short-focal-length camera aimed at `target`; at 5 km range one pixel
/// spans about 8.6 m, so small voxel clouds fit in a few dozen pixels.
pub fn scene_camera(position: Vector3<f64>, target: Vector3<f64>, resolution: usize) -> Camera {
    Camera::look_at(
        position,
        target,
        &CameraIntrinsics {
            focal_length: 2.0e-3,
            aperture: 1.0e-3,
            pixel_pitch: 3.45e-6,
            resolution,
            roll_deg: 0.0,
        },
    )
    .unwrap()
}

pub fn sun25() -> Sun {
    Sun::new(25.0, 90.0).unwrap()
}
