//! Shared fixtures for module tests: small bulk optics tables built once per
//! process, plus minimal scenes and cameras.

use std::sync::OnceLock;

use nalgebra::Vector3;
use ndarray::Array3;

use crate::constants::WATER_REFRACTIVE_INDEX;
use crate::geometry::{Camera, CameraIntrinsics, Sun};
use crate::microphysics::VoxelCloud;
use crate::optics::{BulkOpticsTable, TableSpec};

pub fn tiny_angles() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=200).map(|k| k as f64 * 0.05).collect();
    grid.extend((21..=360).map(|k| k as f64 * 0.5));
    grid
}

/// A small bulk table over r_e in [8, 12] µm.
pub fn tiny_table() -> &'static BulkOpticsTable {
    static TABLE: OnceLock<BulkOpticsTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let spec = TableSpec {
            re_min: 8.0,
            re_max: 12.0,
            re_step: 1.0,
            v_e: 0.1,
            wavelength_um: 0.645,
            refractive_index: WATER_REFRACTIVE_INDEX,
            radius_nodes: 64,
            angles_deg: tiny_angles(),
        };
        BulkOpticsTable::build(&spec).unwrap()
    })
}

/// A bulk table over r_e in [2.5, 7] µm, covering the values monotonic
/// initialization profiles produce on shallow test grids.
pub fn low_re_table() -> &'static BulkOpticsTable {
    static TABLE: OnceLock<BulkOpticsTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let spec = TableSpec {
            re_min: 2.5,
            re_max: 7.0,
            re_step: 0.5,
            v_e: 0.1,
            wavelength_um: 0.645,
            refractive_index: WATER_REFRACTIVE_INDEX,
            radius_nodes: 64,
            angles_deg: tiny_angles(),
        };
        BulkOpticsTable::build(&spec).unwrap()
    })
}

pub fn single_voxel(lwc: f64, re: f64) -> VoxelCloud {
    VoxelCloud::new(
        Array3::from_elem((1, 1, 1), lwc),
        Array3::from_elem((1, 1, 1), re),
        Array3::from_elem((1, 1, 1), true),
        0.1,
        [20.0, 20.0, 20.0],
        600.0,
    )
    .unwrap()
}

pub fn nadir_camera(x: f64, y: f64, z: f64, resolution: usize) -> Camera {
    Camera::new(
        Vector3::new(x, y, z),
        -Vector3::z(),
        &CameraIntrinsics {
            focal_length: 0.08625,
            aperture: 0.043,
            pixel_pitch: 3.45e-6,
            resolution,
            roll_deg: 0.0,
        },
    )
    .unwrap()
}

/// A short-focal-length camera aimed at `target`, wide enough to frame a
/// whole test cloud from a few kilometres away.
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
