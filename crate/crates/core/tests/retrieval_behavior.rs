//! End-to-end retrieval on a noiseless synthetic scene: a monotonic truth
//! cloud is imaged from two directions, initialized by grid search, and
//! descended until both voxel fields tighten toward the truth.

mod common;

use cloudtomo_core::geometry::{build_string_of_pearls, CameraIntrinsics};
use cloudtomo_core::imager::BandSpec;
use cloudtomo_core::microphysics::{epsilon_errors, VoxelCloud};
use cloudtomo_core::render::{ForwardModel, SingleScatter};
use cloudtomo_core::retrieval::{
    grid_search_init, monotonic_profile, retrieve, InitConfig, InitMethod, MeasurementSet,
    Phase, ProfileScaffold, RetrievalMode, RetrievalOptions, View,
};
use nalgebra::Vector3;
use ndarray::Array3;

const N: usize = 5;
const RES: usize = 12;

fn scaffold() -> ProfileScaffold {
    ProfileScaffold {
        mask: Array3::from_elem((N, N, N), true),
        v_e: 0.1,
        voxel_size: [20.0; 3],
        base_height: 600.0,
    }
}

/// Noiseless acquisitions from the ten-satellite string along the orbit
/// track; wide view diversity is what conditions the voxel-wise problem.
fn measure(truth: &VoxelCloud) -> MeasurementSet {
    let c = truth.center();
    let center = Vector3::new(c[0], c[1], c[2]);
    let model = SingleScatter::default();
    let table = common::low_table();
    let sun = common::sun25();
    let intrinsics = CameraIntrinsics {
        focal_length: 0.08625,
        aperture: 0.043125,
        pixel_pitch: 3.45e-6,
        resolution: RES,
        roll_deg: 0.0,
    };
    let constellation =
        build_string_of_pearls(10, 500.0e3, 100.0e3, center, 5, sun, &intrinsics).unwrap();
    let views = constellation
        .cameras
        .iter()
        .map(|camera| {
            let image = model.render(truth, table, camera, &sun).unwrap();
            View { camera: camera.clone(), image }
        })
        .collect();
    MeasurementSet::new(views, sun, 0.01, 11, BandSpec::red_default()).unwrap()
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|j| lo + j as f64 * (hi - lo) / (n - 1) as f64).collect()
}

fn options() -> RetrievalOptions {
    RetrievalOptions {
        mode: RetrievalMode::Alternating,
        max_iters_per_phase: 80,
        max_cycles: 8,
        phase_tol: 1e-5,
        cycle_tol: 1e-4,
        re_max: common::low_table().spec().re_max,
        ..RetrievalOptions::default()
    }
}

#[test]
fn noiseless_scene_is_recovered_beyond_a_coarse_initialization() {
    let sc = scaffold();
    let truth = monotonic_profile(0.7, 8.0, &sc).unwrap();
    let meas = measure(&truth);
    let model = SingleScatter::default();
    let table = common::low_table();

    // The grids deliberately exclude the generating parameters so the
    // descent has real work left after the search.
    let config = InitConfig {
        method: InitMethod::MStokes,
        grid_a: linspace(0.15, 0.3, 2),
        grid_b: linspace(3.0, 4.5, 2),
    };
    let init = grid_search_init(&config, &meas, &model, table, &sc).unwrap();
    let eps_init = epsilon_errors(&init.cloud, &truth).unwrap();

    let result = retrieve(&meas, &init.cloud, &model, table, &options()).unwrap();

    let costs: Vec<f64> = result.history.iter().map(|r| r.cost).collect();
    assert!(costs.windows(2).all(|w| w[1] <= w[0]), "cost increased: {costs:?}");
    let (first, last) = (costs[0], *costs.last().unwrap());
    assert!(last < 0.15 * first, "cost only moved from {first} to {last}");

    let eps_final = epsilon_errors(&result.cloud, &truth).unwrap();
    assert!(
        eps_final.eps_lwc < eps_init.eps_lwc,
        "LWC error went from {} to {}",
        eps_init.eps_lwc,
        eps_final.eps_lwc
    );
    assert!(
        eps_final.eps_re < eps_init.eps_re,
        "r_e error went from {} to {}",
        eps_init.eps_re,
        eps_final.eps_re
    );
}

#[test]
fn frozen_droplet_sizes_never_move() {
    let sc = scaffold();
    let truth = monotonic_profile(0.7, 8.0, &sc).unwrap();
    let meas = measure(&truth);
    let model = SingleScatter::default();
    let table = common::low_table();
    // Same size profile as the truth, wrong water mass: with r_e pinned to
    // the right values the LWC-only descent faces a well-posed problem.
    let init = monotonic_profile(0.3, 8.0, &sc).unwrap();
    assert_eq!(init.r_e(), truth.r_e());
    let eps_init = epsilon_errors(&init, &truth).unwrap();

    let opts = RetrievalOptions {
        freeze_re: true,
        max_cycles: 2,
        max_iters_per_phase: 40,
        ..options()
    };
    let result = retrieve(&meas, &init, &model, table, &opts).unwrap();

    assert_eq!(result.cloud.r_e(), init.r_e());
    assert!(result.history.iter().all(|r| r.phase == Phase::LwcOnly));
    let eps_final = epsilon_errors(&result.cloud, &truth).unwrap();
    assert!(
        eps_final.eps_lwc < 0.5 * eps_init.eps_lwc,
        "LWC error went from {} to {}",
        eps_init.eps_lwc,
        eps_final.eps_lwc
    );
}

#[test]
fn retrieval_runs_are_bitwise_reproducible() {
    let sc = scaffold();
    let truth = monotonic_profile(0.7, 8.0, &sc).unwrap();
    let meas = measure(&truth);
    let model = SingleScatter::default();
    let table = common::low_table();
    let init = monotonic_profile(0.3, 5.0, &sc).unwrap();

    let opts = RetrievalOptions {
        max_iters_per_phase: 25,
        max_cycles: 2,
        ..options()
    };
    let a = retrieve(&meas, &init, &model, table, &opts).unwrap();
    let b = retrieve(&meas, &init, &model, table, &opts).unwrap();

    assert_eq!(a.cloud.lwc(), b.cloud.lwc());
    assert_eq!(a.cloud.r_e(), b.cloud.r_e());
    assert_eq!(a.history.len(), b.history.len());
    for (ra, rb) in a.history.iter().zip(&b.history) {
        assert_eq!(ra.cost.to_bits(), rb.cost.to_bits());
        assert_eq!(ra.step.to_bits(), rb.step.to_bits());
    }
}
