//! Transport checks for the single-scattering renderer: the optically thin
//! limit, a fine-step reference integration of a two-voxel stack, rigid
//! rotation of the whole scene, and bitwise reproducibility.

mod common;

use cloudtomo_core::geometry::Sun;
use cloudtomo_core::microphysics::VoxelCloud;
use cloudtomo_core::render::{AdjointWeights, ForwardModel, SingleScatter};
use nalgebra::Vector3;
use ndarray::{Array2, Array3};

const FOUR_PI: f64 = 4.0 * std::f64::consts::PI;

fn single_voxel(lwc: f64, re: f64) -> VoxelCloud {
    VoxelCloud::new(
        Array3::from_elem((1, 1, 1), lwc),
        Array3::from_elem((1, 1, 1), re),
        Array3::from_elem((1, 1, 1), true),
        0.1,
        [20.0; 3],
        600.0,
    )
    .unwrap()
}

fn two_voxel_stack() -> VoxelCloud {
    let mut lwc = Array3::zeros((1, 1, 2));
    let mut re = Array3::zeros((1, 1, 2));
    lwc[[0, 0, 0]] = 0.4;
    re[[0, 0, 0]] = 9.0;
    lwc[[0, 0, 1]] = 0.25;
    re[[0, 0, 1]] = 11.0;
    VoxelCloud::new(lwc, re, Array3::from_elem((1, 1, 2), true), 0.1, [20.0; 3], 600.0).unwrap()
}

#[test]
fn thin_limit_matches_the_single_scattering_formula() {
    let table = common::mid_table();
    let (kappa, omega0) = table.kappa_omega(10.0);
    let tau = 2.0e-4;
    let cloud = single_voxel(tau / (kappa * 20.0), 10.0);
    let sun = common::sun25();
    let camera = common::scene_camera(
        Vector3::new(10.0, 10.0, 5000.0),
        Vector3::new(10.0, 10.0, 610.0),
        1,
    );

    let img = SingleScatter::default().render(&cloud, table, &camera, &sun).unwrap();

    let d = camera.pixel_ray(0, 0);
    let theta_deg = sun.toward_sun().dot(&d).clamp(-1.0, 1.0).acos().to_degrees();
    let s = table.sample(10.0, theta_deg);

    let expected_i = tau * omega0 * s.p11 / FOUR_PI;
    let i = img.i[[0, 0]];
    assert!(
        (i - expected_i).abs() <= 5e-3 * expected_i,
        "thin-limit radiance {i} vs {expected_i}"
    );

    let dolp = img.q[[0, 0]].hypot(img.u[[0, 0]]) / i;
    let expected_dolp = s.p12.abs() / s.p11;
    assert!(
        (dolp - expected_dolp).abs() <= 5e-3 * expected_dolp,
        "thin-limit DoLP {dolp} vs {expected_dolp}"
    );
}

/// Entry and exit parameters of a ray against an axis-aligned box, or None
/// when it misses.
fn box_span(lo: [f64; 3], hi: [f64; 3], o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t1 > t0).then_some((t0, t1))
}

struct OracleBox {
    lo: [f64; 3],
    hi: [f64; 3],
    beta_ext: f64,
    beta_sca: f64,
    p11: f64,
    p12: f64,
}

/// Midpoint-rule integration of the single-scattering source along one ray,
/// with exact slab-method sun legs. Returns intensity and the magnitude of
/// the polarized component, both in the scattering frame.
fn oracle_ray(boxes: &[OracleBox], o: &Vector3<f64>, d: &Vector3<f64>, sun_dir: &Vector3<f64>) -> (f64, f64) {
    let mut chords: Vec<(f64, f64, &OracleBox)> = boxes
        .iter()
        .filter_map(|b| box_span(b.lo, b.hi, o, d).map(|(t0, t1)| (t0.max(0.0), t1, b)))
        .filter(|(t0, t1, _)| t1 > t0)
        .collect();
    chords.sort_by(|a, b| a.0.total_cmp(&b.0));

    let step = 0.1;
    let mut tau_cam = 0.0;
    let mut acc_i = 0.0;
    let mut acc_q = 0.0;
    for (t0, t1, cb) in chords {
        let n = ((t1 - t0) / step).ceil() as usize;
        let dt = (t1 - t0) / n as f64;
        for k in 0..n {
            let t = t0 + (k as f64 + 0.5) * dt;
            let pos = o + d * t;
            let tau_sun: f64 = boxes
                .iter()
                .map(|b| {
                    box_span(b.lo, b.hi, &pos, sun_dir)
                        .map_or(0.0, |(s0, s1)| b.beta_ext * (s1 - s0.max(0.0)).max(0.0))
                })
                .sum();
            let w = dt * (-(tau_cam + cb.beta_ext * (t - t0) + tau_sun)).exp();
            acc_i += w * cb.beta_sca * cb.p11;
            acc_q += w * cb.beta_sca * cb.p12;
        }
        tau_cam += cb.beta_ext * (t1 - t0);
    }
    (acc_i / FOUR_PI, acc_q.abs() / FOUR_PI)
}

#[test]
fn two_voxel_stack_matches_a_fine_step_reference() {
    let table = common::mid_table();
    let cloud = two_voxel_stack();
    let sun = common::sun25();
    let camera = common::scene_camera(
        Vector3::new(-3000.0, 40.0, 4000.0),
        Vector3::new(10.0, 10.0, 620.0),
        1,
    );

    let img = SingleScatter::default().render(&cloud, table, &camera, &sun).unwrap();

    let o = camera.position;
    let d = camera.pixel_ray(0, 0);
    let theta_deg = sun.toward_sun().dot(&d).clamp(-1.0, 1.0).acos().to_degrees();

    let boxes: Vec<OracleBox> = [(600.0, 0.4, 9.0), (620.0, 0.25, 11.0)]
        .iter()
        .map(|&(z0, lwc, re)| {
            let (kappa, omega0) = table.kappa_omega(re);
            let s = table.sample(re, theta_deg);
            OracleBox {
                lo: [0.0, 0.0, z0],
                hi: [20.0, 20.0, z0 + 20.0],
                beta_ext: kappa * lwc,
                beta_sca: kappa * lwc * omega0,
                p11: s.p11,
                p12: s.p12,
            }
        })
        .collect();

    let (want_i, want_pol) = oracle_ray(&boxes, &o, &d, &sun.toward_sun());
    let i = img.i[[0, 0]];
    let pol = img.q[[0, 0]].hypot(img.u[[0, 0]]);

    assert!(want_i > 0.0 && want_pol > 0.05 * want_i, "reference ray lost the scene");
    assert!(
        (i - want_i).abs() <= 1e-3 * want_i,
        "radiance {i} vs reference {want_i}"
    );
    assert!(
        (pol - want_pol).abs() <= 1e-3 * want_pol,
        "polarized magnitude {pol} vs reference {want_pol}"
    );
}

#[test]
fn rigid_rotation_about_the_vertical_leaves_images_unchanged() {
    let table = common::mid_table();
    let n = 3;
    let mut lwc = Array3::zeros((n, n, 1));
    let mut re = Array3::zeros((n, n, 1));
    for i in 0..n {
        for j in 0..n {
            lwc[[i, j, 0]] = 0.05 + 0.03 * i as f64 + 0.07 * j as f64;
            re[[i, j, 0]] = 8.5 + 0.3 * i as f64 + 0.2 * j as f64;
        }
    }
    // Quarter turn about the grid's vertical center axis: cell (i, j) lands
    // on (n-1-j, i), world points rotate (x, y) -> (-y, x) about the center.
    let mut lwc_rot = Array3::zeros((n, n, 1));
    let mut re_rot = Array3::zeros((n, n, 1));
    for i in 0..n {
        for j in 0..n {
            lwc_rot[[n - 1 - j, i, 0]] = lwc[[i, j, 0]];
            re_rot[[n - 1 - j, i, 0]] = re[[i, j, 0]];
        }
    }
    let mask = Array3::from_elem((n, n, 1), true);
    let cloud = VoxelCloud::new(lwc, re, mask.clone(), 0.1, [20.0; 3], 600.0).unwrap();
    let cloud_rot = VoxelCloud::new(lwc_rot, re_rot, mask, 0.1, [20.0; 3], 600.0).unwrap();

    let center = Vector3::new(30.0, 30.0, 610.0);
    let pos = Vector3::new(-2000.0, -500.0, 3500.0);
    let rel = pos - center;
    let pos_rot = center + Vector3::new(-rel.y, rel.x, rel.z);

    let camera = common::scene_camera(pos, center, 5);
    let camera_rot = common::scene_camera(pos_rot, center, 5);
    let sun = Sun::new(25.0, 40.0).unwrap();
    let sun_rot = Sun::new(25.0, 130.0).unwrap();

    let model = SingleScatter::default();
    let img = model.render(&cloud, table, &camera, &sun).unwrap();
    let img_rot = model.render(&cloud_rot, table, &camera_rot, &sun_rot).unwrap();

    let peak = img.i.iter().cloned().fold(0.0, f64::max);
    assert!(peak > 0.0);
    for r in 0..5 {
        for c in 0..5 {
            for (plane, plane_rot) in [(&img.i, &img_rot.i), (&img.q, &img_rot.q), (&img.u, &img_rot.u)] {
                let (a, b) = (plane[[r, c]], plane_rot[[r, c]]);
                assert!(
                    (a - b).abs() <= 1e-6 * peak,
                    "pixel ({r}, {c}): {a} vs rotated {b}"
                );
            }
        }
    }
}

#[test]
fn rendering_is_bitwise_reproducible() {
    let table = common::mid_table();
    let cloud = two_voxel_stack();
    let sun = common::sun25();
    let camera = common::scene_camera(
        Vector3::new(-3000.0, 40.0, 4000.0),
        Vector3::new(10.0, 10.0, 620.0),
        4,
    );
    let model = SingleScatter::default();

    let a = model.render(&cloud, table, &camera, &sun).unwrap();
    let b = model.render(&cloud, table, &camera, &sun).unwrap();
    assert_eq!(a, b);

    let w = AdjointWeights {
        i: Array2::ones((4, 4)),
        q: Array2::ones((4, 4)),
        u: Array2::ones((4, 4)),
    };
    let (ga_img, ga_lwc, ga_re) = model
        .render_with_gradient(&cloud, table, &camera, &sun, &w)
        .unwrap();
    let (gb_img, gb_lwc, gb_re) = model
        .render_with_gradient(&cloud, table, &camera, &sun, &w)
        .unwrap();
    assert_eq!(ga_img, gb_img);
    assert_eq!(ga_lwc, gb_lwc);
    assert_eq!(ga_re, gb_re);
}
