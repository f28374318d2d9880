//! Cameras, constellations, meridian frames and cloudbow-scan planning.
//!
//! All positions are metres in a local frame with x pointing north, y east
//! and z up; the origin sits on the ground and the (spherical) Earth centre
//! lies at depth R below it. Satellites fly on an orbit arc above the north
//! axis and every camera is aimed at a common target point.
//!
//! The meridian frame of a propagation direction ω is
//!
//! ```text
//! b = (ẑ × ω)/‖ẑ × ω‖,    l = ω × b,
//! ```
//!
//! so {b, l, ω} is right-handed with b horizontal. A ray parallel to ẑ has
//! no meridian; the deterministic fallback is b = (−1, 0, 0).

use nalgebra::Vector3;
use ndarray::Array2;

use crate::constants::EARTH_RADIUS_M;
use crate::error::CoreError;

/// Direction singularity threshold for ‖ẑ × ω‖.
const SINGULAR_CROSS: f64 = 1e-9;

/// Sun direction in zenith/azimuth form; azimuth is degrees east of north.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sun {
    pub zenith_deg: f64,
    pub azimuth_deg: f64,
}

impl Sun {
    pub fn new(zenith_deg: f64, azimuth_deg: f64) -> Result<Self, CoreError> {
        if !(zenith_deg.is_finite() && (0.0..90.0).contains(&zenith_deg)) {
            return Err(CoreError::invalid(format!(
                "sun zenith must lie in [0°, 90°), got {zenith_deg}"
            )));
        }
        if !azimuth_deg.is_finite() {
            return Err(CoreError::NonFinite("sun azimuth".into()));
        }
        Ok(Sun {
            zenith_deg,
            azimuth_deg,
        })
    }

    /// Unit vector from the scene toward the sun.
    pub fn toward_sun(&self) -> Vector3<f64> {
        let z = self.zenith_deg.to_radians();
        let a = self.azimuth_deg.to_radians();
        Vector3::new(z.sin() * a.cos(), z.sin() * a.sin(), z.cos())
    }
}

/// Scattering angle in degrees between the incident propagation direction
/// (−toward-sun) and the propagation direction toward the camera
/// (−view_ray), where `view_ray` points from the camera into the scene.
pub fn scattering_angle_deg(sun: &Sun, view_ray: &Vector3<f64>) -> f64 {
    let dot = sun.toward_sun().dot(view_ray).clamp(-1.0, 1.0);
    dot.acos().to_degrees()
}

/// Lens, sensor and pointing description of one polarization imager.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// Pinhole position, metres.
    pub position: Vector3<f64>,
    /// Unit vector from the pinhole into the scene.
    pub optical_axis: Vector3<f64>,
    /// Rotation about the optical axis; defines the 0° polarizer direction.
    pub roll_deg: f64,
    /// Focal length, metres.
    pub focal_length: f64,
    /// Aperture diameter, metres.
    pub aperture: f64,
    /// Pixel pitch, metres.
    pub pixel_pitch: f64,
    /// Square detector side, pixels.
    pub resolution: usize,
}

/// Camera parameters shared by every satellite of a constellation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub focal_length: f64,
    pub aperture: f64,
    pub pixel_pitch: f64,
    pub resolution: usize,
    pub roll_deg: f64,
}

impl Camera {
    pub fn new(
        position: Vector3<f64>,
        optical_axis: Vector3<f64>,
        intrinsics: &CameraIntrinsics,
    ) -> Result<Self, CoreError> {
        if !(intrinsics.focal_length > 0.0 && intrinsics.aperture > 0.0 && intrinsics.pixel_pitch > 0.0)
        {
            return Err(CoreError::invalid(
                "focal length, aperture and pixel pitch must be positive",
            ));
        }
        if intrinsics.resolution == 0 {
            return Err(CoreError::invalid("camera resolution must be at least 1"));
        }
        if !position.iter().all(|c| c.is_finite()) || !optical_axis.iter().all(|c| c.is_finite()) {
            return Err(CoreError::NonFinite("camera pose".into()));
        }
        let norm = optical_axis.norm();
        if norm < 1e-9 {
            return Err(CoreError::invalid("optical axis must be a nonzero vector"));
        }
        Ok(Camera {
            position,
            optical_axis: optical_axis / norm,
            roll_deg: intrinsics.roll_deg,
            focal_length: intrinsics.focal_length,
            aperture: intrinsics.aperture,
            pixel_pitch: intrinsics.pixel_pitch,
            resolution: intrinsics.resolution,
        })
    }

    /// Camera at `position` aimed at `target`.
    pub fn look_at(
        position: Vector3<f64>,
        target: Vector3<f64>,
        intrinsics: &CameraIntrinsics,
    ) -> Result<Self, CoreError> {
        let axis = target - position;
        if axis.norm() < 1e-6 {
            return Err(CoreError::invalid("camera position coincides with its target"));
        }
        Camera::new(position, axis, intrinsics)
    }

    /// Image-plane basis (e_u, e_v) after roll. Without roll, e_u is the
    /// horizontal direction ẑ × axis (east for a nadir view) and
    /// e_v = axis × e_u completes the right-handed triple.
    pub fn basis(&self) -> (Vector3<f64>, Vector3<f64>) {
        let f = self.optical_axis;
        let cross = Vector3::z().cross(&f);
        let e_u0 = if cross.norm() < SINGULAR_CROSS {
            Vector3::y()
        } else {
            cross / cross.norm()
        };
        let roll = self.roll_deg.to_radians();
        let e_u = e_u0 * roll.cos() + f.cross(&e_u0) * roll.sin();
        let e_v = f.cross(&e_u);
        (e_u, e_v)
    }

    /// Transmission direction of the sensor's 0° polarizer channel.
    pub fn polarizer_axis(&self) -> Vector3<f64> {
        self.basis().0
    }

    /// Unit ray direction of pixel (row, col); the principal point is the
    /// integer pixel (resolution/2, resolution/2), whose ray is exactly the
    /// optical axis.
    pub fn pixel_ray(&self, row: usize, col: usize) -> Vector3<f64> {
        let half = (self.resolution / 2) as f64;
        let u = (col as f64 - half) * self.pixel_pitch;
        let v = (row as f64 - half) * self.pixel_pitch;
        if u == 0.0 && v == 0.0 {
            return self.optical_axis;
        }
        let (e_u, e_v) = self.basis();
        let dir = self.optical_axis + e_u * (u / self.focal_length) + e_v * (v / self.focal_length);
        dir / dir.norm()
    }

    /// All pixel rays, indexed `[row, col]`.
    pub fn pixel_rays(&self) -> Array2<Vector3<f64>> {
        let n = self.resolution;
        let half = (n / 2) as f64;
        let (e_u, e_v) = self.basis();
        Array2::from_shape_fn((n, n), |(row, col)| {
            let u = (col as f64 - half) * self.pixel_pitch;
            let v = (row as f64 - half) * self.pixel_pitch;
            if u == 0.0 && v == 0.0 {
                self.optical_axis
            } else {
                let dir =
                    self.optical_axis + e_u * (u / self.focal_length) + e_v * (v / self.focal_length);
                dir / dir.norm()
            }
        })
    }
}

/// Meridian polarization frame of a propagation direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeridianFrame {
    pub b: Vector3<f64>,
    pub l: Vector3<f64>,
    pub omega: Vector3<f64>,
}

/// Meridian frame of ω: b = (ẑ × ω)/‖ẑ × ω‖, l = ω × b, with the
/// deterministic fallback b = (−1, 0, 0) when ω is within 1e-9 of ±ẑ.
pub fn meridian_frame(omega: &Vector3<f64>) -> MeridianFrame {
    let cross = Vector3::z().cross(omega);
    let norm = cross.norm();
    let b = if norm < SINGULAR_CROSS {
        Vector3::new(-1.0, 0.0, 0.0)
    } else {
        cross / norm
    };
    let l = omega.cross(&b);
    MeridianFrame {
        b,
        l,
        omega: *omega,
    }
}

/// Orbit-arc metadata kept for cloudbow re-pointing.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitArc {
    /// Orbit altitude above the Earth surface, metres.
    pub altitude_m: f64,
    /// Common aim point of every camera, metres.
    pub target: Vector3<f64>,
    /// Along-track arc offset of each camera from the nadir point, metres.
    pub arc_positions_m: Vec<f64>,
}

/// A string-of-pearls imaging formation plus the sun.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    pub cameras: Vec<Camera>,
    pub sun: Sun,
    pub orbit: Option<OrbitArc>,
}

/// Satellite position at along-track arc offset `s` metres from the point
/// directly above `target`, on a spherical Earth of radius R: the orbit
/// circle has radius R + h around the Earth centre below the target and the
/// arc angle is s/(R + h).
fn orbit_position(target: &Vector3<f64>, altitude_m: f64, s: f64) -> Vector3<f64> {
    let r_orbit = EARTH_RADIUS_M + altitude_m;
    let phi = s / r_orbit;
    Vector3::new(
        target.x + r_orbit * phi.sin(),
        target.y,
        r_orbit * phi.cos() - EARTH_RADIUS_M,
    )
}

/// Signed off-zenith view angle (degrees) of `position` seen from `target`;
/// the sign follows the north component of the displacement.
pub fn view_zenith_deg(position: &Vector3<f64>, target: &Vector3<f64>) -> f64 {
    let d = position - target;
    let angle = (d.z / d.norm()).clamp(-1.0, 1.0).acos().to_degrees();
    if d.x < 0.0 {
        -angle
    } else {
        angle
    }
}

/// Builds `n` cameras along the orbit arc with `spacing_m` between
/// neighbours; camera `nadir_index` sits directly above the target. All
/// cameras aim at `target`.
pub fn build_string_of_pearls(
    n: usize,
    altitude_m: f64,
    spacing_m: f64,
    target: Vector3<f64>,
    nadir_index: usize,
    sun: Sun,
    intrinsics: &CameraIntrinsics,
) -> Result<Constellation, CoreError> {
    if n == 0 {
        return Err(CoreError::invalid("constellation needs at least one camera"));
    }
    if nadir_index >= n {
        return Err(CoreError::invalid(format!(
            "nadir index {nadir_index} out of range for {n} cameras"
        )));
    }
    if !(altitude_m > 0.0 && spacing_m > 0.0) {
        return Err(CoreError::invalid("altitude and spacing must be positive"));
    }
    let r_orbit = EARTH_RADIUS_M + altitude_m;
    let mut cameras = Vec::with_capacity(n);
    let mut arcs = Vec::with_capacity(n);
    for k in 0..n {
        let s = (k as f64 - nadir_index as f64) * spacing_m;
        if (s / r_orbit).abs() >= std::f64::consts::FRAC_PI_2 {
            return Err(CoreError::Infeasible(format!(
                "satellite {k} would sit {s} m along track, beyond the orbit quadrant"
            )));
        }
        cameras.push(Camera::look_at(
            orbit_position(&target, altitude_m, s),
            target,
            intrinsics,
        )?);
        arcs.push(s);
    }
    Ok(Constellation {
        cameras,
        sun,
        orbit: Some(OrbitArc {
            altitude_m,
            target,
            arc_positions_m: arcs,
        }),
    })
}

impl Constellation {
    /// Scattering angle at the target along each camera's nominal aim ray.
    pub fn nominal_scattering_angles(&self) -> Result<Vec<f64>, CoreError> {
        let orbit = self
            .orbit
            .as_ref()
            .ok_or_else(|| CoreError::invalid("constellation has no orbit metadata"))?;
        Ok(self
            .cameras
            .iter()
            .map(|cam| {
                let ray = (orbit.target - cam.position).normalize();
                scattering_angle_deg(&self.sun, &ray)
            })
            .collect())
    }
}

/// One re-pointed pose emitted by the cloudbow planner.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudbowPose {
    pub camera: Camera,
    /// Index of the satellite whose track hosts this pose.
    pub satellite_index: usize,
    /// Along-track arc offset of the pose, metres.
    pub arc_position_m: f64,
    /// Scattering angle at the target, degrees.
    pub scattering_angle_deg: f64,
}

/// Planner output: which satellites were selected and the extra poses.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudbowPlan {
    pub selected: Vec<usize>,
    pub poses: Vec<CloudbowPose>,
}

/// Scattering angle at the target for a satellite at arc offset `s`.
fn arc_scattering_angle(
    sun: &Sun,
    target: &Vector3<f64>,
    altitude_m: f64,
    s: f64,
) -> f64 {
    let pos = orbit_position(target, altitude_m, s);
    let ray = (target - pos).normalize();
    scattering_angle_deg(sun, &ray)
}

/// Plans additional along-track poses sampling `range` (degrees of
/// scattering angle) at cell centres no further than `resolution_deg`
/// apart. The one or two satellites whose nominal scattering angles sit
/// closest to the range midpoint are re-pointed; a second satellite is used
/// when its midpoint distance is within 1° of the best. Samples alternate
/// between the selected satellites and each is realized by bisection along
/// that satellite's side of the orbit track.
pub fn plan_cloudbow_scan(
    constellation: &Constellation,
    range: (f64, f64),
    resolution_deg: f64,
) -> Result<CloudbowPlan, CoreError> {
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 120.0 && hi <= 180.0) {
        return Err(CoreError::invalid(format!(
            "scattering range [{lo}, {hi}] must lie inside [120°, 180°]"
        )));
    }
    if !(1.0..=1.5).contains(&resolution_deg) {
        return Err(CoreError::invalid(format!(
            "angular sampling resolution must lie in [1°, 1.5°], got {resolution_deg}"
        )));
    }
    let orbit = constellation
        .orbit
        .as_ref()
        .ok_or_else(|| CoreError::invalid("constellation has no orbit metadata"))?;

    let nominal = constellation.nominal_scattering_angles()?;
    let midpoint = (lo + hi) / 2.0;
    let mut order: Vec<usize> = (0..nominal.len()).collect();
    order.sort_by(|a, b| {
        let da = (nominal[*a] - midpoint).abs();
        let db = (nominal[*b] - midpoint).abs();
        da.partial_cmp(&db).unwrap().then(a.cmp(b))
    });
    let mut selected = vec![order[0]];
    if order.len() > 1 {
        let d0 = (nominal[order[0]] - midpoint).abs();
        let d1 = (nominal[order[1]] - midpoint).abs();
        if d1 - d0 <= 1.0 {
            selected.push(order[1]);
        }
    }
    selected.sort_unstable();

    let span = hi - lo;
    let n_samples = ((span / resolution_deg).ceil() as usize).max(1);
    let cell = span / n_samples as f64;

    // One intrinsics template per selected satellite.
    let intrinsics: Vec<CameraIntrinsics> = selected
        .iter()
        .map(|k| {
            let cam = &constellation.cameras[*k];
            CameraIntrinsics {
                focal_length: cam.focal_length,
                aperture: cam.aperture,
                pixel_pitch: cam.pixel_pitch,
                resolution: cam.resolution,
                roll_deg: cam.roll_deg,
            }
        })
        .collect();

    let mut poses = Vec::with_capacity(n_samples);
    for j in 0..n_samples {
        let theta_star = lo + (j as f64 + 0.5) * cell;
        let slot = j % selected.len();
        let sat = selected[slot];
        let side = if orbit.arc_positions_m[sat] < 0.0 { -1.0 } else { 1.0 };
        let s = solve_arc_for_angle(
            &constellation.sun,
            &orbit.target,
            orbit.altitude_m,
            side,
            orbit.arc_positions_m[sat],
            theta_star,
        )
        .ok_or_else(|| {
            CoreError::Infeasible(format!(
                "no along-track position of satellite {sat} reaches scattering angle {theta_star:.3}°"
            ))
        })?;
        let position = orbit_position(&orbit.target, orbit.altitude_m, s);
        let camera = Camera::look_at(position, orbit.target, &intrinsics[slot])?;
        let achieved = arc_scattering_angle(&constellation.sun, &orbit.target, orbit.altitude_m, s);
        poses.push(CloudbowPose {
            camera,
            satellite_index: sat,
            arc_position_m: s,
            scattering_angle_deg: achieved,
        });
    }
    Ok(CloudbowPlan { selected, poses })
}

/// Finds an arc offset on the given side of the track whose scattering
/// angle equals `theta_star`, preferring the bracket closest to the
/// satellite's nominal arc position. Returns None when the angle is never
/// reached on that side up to the horizon arc.
fn solve_arc_for_angle(
    sun: &Sun,
    target: &Vector3<f64>,
    altitude_m: f64,
    side: f64,
    nominal_arc: f64,
    theta_star: f64,
) -> Option<f64> {
    let r_orbit = EARTH_RADIUS_M + altitude_m;
    // Horizon: the view ray at the target becomes horizontal.
    let phi_max = (EARTH_RADIUS_M / r_orbit).acos();
    let s_max = phi_max * r_orbit;
    const SCAN: usize = 4000;

    let f = |s: f64| arc_scattering_angle(sun, target, altitude_m, s) - theta_star;
    let mut best: Option<(f64, f64)> = None;
    let mut prev_s = 0.0;
    let mut prev_f = f(0.0);
    for i in 1..=SCAN {
        let s = side * s_max * i as f64 / SCAN as f64;
        let fs = f(s);
        if prev_f == 0.0 {
            return Some(prev_s);
        }
        if prev_f * fs <= 0.0 {
            let mid = (prev_s + s) / 2.0;
            let dist = (mid - nominal_arc).abs();
            if best.map_or(true, |(_, d)| dist < d) {
                best = Some((prev_s, dist));
            }
        }
        prev_s = s;
        prev_f = fs;
    }
    let (mut a, _) = best?;
    let mut b = a + side * s_max / SCAN as f64;
    let mut fa = f(a);
    for _ in 0..200 {
        let m = (a + b) / 2.0;
        let fm = f(m);
        if fa * fm <= 0.0 {
            b = m;
        } else {
            a = m;
            fa = fm;
        }
        if (b - a).abs() < 1e-9 {
            break;
        }
    }
    Some((a + b) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics {
            focal_length: 0.08625,
            aperture: 0.043,
            pixel_pitch: 3.45e-6,
            resolution: 116,
            roll_deg: 0.0,
        }
    }

    fn fig1_constellation() -> Constellation {
        build_string_of_pearls(
            10,
            500e3,
            100e3,
            Vector3::zeros(),
            5,
            Sun::new(25.0, 90.0).unwrap(),
            &test_intrinsics(),
        )
        .unwrap()
    }

    #[test]
    fn string_of_pearls_reproduces_view_angle_span() {
        let c = fig1_constellation();
        let angles: Vec<f64> = c
            .cameras
            .iter()
            .map(|cam| view_zenith_deg(&cam.position, &Vector3::zeros()))
            .collect();
        assert_abs_diff_eq!(angles[0], -46.0, epsilon = 0.5);
        assert_abs_diff_eq!(angles[9], 39.3, epsilon = 0.5);
        assert_abs_diff_eq!(angles[5], 0.0, epsilon = 1e-9);
        for pair in angles.windows(2) {
            assert!(pair[1] > pair[0]);
        }
    }

    #[test]
    fn nadir_camera_points_straight_down() {
        let c = fig1_constellation();
        let axis = c.cameras[5].optical_axis;
        assert!((axis + Vector3::z()).norm() < 1e-9);
    }

    #[test]
    fn single_camera_constellation_is_nadir() {
        let c = build_string_of_pearls(
            1,
            500e3,
            100e3,
            Vector3::zeros(),
            0,
            Sun::new(25.0, 90.0).unwrap(),
            &test_intrinsics(),
        )
        .unwrap();
        assert_eq!(c.cameras.len(), 1);
        assert!((c.cameras[0].optical_axis + Vector3::z()).norm() < 1e-12);
        assert_abs_diff_eq!(c.cameras[0].position.z, 500e3, epsilon = 1e-6);
    }

    #[test]
    fn constellation_rejects_bad_parameters() {
        let sun = Sun::new(25.0, 90.0).unwrap();
        let i = test_intrinsics();
        assert!(build_string_of_pearls(0, 500e3, 100e3, Vector3::zeros(), 0, sun, &i).is_err());
        assert!(build_string_of_pearls(3, 500e3, 100e3, Vector3::zeros(), 3, sun, &i).is_err());
        assert!(build_string_of_pearls(3, -1.0, 100e3, Vector3::zeros(), 1, sun, &i).is_err());
        assert!(build_string_of_pearls(3, 500e3, 1.2e7, Vector3::zeros(), 1, sun, &i).is_err());
    }

    #[test]
    fn center_pixel_ray_equals_axis_exactly() {
        let c = fig1_constellation();
        for cam in &c.cameras {
            let ray = cam.pixel_ray(cam.resolution / 2, cam.resolution / 2);
            assert_eq!(ray, cam.optical_axis);
        }
    }

    #[test]
    fn edge_pixel_offset_matches_pinhole_formula() {
        let cam = &fig1_constellation().cameras[3];
        let ray = cam.pixel_ray(cam.resolution / 2, 0);
        let cosang = ray.dot(&cam.optical_axis).clamp(-1.0, 1.0);
        let expected = ((cam.resolution / 2) as f64 * cam.pixel_pitch / cam.focal_length).atan();
        assert_abs_diff_eq!(cosang.acos(), expected, epsilon = 1e-9);
    }

    #[test]
    fn pixel_rays_are_unit_and_grid_shaped() {
        let cam = &fig1_constellation().cameras[7];
        let rays = cam.pixel_rays();
        assert_eq!(rays.dim(), (116, 116));
        for ray in rays.iter() {
            assert_abs_diff_eq!(ray.norm(), 1.0, epsilon = 1e-12);
        }
        assert_eq!(rays[[3, 9]], cam.pixel_ray(3, 9));
    }

    #[test]
    fn camera_basis_is_right_handed_with_roll() {
        let cam = Camera::new(
            Vector3::new(0.0, 0.0, 1000.0),
            Vector3::new(0.2, -0.3, -0.9),
            &CameraIntrinsics {
                roll_deg: 33.0,
                ..test_intrinsics()
            },
        )
        .unwrap();
        let (e_u, e_v) = cam.basis();
        assert_abs_diff_eq!(e_u.norm(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e_v.norm(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e_u.dot(&e_v), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e_u.dot(&cam.optical_axis), 0.0, epsilon = 1e-12);
        assert!((e_u.cross(&e_v) - cam.optical_axis).norm() < 1e-12);
    }

    #[test]
    fn meridian_frame_east_example() {
        let frame = meridian_frame(&Vector3::y());
        assert!((frame.b - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-15);
        assert!((frame.l - Vector3::z()).norm() < 1e-15);
    }

    #[test]
    fn meridian_frame_singular_fallback() {
        for omega in [Vector3::z(), -Vector3::z()] {
            let frame = meridian_frame(&omega);
            assert_eq!(frame.b, Vector3::new(-1.0, 0.0, 0.0));
            assert!((frame.b.cross(&frame.l) - omega).norm() < 1e-15);
        }
    }

    #[test]
    fn scattering_angle_examples() {
        let sun = Sun::new(25.0, 90.0).unwrap();
        let nadir = Vector3::new(0.0, 0.0, -1.0);
        assert_abs_diff_eq!(scattering_angle_deg(&sun, &nadir), 155.0, epsilon = 1e-9);
        let toward = sun.toward_sun();
        assert_abs_diff_eq!(scattering_angle_deg(&sun, &toward), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(scattering_angle_deg(&sun, &(-toward)), 180.0, epsilon = 1e-9);
    }

    #[test]
    fn cloudbow_plan_matches_fig1_expectations() {
        let c = fig1_constellation();
        let plan = plan_cloudbow_scan(&c, (135.0, 150.0), 1.5).unwrap();
        assert_eq!(plan.selected, vec![2, 8]);
        assert_eq!(plan.poses.len(), 10);
        for pose in &plan.poses {
            let ray = (Vector3::zeros() - pose.camera.position).normalize();
            let re_measured = scattering_angle_deg(&c.sun, &ray);
            assert!(
                (135.0..=150.0).contains(&re_measured),
                "angle {re_measured} outside range"
            );
            assert_abs_diff_eq!(re_measured, pose.scattering_angle_deg, epsilon = 1e-6);
        }
        // Cell centres at 1.5° spacing.
        assert_abs_diff_eq!(plan.poses[0].scattering_angle_deg, 135.75, epsilon = 1e-6);
        assert_abs_diff_eq!(plan.poses[9].scattering_angle_deg, 149.25, epsilon = 1e-6);
        // Interleaving between the two satellites.
        assert_eq!(plan.poses[0].satellite_index, 2);
        assert_eq!(plan.poses[1].satellite_index, 8);
        assert!(plan.poses[0].arc_position_m < 0.0);
        assert!(plan.poses[1].arc_position_m > 0.0);
    }

    #[test]
    fn cloudbow_single_angle_range_gives_one_pose() {
        let c = fig1_constellation();
        let nominal = c.nominal_scattering_angles().unwrap();
        let theta = nominal[2];
        let plan = plan_cloudbow_scan(&c, (theta, theta), 1.5).unwrap();
        assert_eq!(plan.poses.len(), 1);
        assert_abs_diff_eq!(plan.poses[0].scattering_angle_deg, theta, epsilon = 1e-6);
    }

    #[test]
    fn cloudbow_rejects_unreachable_range() {
        let c = fig1_constellation();
        // Nominal maximum is 155° at nadir; angles above it are unreachable.
        assert!(matches!(
            plan_cloudbow_scan(&c, (156.0, 160.0), 1.5),
            Err(CoreError::Infeasible(_))
        ));
        assert!(plan_cloudbow_scan(&c, (100.0, 150.0), 1.5).is_err());
        assert!(plan_cloudbow_scan(&c, (135.0, 150.0), 0.5).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn meridian_frames_are_orthonormal(
            x in -1.0f64..1.0,
            y in -1.0f64..1.0,
            z in -0.999f64..0.999,
        ) {
            let v = Vector3::new(x, y, z);
            prop_assume!(v.norm() > 1e-3);
            let omega = v / v.norm();
            let f = meridian_frame(&omega);
            prop_assert!(f.b.norm() - 1.0 < 1e-12);
            prop_assert!(f.b.dot(&f.l).abs() < 1e-12);
            prop_assert!(f.b.dot(&omega).abs() < 1e-9);
            prop_assert!(f.l.dot(&omega).abs() < 1e-12);
            prop_assert!((f.b.cross(&f.l) - omega).norm() < 1e-9);
            prop_assert!(f.b.z.abs() < 1e-12);
        }

        #[test]
        fn meridian_frame_is_azimuth_equivariant(
            x in -1.0f64..1.0,
            y in -1.0f64..1.0,
            z in -0.9f64..0.9,
            az in 0.0f64..360.0,
        ) {
            let v = Vector3::new(x, y, z);
            prop_assume!(v.norm() > 1e-3);
            prop_assume!(v.cross(&Vector3::z()).norm() > 1e-3 * v.norm());
            let omega = v / v.norm();
            let r = nalgebra::Rotation3::from_axis_angle(
                &nalgebra::Unit::new_normalize(Vector3::z()),
                az.to_radians(),
            );
            let f0 = meridian_frame(&omega);
            let f1 = meridian_frame(&(r * omega));
            prop_assert!((r * f0.b - f1.b).norm() < 1e-9);
            prop_assert!((r * f0.l - f1.l).norm() < 1e-9);
        }
    }
}
