//! Single-sphere Mie theory and gamma-averaged bulk optical properties.
//!
//! [`BulkOpticsTable`] tabulates, per effective-radius node, the mass
//! extinction coefficient κ (m² per gram of liquid water), the single
//! scattering albedo ω₀ and the four independent phase-matrix elements of
//! spherical droplets (P11, P12, P33, P34), averaged over the gamma size
//! distribution by quadrature on a log-spaced radius grid.
//!
//! The phase matrix is normalized so (1/4π)∫P11 dΩ = 1. The normalization
//! constant comes from the analytically equivalent scattering cross-section
//! route (∫|S|²/k² dΩ = σ_sca term by term in the multipole sum); an angular
//! trapezoid integral over the stored grid provides an independent check and
//! the build fails if the two routes disagree beyond 1e-3.
//!
//! The scattering-angle grid is non-uniform: 0.01° steps through the forward
//! diffraction lobe ([0°, 10°], whose width is a few hundredths of a degree
//! at the largest tabulated droplets) and 0.25° steps beyond, which resolves
//! the cloudbow. Interpolation is linear in angle. Along the r_e axis the
//! lookup is cubic Hermite using the tabulated central-difference slopes, so
//! the interpolant's analytic derivative is exactly the derivative exposed
//! to the adjoint code.

pub mod mie;

pub use mie::{scattering, MieSolution};

use std::io::Read as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::constants::{BAND_CENTER_NM, RE_MAX_UM, RE_MIN_UM, WATER_REFRACTIVE_INDEX};
use crate::error::CoreError;
use crate::microphysics::DropletDistribution;

/// Layout version baked into cache files and cache keys.
const TABLE_FORMAT: &[u8; 8] = b"CTBULK01";

/// Largest tolerated r³-weighted gamma mass beyond the radius grid.
const MAX_TAIL_MASS: f64 = 1e-4;

/// Relative area-contribution cutoff below which a radius node is skipped.
const NODE_SKIP_FRACTION: f64 = 1e-12;

/// Agreement required between the analytic and trapezoid normalization
/// routes for P11.
const NORM_CHECK_TOL: f64 = 1e-3;

/// The stored scattering-angle grid in degrees: 0.01° steps over [0°, 10°],
/// 0.25° steps over (10°, 180°].
pub fn default_angle_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=1000).map(|k| k as f64 * 0.01).collect();
    grid.extend((41..=720).map(|k| k as f64 * 0.25));
    grid
}

/// Rayleigh phase-matrix elements `[P11, P12, P33, P44]` at scattering
/// angle Θ (degrees), normalized so (1/4π)∫P11 dΩ = 1 exactly.
pub fn rayleigh_phase(theta_deg: f64) -> [f64; 4] {
    let th = theta_deg.to_radians();
    let c = th.cos();
    let s2 = th.sin().powi(2);
    let p11 = 0.75 * (1.0 + c * c);
    let p12 = -0.75 * s2;
    let p33 = 1.5 * c;
    [p11, p12, p33, p33]
}

/// Build parameters of a [`BulkOpticsTable`].
#[derive(Debug, Clone, PartialEq)]
pub struct TableSpec {
    /// First r_e node, µm.
    pub re_min: f64,
    /// Last r_e node, µm.
    pub re_max: f64,
    /// Node spacing, µm.
    pub re_step: f64,
    /// Effective variance shared by every node.
    pub v_e: f64,
    /// Wavelength, µm.
    pub wavelength_um: f64,
    pub refractive_index: Complex64,
    /// Number of log-spaced radius quadrature nodes.
    pub radius_nodes: usize,
    /// Scattering-angle grid, degrees, strictly increasing from 0 to 180.
    pub angles_deg: Vec<f64>,
}

impl TableSpec {
    /// The red-band default: r_e from 2.5 to 40 µm in 0.25 µm steps at
    /// 645 nm with the tabulated water refractive index.
    pub fn red_band(v_e: f64) -> Self {
        TableSpec {
            re_min: RE_MIN_UM,
            re_max: RE_MAX_UM,
            re_step: 0.25,
            v_e,
            wavelength_um: BAND_CENTER_NM * 1e-3,
            refractive_index: WATER_REFRACTIVE_INDEX,
            radius_nodes: 256,
            angles_deg: default_angle_grid(),
        }
    }

    fn re_count(&self) -> Result<usize, CoreError> {
        let span = self.re_max - self.re_min;
        let count = (span / self.re_step).round() as i64 + 1;
        if count < 1 {
            return Err(CoreError::invalid("effective-radius axis is empty"));
        }
        let reconstructed = self.re_min + (count - 1) as f64 * self.re_step;
        if (reconstructed - self.re_max).abs() > 1e-9 * self.re_max.max(1.0) {
            return Err(CoreError::invalid(format!(
                "r_e axis [{}, {}] is not an integer number of {} steps",
                self.re_min, self.re_max, self.re_step
            )));
        }
        Ok(count as usize)
    }

    fn validate(&self) -> Result<usize, CoreError> {
        if !(self.re_min.is_finite() && self.re_min > 0.0 && self.re_max >= self.re_min) {
            return Err(CoreError::invalid(format!(
                "bad r_e axis bounds [{}, {}]",
                self.re_min, self.re_max
            )));
        }
        if !(self.re_step.is_finite() && self.re_step > 0.0) {
            return Err(CoreError::invalid(format!("bad r_e step {}", self.re_step)));
        }
        if !(self.v_e > 0.0 && self.v_e < 0.5) {
            return Err(CoreError::invalid(format!(
                "effective variance must lie in (0, 0.5), got {}",
                self.v_e
            )));
        }
        if !(self.wavelength_um.is_finite() && self.wavelength_um > 0.0) {
            return Err(CoreError::invalid(format!("bad wavelength {}", self.wavelength_um)));
        }
        if self.radius_nodes < 16 {
            return Err(CoreError::invalid("need at least 16 radius quadrature nodes"));
        }
        if self.angles_deg.len() < 2
            || self.angles_deg.windows(2).any(|w| !(w[1] > w[0]))
            || self.angles_deg[0].abs() > 1e-9
            || (self.angles_deg[self.angles_deg.len() - 1] - 180.0).abs() > 1e-9
        {
            return Err(CoreError::invalid(
                "angle grid must increase strictly from 0° to 180°",
            ));
        }
        self.re_count()
    }

    /// Content hash identifying this spec and the table layout version.
    pub fn cache_key(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(TABLE_FORMAT);
        for v in [
            self.re_min,
            self.re_max,
            self.re_step,
            self.v_e,
            self.wavelength_um,
            self.refractive_index.re,
            self.refractive_index.im,
            self.radius_nodes as f64,
        ] {
            hasher.update(v.to_le_bytes());
        }
        for a in &self.angles_deg {
            hasher.update(a.to_le_bytes());
        }
        let digest = hasher.finalize();
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Interpolated bulk optical properties at one (r_e, Θ) point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BulkSample {
    /// Mass extinction, m² per g of liquid water.
    pub kappa: f64,
    /// Single-scattering albedo.
    pub omega0: f64,
    pub p11: f64,
    pub p12: f64,
    pub p33: f64,
    pub p34: f64,
}

/// Precomputed linear interpolation position on the angle grid.
#[derive(Debug, Clone, Copy)]
pub struct AngleInterp {
    lo: usize,
    w: f64,
}

/// Cubic Hermite interpolation position on the r_e axis.
#[derive(Debug, Clone, Copy)]
struct ReCoeff {
    k: usize,
    /// Value weights for nodes k, k+1 and slopes k, k+1.
    a0: f64,
    a1: f64,
    b0: f64,
    b1: f64,
    /// Derivative weights.
    da0: f64,
    da1: f64,
    db0: f64,
    db1: f64,
}

/// One r_e node's worth of bulk properties, produced by the builder.
struct NodeData {
    kappa: f64,
    omega0: f64,
    p11: Vec<f64>,
    p12: Vec<f64>,
    p33: Vec<f64>,
    p34: Vec<f64>,
}

/// Gamma-averaged droplet optics tabulated over (r_e, Θ).
#[derive(Debug, Clone, PartialEq)]
pub struct BulkOpticsTable {
    spec: TableSpec,
    re_axis: Vec<f64>,
    kappa: Vec<f64>,
    omega0: Vec<f64>,
    d_kappa: Vec<f64>,
    d_omega0: Vec<f64>,
    p11: Array2<f64>,
    p12: Array2<f64>,
    p33: Array2<f64>,
    p34: Array2<f64>,
    dp11: Array2<f64>,
    dp12: Array2<f64>,
    dp33: Array2<f64>,
    dp34: Array2<f64>,
}

fn build_node(spec: &TableSpec, re: f64, mu: &[f64]) -> Result<NodeData, CoreError> {
    let dist = DropletDistribution::new(1.0, re, spec.v_e)?;
    let r_min = re / 200.0;
    let r_max = dist.support_radius();
    let tail = dist.mass_tail_beyond(r_max);
    if tail > MAX_TAIL_MASS {
        return Err(CoreError::Convergence(format!(
            "gamma mass beyond the radius grid is {tail:.2e} at r_e = {re} µm, v_e = {}",
            spec.v_e
        )));
    }

    let nr = spec.radius_nodes;
    let log_step = (r_max / r_min).ln() / (nr - 1) as f64;
    let radii: Vec<f64> = (0..nr).map(|k| r_min * (k as f64 * log_step).exp()).collect();
    let density: Vec<f64> = radii.iter().map(|r| dist.density(*r)).collect();
    let weights: Vec<f64> = (0..nr)
        .map(|k| {
            let dr = if k == 0 {
                (radii[1] - radii[0]) / 2.0
            } else if k == nr - 1 {
                (radii[nr - 1] - radii[nr - 2]) / 2.0
            } else {
                (radii[k + 1] - radii[k - 1]) / 2.0
            };
            dr * density[k]
        })
        .collect();

    let contrib: Vec<f64> = (0..nr).map(|k| weights[k] * radii[k] * radii[k]).collect();
    let max_contrib = contrib.iter().cloned().fold(0.0, f64::max);
    if max_contrib <= 0.0 {
        return Err(CoreError::Convergence(format!(
            "gamma density vanished on the radius grid at r_e = {re} µm"
        )));
    }

    let wavenumber = 2.0 * std::f64::consts::PI / spec.wavelength_um;
    let inv_k2 = 1.0 / (wavenumber * wavenumber);
    let n_ang = mu.len();
    let mut sigma_ext = 0.0;
    let mut sigma_sca = 0.0;
    let mut f11 = vec![0.0f64; n_ang];
    let mut f12 = vec![0.0f64; n_ang];
    let mut f33 = vec![0.0f64; n_ang];
    let mut f34 = vec![0.0f64; n_ang];

    for k in 0..nr {
        if contrib[k] < NODE_SKIP_FRACTION * max_contrib {
            continue;
        }
        let x = wavenumber * radii[k];
        let sol = mie::scattering(x, spec.refractive_index, mu)?;
        let area = std::f64::consts::PI * radii[k] * radii[k];
        sigma_ext += weights[k] * area * sol.q_ext;
        sigma_sca += weights[k] * area * sol.q_sca;
        let w = weights[k] * inv_k2;
        for t in 0..n_ang {
            let a1 = sol.s1[t].norm_sqr();
            let a2 = sol.s2[t].norm_sqr();
            let cross = sol.s2[t] * sol.s1[t].conj();
            f11[t] += w * (a1 + a2) / 2.0;
            f12[t] += w * (a2 - a1) / 2.0;
            f33[t] += w * cross.re;
            f34[t] += w * cross.im;
        }
    }

    if !(sigma_ext > 0.0 && sigma_sca > 0.0) {
        return Err(CoreError::Convergence(format!(
            "cross sections vanished at r_e = {re} µm"
        )));
    }

    // κ = 1e-12 · σ_ext[µm²/m³] / LWC[g/m³], both at unit number density.
    let kappa = 1e-12 * sigma_ext / dist.lwc();
    // Q_ext ≥ Q_sca holds per radius in exact arithmetic; keep the summed
    // ratio inside (0, 1] against last-bit rounding.
    let omega0 = (sigma_sca / sigma_ext).min(1.0);

    // Analytic normalization through σ_sca: ∫ F11 dΩ = σ_sca exactly.
    let norm = 4.0 * std::f64::consts::PI / sigma_sca;
    for t in 0..n_ang {
        f11[t] *= norm;
        f12[t] *= norm;
        f33[t] *= norm;
        f34[t] *= norm;
    }

    // Independent trapezoid route over the stored grid.
    let mut quad = 0.0;
    for t in 0..n_ang - 1 {
        let th0 = spec.angles_deg[t].to_radians();
        let th1 = spec.angles_deg[t + 1].to_radians();
        let g0 = f11[t] * th0.sin();
        let g1 = f11[t + 1] * th1.sin();
        quad += (th1 - th0) * (g0 + g1) / 2.0;
    }
    quad /= 2.0;
    if (quad - 1.0).abs() > NORM_CHECK_TOL {
        return Err(CoreError::Convergence(format!(
            "phase normalization routes disagree at r_e = {re} µm: trapezoid gives {quad:.6}"
        )));
    }

    Ok(NodeData {
        kappa,
        omega0,
        p11: f11,
        p12: f12,
        p33: f33,
        p34: f34,
    })
}

/// Central differences along the axis, one-sided at the ends.
fn axis_derivative(values: &[f64], step: f64) -> Vec<f64> {
    let n = values.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|k| {
            if k == 0 {
                (values[1] - values[0]) / step
            } else if k == n - 1 {
                (values[n - 1] - values[n - 2]) / step
            } else {
                (values[k + 1] - values[k - 1]) / (2.0 * step)
            }
        })
        .collect()
}

impl BulkOpticsTable {
    /// Builds the table; r_e nodes are processed in parallel.
    pub fn build(spec: &TableSpec) -> Result<Self, CoreError> {
        let n_re = spec.validate()?;
        let re_axis: Vec<f64> = (0..n_re).map(|k| spec.re_min + k as f64 * spec.re_step).collect();
        let mu: Vec<f64> = spec.angles_deg.iter().map(|a| a.to_radians().cos()).collect();

        let nodes: Vec<NodeData> = re_axis
            .par_iter()
            .map(|re| build_node(spec, *re, &mu))
            .collect::<Result<Vec<_>, _>>()?;

        let n_ang = spec.angles_deg.len();
        let kappa: Vec<f64> = nodes.iter().map(|n| n.kappa).collect();
        let omega0: Vec<f64> = nodes.iter().map(|n| n.omega0).collect();
        let mut p11 = Array2::zeros((n_re, n_ang));
        let mut p12 = Array2::zeros((n_re, n_ang));
        let mut p33 = Array2::zeros((n_re, n_ang));
        let mut p34 = Array2::zeros((n_re, n_ang));
        for (k, node) in nodes.iter().enumerate() {
            for t in 0..n_ang {
                p11[[k, t]] = node.p11[t];
                p12[[k, t]] = node.p12[t];
                p33[[k, t]] = node.p33[t];
                p34[[k, t]] = node.p34[t];
            }
        }

        let d_kappa = axis_derivative(&kappa, spec.re_step);
        let d_omega0 = axis_derivative(&omega0, spec.re_step);
        let mut dp11 = Array2::zeros((n_re, n_ang));
        let mut dp12 = Array2::zeros((n_re, n_ang));
        let mut dp33 = Array2::zeros((n_re, n_ang));
        let mut dp34 = Array2::zeros((n_re, n_ang));
        for t in 0..n_ang {
            for (dst, src) in [(&mut dp11, &p11), (&mut dp12, &p12), (&mut dp33, &p33), (&mut dp34, &p34)]
            {
                let col: Vec<f64> = (0..n_re).map(|k| src[[k, t]]).collect();
                let der = axis_derivative(&col, spec.re_step);
                for k in 0..n_re {
                    dst[[k, t]] = der[k];
                }
            }
        }

        Ok(BulkOpticsTable {
            spec: spec.clone(),
            re_axis,
            kappa,
            omega0,
            d_kappa,
            d_omega0,
            p11,
            p12,
            p33,
            p34,
            dp11,
            dp12,
            dp33,
            dp34,
        })
    }

    /// Loads the table from `cache_dir` when a valid cache file for `spec`
    /// exists, otherwise builds it and writes the cache.
    pub fn load_or_build(spec: &TableSpec, cache_dir: Option<&Path>) -> Result<Self, CoreError> {
        let Some(dir) = cache_dir else {
            return Self::build(spec);
        };
        let path = Self::cache_path(spec, dir);
        if path.is_file() {
            if let Ok(table) = Self::load(&path) {
                if table.spec == *spec {
                    return Ok(table);
                }
            }
        }
        let table = Self::build(spec)?;
        table.save(&path)?;
        Ok(table)
    }

    /// Cache file path for `spec` under `dir`.
    pub fn cache_path(spec: &TableSpec, dir: &Path) -> PathBuf {
        dir.join(format!("bulk-{}.bin", spec.cache_key()))
    }

    pub fn spec(&self) -> &TableSpec {
        &self.spec
    }

    pub fn re_axis(&self) -> &[f64] {
        &self.re_axis
    }

    pub fn angles_deg(&self) -> &[f64] {
        &self.spec.angles_deg
    }

    pub fn kappa_nodes(&self) -> &[f64] {
        &self.kappa
    }

    pub fn omega0_nodes(&self) -> &[f64] {
        &self.omega0
    }

    pub fn p11_nodes(&self) -> &Array2<f64> {
        &self.p11
    }

    pub fn p12_nodes(&self) -> &Array2<f64> {
        &self.p12
    }

    /// Linear interpolation position for scattering angle Θ in degrees,
    /// clamped to [0°, 180°].
    pub fn angle_interp(&self, theta_deg: f64) -> AngleInterp {
        let angles = &self.spec.angles_deg;
        let n = angles.len();
        let th = theta_deg.clamp(0.0, 180.0);
        let hi = angles.partition_point(|a| *a <= th).min(n - 1).max(1);
        let lo = hi - 1;
        let w = ((th - angles[lo]) / (angles[hi] - angles[lo])).clamp(0.0, 1.0);
        AngleInterp { lo, w }
    }

    fn re_coeff(&self, re: f64) -> ReCoeff {
        let n = self.re_axis.len();
        if n == 1 {
            return ReCoeff {
                k: 0,
                a0: 1.0,
                a1: 0.0,
                b0: 0.0,
                b1: 0.0,
                da0: 0.0,
                da1: 0.0,
                db0: 0.0,
                db1: 0.0,
            };
        }
        let h = self.spec.re_step;
        let clamped = re.clamp(self.re_axis[0], self.re_axis[n - 1]);
        let mut k = ((clamped - self.re_axis[0]) / h).floor() as usize;
        if k >= n - 1 {
            k = n - 2;
        }
        let t = ((clamped - self.re_axis[k]) / h).clamp(0.0, 1.0);
        let t2 = t * t;
        let t3 = t2 * t;
        ReCoeff {
            k,
            a0: 2.0 * t3 - 3.0 * t2 + 1.0,
            a1: -2.0 * t3 + 3.0 * t2,
            b0: (t3 - 2.0 * t2 + t) * h,
            b1: (t3 - t2) * h,
            da0: (6.0 * t2 - 6.0 * t) / h,
            da1: (6.0 * t - 6.0 * t2) / h,
            db0: 3.0 * t2 - 4.0 * t + 1.0,
            db1: 3.0 * t2 - 2.0 * t,
        }
    }

    fn herm(c: &ReCoeff, v: &[f64], s: &[f64]) -> f64 {
        if c.a1 == 0.0 && c.b0 == 0.0 && c.b1 == 0.0 && c.a0 == 1.0 {
            return v[c.k];
        }
        c.a0 * v[c.k] + c.a1 * v[c.k + 1] + c.b0 * s[c.k] + c.b1 * s[c.k + 1]
    }

    fn herm_d(c: &ReCoeff, v: &[f64], s: &[f64]) -> f64 {
        if c.da0 == 0.0 && c.da1 == 0.0 && c.db0 == 0.0 && c.db1 == 0.0 {
            return 0.0;
        }
        c.da0 * v[c.k] + c.da1 * v[c.k + 1] + c.db0 * s[c.k] + c.db1 * s[c.k + 1]
    }

    fn herm2(&self, c: &ReCoeff, v: &Array2<f64>, s: &Array2<f64>, t: usize) -> f64 {
        c.a0 * v[[c.k, t]] + c.b0 * s[[c.k, t]]
            + if self.re_axis.len() > 1 {
                c.a1 * v[[c.k + 1, t]] + c.b1 * s[[c.k + 1, t]]
            } else {
                0.0
            }
    }

    fn herm2_d(&self, c: &ReCoeff, v: &Array2<f64>, s: &Array2<f64>, t: usize) -> f64 {
        c.da0 * v[[c.k, t]] + c.db0 * s[[c.k, t]]
            + if self.re_axis.len() > 1 {
                c.da1 * v[[c.k + 1, t]] + c.db1 * s[[c.k + 1, t]]
            } else {
                0.0
            }
    }

    /// Mass extinction (m²/g) and single-scattering albedo at `re`.
    pub fn kappa_omega(&self, re: f64) -> (f64, f64) {
        let c = self.re_coeff(re);
        (
            Self::herm(&c, &self.kappa, &self.d_kappa),
            Self::herm(&c, &self.omega0, &self.d_omega0),
        )
    }

    /// `kappa_omega` plus the r_e derivatives of both values.
    pub fn kappa_omega_grad(&self, re: f64) -> ((f64, f64), (f64, f64)) {
        let c = self.re_coeff(re);
        (
            (
                Self::herm(&c, &self.kappa, &self.d_kappa),
                Self::herm(&c, &self.omega0, &self.d_omega0),
            ),
            (
                Self::herm_d(&c, &self.kappa, &self.d_kappa),
                Self::herm_d(&c, &self.omega0, &self.d_omega0),
            ),
        )
    }

    /// P11 and P12 at (`re`, Θ); Θ was prepared by [`Self::angle_interp`].
    pub fn phase_iq(&self, re: f64, ai: &AngleInterp) -> (f64, f64) {
        let c = self.re_coeff(re);
        let p11 = (1.0 - ai.w) * self.herm2(&c, &self.p11, &self.dp11, ai.lo)
            + ai.w * self.herm2(&c, &self.p11, &self.dp11, ai.lo + 1);
        let p12 = (1.0 - ai.w) * self.herm2(&c, &self.p12, &self.dp12, ai.lo)
            + ai.w * self.herm2(&c, &self.p12, &self.dp12, ai.lo + 1);
        (p11, p12)
    }

    /// `phase_iq` plus the r_e derivatives of both elements.
    pub fn phase_iq_grad(&self, re: f64, ai: &AngleInterp) -> ((f64, f64), (f64, f64)) {
        let c = self.re_coeff(re);
        let p11 = (1.0 - ai.w) * self.herm2(&c, &self.p11, &self.dp11, ai.lo)
            + ai.w * self.herm2(&c, &self.p11, &self.dp11, ai.lo + 1);
        let p12 = (1.0 - ai.w) * self.herm2(&c, &self.p12, &self.dp12, ai.lo)
            + ai.w * self.herm2(&c, &self.p12, &self.dp12, ai.lo + 1);
        let dp11 = (1.0 - ai.w) * self.herm2_d(&c, &self.p11, &self.dp11, ai.lo)
            + ai.w * self.herm2_d(&c, &self.p11, &self.dp11, ai.lo + 1);
        let dp12 = (1.0 - ai.w) * self.herm2_d(&c, &self.p12, &self.dp12, ai.lo)
            + ai.w * self.herm2_d(&c, &self.p12, &self.dp12, ai.lo + 1);
        ((p11, p12), (dp11, dp12))
    }

    /// All four phase elements plus κ and ω₀ at (`re`, Θ).
    pub fn sample(&self, re: f64, theta_deg: f64) -> BulkSample {
        let ai = self.angle_interp(theta_deg);
        let c = self.re_coeff(re);
        let lerp2 = |v: &Array2<f64>, s: &Array2<f64>| {
            (1.0 - ai.w) * self.herm2(&c, v, s, ai.lo) + ai.w * self.herm2(&c, v, s, ai.lo + 1)
        };
        BulkSample {
            kappa: Self::herm(&c, &self.kappa, &self.d_kappa),
            omega0: Self::herm(&c, &self.omega0, &self.d_omega0),
            p11: lerp2(&self.p11, &self.dp11),
            p12: lerp2(&self.p12, &self.dp12),
            p33: lerp2(&self.p33, &self.dp33),
            p34: lerp2(&self.p34, &self.dp34),
        }
    }

    /// Serializes the table (with a trailing content hash) to `path`,
    /// creating parent directories; the write is atomic via a temp file.
    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(TABLE_FORMAT);
        let n_re = self.re_axis.len() as u64;
        let n_ang = self.spec.angles_deg.len() as u64;
        for v in [
            self.spec.re_min,
            self.spec.re_max,
            self.spec.re_step,
            self.spec.v_e,
            self.spec.wavelength_um,
            self.spec.refractive_index.re,
            self.spec.refractive_index.im,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.spec.radius_nodes as u64).to_le_bytes());
        buf.extend_from_slice(&n_re.to_le_bytes());
        buf.extend_from_slice(&n_ang.to_le_bytes());
        let push_slice = |values: &[f64], buf: &mut Vec<u8>| {
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        };
        push_slice(&self.spec.angles_deg, &mut buf);
        push_slice(&self.kappa, &mut buf);
        push_slice(&self.omega0, &mut buf);
        push_slice(&self.d_kappa, &mut buf);
        push_slice(&self.d_omega0, &mut buf);
        for m in [
            &self.p11, &self.p12, &self.p33, &self.p34, &self.dp11, &self.dp12, &self.dp33,
            &self.dp34,
        ] {
            for v in m.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);

        let io_err = |e: std::io::Error| CoreError::Cache(format!("{}: {e}", path.display()));
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        std::fs::write(&tmp, &buf).map_err(io_err)?;
        std::fs::rename(&tmp, path).map_err(io_err)?;
        Ok(())
    }

    /// Reads a table written by [`Self::save`], verifying the content hash.
    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let err = |msg: String| CoreError::Cache(format!("{}: {msg}", path.display()));
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| err(e.to_string()))?;
        if bytes.len() < TABLE_FORMAT.len() + 32 {
            return Err(err("file too short".into()));
        }
        let (payload, stored_hash) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(payload).as_slice() != stored_hash {
            return Err(err("content hash mismatch".into()));
        }
        if &payload[..TABLE_FORMAT.len()] != TABLE_FORMAT {
            return Err(err("unknown format tag".into()));
        }

        let mut reader = ByteReader {
            payload,
            cursor: TABLE_FORMAT.len(),
        };
        let short = || err("truncated payload".into());
        let re_min = reader.f64().ok_or_else(short)?;
        let re_max = reader.f64().ok_or_else(short)?;
        let re_step = reader.f64().ok_or_else(short)?;
        let v_e = reader.f64().ok_or_else(short)?;
        let wavelength_um = reader.f64().ok_or_else(short)?;
        let m_re = reader.f64().ok_or_else(short)?;
        let m_im = reader.f64().ok_or_else(short)?;
        let radius_nodes = reader.u64().ok_or_else(short)? as usize;
        let n_re = reader.u64().ok_or_else(short)? as usize;
        let n_ang = reader.u64().ok_or_else(short)? as usize;
        if n_re == 0 || n_ang < 2 || n_re.saturating_mul(n_ang) > (1 << 32) {
            return Err(err(format!("implausible dimensions {n_re}×{n_ang}")));
        }

        let angles_deg = reader.f64_vec(n_ang).ok_or_else(short)?;
        let kappa = reader.f64_vec(n_re).ok_or_else(short)?;
        let omega0 = reader.f64_vec(n_re).ok_or_else(short)?;
        let d_kappa = reader.f64_vec(n_re).ok_or_else(short)?;
        let d_omega0 = reader.f64_vec(n_re).ok_or_else(short)?;
        let mut matrices = Vec::with_capacity(8);
        for _ in 0..8 {
            let flat = reader.f64_vec(n_re * n_ang).ok_or_else(short)?;
            let m = Array2::from_shape_vec((n_re, n_ang), flat)
                .map_err(|e| err(format!("bad matrix shape: {e}")))?;
            matrices.push(m);
        }
        if reader.cursor != payload.len() {
            return Err(err("trailing bytes after payload".into()));
        }
        let mut matrices = matrices.into_iter();
        let spec = TableSpec {
            re_min,
            re_max,
            re_step,
            v_e,
            wavelength_um,
            refractive_index: Complex64::new(m_re, m_im),
            radius_nodes,
            angles_deg,
        };
        let n_check = spec
            .validate()
            .map_err(|e| err(format!("stored spec invalid: {e}")))?;
        if n_check != n_re {
            return Err(err("stored r_e axis disagrees with its bounds".into()));
        }
        let re_axis: Vec<f64> = (0..n_re).map(|k| re_min + k as f64 * re_step).collect();
        Ok(BulkOpticsTable {
            spec,
            re_axis,
            kappa,
            omega0,
            d_kappa,
            d_omega0,
            p11: matrices.next().unwrap(),
            p12: matrices.next().unwrap(),
            p33: matrices.next().unwrap(),
            p34: matrices.next().unwrap(),
            dp11: matrices.next().unwrap(),
            dp12: matrices.next().unwrap(),
            dp33: matrices.next().unwrap(),
            dp34: matrices.next().unwrap(),
        })
    }
}

struct ByteReader<'a> {
    payload: &'a [u8],
    cursor: usize,
}

impl ByteReader<'_> {
    fn f64(&mut self) -> Option<f64> {
        let end = self.cursor + 8;
        let bytes = self.payload.get(self.cursor..end)?;
        self.cursor = end;
        Some(f64::from_le_bytes(bytes.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        let end = self.cursor + 8;
        let bytes = self.payload.get(self.cursor..end)?;
        self.cursor = end;
        Some(u64::from_le_bytes(bytes.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Option<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_angles() -> Vec<f64> {
        let mut grid: Vec<f64> = (0..=200).map(|k| k as f64 * 0.05).collect();
        grid.extend((21..=360).map(|k| k as f64 * 0.5));
        grid
    }

    fn tiny_spec() -> TableSpec {
        TableSpec {
            re_min: 8.0,
            re_max: 12.0,
            re_step: 1.0,
            v_e: 0.1,
            wavelength_um: 0.645,
            refractive_index: WATER_REFRACTIVE_INDEX,
            radius_nodes: 64,
            angles_deg: tiny_angles(),
        }
    }

    fn tiny_table() -> &'static BulkOpticsTable {
        use std::sync::OnceLock;
        static TABLE: OnceLock<BulkOpticsTable> = OnceLock::new();
        TABLE.get_or_init(|| BulkOpticsTable::build(&tiny_spec()).unwrap())
    }

    #[test]
    fn build_satisfies_physical_invariants() {
        let table = tiny_table();
        for (k, re) in table.re_axis().iter().enumerate() {
            let w = table.omega0_nodes()[k];
            assert!(w > 0.99 && w <= 1.0, "omega0 = {w} at r_e = {re}");
            for t in 0..table.angles_deg().len() {
                let p11 = table.p11_nodes()[[k, t]];
                let p12 = table.p12_nodes()[[k, t]];
                assert!(p11 > 0.0);
                assert!(p12.abs() <= p11 * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn mass_extinction_is_near_point_15_at_10_microns() {
        let (kappa, _) = tiny_table().kappa_omega(10.0);
        assert!((0.13..=0.18).contains(&kappa), "kappa(10) = {kappa}");
    }

    #[test]
    fn mass_extinction_decreases_with_re() {
        let k = tiny_table().kappa_nodes();
        for pair in k.windows(2) {
            assert!(pair[1] < pair[0], "kappa not decreasing: {pair:?}");
        }
    }

    #[test]
    fn stored_normalization_survives_independent_trapezoid() {
        let table = tiny_table();
        let angles = table.angles_deg();
        for k in 0..table.re_axis().len() {
            let mut quad = 0.0;
            for t in 0..angles.len() - 1 {
                let th0 = angles[t].to_radians();
                let th1 = angles[t + 1].to_radians();
                let g0 = table.p11_nodes()[[k, t]] * th0.sin();
                let g1 = table.p11_nodes()[[k, t + 1]] * th1.sin();
                quad += (th1 - th0) * (g0 + g1) / 2.0;
            }
            assert!((quad / 2.0 - 1.0).abs() < 1e-3, "node {k}: {}", quad / 2.0);
        }
    }

    #[test]
    fn lookup_at_nodes_is_exact() {
        let table = tiny_table();
        let re = table.re_axis()[2];
        let theta = table.angles_deg()[37];
        let s = table.sample(re, theta);
        assert_eq!(s.kappa, table.kappa_nodes()[2]);
        assert_eq!(s.omega0, table.omega0_nodes()[2]);
        assert_eq!(s.p11, table.p11_nodes()[[2, 37]]);
        assert_eq!(s.p12, table.p12_nodes()[[2, 37]]);
    }

    #[test]
    fn angle_interpolation_is_linear_between_nodes() {
        let table = tiny_table();
        let angles = table.angles_deg();
        let mid = (angles[40] + angles[41]) / 2.0;
        let s = table.sample(table.re_axis()[1], mid);
        let expected = (table.p11_nodes()[[1, 40]] + table.p11_nodes()[[1, 41]]) / 2.0;
        assert_relative_eq!(s.p11, expected, max_relative = 1e-12);
    }

    #[test]
    fn hermite_derivative_matches_interpolant_slope() {
        let table = tiny_table();
        let h = 1e-4;
        for re in [8.6, 9.5, 10.2, 11.9] {
            let ((_, _), (dk, dw)) = table.kappa_omega_grad(re);
            let (kp, wp) = table.kappa_omega(re + h);
            let (km, wm) = table.kappa_omega(re - h);
            assert_relative_eq!(dk, (kp - km) / (2.0 * h), max_relative = 1e-5);
            if dw.abs() > 1e-12 {
                assert_relative_eq!(dw, (wp - wm) / (2.0 * h), max_relative = 1e-4);
            }
            let ai = table.angle_interp(142.3);
            let ((_, _), (d11, d12)) = table.phase_iq_grad(re, &ai);
            let (p11p, p12p) = table.phase_iq(re + h, &ai);
            let (p11m, p12m) = table.phase_iq(re - h, &ai);
            assert_relative_eq!(d11, (p11p - p11m) / (2.0 * h), max_relative = 1e-5);
            assert_relative_eq!(d12, (p12p - p12m) / (2.0 * h), max_relative = 1e-5);
        }
    }

    #[test]
    fn derivative_at_interior_node_is_central_difference() {
        let table = tiny_table();
        let k = table.kappa_nodes();
        let ((_, _), (dk, _)) = table.kappa_omega_grad(table.re_axis()[2]);
        let expected = (k[3] - k[1]) / (2.0 * table.spec().re_step);
        assert_relative_eq!(dk, expected, max_relative = 1e-12);
    }

    #[test]
    fn rayleigh_phase_matches_closed_forms() {
        let p90 = rayleigh_phase(90.0);
        assert_relative_eq!(-p90[1] / p90[0], 1.0, max_relative = 1e-14);
        let p0 = rayleigh_phase(0.0);
        assert_eq!(p0[1], 0.0);
        assert_relative_eq!(p0[0], 1.5, max_relative = 1e-14);
        assert_relative_eq!(p0[2], 1.5, max_relative = 1e-14);

        // Simpson integration of the analytic form.
        let n = 20_000;
        let h = 180.0 / n as f64;
        let mut quad = 0.0;
        for t in 0..n {
            let a = (t as f64 * h).to_radians();
            let b = ((t + 1) as f64 * h).to_radians();
            let m = (a + b) / 2.0;
            let f = |th: f64| rayleigh_phase(th.to_degrees())[0] * th.sin();
            quad += (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b));
        }
        assert_relative_eq!(quad / 2.0, 1.0, max_relative = 1e-10);
    }

    #[test]
    fn angle_interp_handles_bounds() {
        let table = tiny_table();
        let s_lo = table.sample(9.0, 0.0);
        assert_eq!(s_lo.p11, table.p11_nodes()[[1, 0]]);
        let last = table.angles_deg().len() - 1;
        let s_hi = table.sample(9.0, 180.0);
        assert_eq!(s_hi.p11, table.p11_nodes()[[1, last]]);
    }

    #[test]
    fn cache_round_trip_preserves_bits() {
        let table = tiny_table();
        let dir = std::env::temp_dir().join(format!("cloudtomo-test-{}", std::process::id()));
        let path = dir.join("roundtrip.bin");
        table.save(&path).unwrap();
        let loaded = BulkOpticsTable::load(&path).unwrap();
        assert_eq!(*table, loaded);

        // Corrupt one payload byte: load must fail on the content hash.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[100] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(BulkOpticsTable::load(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn load_or_build_uses_the_cache() {
        let spec = TableSpec {
            re_min: 9.0,
            re_max: 10.0,
            re_step: 1.0,
            radius_nodes: 32,
            ..tiny_spec()
        };
        let dir = std::env::temp_dir().join(format!("cloudtomo-cache-{}", std::process::id()));
        let first = BulkOpticsTable::load_or_build(&spec, Some(&dir)).unwrap();
        let path = BulkOpticsTable::cache_path(&spec, &dir);
        assert!(path.is_file());
        let second = BulkOpticsTable::load_or_build(&spec, Some(&dir)).unwrap();
        assert_eq!(first, second);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn build_rejects_bad_specs() {
        let mut s = tiny_spec();
        s.re_step = -1.0;
        assert!(BulkOpticsTable::build(&s).is_err());
        let mut s = tiny_spec();
        s.re_max = 12.3;
        assert!(BulkOpticsTable::build(&s).is_err());
        let mut s = tiny_spec();
        s.angles_deg = vec![0.0, 90.0];
        assert!(BulkOpticsTable::build(&s).is_err());
        let mut s = tiny_spec();
        s.angles_deg = vec![10.0, 180.0];
        assert!(BulkOpticsTable::build(&s).is_err());
        let mut s = tiny_spec();
        s.v_e = 0.01;
        assert!(matches!(
            BulkOpticsTable::build(&s),
            Err(CoreError::Convergence(_))
        ));
    }

    #[test]
    fn default_angle_grid_shape() {
        let g = default_angle_grid();
        assert_eq!(g.len(), 1681);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[g.len() - 1], 180.0);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }
}
