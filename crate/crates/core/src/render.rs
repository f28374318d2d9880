//! Single-scattering vector forward model with analytic parameter gradients.
//!
//! Each pixel ray is traced through the voxel grid with exact
//! plane-crossing traversal; per voxel chord the attenuated source
//!
//! ```text
//! dS = β_sca · Z(Θ)/4π · exp(−τ_cam − τ_sun) ds
//! ```
//!
//! is integrated with 4-point Gauss–Legendre quadrature, where the sunbeam
//! optical depth at every node is marched exactly through the grid and the
//! camera-leg depth inside the chord is analytic. Sunlight is collimated
//! and unpolarized, so the scattered Stokes vector in the scattering plane
//! is (P11, P12, 0); it is rotated once per ray into the meridian frame of
//! the direction toward the camera. Radiances are per unit beam-normal
//! solar irradiance; the irradiance scale is applied as one final multiply
//! per component, making the output exactly linear in it.
//!
//! An optional exponential molecular (Rayleigh) layer and an optional
//! Lambertian floor can be enabled; both default to off. The molecular
//! layer is supported by `render` only, not by the gradient path.
//!
//! Gradients are vector–Jacobian products: given per-pixel adjoint weights
//! w (typically the residuals of a squared-error cost), the returned grids
//! hold ∂⟨w, S⟩/∂LWC and ∂⟨w, S⟩/∂r_e for every masked voxel, assembled
//! from the analytic emission and attenuation derivatives of the quadrature
//! above. Unmasked voxels receive exactly zero.

use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rayon::prelude::*;

use crate::error::CoreError;
use crate::geometry::{meridian_frame, Camera, Sun};
use crate::microphysics::VoxelCloud;
use crate::optics::{rayleigh_phase, AngleInterp, BulkOpticsTable};
use crate::stokes::{frame_rotation, StokesImage, StokesVec};

const FOUR_PI: f64 = 4.0 * std::f64::consts::PI;

const GL4_X: [f64; 4] = [
    -0.8611363115940526,
    -0.33998104358485626,
    0.33998104358485626,
    0.8611363115940526,
];
const GL4_W: [f64; 4] = [
    0.34785484513745385,
    0.6521451548625461,
    0.6521451548625461,
    0.34785484513745385,
];
const GL8_X: [f64; 8] = [
    -0.9602898564975363,
    -0.7966664774136267,
    -0.525532409916329,
    -0.18343464249564978,
    0.18343464249564978,
    0.525532409916329,
    0.7966664774136267,
    0.9602898564975363,
];
const GL8_W: [f64; 8] = [
    0.10122853629037626,
    0.22238103445337448,
    0.31370664587788727,
    0.36268378337836198,
    0.36268378337836198,
    0.31370664587788727,
    0.22238103445337448,
    0.10122853629037626,
];

/// Rows per parallel work block; fixed so the reduction order (and thus
/// the floating-point result) is independent of thread scheduling.
const ROW_BLOCK: usize = 16;

/// Exponential molecular scattering layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayleighLayer {
    /// Vertical optical depth of the whole column at the band wavelength.
    pub optical_depth: f64,
    /// Density scale height, metres.
    pub scale_height_m: f64,
}

/// Tunables of the single-scattering solver.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    /// Beam-normal solar irradiance; the output is exactly linear in it.
    pub solar_irradiance: f64,
    /// Sub-rays per pixel axis (n×n supersampling).
    pub supersampling: usize,
    /// Optional molecular layer; `render` only.
    pub rayleigh: Option<RayleighLayer>,
    /// Lambertian ground albedo at z = 0; 0 disables the floor.
    pub floor_albedo: f64,
    /// Camera-leg optical depth beyond which a ray stops accumulating.
    pub tau_cutoff: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            solar_irradiance: 1.0,
            supersampling: 1,
            rayleigh: None,
            floor_albedo: 0.0,
            tau_cutoff: 30.0,
        }
    }
}

/// Per-pixel adjoint weights for [`ForwardModel::render_with_gradient`];
/// unlike [`StokesImage`] the planes may hold any finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointWeights {
    pub i: Array2<f64>,
    pub q: Array2<f64>,
    pub u: Array2<f64>,
}

impl AdjointWeights {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        AdjointWeights {
            i: Array2::zeros((rows, cols)),
            q: Array2::zeros((rows, cols)),
            u: Array2::zeros((rows, cols)),
        }
    }

    /// Residual weights `simulated − measured`, the adjoint seed of the
    /// squared-error cost ½‖S − y‖².
    pub fn from_residual(simulated: &StokesImage, measured: &StokesImage) -> Result<Self, CoreError> {
        if simulated.dim() != measured.dim() {
            return Err(CoreError::shape(format!(
                "residual images disagree: {:?} vs {:?}",
                simulated.dim(),
                measured.dim()
            )));
        }
        Ok(AdjointWeights {
            i: &simulated.i - &measured.i,
            q: &simulated.q - &measured.q,
            u: &simulated.u - &measured.u,
        })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.i.dim()
    }
}

/// A polarized radiative-transfer forward model; implementations must be
/// deterministic for fixed inputs.
pub trait ForwardModel: Sync {
    fn render(
        &self,
        cloud: &VoxelCloud,
        optics: &BulkOpticsTable,
        camera: &Camera,
        sun: &Sun,
    ) -> Result<StokesImage, CoreError>;

    /// Renders and differentiates: returns the image plus the gradient
    /// grids ∂⟨weights, S⟩/∂LWC and ∂⟨weights, S⟩/∂r_e.
    fn render_with_gradient(
        &self,
        cloud: &VoxelCloud,
        optics: &BulkOpticsTable,
        camera: &Camera,
        sun: &Sun,
        weights: &AdjointWeights,
    ) -> Result<(StokesImage, Array3<f64>, Array3<f64>), CoreError>;
}

/// The built-in single-scattering solver.
#[derive(Debug, Clone, Default)]
pub struct SingleScatter {
    pub settings: RenderSettings,
}

impl SingleScatter {
    pub fn new(settings: RenderSettings) -> Self {
        SingleScatter { settings }
    }
}

/// Axis-aligned voxel box of a cloud.
#[derive(Debug, Clone, Copy)]
struct GridBox {
    lo: Vector3<f64>,
    hi: Vector3<f64>,
    cell: [f64; 3],
    n: [usize; 3],
}

impl GridBox {
    fn of(cloud: &VoxelCloud) -> Self {
        let o = cloud.origin();
        let u = cloud.upper_corner();
        let (nx, ny, nz) = cloud.dim();
        GridBox {
            lo: Vector3::new(o[0], o[1], o[2]),
            hi: Vector3::new(u[0], u[1], u[2]),
            cell: cloud.voxel_size(),
            n: [nx, ny, nz],
        }
    }

    /// Entry and exit ray parameters of the box intersected with
    /// [t_lo, t_hi], or None when the ray misses.
    fn clip(&self, o: &Vector3<f64>, d: &Vector3<f64>, t_lo: f64, t_hi: f64) -> Option<(f64, f64)> {
        let mut t0 = t_lo;
        let mut t1 = t_hi;
        for a in 0..3 {
            if d[a].abs() < 1e-300 {
                if o[a] < self.lo[a] || o[a] > self.hi[a] {
                    return None;
                }
            } else {
                let inv = 1.0 / d[a];
                let (mut ta, mut tb) = ((self.lo[a] - o[a]) * inv, (self.hi[a] - o[a]) * inv);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 >= t1 {
                    return None;
                }
            }
        }
        Some((t0, t1))
    }
}

/// Walks the ray through every crossed cell of `gb` over [t_lo, t_hi],
/// invoking `visit(linear index, chord start, chord end)`; chord bounds
/// partition the in-box parameter interval exactly.
fn for_each_cell<F: FnMut(usize, f64, f64)>(
    gb: &GridBox,
    o: &Vector3<f64>,
    d: &Vector3<f64>,
    t_lo: f64,
    t_hi: f64,
    mut visit: F,
) {
    let Some((t0, t1)) = gb.clip(o, d, t_lo, t_hi) else {
        return;
    };
    let p = o + d * t0;
    let mut idx = [0usize; 3];
    let mut step = [0isize; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let rel = (p[a] - gb.lo[a]) / gb.cell[a];
        idx[a] = (rel.floor() as isize).clamp(0, gb.n[a] as isize - 1) as usize;
        if d[a] > 1e-300 {
            step[a] = 1;
            t_next[a] = (gb.lo[a] + (idx[a] + 1) as f64 * gb.cell[a] - o[a]) / d[a];
            t_delta[a] = gb.cell[a] / d[a];
        } else if d[a] < -1e-300 {
            step[a] = -1;
            t_next[a] = (gb.lo[a] + idx[a] as f64 * gb.cell[a] - o[a]) / d[a];
            t_delta[a] = -gb.cell[a] / d[a];
        }
    }
    let ny = gb.n[1];
    let nz = gb.n[2];
    let max_steps = gb.n[0] + gb.n[1] + gb.n[2] + 3;
    let mut t_curr = t0;
    for _ in 0..max_steps {
        let mut axis = 0;
        for a in 1..3 {
            if t_next[a] < t_next[axis] {
                axis = a;
            }
        }
        let t_exit = t_next[axis].min(t1);
        if t_exit > t_curr {
            let lin = (idx[0] * ny + idx[1]) * nz + idx[2];
            visit(lin, t_curr, t_exit);
        }
        if t_next[axis] >= t1 {
            return;
        }
        t_curr = t_next[axis];
        let moved = idx[axis] as isize + step[axis];
        if moved < 0 || moved >= gb.n[axis] as isize {
            return;
        }
        idx[axis] = moved as usize;
        t_next[axis] += t_delta[axis];
    }
}

/// Per-voxel optical coefficients flattened in grid storage order.
struct Medium {
    masked: Vec<bool>,
    lwc: Vec<f64>,
    beta_ext: Vec<f64>,
    beta_sca: Vec<f64>,
    re: Vec<f64>,
    kappa: Vec<f64>,
    omega: Vec<f64>,
    d_kappa: Vec<f64>,
    d_omega: Vec<f64>,
}

impl Medium {
    fn of(cloud: &VoxelCloud, table: &BulkOpticsTable, with_grad: bool) -> Self {
        let (nx, ny, nz) = cloud.dim();
        let n = nx * ny * nz;
        let mut m = Medium {
            masked: vec![false; n],
            lwc: vec![0.0; n],
            beta_ext: vec![0.0; n],
            beta_sca: vec![0.0; n],
            re: vec![0.0; n],
            kappa: vec![0.0; n],
            omega: vec![0.0; n],
            d_kappa: vec![0.0; n],
            d_omega: vec![0.0; n],
        };
        let lwc = cloud.lwc().as_slice().expect("contiguous grid");
        let re = cloud.r_e().as_slice().expect("contiguous grid");
        let mask = cloud.mask().as_slice().expect("contiguous grid");
        for lin in 0..n {
            if !mask[lin] {
                continue;
            }
            m.masked[lin] = true;
            m.lwc[lin] = lwc[lin];
            m.re[lin] = re[lin];
            if with_grad {
                let ((k, w), (dk, dw)) = table.kappa_omega_grad(re[lin]);
                m.kappa[lin] = k;
                m.omega[lin] = w;
                m.d_kappa[lin] = dk;
                m.d_omega[lin] = dw;
                m.beta_ext[lin] = k * lwc[lin];
                m.beta_sca[lin] = k * w * lwc[lin];
            } else {
                let (k, w) = table.kappa_omega(re[lin]);
                m.kappa[lin] = k;
                m.omega[lin] = w;
                m.beta_ext[lin] = k * lwc[lin];
                m.beta_sca[lin] = k * w * lwc[lin];
            }
        }
        m
    }
}

/// Optical depth of the segment between two points, summed exactly over
/// the piecewise-constant voxel extinction; 0 when the segment misses the
/// grid.
pub fn optical_depth(
    cloud: &VoxelCloud,
    optics: &BulkOpticsTable,
    start: &Vector3<f64>,
    end: &Vector3<f64>,
) -> f64 {
    let gb = GridBox::of(cloud);
    let d = end - start;
    let len = d.norm();
    if len == 0.0 {
        return 0.0;
    }
    let dir = d / len;
    let lwc = cloud.lwc().as_slice().expect("contiguous grid");
    let re = cloud.r_e().as_slice().expect("contiguous grid");
    let mask = cloud.mask().as_slice().expect("contiguous grid");
    let mut tau = 0.0;
    for_each_cell(&gb, start, &dir, 0.0, len, |lin, ta, tb| {
        if mask[lin] && lwc[lin] > 0.0 {
            let (kappa, _) = optics.kappa_omega(re[lin]);
            tau += kappa * lwc[lin] * (tb - ta);
        }
    });
    tau
}

/// Reusable per-thread buffers of the ray integrator.
#[derive(Default)]
struct Scratch {
    chords: Vec<(usize, f64, f64)>,
    sun_path: Vec<(usize, f64)>,
    chord_val: Vec<f64>,
}

struct GradGrids {
    lwc: Array3<f64>,
    re: Array3<f64>,
}

struct Renderer<'a> {
    table: &'a BulkOpticsTable,
    settings: &'a RenderSettings,
    med: Medium,
    gb: GridBox,
    toward_sun: Vector3<f64>,
    omega_in: Vector3<f64>,
    mu_s: f64,
}

impl<'a> Renderer<'a> {
    /// Marched sunbeam optical depth from `pos`; optionally records the
    /// traversed masked chords for the adjoint pass.
    fn sun_tau(&self, pos: &Vector3<f64>, collect: Option<&mut Vec<(usize, f64)>>) -> f64 {
        let mut collect = collect;
        let mut tau = 0.0;
        for_each_cell(&self.gb, pos, &self.toward_sun, 0.0, f64::INFINITY, |lin, ta, tb| {
            let b = self.med.beta_ext[lin];
            if b > 0.0 {
                let len = tb - ta;
                tau += b * len;
                if let Some(v) = collect.as_deref_mut() {
                    v.push((lin, len));
                }
            }
        });
        tau
    }

    /// Molecular source of a cloud-free stretch [t_a, t_b] of the ray,
    /// with a constant cloud camera-leg depth and per-node sun marches.
    #[allow(clippy::too_many_arguments)]
    fn molecular_segment(
        &self,
        o: &Vector3<f64>,
        d: &Vector3<f64>,
        t_a: f64,
        t_b: f64,
        cam_cloud_tau: f64,
        mol: &MolecularCtx,
        acc: &mut (f64, f64),
    ) {
        if t_b <= t_a {
            return;
        }
        let mid = 0.5 * (t_a + t_b);
        let hl = 0.5 * (t_b - t_a);
        for (x, w) in GL8_X.iter().zip(GL8_W) {
            let t = mid + hl * x;
            let pos = o + d * t;
            let u = (-pos.z / mol.scale_height).exp();
            let beta_r = mol.tau_over_h * u;
            let tau_mol = mol.c_cam * (u - mol.u_cam) + mol.c_sun * u;
            let tau_sun = self.sun_tau(&pos, None);
            let e = w * hl * (-(cam_cloud_tau + tau_mol + tau_sun)).exp();
            acc.0 += e * beta_r * mol.p11;
            acc.1 += e * beta_r * mol.p12;
        }
    }
}

/// Per-ray molecular-layer context.
struct MolecularCtx {
    scale_height: f64,
    tau_over_h: f64,
    /// τ_R/μ along the camera leg.
    c_cam: f64,
    /// τ_R/μ along the sun leg.
    c_sun: f64,
    u_cam: f64,
    p11: f64,
    p12: f64,
}

impl<'a> Renderer<'a> {
    /// Integrates one ray. `seeds` carries pre-scaled adjoint weights
    /// (w_I, w_Q, w_U); when present, gradients are accumulated into `g`.
    fn trace(
        &self,
        o: &Vector3<f64>,
        d: &Vector3<f64>,
        seeds: Option<(f64, f64, f64)>,
        scratch: &mut Scratch,
        mut g: Option<&mut GradGrids>,
    ) -> Result<StokesVec, CoreError> {
        let cos_theta = self.toward_sun.dot(d).clamp(-1.0, 1.0);
        let theta_deg = cos_theta.acos().to_degrees();
        let ai: AngleInterp = self.table.angle_interp(theta_deg);
        let omega_out = -d;
        let mf = meridian_frame(&omega_out);
        let cross = self.omega_in.cross(&omega_out);
        let (c2, s2) = if cross.norm() < 1e-9 {
            (1.0, 0.0)
        } else {
            let b_sc = cross / cross.norm();
            let l_sc = omega_out.cross(&b_sc);
            frame_rotation(l_sc, mf.l, omega_out)
        };
        let (a_i, a_q) = match seeds {
            Some((wi, wq, wu)) => (wi, c2 * wq + s2 * wu),
            None => (0.0, 0.0),
        };

        let mol = match &self.settings.rayleigh {
            Some(layer) => {
                if d.z >= -1e-12 {
                    return Err(CoreError::invalid(
                        "molecular layer requires downward-looking rays",
                    ));
                }
                let [p11, p12, _, _] = rayleigh_phase(theta_deg);
                let mu_v = -d.z;
                Some(MolecularCtx {
                    scale_height: layer.scale_height_m,
                    tau_over_h: layer.optical_depth / layer.scale_height_m,
                    c_cam: layer.optical_depth / mu_v,
                    c_sun: layer.optical_depth / self.mu_s,
                    u_cam: (-o.z / layer.scale_height_m).exp(),
                    p11,
                    p12,
                })
            }
            None => None,
        };

        // Raw scattering-frame accumulators, divided by 4π at the end.
        let mut acc = (0.0f64, 0.0f64);

        scratch.chords.clear();
        for_each_cell(&self.gb, o, d, 0.0, f64::INFINITY, |lin, ta, tb| {
            scratch.chords.push((lin, ta, tb));
        });
        let t_ground = if d.z < -1e-12 { -o.z / d.z } else { f64::INFINITY };

        // Analytic molecular contribution above the grid top (no cloud on
        // either leg there), then numeric segments below.
        if let Some(m) = &mol {
            if o.z > self.gb.hi.z {
                let t_top = (self.gb.hi.z - o.z) / d.z;
                let u_top = (-self.gb.hi.z / m.scale_height).exp();
                let a = m.c_cam + m.c_sun;
                let coef = m.c_cam * (m.c_cam * m.u_cam).exp() / a;
                let seg = coef * ((-a * m.u_cam).exp() - (-a * u_top).exp());
                acc.0 += m.p11 * seg;
                acc.1 += m.p12 * seg;
                // Stretch between the top plane and the box entry (side
                // entries), or all the way down when the box is missed.
                let t_entry = scratch.chords.first().map_or(t_ground, |c| c.1);
                self.molecular_segment(o, d, t_top, t_entry.min(t_ground), 0.0, m, &mut acc);
            } else {
                let t_entry = scratch.chords.first().map_or(t_ground, |c| c.1);
                self.molecular_segment(o, d, 0.0, t_entry.min(t_ground), 0.0, m, &mut acc);
            }
        }

        scratch.chord_val.clear();
        scratch.chord_val.resize(scratch.chords.len(), 0.0);
        let grad_mode = g.is_some();
        let mut tau_cam = 0.0;
        let mut truncated = false;
        for (j, &(lin, ta, tb)) in scratch.chords.iter().enumerate() {
            if tau_cam > self.settings.tau_cutoff {
                truncated = true;
                break;
            }
            let masked = self.med.masked[lin];
            if !masked && mol.is_none() {
                continue;
            }
            let beta_e = self.med.beta_ext[lin];
            let beta_s = self.med.beta_sca[lin];
            let (mut p11, mut p12) = (0.0, 0.0);
            let (mut dp11, mut dp12) = (0.0, 0.0);
            if masked {
                if grad_mode {
                    let ((a, b), (da, db)) = self.table.phase_iq_grad(self.med.re[lin], &ai);
                    p11 = a;
                    p12 = b;
                    dp11 = da;
                    dp12 = db;
                } else {
                    let (a, b) = self.table.phase_iq(self.med.re[lin], &ai);
                    p11 = a;
                    p12 = b;
                }
            }
            let m_seed = (a_i * p11 + a_q * p12) / FOUR_PI;
            let dphase_seed = (a_i * dp11 + a_q * dp12) / FOUR_PI;
            let mid = 0.5 * (ta + tb);
            let hl = 0.5 * (tb - ta);
            for (x, w) in GL4_X.iter().zip(GL4_W) {
                let t = mid + hl * x;
                let pos = o + d * t;
                let tau_c = tau_cam + beta_e * (t - ta);
                let (tau_sun, tau_mol, beta_r) = if let Some(m) = &mol {
                    let u = (-pos.z / m.scale_height).exp();
                    let tau_mol = m.c_cam * (u - m.u_cam) + m.c_sun * u;
                    (self.sun_tau(&pos, None), tau_mol, m.tau_over_h * u)
                } else if grad_mode {
                    scratch.sun_path.clear();
                    (self.sun_tau(&pos, Some(&mut scratch.sun_path)), 0.0, 0.0)
                } else {
                    (self.sun_tau(&pos, None), 0.0, 0.0)
                };
                let e = w * hl * (-(tau_c + tau_sun + tau_mol)).exp();
                if masked {
                    acc.0 += e * beta_s * p11;
                    acc.1 += e * beta_s * p12;
                }
                if let Some(m) = &mol {
                    acc.0 += e * beta_r * m.p11;
                    acc.1 += e * beta_r * m.p12;
                }
                if grad_mode && masked {
                    let grids = g.as_deref_mut().unwrap();
                    let kw = self.med.kappa[lin] * self.med.omega[lin];
                    let dkw = self.med.d_kappa[lin] * self.med.omega[lin]
                        + self.med.kappa[lin] * self.med.d_omega[lin];
                    let glwc = grids.lwc.as_slice_mut().expect("contiguous grid");
                    let gre = grids.re.as_slice_mut().expect("contiguous grid");
                    let val = e * beta_s * m_seed;
                    glwc[lin] += e * m_seed * kw;
                    gre[lin] += e * (m_seed * self.med.lwc[lin] * dkw + beta_s * dphase_seed);
                    let partial = t - ta;
                    glwc[lin] -= val * self.med.kappa[lin] * partial;
                    gre[lin] -= val * self.med.lwc[lin] * self.med.d_kappa[lin] * partial;
                    for &(ulin, len) in &scratch.sun_path {
                        glwc[ulin] -= val * self.med.kappa[ulin] * len;
                        gre[ulin] -= val * self.med.lwc[ulin] * self.med.d_kappa[ulin] * len;
                    }
                    scratch.chord_val[j] += val;
                }
            }
            tau_cam += beta_e * (tb - ta);
        }

        // Molecular source between the grid exit and the ground, shadowed
        // by the full cloud column along the camera leg.
        if let Some(m) = &mol {
            if let Some(&(_, _, t_exit)) = scratch.chords.last() {
                self.molecular_segment(o, d, t_exit, t_ground, tau_cam, m, &mut acc);
            }
        }

        // Attenuation adjoint of earlier chords on later sources.
        if grad_mode {
            let grids = g.as_deref_mut().unwrap();
            let glwc = grids.lwc.as_slice_mut().expect("contiguous grid");
            let gre = grids.re.as_slice_mut().expect("contiguous grid");
            let mut after = 0.0;
            for (j, &(lin, ta, tb)) in scratch.chords.iter().enumerate().rev() {
                if self.med.masked[lin] && after != 0.0 {
                    let len = tb - ta;
                    glwc[lin] -= after * self.med.kappa[lin] * len;
                    gre[lin] -= after * self.med.lwc[lin] * self.med.d_kappa[lin] * len;
                }
                after += scratch.chord_val[j];
            }
        }

        acc.0 /= FOUR_PI;
        acc.1 /= FOUR_PI;

        // Lambertian floor, attenuated along both legs.
        if self.settings.floor_albedo > 0.0 && t_ground.is_finite() && !truncated {
            let ground = o + d * t_ground;
            let tau_sun_g = if grad_mode {
                scratch.sun_path.clear();
                self.sun_tau(&ground, Some(&mut scratch.sun_path))
            } else {
                self.sun_tau(&ground, None)
            };
            let tau_mol = mol
                .as_ref()
                .map_or(0.0, |m| m.c_cam * (1.0 - m.u_cam) + m.c_sun);
            let i_fl = self.settings.floor_albedo * self.mu_s / std::f64::consts::PI
                * (-(tau_cam + tau_sun_g + tau_mol)).exp();
            acc.0 += i_fl;
            if grad_mode {
                let grids = g.as_deref_mut().unwrap();
                let glwc = grids.lwc.as_slice_mut().expect("contiguous grid");
                let gre = grids.re.as_slice_mut().expect("contiguous grid");
                let val = a_i * i_fl;
                for &(lin, ta, tb) in &scratch.chords {
                    if self.med.masked[lin] {
                        let len = tb - ta;
                        glwc[lin] -= val * self.med.kappa[lin] * len;
                        gre[lin] -= val * self.med.lwc[lin] * self.med.d_kappa[lin] * len;
                    }
                }
                for &(ulin, len) in &scratch.sun_path {
                    glwc[ulin] -= val * self.med.kappa[ulin] * len;
                    gre[ulin] -= val * self.med.lwc[ulin] * self.med.d_kappa[ulin] * len;
                }
            }
        }

        Ok(StokesVec::new(acc.0, c2 * acc.1, s2 * acc.1))
    }
}

impl SingleScatter {
    fn validate(&self, camera: &Camera, weights: Option<&AdjointWeights>) -> Result<(), CoreError> {
        let s = &self.settings;
        if !(s.solar_irradiance.is_finite() && s.solar_irradiance >= 0.0) {
            return Err(CoreError::invalid("solar irradiance must be finite and ≥ 0"));
        }
        if s.supersampling == 0 {
            return Err(CoreError::invalid("supersampling must be at least 1"));
        }
        if !(s.tau_cutoff > 0.0) {
            return Err(CoreError::invalid("tau cutoff must be positive"));
        }
        if !(0.0..=1.0).contains(&s.floor_albedo) {
            return Err(CoreError::invalid("floor albedo must lie in [0, 1]"));
        }
        if let Some(r) = &s.rayleigh {
            if !(r.optical_depth > 0.0 && r.scale_height_m > 0.0) {
                return Err(CoreError::invalid(
                    "molecular layer needs positive optical depth and scale height",
                ));
            }
        }
        if let Some(w) = weights {
            let res = camera.resolution;
            if w.dim() != (res, res) || w.q.dim() != (res, res) || w.u.dim() != (res, res) {
                return Err(CoreError::shape(format!(
                    "adjoint weights {:?} do not match the {res}×{res} image",
                    w.dim()
                )));
            }
        }
        Ok(())
    }

    fn render_impl(
        &self,
        cloud: &VoxelCloud,
        table: &BulkOpticsTable,
        camera: &Camera,
        sun: &Sun,
        weights: Option<&AdjointWeights>,
    ) -> Result<(StokesImage, Option<(Array3<f64>, Array3<f64>)>), CoreError> {
        self.validate(camera, weights)?;
        if weights.is_some() && self.settings.rayleigh.is_some() {
            return Err(CoreError::invalid(
                "gradients are not available with the molecular layer enabled",
            ));
        }
        let renderer = Renderer {
            table,
            settings: &self.settings,
            med: Medium::of(cloud, table, weights.is_some()),
            gb: GridBox::of(cloud),
            toward_sun: sun.toward_sun(),
            omega_in: -sun.toward_sun(),
            mu_s: sun.zenith_deg.to_radians().cos(),
        };
        let res = camera.resolution;
        let (e_u, e_v) = camera.basis();
        let axis = camera.optical_axis;
        let fl = camera.focal_length;
        let pitch = camera.pixel_pitch;
        let half = (res / 2) as f64;
        let nss = self.settings.supersampling;
        let inv = 1.0 / (nss * nss) as f64;
        let dims = cloud.dim();

        struct Block {
            row0: usize,
            i: Array2<f64>,
            q: Array2<f64>,
            u: Array2<f64>,
            grads: Option<GradGrids>,
        }

        let n_blocks = res.div_ceil(ROW_BLOCK);
        let blocks: Result<Vec<Block>, CoreError> = (0..n_blocks)
            .into_par_iter()
            .map(|b| {
                let row0 = b * ROW_BLOCK;
                let rows = ROW_BLOCK.min(res - row0);
                let mut out = Block {
                    row0,
                    i: Array2::zeros((rows, res)),
                    q: Array2::zeros((rows, res)),
                    u: Array2::zeros((rows, res)),
                    grads: weights.map(|_| GradGrids {
                        lwc: Array3::zeros(dims),
                        re: Array3::zeros(dims),
                    }),
                };
                let mut scratch = Scratch::default();
                for r in 0..rows {
                    let row = row0 + r;
                    for col in 0..res {
                        let seeds = weights.map(|w| {
                            (
                                w.i[[row, col]] * inv,
                                w.q[[row, col]] * inv,
                                w.u[[row, col]] * inv,
                            )
                        });
                        let mut acc = StokesVec::zero();
                        for sa in 0..nss {
                            for sb in 0..nss {
                                let du = (sb as f64 + 0.5) / nss as f64 - 0.5;
                                let dv = (sa as f64 + 0.5) / nss as f64 - 0.5;
                                let u_off = (col as f64 - half + du) * pitch;
                                let v_off = (row as f64 - half + dv) * pitch;
                                let dir = if u_off == 0.0 && v_off == 0.0 {
                                    axis
                                } else {
                                    let d = axis + e_u * (u_off / fl) + e_v * (v_off / fl);
                                    d / d.norm()
                                };
                                let ray = renderer.trace(
                                    &camera.position,
                                    &dir,
                                    seeds,
                                    &mut scratch,
                                    out.grads.as_mut(),
                                )?;
                                acc.add_assign(ray);
                            }
                        }
                        let s0 = acc.scaled(inv);
                        let e = self.settings.solar_irradiance;
                        out.i[[r, col]] = s0.i * e;
                        out.q[[r, col]] = s0.q * e;
                        out.u[[r, col]] = s0.u * e;
                    }
                }
                Ok(out)
            })
            .collect();
        let blocks = blocks?;

        let mut i = Array2::zeros((res, res));
        let mut q = Array2::zeros((res, res));
        let mut u = Array2::zeros((res, res));
        let mut grads = weights.map(|_| (Array3::<f64>::zeros(dims), Array3::<f64>::zeros(dims)));
        for b in blocks {
            let rows = b.i.dim().0;
            for r in 0..rows {
                for c in 0..res {
                    i[[b.row0 + r, c]] = b.i[[r, c]];
                    q[[b.row0 + r, c]] = b.q[[r, c]];
                    u[[b.row0 + r, c]] = b.u[[r, c]];
                }
            }
            if let (Some((glwc, gre)), Some(bg)) = (grads.as_mut(), b.grads) {
                *glwc += &bg.lwc;
                *gre += &bg.re;
            }
        }
        if let Some((glwc, gre)) = grads.as_mut() {
            let e = self.settings.solar_irradiance;
            glwc.mapv_inplace(|v| v * e);
            gre.mapv_inplace(|v| v * e);
        }
        Ok((StokesImage::new(i, q, u)?, grads))
    }
}

impl ForwardModel for SingleScatter {
    fn render(
        &self,
        cloud: &VoxelCloud,
        optics: &BulkOpticsTable,
        camera: &Camera,
        sun: &Sun,
    ) -> Result<StokesImage, CoreError> {
        Ok(self.render_impl(cloud, optics, camera, sun, None)?.0)
    }

    fn render_with_gradient(
        &self,
        cloud: &VoxelCloud,
        optics: &BulkOpticsTable,
        camera: &Camera,
        sun: &Sun,
        weights: &AdjointWeights,
    ) -> Result<(StokesImage, Array3<f64>, Array3<f64>), CoreError> {
        let (image, grads) = self.render_impl(cloud, optics, camera, sun, Some(weights))?;
        let (glwc, gre) = grads.expect("gradient mode");
        Ok((image, glwc, gre))
    }
}
