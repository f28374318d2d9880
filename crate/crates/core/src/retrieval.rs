//! Cost functions, initialization models, and the gradient-based retrieval
//! loop.
//!
//! Retrieval minimizes a squared-error fit between simulated and measured
//! Stokes images over the liquid water content and effective radius of
//! every masked voxel. Candidate starting points come from four
//! initialization methods: a fixed typical homogeneous cloud, a grid-scanned
//! homogeneous cloud, and two grid-scanned monotonic vertical profiles
//! selected by either a Stokes cost or a degree-of-linear-polarization cost.
//! The descent itself is projected gradient descent with an Armijo
//! backtracking line search on preconditioned variables, run either jointly
//! over both fields or in alternating single-field phases.

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use thiserror::Error;

use crate::constants::{LWC_MIN_G_M3, RE_MAX_UM, RE_MIN_UM};
use crate::error::CoreError;
use crate::geometry::{Camera, Sun};
use crate::imager::BandSpec;
use crate::microphysics::VoxelCloud;
use crate::optics::BulkOpticsTable;
use crate::render::{AdjointWeights, ForwardModel};
use crate::stokes::StokesImage;

/// Armijo sufficient-decrease constant.
const ARMIJO_C: f64 = 1e-4;
/// Step shrink factor per backtrack.
const BACKTRACK_SHRINK: f64 = 0.5;
/// Backtracks allowed before a phase is declared stalled.
const MAX_BACKTRACKS: usize = 40;
/// Accepted steps grow by this factor as the next trial step.
const STEP_GROW: f64 = 2.0;
/// First trial step is this over the scaled gradient's max norm.
const FIRST_STEP_COEF: f64 = 0.1;
/// Iterations spanned by the phase convergence window.
const PHASE_WINDOW: usize = 10;

/// Fraction of the per-image intensity maximum below which pixels are
/// excluded from the DoLP cost.
pub const DOLP_FLOOR_FRACTION: f64 = 1e-6;

/// Homogeneous typical-cloud initialization values.
pub const H_TYPICAL_LWC: f64 = 0.01;
pub const H_TYPICAL_RE: f64 = 12.0;

/// One acquired view: the camera pose and its measured Stokes image.
#[derive(Debug, Clone)]
pub struct View {
    pub camera: Camera,
    pub image: StokesImage,
}

/// Multi-view polarimetric measurements with their acquisition metadata.
#[derive(Debug, Clone)]
pub struct MeasurementSet {
    views: Vec<View>,
    pub sun: Sun,
    pub exposure_s: f64,
    pub master_seed: u64,
    pub band: BandSpec,
}

impl MeasurementSet {
    pub fn new(
        views: Vec<View>,
        sun: Sun,
        exposure_s: f64,
        master_seed: u64,
        band: BandSpec,
    ) -> Result<Self, CoreError> {
        if views.is_empty() {
            return Err(CoreError::invalid("measurement set needs at least one view"));
        }
        if !(exposure_s > 0.0 && exposure_s.is_finite()) {
            return Err(CoreError::invalid("exposure must be positive and finite"));
        }
        for (k, v) in views.iter().enumerate() {
            let (r, c) = v.image.dim();
            if r != v.camera.resolution || c != v.camera.resolution {
                return Err(CoreError::shape(format!(
                    "view {k}: image is {r}x{c} but the detector is {0}x{0}",
                    v.camera.resolution
                )));
            }
        }
        band.validate()?;
        Ok(MeasurementSet {
            views,
            sun,
            exposure_s,
            master_seed,
            band,
        })
    }

    pub fn views(&self) -> &[View] {
        &self.views
    }

    /// Total number of measured pixels across all views.
    pub fn n_meas(&self) -> usize {
        self.views
            .iter()
            .map(|v| {
                let (r, c) = v.image.dim();
                r * c
            })
            .sum()
    }
}

fn check_shapes(sim: &[StokesImage], meas: &MeasurementSet) -> Result<(), CoreError> {
    if sim.len() != meas.views.len() {
        return Err(CoreError::shape(format!(
            "{} simulated views vs {} measured",
            sim.len(),
            meas.views.len()
        )));
    }
    for (k, (s, v)) in sim.iter().zip(&meas.views).enumerate() {
        if s.dim() != v.image.dim() {
            return Err(CoreError::shape(format!(
                "view {k}: simulated {:?} vs measured {:?}",
                s.dim(),
                v.image.dim()
            )));
        }
    }
    Ok(())
}

/// Radiance-only data term, ½ Σ (I − y_I)² over all pixels of all views.
pub fn cost_radiance(sim: &[StokesImage], meas: &MeasurementSet) -> Result<f64, CoreError> {
    check_shapes(sim, meas)?;
    let mut acc = 0.0;
    for (s, v) in sim.iter().zip(&meas.views) {
        for (a, b) in s.i.iter().zip(&v.image.i) {
            let d = a - b;
            acc += d * d;
        }
    }
    Ok(0.5 * acc)
}

/// Full Stokes data term: the radiance quadratic form applied to I, Q and U
/// and summed.
pub fn cost_stokes(sim: &[StokesImage], meas: &MeasurementSet) -> Result<f64, CoreError> {
    check_shapes(sim, meas)?;
    let mut acc = 0.0;
    for (s, v) in sim.iter().zip(&meas.views) {
        for (plane, meas_plane) in [(&s.i, &v.image.i), (&s.q, &v.image.q), (&s.u, &v.image.u)] {
            for (a, b) in plane.iter().zip(meas_plane) {
                let d = a - b;
                acc += d * d;
            }
        }
    }
    Ok(0.5 * acc)
}

/// DoLP data term plus the number of pixels excluded by the intensity floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DolpCost {
    pub cost: f64,
    pub excluded: usize,
}

/// Degree-of-linear-polarization data term, ½ Σ (DoLP − y_DoLP)² over the
/// pixels whose simulated and measured intensities both clear a floor of
/// [`DOLP_FLOOR_FRACTION`] times their image maximum.
pub fn cost_dolp(sim: &[StokesImage], meas: &MeasurementSet) -> Result<DolpCost, CoreError> {
    check_shapes(sim, meas)?;
    let mut acc = 0.0;
    let mut excluded = 0usize;
    for (s, v) in sim.iter().zip(&meas.views) {
        let max_sim = s.i.iter().cloned().fold(0.0f64, f64::max);
        let max_meas = v.image.i.iter().cloned().fold(0.0f64, f64::max);
        let floor_sim = DOLP_FLOOR_FRACTION * max_sim;
        let floor_meas = DOLP_FLOOR_FRACTION * max_meas;
        let dolp = |i: f64, q: f64, u: f64| if i > 0.0 { q.hypot(u) / i } else { 0.0 };
        for p in 0..s.i.len() {
            let (si, sq, su) = (
                s.i.as_slice().unwrap()[p],
                s.q.as_slice().unwrap()[p],
                s.u.as_slice().unwrap()[p],
            );
            let (mi, mq, mu) = (
                v.image.i.as_slice().unwrap()[p],
                v.image.q.as_slice().unwrap()[p],
                v.image.u.as_slice().unwrap()[p],
            );
            if si < floor_sim || mi < floor_meas {
                excluded += 1;
                continue;
            }
            let d = dolp(si, sq, su) - dolp(mi, mq, mu);
            acc += d * d;
        }
    }
    Ok(DolpCost {
        cost: 0.5 * acc,
        excluded,
    })
}

/// Grid geometry and mask on which initialization profiles are laid out.
#[derive(Debug, Clone)]
pub struct ProfileScaffold {
    pub mask: Array3<bool>,
    pub v_e: f64,
    pub voxel_size: [f64; 3],
    pub base_height: f64,
}

impl ProfileScaffold {
    /// The scaffold of an existing cloud.
    pub fn of(cloud: &VoxelCloud) -> Self {
        ProfileScaffold {
            mask: cloud.mask().clone(),
            v_e: cloud.v_e(),
            voxel_size: cloud.voxel_size(),
            base_height: cloud.base_height(),
        }
    }

    fn lowest_masked_altitude(&self) -> Result<f64, CoreError> {
        let mut z0 = f64::INFINITY;
        for (idx, m) in self.mask.indexed_iter() {
            if *m {
                let z = self.base_height + idx.2 as f64 * self.voxel_size[2];
                z0 = z0.min(z);
            }
        }
        if z0.is_finite() {
            Ok(z0)
        } else {
            Err(CoreError::invalid("profile mask is empty"))
        }
    }
}

/// Monotonic vertical profile: LWC grows linearly and r_e as the cube root
/// of height above the lowest masked altitude Z₀,
///
/// ```text
/// LWC = α_l (Z − Z₀) + LWC_min,    r_e = α_r (Z − Z₀)^(1/3) + r_e_min
/// ```
///
/// with Z in kilometres at voxel base heights, α_l in g/(m³·km) and α_r in
/// µm/km^(1/3).
pub fn monotonic_profile(
    alpha_l: f64,
    alpha_r: f64,
    scaffold: &ProfileScaffold,
) -> Result<VoxelCloud, CoreError> {
    if !(alpha_l >= 0.0 && alpha_r >= 0.0 && alpha_l.is_finite() && alpha_r.is_finite()) {
        return Err(CoreError::invalid("profile slopes must be nonnegative"));
    }
    let z0 = scaffold.lowest_masked_altitude()?;
    let dim = scaffold.mask.dim();
    let mut lwc = Array3::zeros(dim);
    let mut r_e = Array3::zeros(dim);
    for (idx, m) in scaffold.mask.indexed_iter() {
        if !*m {
            continue;
        }
        let z = scaffold.base_height + idx.2 as f64 * scaffold.voxel_size[2];
        let dz_km = (z - z0) * 1e-3;
        lwc[idx] = alpha_l * dz_km + LWC_MIN_G_M3;
        r_e[idx] = alpha_r * dz_km.cbrt() + RE_MIN_UM;
    }
    VoxelCloud::new(
        lwc,
        r_e,
        scaffold.mask.clone(),
        scaffold.v_e,
        scaffold.voxel_size,
        scaffold.base_height,
    )
}

/// Constant LWC and r_e inside the mask.
pub fn homogeneous_profile(
    lwc_val: f64,
    re_val: f64,
    scaffold: &ProfileScaffold,
) -> Result<VoxelCloud, CoreError> {
    if !(lwc_val > 0.0 && re_val > 0.0) {
        return Err(CoreError::invalid("homogeneous values must be positive"));
    }
    let dim = scaffold.mask.dim();
    let mut lwc = Array3::zeros(dim);
    let mut r_e = Array3::zeros(dim);
    for (idx, m) in scaffold.mask.indexed_iter() {
        if *m {
            lwc[idx] = lwc_val;
            r_e[idx] = re_val;
        }
    }
    VoxelCloud::new(
        lwc,
        r_e,
        scaffold.mask.clone(),
        scaffold.v_e,
        scaffold.voxel_size,
        scaffold.base_height,
    )
}

/// The four initialization methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMethod {
    /// Fixed typical homogeneous cloud, no search.
    HTypical,
    /// Homogeneous (LWC, r_e) grid scan under the Stokes cost.
    HStokes,
    /// Monotonic (α_l, α_r) grid scan under the Stokes cost.
    MStokes,
    /// Monotonic (α_l, α_r) grid scan under the DoLP cost.
    MDolp,
}

/// Initialization method plus its two search grids. For monotonic methods
/// the grids hold (α_l, α_r); for [`InitMethod::HStokes`] they hold
/// homogeneous (LWC, r_e) values.
#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub method: InitMethod,
    pub grid_a: Vec<f64>,
    pub grid_b: Vec<f64>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|j| lo + j as f64 * (hi - lo) / (n - 1) as f64)
        .collect()
}

impl InitConfig {
    /// Sixteen equally spaced values per axis: 0.1 to 1.6 for the first
    /// parameter and 3 to 15 for the second.
    pub fn defaults(method: InitMethod) -> Self {
        InitConfig {
            method,
            grid_a: linspace(0.1, 1.6, 16),
            grid_b: linspace(3.0, 15.0, 16),
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.method == InitMethod::HTypical {
            return Ok(());
        }
        if self.grid_a.is_empty() || self.grid_b.is_empty() {
            return Err(CoreError::invalid("initialization grids must be nonempty"));
        }
        if self
            .grid_a
            .iter()
            .chain(&self.grid_b)
            .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(CoreError::invalid(
                "initialization grid values must be positive",
            ));
        }
        Ok(())
    }
}

/// Outcome of initialization: the chosen parameters, the cloud they
/// generate, and the scanned cost surface (absent for the fixed method).
#[derive(Debug, Clone)]
pub struct InitResult {
    pub params: (f64, f64),
    pub cloud: VoxelCloud,
    pub cost_surface: Option<Array2<f64>>,
    /// DoLP-floor exclusions at the winning node; zero for Stokes costs.
    pub excluded: usize,
}

fn with_node(e: CoreError, a: f64, b: f64) -> CoreError {
    let tag = |msg: String| format!("grid node ({a}, {b}): {msg}");
    match e {
        CoreError::InvalidArgument(m) => CoreError::InvalidArgument(tag(m)),
        CoreError::ShapeMismatch(m) => CoreError::ShapeMismatch(tag(m)),
        CoreError::Convergence(m) => CoreError::Convergence(tag(m)),
        CoreError::NonFinite(m) => CoreError::NonFinite(tag(m)),
        CoreError::Infeasible(m) => CoreError::Infeasible(tag(m)),
        CoreError::Cache(m) => CoreError::Cache(tag(m)),
    }
}

fn render_views(
    model: &dyn ForwardModel,
    cloud: &VoxelCloud,
    optics: &BulkOpticsTable,
    meas: &MeasurementSet,
) -> Result<Vec<StokesImage>, CoreError> {
    meas.views
        .iter()
        .map(|v| model.render(cloud, optics, &v.camera, &meas.sun))
        .collect()
}

/// Scans the configured parameter grid, rendering every candidate cloud and
/// scoring it with the method's cost; returns the argmin (lowest linear grid
/// index on ties) and the full cost surface.
pub fn grid_search_init(
    config: &InitConfig,
    meas: &MeasurementSet,
    model: &dyn ForwardModel,
    optics: &BulkOpticsTable,
    scaffold: &ProfileScaffold,
) -> Result<InitResult, CoreError> {
    config.validate()?;
    let build = |a: f64, b: f64| -> Result<VoxelCloud, CoreError> {
        match config.method {
            InitMethod::HTypical | InitMethod::HStokes => homogeneous_profile(a, b, scaffold),
            InitMethod::MStokes | InitMethod::MDolp => monotonic_profile(a, b, scaffold),
        }
    };
    if config.method == InitMethod::HTypical {
        let cloud = homogeneous_profile(H_TYPICAL_LWC, H_TYPICAL_RE, scaffold)?;
        return Ok(InitResult {
            params: (H_TYPICAL_LWC, H_TYPICAL_RE),
            cloud,
            cost_surface: None,
            excluded: 0,
        });
    }
    let (na, nb) = (config.grid_a.len(), config.grid_b.len());
    let scores = (0..na * nb)
        .into_par_iter()
        .map(|node| {
            let (a, b) = (config.grid_a[node / nb], config.grid_b[node % nb]);
            let run = || -> Result<(f64, usize), CoreError> {
                let cloud = build(a, b)?;
                let sims = render_views(model, &cloud, optics, meas)?;
                let (cost, excluded) = match config.method {
                    InitMethod::MDolp => {
                        let d = cost_dolp(&sims, meas)?;
                        (d.cost, d.excluded)
                    }
                    _ => (cost_stokes(&sims, meas)?, 0),
                };
                if !cost.is_finite() {
                    return Err(CoreError::NonFinite("grid-search cost".into()));
                }
                Ok((cost, excluded))
            };
            run().map_err(|e| with_node(e, a, b))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut best = 0;
    for (node, (cost, _)) in scores.iter().enumerate() {
        if *cost < scores[best].0 {
            best = node;
        }
    }
    let params = (config.grid_a[best / nb], config.grid_b[best % nb]);
    let surface =
        Array2::from_shape_vec((na, nb), scores.iter().map(|s| s.0).collect()).expect("grid shape");
    Ok(InitResult {
        params,
        cloud: build(params.0, params.1)?,
        cost_surface: Some(surface),
        excluded: scores[best].1,
    })
}

/// Multiplicative preconditioning of the optimization variables: the
/// optimizer works on (Π_LWC · LWC, Π_re · r_e).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preconditioner {
    pub pi_lwc: f64,
    pub pi_re: f64,
}

impl Default for Preconditioner {
    fn default() -> Self {
        Preconditioner {
            pi_lwc: 10.0,
            pi_re: 0.1,
        }
    }
}

impl Preconditioner {
    /// The earlier published setting, Π_LWC = 15 and Π_re = 0.01.
    pub fn prior_art() -> Self {
        Preconditioner {
            pi_lwc: 15.0,
            pi_re: 0.01,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.pi_lwc > 0.0 && self.pi_re > 0.0)
            || !self.pi_lwc.is_finite()
            || !self.pi_re.is_finite()
        {
            return Err(CoreError::invalid("preconditioners must be positive"));
        }
        Ok(())
    }

    pub fn scale_lwc(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v * self.pi_lwc).collect()
    }

    pub fn unscale_lwc(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|v| v / self.pi_lwc).collect()
    }

    pub fn scale_re(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v * self.pi_re).collect()
    }

    pub fn unscale_re(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|v| v / self.pi_re).collect()
    }
}

/// Which fields a descent phase updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Joint,
    LwcOnly,
    ReOnly,
}

/// Retrieval schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalMode {
    /// One descent over both fields simultaneously.
    Joint,
    /// Repeated LWC-only then r_e-only descents, starting with LWC.
    Alternating,
}

#[derive(Debug, Clone)]
pub struct RetrievalOptions {
    pub mode: RetrievalMode,
    pub precond: Preconditioner,
    pub max_iters_per_phase: usize,
    /// Phase convergence: relative cost decrease over ten iterations.
    pub phase_tol: f64,
    /// Alternating termination: relative improvement of one full cycle.
    pub cycle_tol: f64,
    pub max_cycles: usize,
    /// Keep r_e at its initialization values throughout.
    pub freeze_re: bool,
    pub re_max: f64,
}

impl Default for RetrievalOptions {
    fn default() -> Self {
        RetrievalOptions {
            mode: RetrievalMode::Alternating,
            precond: Preconditioner::default(),
            max_iters_per_phase: 500,
            phase_tol: 1e-4,
            cycle_tol: 1e-3,
            max_cycles: 50,
            freeze_re: false,
            re_max: RE_MAX_UM,
        }
    }
}

impl RetrievalOptions {
    pub fn validate(&self) -> Result<(), CoreError> {
        self.precond.validate()?;
        if !(self.phase_tol > 0.0 && self.cycle_tol > 0.0) {
            return Err(CoreError::invalid("convergence tolerances must be positive"));
        }
        if self.max_iters_per_phase == 0 || self.max_cycles == 0 {
            return Err(CoreError::invalid("iteration limits must be at least one"));
        }
        if !(self.re_max > RE_MIN_UM && self.re_max <= RE_MAX_UM) {
            return Err(CoreError::invalid(format!(
                "r_e upper clamp must lie in ({RE_MIN_UM}, {RE_MAX_UM}]"
            )));
        }
        Ok(())
    }
}

/// One accepted descent step (or the starting point, with step 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub phase: Phase,
    pub iteration: usize,
    pub cost: f64,
    pub step: f64,
}

/// Final state of a retrieval run.
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub cloud: VoxelCloud,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
    pub cycles: usize,
}

/// A retrieval failure carrying the iterate that produced it, so callers
/// can serialize the state for diagnosis.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct RetrievalAbort {
    pub error: CoreError,
    pub iterate: Option<Box<VoxelCloud>>,
}

impl From<CoreError> for RetrievalAbort {
    fn from(error: CoreError) -> Self {
        RetrievalAbort {
            error,
            iterate: None,
        }
    }
}

struct Objective<'a> {
    model: &'a dyn ForwardModel,
    optics: &'a BulkOpticsTable,
    meas: &'a MeasurementSet,
}

impl Objective<'_> {
    fn evaluate(&self, cloud: &VoxelCloud) -> Result<(f64, Vec<StokesImage>), CoreError> {
        let sims = render_views(self.model, cloud, self.optics, self.meas)?;
        let cost = cost_stokes(&sims, self.meas)?;
        Ok((cost, sims))
    }

    /// Gradient of the Stokes cost at `cloud`, given its rendered images.
    /// Views accumulate sequentially in fixed order.
    fn gradient(
        &self,
        cloud: &VoxelCloud,
        sims: &[StokesImage],
    ) -> Result<(Array3<f64>, Array3<f64>), CoreError> {
        let mut g_lwc = Array3::zeros(cloud.dim());
        let mut g_re = Array3::zeros(cloud.dim());
        for (s, v) in sims.iter().zip(self.meas.views()) {
            let weights = AdjointWeights::from_residual(s, &v.image)?;
            let (_, gl, gr) =
                self.model
                    .render_with_gradient(cloud, self.optics, &v.camera, &self.meas.sun, &weights)?;
            g_lwc += &gl;
            g_re += &gr;
        }
        Ok((g_lwc, g_re))
    }
}

struct DescentState {
    cloud: VoxelCloud,
    indices: Vec<[usize; 3]>,
    lwc_m: Vec<f64>,
    re_m: Vec<f64>,
    cost: f64,
    sims: Vec<StokesImage>,
    iteration: usize,
}

impl DescentState {
    fn masked(grid: &Array3<f64>, indices: &[[usize; 3]]) -> Vec<f64> {
        indices.iter().map(|i| grid[[i[0], i[1], i[2]]]).collect()
    }
}

fn non_finite_abort(cloud: &VoxelCloud, what: &str) -> RetrievalAbort {
    RetrievalAbort {
        error: CoreError::NonFinite(format!("retrieval {what}")),
        iterate: Some(Box::new(cloud.clone())),
    }
}

/// Runs one descent phase in place; returns true when the phase converged
/// (as opposed to exhausting its iteration budget).
fn descend_phase(
    obj: &Objective,
    state: &mut DescentState,
    phase: Phase,
    opts: &RetrievalOptions,
    history: &mut Vec<IterationRecord>,
) -> Result<bool, RetrievalAbort> {
    let (pi_l, pi_r) = (opts.precond.pi_lwc, opts.precond.pi_re);
    let update_lwc = matches!(phase, Phase::Joint | Phase::LwcOnly);
    let update_re = matches!(phase, Phase::Joint | Phase::ReOnly) && !opts.freeze_re;
    if !update_lwc && !update_re {
        return Ok(true);
    }
    let mut phase_costs = vec![state.cost];
    let mut step = 0.0;
    let mut trial = state.cloud.clone();
    for _ in 0..opts.max_iters_per_phase {
        let (g_lwc, g_re) = obj
            .gradient(&state.cloud, &state.sims)
            .map_err(|e| RetrievalAbort {
                error: e,
                iterate: Some(Box::new(state.cloud.clone())),
            })?;
        let gl = DescentState::masked(&g_lwc, &state.indices);
        let gr = DescentState::masked(&g_re, &state.indices);
        let mut g_inf = 0.0f64;
        if update_lwc {
            g_inf = gl.iter().fold(g_inf, |m, g| m.max((g / pi_l).abs()));
        }
        if update_re {
            g_inf = gr.iter().fold(g_inf, |m, g| m.max((g / pi_r).abs()));
        }
        if !g_inf.is_finite() {
            return Err(non_finite_abort(&state.cloud, "gradient"));
        }
        if g_inf == 0.0 {
            return Ok(true);
        }
        if step == 0.0 {
            step = FIRST_STEP_COEF / g_inf;
        } else {
            step *= STEP_GROW;
        }
        let mut accepted = false;
        for _ in 0..=MAX_BACKTRACKS {
            let mut du_sq = 0.0;
            let lwc_new: Vec<f64> = if update_lwc {
                state
                    .lwc_m
                    .iter()
                    .zip(&gl)
                    .map(|(x, g)| {
                        let xn = (x - step * g / (pi_l * pi_l)).max(0.0);
                        let d = (xn - x) * pi_l;
                        du_sq += d * d;
                        xn
                    })
                    .collect()
            } else {
                state.lwc_m.clone()
            };
            let re_new: Vec<f64> = if update_re {
                state
                    .re_m
                    .iter()
                    .zip(&gr)
                    .map(|(x, g)| {
                        let xn = (x - step * g / (pi_r * pi_r)).clamp(RE_MIN_UM, opts.re_max);
                        let d = (xn - x) * pi_r;
                        du_sq += d * d;
                        xn
                    })
                    .collect()
            } else {
                state.re_m.clone()
            };
            if du_sq == 0.0 {
                break;
            }
            trial
                .set_masked_fields(&lwc_new, &re_new)
                .map_err(RetrievalAbort::from)?;
            let (cost, sims) = obj.evaluate(&trial).map_err(|e| RetrievalAbort {
                error: e,
                iterate: Some(Box::new(trial.clone())),
            })?;
            if !cost.is_finite() {
                return Err(non_finite_abort(&trial, "cost"));
            }
            if cost <= state.cost - (ARMIJO_C / step) * du_sq {
                state.lwc_m = lwc_new;
                state.re_m = re_new;
                state
                    .cloud
                    .set_masked_fields(&state.lwc_m, &state.re_m)
                    .map_err(RetrievalAbort::from)?;
                state.cost = cost;
                state.sims = sims;
                state.iteration += 1;
                history.push(IterationRecord {
                    phase,
                    iteration: state.iteration,
                    cost,
                    step,
                });
                phase_costs.push(cost);
                accepted = true;
                break;
            }
            step *= BACKTRACK_SHRINK;
        }
        if !accepted {
            return Ok(true);
        }
        let k = phase_costs.len() - 1;
        if k >= PHASE_WINDOW {
            let before = phase_costs[k - PHASE_WINDOW];
            let rel = (before - phase_costs[k]) / before.abs().max(f64::MIN_POSITIVE);
            if rel < opts.phase_tol {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Gradient-based retrieval of LWC and r_e from a measurement set, starting
/// at `init` and minimizing the Stokes cost.
pub fn retrieve(
    meas: &MeasurementSet,
    init: &VoxelCloud,
    model: &dyn ForwardModel,
    optics: &BulkOpticsTable,
    options: &RetrievalOptions,
) -> Result<RetrievalResult, RetrievalAbort> {
    options.validate()?;
    let obj = Objective {
        model,
        optics,
        meas,
    };
    let indices = init.masked_indices();
    if indices.is_empty() {
        return Err(CoreError::invalid("initial cloud has an empty mask").into());
    }
    let (cost, sims) = obj.evaluate(init).map_err(|e| RetrievalAbort {
        error: e,
        iterate: Some(Box::new(init.clone())),
    })?;
    if !cost.is_finite() {
        return Err(non_finite_abort(init, "initial cost"));
    }
    let lwc_m = DescentState::masked(init.lwc(), &indices);
    let re_m = DescentState::masked(init.r_e(), &indices);
    let mut state = DescentState {
        cloud: init.clone(),
        indices,
        lwc_m,
        re_m,
        cost,
        sims,
        iteration: 0,
    };
    let mut history = Vec::new();
    let first_phase = match options.mode {
        RetrievalMode::Joint => Phase::Joint,
        RetrievalMode::Alternating => Phase::LwcOnly,
    };
    history.push(IterationRecord {
        phase: first_phase,
        iteration: 0,
        cost: state.cost,
        step: 0.0,
    });
    match options.mode {
        RetrievalMode::Joint => {
            let phase = if options.freeze_re {
                Phase::LwcOnly
            } else {
                Phase::Joint
            };
            let converged = descend_phase(&obj, &mut state, phase, options, &mut history)?;
            Ok(RetrievalResult {
                cloud: state.cloud,
                history,
                converged,
                cycles: 1,
            })
        }
        RetrievalMode::Alternating => {
            let mut cycles = 0;
            let mut converged = false;
            while cycles < options.max_cycles {
                let before = state.cost;
                descend_phase(&obj, &mut state, Phase::LwcOnly, options, &mut history)?;
                if !options.freeze_re {
                    descend_phase(&obj, &mut state, Phase::ReOnly, options, &mut history)?;
                }
                cycles += 1;
                let rel = (before - state.cost) / before.abs().max(f64::MIN_POSITIVE);
                if rel < options.cycle_tol {
                    converged = true;
                    break;
                }
            }
            Ok(RetrievalResult {
                cloud: state.cloud,
                history,
                converged,
                cycles,
            })
        }
    }
}
