//! Echo-planar forward model and reconstruction.
//!
//! Readout k-coordinates come from integrating a trapezoidal gradient and are
//! normalised so the Cartesian grid has spacing π; then `sin(Δ)/Δ` is an exact
//! interpolator on matched grids. Lines are row vectors: reconstruction
//! regrids with `line · Q`, the forward model undoes it with `line · R`.
//!
//! Row parity: row 0 is read forward, so even rows are forward lines and odd
//! rows are reverse lines.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::fft::{fft2, fft_centered, fft_cols, fft_rows, ifft2};
use crate::par;
use crate::slice::{Complex64, ComplexSlice, Domain, Mask, RealSlice};

/// Trapezoidal readout gradient (times in microseconds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientWaveform {
    pub ramp_up_us: f64,
    pub flat_us: f64,
    pub ramp_down_us: f64,
    pub amplitude: f64,
    pub dwell_us: f64,
    pub n_samples: usize,
    pub gamma: f64,
}

impl Default for GradientWaveform {
    /// 320 samples at 2.5 µs centred on a 1330 µs trapezoid; about a fifth of
    /// the samples fall on the ramps.
    fn default() -> Self {
        GradientWaveform {
            ramp_up_us: 330.0,
            flat_us: 670.0,
            ramp_down_us: 330.0,
            amplitude: 1.0,
            dwell_us: 2.5,
            n_samples: 320,
            gamma: 1.0,
        }
    }
}

impl GradientWaveform {
    /// Symmetric trapezoid whose ramps each take `ramp_fraction` of the
    /// waveform and whose sampling window covers `window_fraction` of it.
    pub fn ramp_sampled(n_samples: usize, dwell_us: f64, ramp_fraction: f64, window_fraction: f64) -> Self {
        let total = (n_samples.max(2) - 1) as f64 * dwell_us / window_fraction;
        GradientWaveform {
            ramp_up_us: ramp_fraction * total,
            flat_us: (1.0 - 2.0 * ramp_fraction) * total,
            ramp_down_us: ramp_fraction * total,
            amplitude: 1.0,
            dwell_us,
            n_samples,
            gamma: 1.0,
        }
    }

    /// Cartesian readout with the same sample count: no ramps.
    pub fn cartesian(n_samples: usize) -> Self {
        GradientWaveform {
            ramp_up_us: 0.0,
            flat_us: n_samples as f64,
            ramp_down_us: 0.0,
            amplitude: 1.0,
            dwell_us: 1.0,
            n_samples,
            gamma: 1.0,
        }
    }

    pub fn duration_us(&self) -> f64 {
        self.ramp_up_us + self.flat_us + self.ramp_down_us
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.ramp_up_us >= 0.0 && self.flat_us >= 0.0 && self.ramp_down_us >= 0.0,
            Config,
            "waveform durations must be non-negative"
        );
        ensure!(self.duration_us() > 0.0, Config, "waveform has zero duration");
        ensure!(self.n_samples >= 2, Config, "readout needs at least 2 samples");
        ensure!(self.dwell_us > 0.0, Config, "dwell time must be positive");
        ensure!(
            (self.n_samples - 1) as f64 * self.dwell_us <= self.duration_us() * (1.0 + 1e-12),
            Config,
            "readout window of {} us does not fit the {} us waveform",
            (self.n_samples - 1) as f64 * self.dwell_us,
            self.duration_us()
        );
        Ok(())
    }

    /// Sample times: the window is centred on the waveform.
    pub fn sample_times(&self) -> Vec<f64> {
        let t0 = 0.5 * (self.duration_us() - (self.n_samples - 1) as f64 * self.dwell_us);
        (0..self.n_samples).map(|i| t0.max(0.0) + i as f64 * self.dwell_us).collect()
    }

    /// Gradient value at time `t`.
    pub fn gradient(&self, t: f64) -> f64 {
        let (ru, fl, rd) = (self.ramp_up_us, self.flat_us, self.ramp_down_us);
        let a = self.amplitude;
        if t < 0.0 || t > ru + fl + rd {
            0.0
        } else if t < ru {
            a * t / ru
        } else if t <= ru + fl {
            a
        } else if rd > 0.0 {
            a * (1.0 - (t - ru - fl) / rd)
        } else {
            0.0
        }
    }

    /// Exact `∫₀ᵗ G`.
    pub fn area(&self, t: f64) -> f64 {
        let (ru, fl, rd) = (self.ramp_up_us, self.flat_us, self.ramp_down_us);
        let a = self.amplitude;
        let t = t.clamp(0.0, ru + fl + rd);
        if t <= ru {
            if ru > 0.0 {
                a * t * t / (2.0 * ru)
            } else {
                0.0
            }
        } else if t <= ru + fl {
            a * ru / 2.0 + a * (t - ru)
        } else {
            let tau = t - ru - fl;
            a * ru / 2.0 + a * fl + a * (tau - tau * tau / (2.0 * rd))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub kx_actual: Vec<f64>,
    pub kx_target: Vec<f64>,
}

impl TrajectorySpec {
    pub fn len(&self) -> usize {
        self.kx_target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kx_target.is_empty()
    }
}

/// Cartesian grid with spacing π and zero at index `n/2`.
pub fn cartesian_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 - (n / 2) as f64) * PI).collect()
}

pub fn trajectory_from_gradient(g: &GradientWaveform) -> Result<TrajectorySpec> {
    g.validate()?;
    let n = g.n_samples;
    let raw: Vec<f64> = g.sample_times().iter().map(|&t| g.gamma * g.area(t)).collect();
    let span = raw[n - 1] - raw[0];
    ensure!(
        span.is_finite() && span.abs() > 0.0,
        Config,
        "gradient encodes no k-space extent over the readout window"
    );
    let target = cartesian_grid(n);
    let (t0, t1) = (target[0], target[n - 1]);
    let actual: Vec<f64> = raw.iter().map(|&k| t0 + (k - raw[0]) / span * (t1 - t0)).collect();
    ensure!(
        actual.windows(2).all(|w| w[1] > w[0]),
        Config,
        "trajectory is not strictly increasing over the readout window"
    );
    Ok(TrajectorySpec { kx_actual: actual, kx_target: target })
}

/// `sin(Δ)/Δ`, 1 at Δ = 0.
pub fn sinc(d: f64) -> f64 {
    if d == 0.0 {
        1.0
    } else {
        d.sin() / d
    }
}

#[derive(Debug, Clone)]
pub struct RegridKernel {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub condition_estimate: f64,
}

impl RegridKernel {
    pub fn order(&self) -> usize {
        self.q.nrows()
    }
}

/// Condition numbers above this use the SVD pseudoinverse instead of LU.
pub const LU_CONDITION_LIMIT: f64 = 1e6;
pub const MAX_CONDITION: f64 = 1e10;

pub fn build_regrid_kernel(traj: &TrajectorySpec) -> Result<RegridKernel> {
    let n = traj.len();
    ensure!(
        n >= 2 && traj.kx_actual.len() == n,
        Dimension,
        "trajectory lengths differ: {} actual vs {n} target",
        traj.kx_actual.len()
    );
    let q = DMatrix::from_fn(n, n, |p, r| {
        let d = traj.kx_actual[p] - traj.kx_target[r];
        // Matched grids land on exact multiples of π where sin() is only
        // approximately zero; snap so Q is exactly the identity there.
        let m = d / PI;
        if (m - m.round()).abs() < 1e-12 {
            if m.round() == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            sinc(d)
        }
    });
    let svd = q.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if condition > MAX_CONDITION {
        return Err(Error::Numerical(format!("regridding kernel is ill-conditioned (condition {condition:.3e})")));
    }
    let r = if condition <= LU_CONDITION_LIMIT {
        q.clone().lu().try_inverse().ok_or_else(|| Error::Numerical("regridding kernel is singular".into()))?
    } else {
        svd.pseudo_inverse(smax * n as f64 * f64::EPSILON).map_err(|e| Error::Numerical(e.to_string()))?
    };
    Ok(RegridKernel { q, r, condition_estimate: condition })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegridDirection {
    /// `line · R`: turn Cartesian samples into ramp-sampled ones.
    ForwardModel,
    /// `line · Q`: resample acquired samples onto the Cartesian grid.
    Reconstruct,
}

fn matrix_for(kernel: &RegridKernel, dir: RegridDirection) -> &DMatrix<f64> {
    match dir {
        RegridDirection::ForwardModel => &kernel.r,
        RegridDirection::Reconstruct => &kernel.q,
    }
}

pub fn regrid_line(line: &[Complex64], kernel: &RegridKernel, dir: RegridDirection) -> Result<Vec<Complex64>> {
    let m = matrix_for(kernel, dir);
    ensure!(line.len() == m.nrows(), Dimension, "line of {} samples vs kernel order {}", line.len(), m.nrows());
    Ok((0..m.ncols())
        .map(|c| line.iter().enumerate().map(|(p, &v)| v * m[(p, c)]).sum())
        .collect())
}

/// Regrid every row of a k-space slice.
pub fn regrid_slice(kspace: &ComplexSlice, kernel: &RegridKernel, dir: RegridDirection) -> Result<ComplexSlice> {
    ensure!(kspace.domain() == Domain::KSpace, Config, "regridding expects k-space, got {:?}", kspace.domain());
    let m = matrix_for(kernel, dir);
    let n = m.nrows();
    ensure!(kspace.width() == n, Dimension, "line of {} samples vs kernel order {n}", kspace.width());
    const ROWS: usize = 32;
    let h = kspace.height();
    let blocks = par::map_range(h.div_ceil(ROWS), |b| {
        let rows = ROWS.min(h - b * ROWS);
        let src = &kspace.data()[b * ROWS * n..(b * ROWS + rows) * n];
        let re: Vec<f64> = src.iter().map(|c| c.re).collect();
        let im: Vec<f64> = src.iter().map(|c| c.im).collect();
        let mut ore = vec![0.0; rows * n];
        let mut oim = vec![0.0; rows * n];
        // SAFETY: every pointer covers a buffer of exactly the stated
        // shape and strides; nalgebra stores column-major.
        unsafe {
            for (a, out) in [(&re, &mut ore), (&im, &mut oim)] {
                matrixmultiply::dgemm(
                    rows,
                    n,
                    n,
                    1.0,
                    a.as_ptr(),
                    n as isize,
                    1,
                    m.as_ptr(),
                    1,
                    n as isize,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        ore.into_iter().zip(oim).map(|(r, i)| Complex64::new(r, i)).collect::<Vec<_>>()
    });
    Ok(kspace.with_data(blocks.concat()))
}

#[inline]
pub fn is_forward_row(row: usize) -> bool {
    row % 2 == 0
}

/// Three navigator lines through the k-space centre, read forward, reverse,
/// forward.
#[derive(Debug, Clone, PartialEq)]
pub struct NavigatorSet {
    pub n1: Vec<Complex64>,
    pub n2: Vec<Complex64>,
    pub n3: Vec<Complex64>,
}

impl NavigatorSet {
    pub fn new(n1: Vec<Complex64>, n2: Vec<Complex64>, n3: Vec<Complex64>) -> Result<Self> {
        ensure!(
            n1.len() == n2.len() && n2.len() == n3.len() && !n1.is_empty(),
            Dimension,
            "navigator lengths differ: {}, {}, {}",
            n1.len(),
            n2.len(),
            n3.len()
        );
        Ok(NavigatorSet { n1, n2, n3 })
    }

    /// Synthetic navigators from a k-space slice: the centre line three
    /// times, with the reverse line carrying a `2θ` phase in x-space.
    pub fn synthetic(kspace: &ComplexSlice, theta: &[f64]) -> Result<Self> {
        ensure!(kspace.domain() == Domain::KSpace, Config, "navigators are taken from k-space");
        ensure!(theta.len() == kspace.width(), Dimension, "theta length {} vs width {}", theta.len(), kspace.width());
        let centre = kspace.row(kspace.height() / 2).to_vec();
        let mut x = centre.clone();
        fft_centered(&mut x, true);
        for (v, &t) in x.iter_mut().zip(theta) {
            *v *= Complex64::from_polar(1.0, 2.0 * t);
        }
        fft_centered(&mut x, false);
        NavigatorSet::new(centre.clone(), x, centre)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GhostEstimate {
    pub theta: Vec<f64>,
    /// Samples whose phase was undefined and came from the linear fit.
    pub filled: Vec<bool>,
}

/// Least-squares line `y ≈ a + b·x`; returns `(a, b)`.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - b * mx, b)
}

/// `θ = ∠ sqrt( (F⁻¹N1 + F⁻¹N3)* ∘ F⁻¹N2 )`, principal root, so
/// `θ ∈ (−π/2, π/2]`.
pub fn estimate_ghost_phase(nav: &NavigatorSet) -> Result<GhostEstimate> {
    let inv = |v: &[Complex64]| {
        let mut b = v.to_vec();
        fft_centered(&mut b, true);
        b
    };
    let (a1, a2, a3) = (inv(&nav.n1), inv(&nav.n2), inv(&nav.n3));
    let prod: Vec<Complex64> = a1.iter().zip(&a3).zip(&a2).map(|((x1, x3), x2)| (x1 + x3).conj() * x2).collect();
    let peak = prod.iter().map(|p| p.norm()).fold(0.0, f64::max);
    ensure!(peak > 0.0, Numerical, "navigators carry no signal");
    let filled: Vec<bool> = prod.iter().map(|p| p.norm() <= peak * 1e-12).collect();
    let mut theta: Vec<f64> = prod.iter().map(|p| p.sqrt().arg()).collect();
    if filled.iter().any(|&f| f) {
        let (xs, ys): (Vec<f64>, Vec<f64>) =
            theta.iter().enumerate().filter(|(i, _)| !filled[*i]).map(|(i, &t)| (i as f64, t)).unzip();
        let (a, b) = fit_line(&xs, &ys);
        for (i, t) in theta.iter_mut().enumerate() {
            if filled[i] {
                *t = a + b * i as f64;
            }
        }
    }
    Ok(GhostEstimate { theta, filled })
}

/// Forward rows times `e^{jθ}`, reverse rows times `e^{−jθ}`.
pub fn apply_ghost_correction(hybrid: &ComplexSlice, theta: &[f64]) -> Result<ComplexSlice> {
    ensure!(theta.len() == hybrid.width(), Dimension, "theta length {} vs width {}", theta.len(), hybrid.width());
    apply_row_phases(hybrid, |_| theta)
}

/// As [`apply_ghost_correction`] with a separate phase vector per row
/// (row `y` of `table`).
pub fn apply_ghost_correction_rows(hybrid: &ComplexSlice, table: &RealSlice) -> Result<ComplexSlice> {
    hybrid.check_same_shape(table)?;
    apply_row_phases(hybrid, |y| table.row(y))
}

fn apply_row_phases<'a>(hybrid: &ComplexSlice, theta: impl Fn(usize) -> &'a [f64]) -> Result<ComplexSlice> {
    ensure!(
        hybrid.domain() == Domain::HybridXky,
        Config,
        "ghost phase is applied in x-ky space, got {:?}",
        hybrid.domain()
    );
    let mut out = hybrid.clone();
    for y in 0..hybrid.height() {
        let sign = if is_forward_row(y) { 1.0 } else { -1.0 };
        for (v, &t) in out.row_mut(y).iter_mut().zip(theta(y)) {
            *v *= Complex64::from_polar(1.0, sign * t);
        }
    }
    Ok(out)
}

/// Per-row ghost template: in row `y`, a ramp from `+amplitude` at the first
/// tissue column to `−amplitude` at the last; zero elsewhere and in rows
/// with fewer than two tissue columns.
pub fn ghost_template(mask: &Mask, amplitude: f64) -> RealSlice {
    let mut t = RealSlice::zeros(mask.width(), mask.height());
    for y in 0..mask.height() {
        if let Some((first, last)) = mask.row_extent(y) {
            if last > first {
                let span = (last - first) as f64;
                for x in first..=last {
                    t.set(x, y, amplitude * (1.0 - 2.0 * (x - first) as f64 / span));
                }
            }
        }
    }
    t
}

/// Ghost introduction: to x-ky space, multiply forward (even) rows by
/// `e^{jθ̂}` and reverse (odd) rows by `e^{−jθ̂}`, back to image space.
/// Returns the ghosted image and `true` when the mask was empty (input
/// returned unchanged).
pub fn introduce_ghosting(image: &ComplexSlice, tissue: &Mask, amplitude: f64) -> Result<(ComplexSlice, bool)> {
    image.check_mask(tissue)?;
    ensure!(amplitude.is_finite(), Config, "ghost amplitude must be finite");
    if tissue.is_empty() {
        return Ok((image.clone(), true));
    }
    let hybrid = fft_cols(image, false)?;
    let ghosted = apply_ghost_correction_rows(&hybrid, &ghost_template(tissue, amplitude))?;
    Ok((fft_cols(&ghosted, true)?, false))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GhostSpec {
    pub amplitude: f64,
    pub tissue: Mask,
}

impl GhostSpec {
    pub fn none(width: usize, height: usize) -> Self {
        GhostSpec { amplitude: 0.0, tissue: Mask::empty(width, height) }
    }

    /// Correction that exactly cancels this ghosting.
    pub fn matched_correction(&self) -> GhostPhase {
        GhostPhase::PerRow(ghost_template(&self.tissue, -self.amplitude))
    }
}

/// How reconstruction obtains the ghost correction phase.
#[derive(Debug, Clone, PartialEq)]
pub enum GhostPhase {
    None,
    /// One phase vector shared by all rows.
    Uniform(Vec<f64>),
    /// A phase vector per hybrid row.
    PerRow(RealSlice),
    /// Estimated from navigator lines.
    Navigators(NavigatorSet),
}

/// A trajectory with its regridding kernel, built once and shared.
#[derive(Debug, Clone)]
pub struct EpiModel {
    pub waveform: GradientWaveform,
    pub trajectory: TrajectorySpec,
    pub kernel: RegridKernel,
}

impl EpiModel {
    pub fn new(waveform: GradientWaveform) -> Result<Self> {
        let trajectory = trajectory_from_gradient(&waveform)?;
        let kernel = build_regrid_kernel(&trajectory)?;
        Ok(EpiModel { waveform, trajectory, kernel })
    }
}

/// Image to acquired k-space: ghosting, FFT, `·R` per line, then optional
/// noise added in the image domain.
pub fn forward_epi(
    image: &ComplexSlice,
    kernel: &RegridKernel,
    ghost: &GhostSpec,
    noise: Option<&ComplexSlice>,
) -> Result<ComplexSlice> {
    ensure!(image.domain() == Domain::Image, Config, "forward model expects an image");
    let ghosted = if ghost.amplitude != 0.0 { introduce_ghosting(image, &ghost.tissue, ghost.amplitude)?.0 } else { image.clone() };
    let k = regrid_slice(&fft2(&ghosted)?, kernel, RegridDirection::ForwardModel)?;
    match noise {
        None => Ok(k),
        Some(n) => {
            let img = ifft2(&k)?;
            let noisy = img.zip_map(n, |a, b| a + b)?;
            fft2(&noisy)
        }
    }
}

/// Acquired k-space to image: `·Q` per line, inverse FFT along X, ghost
/// correction, inverse FFT along Y.
pub fn reconstruct_epi(kspace: &ComplexSlice, kernel: &RegridKernel, ghost_phase: &GhostPhase) -> Result<ComplexSlice> {
    let regridded = regrid_slice(kspace, kernel, RegridDirection::Reconstruct)?;
    let hybrid = fft_rows(&regridded, true)?;
    let corrected = match ghost_phase {
        GhostPhase::None => hybrid,
        GhostPhase::Uniform(theta) => apply_ghost_correction(&hybrid, theta)?,
        GhostPhase::PerRow(table) => apply_ghost_correction_rows(&hybrid, table)?,
        GhostPhase::Navigators(nav) => apply_ghost_correction(&hybrid, &estimate_ghost_phase(nav)?.theta)?,
    };
    fft_cols(&corrected, true)
}
