//! Smooth phase maps from bivariate polynomials, and their application to
//! modulus images.
//!
//! Polynomials are evaluated on normalised coordinates
//! `x̃ = 2x/(w−1) − 1`, `ỹ = 2y/(h−1) − 1`, so both axes span `[−1, 1]`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::filter::gaussian_blur;
use crate::slice::{Complex64, ComplexSlice, Mask, RealSlice};

/// Radians per pixel.
pub type PhaseMap = RealSlice;

/// Coefficient of `x̃^p ỹ^q` lives at `coeffs[p * (degree + 1) + q]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyCoeffs {
    pub degree: usize,
    pub coeffs: Vec<f64>,
}

impl PolyCoeffs {
    pub fn new(degree: usize, coeffs: Vec<f64>) -> Result<Self> {
        ensure!(degree == 1 || degree == 3, Config, "polynomial degree must be 1 or 3, got {degree}");
        ensure!(
            coeffs.len() == (degree + 1) * (degree + 1),
            Config,
            "degree {degree} needs {} coefficients, got {}",
            (degree + 1) * (degree + 1),
            coeffs.len()
        );
        Ok(PolyCoeffs { degree, coeffs })
    }

    pub fn zeros(degree: usize) -> Self {
        PolyCoeffs { degree, coeffs: vec![0.0; (degree + 1) * (degree + 1)] }
    }

    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.coeffs[p * (self.degree + 1) + q]
    }

    pub fn set(&mut self, p: usize, q: usize, v: f64) {
        self.coeffs[p * (self.degree + 1) + q] = v;
    }

    pub fn eval(&self, xn: f64, yn: f64) -> f64 {
        let n = self.degree + 1;
        let mut acc = 0.0;
        let mut xp = 1.0;
        for p in 0..n {
            let mut yq = 1.0;
            for q in 0..n {
                acc += self.coeffs[p * n + q] * xp * yq;
                yq *= yn;
            }
            xp *= xn;
        }
        acc
    }
}

pub fn normalized(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

pub fn evaluate_poly(c: &PolyCoeffs, width: usize, height: usize) -> PhaseMap {
    RealSlice::from_fn(width, height, |x, y| c.eval(normalized(x, width), normalized(y, height)))
}

/// Least-squares fit over the masked pixels. Returns the coefficients and
/// the residual norm `sqrt(Σ_mask (θ − poly)²)`.
pub fn fit_polynomial_phase(map: &PhaseMap, mask: &Mask, degree: usize) -> Result<(PolyCoeffs, f64)> {
    map.check_mask(mask)?;
    let n = degree + 1;
    let ncoef = n * n;
    PolyCoeffs::new(degree, vec![0.0; ncoef])?;
    let pts: Vec<(usize, usize)> = (0..map.height())
        .flat_map(|y| (0..map.width()).map(move |x| (x, y)))
        .filter(|&(x, y)| mask.get(x, y))
        .collect();
    ensure!(
        pts.len() >= ncoef,
        Numerical,
        "fit needs at least {ncoef} masked pixels, mask has {}",
        pts.len()
    );
    let (w, h) = (map.width(), map.height());
    let a = DMatrix::from_fn(pts.len(), ncoef, |r, k| {
        let (x, y) = pts[r];
        normalized(x, w).powi((k / n) as i32) * normalized(y, h).powi((k % n) as i32)
    });
    let b = DVector::from_iterator(pts.len(), pts.iter().map(|&(x, y)| map.get(x, y)));
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    ensure!(
        smax > 0.0 && smin / smax > 1e-10,
        Numerical,
        "polynomial fit is rank deficient (singular value ratio {:e})",
        if smax > 0.0 { smin / smax } else { 0.0 }
    );
    let sol = svd.solve(&b, 0.0).map_err(|e| crate::Error::Numerical(e.to_string()))?;
    let resid = (&a * &sol - &b).norm();
    Ok((PolyCoeffs { degree, coeffs: sol.iter().copied().collect() }, resid))
}

/// `inside` inside the mask, `outside` elsewhere, then `passes` successive
/// Gaussian blurs.
pub fn compose_phase_map(
    inside: &PolyCoeffs,
    outside: &PolyCoeffs,
    mask: &Mask,
    blur_sigma: f64,
    blur_passes: usize,
) -> Result<PhaseMap> {
    ensure!(blur_sigma >= 0.0, Config, "blur sigma must be non-negative");
    let (w, h) = (mask.width(), mask.height());
    let mut map = RealSlice::from_fn(w, h, |x, y| {
        let c = if mask.get(x, y) { inside } else { outside };
        c.eval(normalized(x, w), normalized(y, h))
    });
    for _ in 0..blur_passes {
        map = gaussian_blur(&map, blur_sigma);
    }
    Ok(map)
}

/// `I_m · e^{jθ}`.
pub fn apply_phase(image: &RealSlice, phase: &PhaseMap) -> Result<ComplexSlice> {
    image.zip_map(phase, |m, t| Complex64::from_polar(m, t))
}

/// Ranges for randomly drawn phase polynomials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSynthesis {
    pub c00_max: f64,
    pub higher_max: f64,
    pub blur_sigma: f64,
    pub blur_passes: usize,
}

impl Default for PhaseSynthesis {
    fn default() -> Self {
        PhaseSynthesis { c00_max: PI, higher_max: 1.0, blur_sigma: 0.75, blur_passes: 5 }
    }
}

/// Uniform coefficients: `|c00| <= c00_max`, every other `|c_pq| <= higher_max`.
pub fn random_poly<R: Rng>(rng: &mut R, degree: usize, c00_max: f64, higher_max: f64) -> PolyCoeffs {
    let mut c = PolyCoeffs::zeros(degree);
    for (i, v) in c.coeffs.iter_mut().enumerate() {
        let bound = if i == 0 { c00_max } else { higher_max };
        *v = if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 };
    }
    c
}

/// A random bicubic field inside the mask joined to the bilinear part of the
/// same coefficients outside it, smoothed at the seam.
pub fn random_phase_map<R: Rng>(rng: &mut R, mask: &Mask, cfg: &PhaseSynthesis) -> Result<PhaseMap> {
    let inside = random_poly(rng, 3, cfg.c00_max, cfg.higher_max);
    let mut outside = PolyCoeffs::zeros(1);
    for p in 0..2 {
        for q in 0..2 {
            outside.set(p, q, inside.get(p, q));
        }
    }
    compose_phase_map(&inside, &outside, mask, cfg.blur_sigma, cfg.blur_passes)
}
