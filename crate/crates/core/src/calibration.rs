//! Noise maps and their normalisation, SNR scaling, and edge-spread PSF
//! estimation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::SimRng;
use crate::slice::{Complex64, ComplexSlice, Mask, RealSlice, Volume};

pub use crate::filter::gaussian_blur;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMap {
    pub data: ComplexSlice,
    pub declared_std: f64,
    pub profile: Option<Vec<f64>>,
}

/// Zero-mean Gaussian noise, unit std per component, column `x` scaled by
/// `profile[x]` when a profile is given. Samples are drawn row by row, real
/// part first.
pub fn generate_noise_map(seed: u64, width: usize, height: usize, profile: Option<&[f64]>) -> Result<NoiseMap> {
    ensure!(width > 0 && height > 0, Config, "noise map dimensions must be positive");
    if let Some(p) = profile {
        ensure!(p.len() == width, Dimension, "profile length {} vs width {width}", p.len());
        ensure!(p.iter().all(|&v| v >= 0.0 && v.is_finite()), Config, "noise profile must be non-negative");
    }
    let mut rng = SimRng::seed_from_u64(seed);
    let data = ComplexSlice::from_fn(width, height, |x, _| {
        let s = profile.map_or(1.0, |p| p[x]);
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re * s, im * s)
    });
    Ok(NoiseMap { data, declared_std: 1.0, profile: profile.map(<[f64]>::to_vec) })
}

/// Per-column noise std along the frequency-encoding axis.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseProfile {
    pub std: Vec<f64>,
    /// Columns that had at least two background samples.
    pub valid: Vec<bool>,
}

impl NoiseProfile {
    pub fn valid_columns(&self) -> Vec<usize> {
        (0..self.std.len()).filter(|&i| self.valid[i]).collect()
    }

    /// CSV with `column_index,std,is_background`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["column_index", "std", "is_background"]).map_err(|e| csv_error(path, e))?;
        for (i, (s, v)) in self.std.iter().zip(&self.valid).enumerate() {
            w.write_record([i.to_string(), format!("{s:.17e}"), v.to_string()]).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Sample std (n−1) of every column over the background pixels of all
/// repetitions.
pub fn noise_std_profile(samples: &[RealSlice], background: &Mask) -> Result<NoiseProfile> {
    ensure!(samples.len() >= 2, Config, "a noise profile needs at least 2 repetitions, got {}", samples.len());
    for s in samples {
        s.check_mask(background)?;
    }
    let (w, h) = (background.width(), background.height());
    let mut std = vec![0.0; w];
    let mut valid = vec![false; w];
    for x in 0..w {
        let vals: Vec<f64> =
            (0..h).filter(|&y| background.get(x, y)).flat_map(|y| samples.iter().map(move |s| s.get(x, y))).collect();
        if vals.len() < 2 {
            continue;
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64;
        std[x] = var.sqrt();
        valid[x] = true;
    }
    Ok(NoiseProfile { std, valid })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchObjective {
    /// `argmin Σ (s·p − r)²`, closed form.
    #[default]
    LeastSquares,
    /// `argmin Σ |s·p − r|`, a weighted median of `r/p`.
    AbsoluteError,
}

/// Scale `s` that brings `image` onto `reference` over `columns`.
pub fn match_noise_scale(image: &[f64], reference: &[f64], columns: &[usize], objective: MatchObjective) -> Result<f64> {
    ensure!(image.len() == reference.len(), Dimension, "profile lengths {} vs {}", image.len(), reference.len());
    ensure!(!columns.is_empty(), Config, "no background columns to match over");
    ensure!(columns.iter().all(|&c| c < image.len()), Dimension, "background column out of range");
    let pairs: Vec<(f64, f64)> = columns.iter().map(|&c| (image[c], reference[c])).collect();
    let spp: f64 = pairs.iter().map(|(p, _)| p * p).sum();
    ensure!(spp > 0.0, Numerical, "image noise profile is zero over the background columns");
    match objective {
        MatchObjective::LeastSquares => Ok(pairs.iter().map(|(p, r)| p * r).sum::<f64>() / spp),
        MatchObjective::AbsoluteError => {
            let mut ratios: Vec<(f64, f64)> =
                pairs.iter().filter(|(p, _)| *p > 0.0).map(|(p, r)| (r / p, *p)).collect();
            ratios.sort_by(|a, b| a.0.total_cmp(&b.0));
            let total: f64 = ratios.iter().map(|r| r.1).sum();
            let mut acc = 0.0;
            for (ratio, wgt) in &ratios {
                acc += wgt;
                if acc >= 0.5 * total {
                    return Ok(*ratio);
                }
            }
            Ok(ratios.last().map(|r| r.0).unwrap_or(1.0))
        }
    }
}

/// Mean of `slice` over `mask`.
pub fn masked_mean(slice: &RealSlice, mask: &Mask) -> Result<f64> {
    slice.check_mask(mask)?;
    ensure!(!mask.is_empty(), Config, "object mask is empty");
    let s: f64 = slice.data().iter().zip(mask.data()).filter(|(_, &m)| m).map(|(v, _)| v).sum();
    Ok(s / mask.count() as f64)
}

/// Rescale so the mean over `mask` equals `target_snr` (noise std is 1 by
/// convention).
pub fn scale_to_snr(slice: &RealSlice, mask: &Mask, target_snr: f64) -> Result<RealSlice> {
    ensure!(target_snr > 0.0, Config, "target SNR must be positive");
    let m = masked_mean(slice, mask)?;
    ensure!(m != 0.0, Numerical, "object mean is zero");
    Ok(slice.scale(target_snr / m))
}

/// Volume version of [`scale_to_snr`]: one mask for every slice and a single
/// mean over all of them.
pub fn set_snr(vol: &Volume<RealSlice>, mask: &Mask, target_snr: f64) -> Result<Volume<RealSlice>> {
    ensure!(target_snr > 0.0, Config, "target SNR must be positive");
    ensure!(!mask.is_empty(), Config, "object mask is empty");
    let mut total = 0.0;
    for s in vol.slices() {
        total += masked_mean(s, mask)?;
    }
    let m = total / vol.depth() as f64;
    ensure!(m != 0.0, Numerical, "object mean is zero");
    let k = target_snr / m;
    Volume::new(vol.slices().iter().map(|s| s.scale(k)).collect(), vol.slice_thickness())
}

pub fn add_noise(slice: &ComplexSlice, noise: &NoiseMap) -> Result<ComplexSlice> {
    slice.zip_map(&noise.data, |a, b| a + b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsfEstimate {
    pub sigma: f64,
    pub edge_center: f64,
    pub low: f64,
    pub high: f64,
    /// Sum of squared residuals.
    pub fit_residual: f64,
}

fn phi(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// Best `(a, b, rss)` for fixed `(x0, σ)`; σ = 0 is a hard step.
fn linear_fit(profile: &[f64], x0: f64, sigma: f64) -> (f64, f64, f64) {
    let basis: Vec<f64> = (0..profile.len())
        .map(|i| {
            let d = i as f64 - x0;
            if sigma > 0.0 {
                phi(d / sigma)
            } else if d > 0.0 {
                1.0
            } else if d < 0.0 {
                0.0
            } else {
                0.5
            }
        })
        .collect();
    let n = profile.len() as f64;
    let (mx, my) = (basis.iter().sum::<f64>() / n, profile.iter().sum::<f64>() / n);
    let sxx: f64 = basis.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = basis.iter().zip(profile).map(|(u, v)| (u - mx) * (v - my)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let a = my - b * mx;
    let rss = basis.iter().zip(profile).map(|(u, v)| (a + b * u - v).powi(2)).sum();
    (a, b, rss)
}

fn golden(mut lo: f64, mut hi: f64, iters: usize, f: impl Fn(f64) -> f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Fit `I(x) = a + b·Φ((x − x0)/σ)` to an edge profile sampled at integer
/// positions. A coarse grid over `(x0, σ)` is refined by nested golden
/// section searches; `(a, b)` are solved in closed form at every step.
pub fn estimate_psf_sigma(profile: &[f64]) -> Result<PsfEstimate> {
    let n = profile.len();
    ensure!(n >= 8, Config, "edge profile needs at least 8 samples, got {n}");
    ensure!(profile.iter().all(|v| v.is_finite()), Format, "edge profile has non-finite samples");
    let mean = profile.iter().sum::<f64>() / n as f64;
    let tss: f64 = profile.iter().map(|v| (v - mean) * (v - mean)).sum();
    ensure!(tss > 0.0, Numerical, "edge profile is flat");

    let sigma_max = n as f64 / 4.0;
    let x_step = 0.25;
    let s_grid: Vec<f64> = std::iter::once(0.0).chain((0..40).map(|i| 0.05 * 1.12f64.powi(i))).filter(|&s| s <= sigma_max).collect();
    let mut best = (f64::INFINITY, 0.0, 0.0, 0);
    for xi in 0..=((n - 1) as f64 / x_step) as usize {
        let x0 = xi as f64 * x_step;
        for (si, &s) in s_grid.iter().enumerate() {
            let rss = linear_fit(profile, x0, s).2;
            if rss < best.0 {
                best = (rss, x0, s, si);
            }
        }
    }
    let (_, bx, _, bsi) = best;
    let s_lo = if bsi == 0 { 0.0 } else { s_grid[bsi - 1] };
    let s_hi = s_grid.get(bsi + 1).copied().unwrap_or(sigma_max);
    let inner = |s: f64| golden(bx - 2.0 * x_step, bx + 2.0 * x_step, 60, |x| linear_fit(profile, x, s).2);
    let (sigma, _) = golden(s_lo, s_hi, 60, |s| inner(s).1);
    let (x0, _) = inner(sigma);
    let (a, b, rss) = linear_fit(profile, x0, sigma);
    // keep the grid optimum if refinement did not help (flat valleys)
    let (sigma, x0, a, b, rss) = if rss <= best.0 {
        (sigma, x0, a, b, rss)
    } else {
        let (a, b, r) = linear_fit(profile, best.1, best.2);
        (best.2, best.1, a, b, r)
    };
    if rss > 0.5 * tss {
        return Err(Error::Numerical(format!(
            "edge fit is unreliable: residual {rss:.3e} exceeds half the profile variance {:.3e}",
            0.5 * tss
        )));
    }
    Ok(PsfEstimate { sigma, edge_center: x0, low: a, high: a + b, fit_residual: rss })
}
