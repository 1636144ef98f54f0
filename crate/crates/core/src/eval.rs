//! Image quality metrics, repetition averaging, NEX read-off, residual
//! analysis and the derived diffusion quantities.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calibration::csv_error;
use crate::denoiser::{denoise, SrcnnModel};
use crate::error::{ensure, Error, Result};
use crate::par;
use crate::rng::{rng_for, stream};
use crate::slice::{modulus, ComplexSlice, Mask, RealSlice};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Slice,
    Tissue,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Slice => "slice",
            Region::Tissue => "tissue",
        })
    }
}

/// Both images with the background (outside `mask`) set to zero.
fn zero_background(test: &RealSlice, reference: &RealSlice, mask: Option<&Mask>) -> Result<(RealSlice, RealSlice)> {
    test.check_same_shape(reference)?;
    match mask {
        None => Ok((test.clone(), reference.clone())),
        Some(m) => Ok((m.apply(test)?, m.apply(reference)?)),
    }
}

fn region_values<'a>(s: &'a RealSlice, mask: Option<&'a Mask>) -> impl Iterator<Item = f64> + 'a {
    s.data().iter().enumerate().filter(move |(i, _)| mask.is_none_or(|m| m.data()[*i])).map(|(_, v)| *v)
}

/// `10·log10(peak² / MSE)`, peak = max of the reference over the region.
/// With a tissue mask the background of both images is zeroed and the MSE
/// runs over the whole slice. Identical images give `+∞`.
pub fn psnr(test: &RealSlice, reference: &RealSlice, mask: Option<&Mask>) -> Result<f64> {
    if let Some(m) = mask {
        ensure!(!m.is_empty(), Config, "empty evaluation region");
    }
    let (t, r) = zero_background(test, reference, mask)?;
    let mse = t.data().iter().zip(r.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = region_values(reference, mask).fold(f64::NEG_INFINITY, f64::max);
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter over valid window positions only.
fn valid_filter(data: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * data[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Local SSIM at every valid window position.
pub fn ssim_map(test: &RealSlice, reference: &RealSlice, dynamic_range: f64) -> Result<RealSlice> {
    test.check_same_shape(reference)?;
    ensure!(
        test.width() >= SSIM_WINDOW && test.height() >= SSIM_WINDOW,
        Dimension,
        "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels"
    );
    ensure!(dynamic_range > 0.0 && dynamic_range.is_finite(), Numerical, "SSIM dynamic range must be positive, got {dynamic_range}");
    let (w, h) = (test.width(), test.height());
    let k = ssim_kernel();
    let (x, y) = (test.data(), reference.data());
    let prod = |f: &dyn Fn(usize) -> f64| (0..x.len()).map(f).collect::<Vec<f64>>();
    let sources = [x.to_vec(), y.to_vec(), prod(&|i| x[i] * x[i]), prod(&|i| y[i] * y[i]), prod(&|i| x[i] * y[i])];
    let filtered = par::map_slice(&sources, |d| valid_filter(d, w, h, &k));
    let [mx, my, mxx, myy, mxy] = [&filtered[0], &filtered[1], &filtered[2], &filtered[3], &filtered[4]];
    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);
    let vals = (0..mx.len())
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let (va, vb, cov) = (mxx[i] - a * a, myy[i] - b * b, mxy[i] - a * b);
            ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (va + vb + c2))
        })
        .collect();
    RealSlice::new(w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1, vals, Default::default())
}

/// Mean SSIM with an explicit dynamic range `L`.
pub fn ssim_with_range(test: &RealSlice, reference: &RealSlice, mask: Option<&Mask>, dynamic_range: f64) -> Result<f64> {
    let (t, r) = zero_background(test, reference, mask)?;
    let m = ssim_map(&t, &r, dynamic_range)?;
    Ok(m.data().iter().sum::<f64>() / m.len() as f64)
}

/// Mean SSIM (11×11 Gaussian window, σ 1.5, K1 0.01, K2 0.03) with `L` the
/// reference range over the region; a tissue mask zeroes the background.
pub fn ssim(test: &RealSlice, reference: &RealSlice, mask: Option<&Mask>) -> Result<f64> {
    test.check_same_shape(reference)?;
    let (lo, hi) = region_values(reference, mask).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    ensure!(hi > lo, Numerical, "reference has zero dynamic range over the region");
    ssim_with_range(test, reference, mask, hi - lo)
}

/// Mean absolute difference over the region.
pub fn mae(test: &RealSlice, reference: &RealSlice, mask: Option<&Mask>) -> Result<f64> {
    test.check_same_shape(reference)?;
    if let Some(m) = mask {
        test.check_mask(m)?;
        ensure!(!m.is_empty(), Config, "empty evaluation region");
    }
    let (mut s, mut n) = (0.0, 0usize);
    for (i, (a, b)) in test.data().iter().zip(reference.data()).enumerate() {
        if mask.is_none_or(|m| m.data()[i]) {
            s += (a - b).abs();
            n += 1;
        }
    }
    Ok(s / n as f64)
}

pub fn abs_error_map(test: &RealSlice, reference: &RealSlice) -> Result<RealSlice> {
    test.zip_map(reference, |a, b| (a - b).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr_db: f64,
    pub ssim: f64,
    pub mae: f64,
}

pub fn metrics(test: &RealSlice, reference: &RealSlice, mask: Option<&Mask>) -> Result<Metrics> {
    Ok(Metrics { psnr_db: psnr(test, reference, mask)?, ssim: ssim(test, reference, mask)?, mae: mae(test, reference, mask)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AveragingDomain {
    Complex,
    Modulus,
}

impl fmt::Display for AveragingDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AveragingDomain::Complex => "complex",
            AveragingDomain::Modulus => "modulus",
        })
    }
}

/// Complex: modulus of the complex mean. Modulus: mean of the moduli.
pub fn average_repetitions(instances: &[ComplexSlice], domain: AveragingDomain) -> Result<RealSlice> {
    ensure!(!instances.is_empty(), Config, "no repetitions to average");
    let first = &instances[0];
    for s in &instances[1..] {
        first.check_same_shape(s)?;
    }
    // running means keep identical repetitions exact
    Ok(match domain {
        AveragingDomain::Complex => {
            let mut acc = first.clone();
            for (k, s) in instances.iter().enumerate().skip(1) {
                acc.data_mut().iter_mut().zip(s.data()).for_each(|(a, b)| *a += (b - *a) / (k + 1) as f64);
            }
            modulus(&acc)
        }
        AveragingDomain::Modulus => {
            let mut acc = modulus(first);
            for (k, s) in instances.iter().enumerate().skip(1) {
                acc.data_mut().iter_mut().zip(s.data()).for_each(|(a, b)| *a += (b.norm() - *a) / (k + 1) as f64);
            }
            acc
        }
    })
}

/// Metric of the k-instance average against a reference, for k = 1..=n_max.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NexCurve {
    pub domain: AveragingDomain,
    pub metric: String,
    pub values: Vec<f64>,
}

impl NexCurve {
    pub fn n_max(&self) -> usize {
        self.values.len()
    }

    /// 1-based NEX of the maximum value (first on ties).
    pub fn argmax_nex(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best + 1
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["nex", "value"]).map_err(|e| csv_error(path, e))?;
        for (i, v) in self.values.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{v:.17e}")]).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Average of the first `k` instances for every `k = 1..=len`.
pub fn running_averages(instances: &[ComplexSlice], domain: AveragingDomain) -> Result<Vec<RealSlice>> {
    ensure!(!instances.is_empty(), Config, "no repetitions to average");
    let mut averages = Vec::with_capacity(instances.len());
    let mut acc_c = ComplexSlice::zeros(instances[0].width(), instances[0].height());
    let mut acc_m = RealSlice::zeros(instances[0].width(), instances[0].height());
    for (k, s) in instances.iter().enumerate() {
        acc_c.check_same_shape(s)?;
        let n = (k + 1) as f64;
        match domain {
            AveragingDomain::Complex => {
                acc_c.data_mut().iter_mut().zip(s.data()).for_each(|(a, b)| *a += (b - *a) / n);
                averages.push(modulus(&acc_c));
            }
            AveragingDomain::Modulus => {
                acc_m.data_mut().iter_mut().zip(s.data()).for_each(|(a, b)| *a += (b.norm() - *a) / n);
                averages.push(acc_m.clone());
            }
        }
    }
    Ok(averages)
}

/// Builds running averages of `instances` and evaluates `metric(average,
/// reference)` at every prefix length.
pub fn nex_curve_from_instances<F>(
    reference: &RealSlice,
    instances: &[ComplexSlice],
    metric_name: &str,
    metric: F,
    domain: AveragingDomain,
) -> Result<NexCurve>
where
    F: Fn(&RealSlice, &RealSlice) -> Result<f64> + Sync + Send,
{
    let averages = running_averages(instances, domain)?;
    let values: Vec<Result<f64>> = par::map_slice(&averages, |a| metric(a, reference));
    Ok(NexCurve { domain, metric: metric_name.into(), values: values.into_iter().collect::<Result<_>>()? })
}

/// `generator(k)` must return the same instance for the same `k` (0-based).
pub fn nex_curve<G, F>(
    reference: &RealSlice,
    generator: G,
    metric_name: &str,
    metric: F,
    domain: AveragingDomain,
    n_max: usize,
) -> Result<NexCurve>
where
    G: Fn(usize) -> Result<ComplexSlice> + Sync + Send,
    F: Fn(&RealSlice, &RealSlice) -> Result<f64> + Sync + Send,
{
    ensure!(n_max >= 1, Config, "n_max must be at least 1");
    let instances = par::map_range(n_max, generator).into_iter().collect::<Result<Vec<_>>>()?;
    nex_curve_from_instances(reference, &instances, metric_name, metric, domain)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NexEquivalent {
    Nex(usize),
    /// No averaged value reached the denoised one; carries `n_max`.
    Beyond(usize),
}

impl fmt::Display for NexEquivalent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NexEquivalent::Nex(k) => write!(f, "{k}"),
            NexEquivalent::Beyond(n) => write!(f, ">{n}"),
        }
    }
}

/// Smallest NEX whose averaged value reaches `denoised_value`.
pub fn nex_equivalent(curve: &[f64], denoised_value: f64) -> NexEquivalent {
    curve.iter().position(|v| *v >= denoised_value).map_or(NexEquivalent::Beyond(curve.len()), |i| NexEquivalent::Nex(i + 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualAnalysis {
    /// Pixelwise mean of the network's noise estimates.
    pub mean_estimate: RealSlice,
    /// Pixelwise std (n − 1) of the denoised outputs.
    pub std_denoised: RealSlice,
    /// Pixelwise std (n − 1) of the noisy inputs.
    pub std_noisy: RealSlice,
}

impl ResidualAnalysis {
    /// Mean of `std_noisy / std_denoised` over a region.
    pub fn std_reduction(&self, region: &Mask) -> Result<f64> {
        self.std_noisy.check_mask(region)?;
        ensure!(!region.is_empty(), Config, "empty analysis region");
        let noisy: f64 = region_values(&self.std_noisy, Some(region)).sum();
        let den: f64 = region_values(&self.std_denoised, Some(region)).sum();
        ensure!(den > 0.0, Numerical, "denoised output has zero variance over the region");
        Ok(noisy / den)
    }
}

fn welford_std(sum: &[f64], sum_sq: &[f64], n: usize) -> Vec<f64> {
    let nf = n as f64;
    sum.iter().zip(sum_sq).map(|(s, q)| ((q - s * s / nf) / (nf - 1.0)).max(0.0).sqrt()).collect()
}

/// Denoises `n_instances` copies of `clean` with fresh unit Gaussian noise.
pub fn residual_mean_analysis(model: &SrcnnModel, clean: &RealSlice, n_instances: usize, seed: u64) -> Result<ResidualAnalysis> {
    ensure!(n_instances >= 2, Config, "residual analysis needs at least 2 instances");
    let len = clean.len();
    let (mut est_sum, mut den_sum, mut den_sq, mut noisy_sum, mut noisy_sq) =
        (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]);
    let chunk = 8;
    for start in (0..n_instances).step_by(chunk) {
        let ids: Vec<usize> = (start..(start + chunk).min(n_instances)).collect();
        let outs = par::map_slice(&ids, |&i| -> Result<(RealSlice, RealSlice, RealSlice)> {
            let mut rng = rng_for(seed, &[stream::RESIDUAL, i as u64]);
            let noisy = RealSlice::from_fn(clean.width(), clean.height(), |x, y| clean.get(x, y) + rng.sample::<f64, _>(StandardNormal));
            let d = denoise(model, &noisy)?;
            Ok((noisy, d.denoised, d.noise_estimate))
        });
        for o in outs {
            let (noisy, den, est) = o?;
            for j in 0..len {
                let (a, b, c) = (noisy.data()[j], den.data()[j], est.data()[j]);
                est_sum[j] += c;
                den_sum[j] += b;
                den_sq[j] += b * b;
                noisy_sum[j] += a;
                noisy_sq[j] += a * a;
            }
        }
    }
    let n = n_instances as f64;
    let mk = |v: Vec<f64>| clean.with_data(v);
    Ok(ResidualAnalysis {
        mean_estimate: mk(est_sum.iter().map(|v| v / n).collect()),
        std_denoised: mk(welford_std(&den_sum, &den_sq, n_instances)),
        std_noisy: mk(welford_std(&noisy_sum, &noisy_sq, n_instances)),
    })
}

/// Row `row_1based` (1 = top row) of the slice.
pub fn intensity_profile(slice: &RealSlice, row_1based: usize) -> Result<Vec<f64>> {
    ensure!(
        (1..=slice.height()).contains(&row_1based),
        Config,
        "profile row {row_1based} outside 1..={}",
        slice.height()
    );
    Ok(slice.row(row_1based - 1).to_vec())
}

/// CSV with an `x` column (0-based) and one column per named series.
pub fn write_profiles_csv(path: &Path, series: &[(&str, &[f64])]) -> Result<()> {
    ensure!(!series.is_empty(), Config, "no profiles to write");
    let n = series[0].1.len();
    ensure!(series.iter().all(|s| s.1.len() == n), Dimension, "profiles differ in length");
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["x".to_string()];
    header.extend(series.iter().map(|s| s.0.to_string()));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..n {
        let mut rec = vec![i.to_string()];
        rec.extend(series.iter().map(|s| format!("{:.17e}", s.1[i])));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn root_sum_of_squares(coils: &[RealSlice]) -> Result<RealSlice> {
    ensure!(!coils.is_empty(), Config, "no coil images to combine");
    let mut acc = coils[0].map(|v| v * v);
    for c in &coils[1..] {
        acc = acc.zip_map(c, |a, b| a + b * b)?;
    }
    Ok(acc.map(f64::sqrt))
}

/// Pixelwise geometric mean over diffusion directions.
pub fn trace_image(directions: &[RealSlice]) -> Result<RealSlice> {
    ensure!(!directions.is_empty(), Config, "no diffusion directions");
    for d in directions {
        directions[0].check_same_shape(d)?;
        ensure!(d.data().iter().all(|v| *v >= 0.0), Format, "trace image inputs must be non-negative");
    }
    let n = directions.len() as f64;
    Ok(RealSlice::from_fn(directions[0].width(), directions[0].height(), |x, y| {
        let vals: Vec<f64> = directions.iter().map(|d| d.get(x, y)).collect();
        if vals.iter().any(|v| *v == 0.0) {
            0.0
        } else {
            (vals.iter().map(|v| v.ln()).sum::<f64>() / n).exp()
        }
    })
    .with_spacing(directions[0].spacing()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdcMap {
    pub adc: RealSlice,
    /// Pixels with at least two positive samples at distinct b-values.
    pub fitted: Mask,
}

/// Least-squares `ADC = −d ln S / d b` per pixel over the positive samples.
pub fn adc_map(b_values: &[f64], images: &[RealSlice]) -> Result<AdcMap> {
    ensure!(b_values.len() == images.len(), Dimension, "{} b-values for {} images", b_values.len(), images.len());
    let mut distinct = b_values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    ensure!(distinct.len() >= 2, Config, "ADC fitting needs at least 2 distinct b-values");
    for im in images {
        images[0].check_same_shape(im)?;
    }
    let (w, h) = (images[0].width(), images[0].height());
    let mut fitted = Mask::empty(w, h);
    let mut adc = RealSlice::zeros(w, h).with_spacing(images[0].spacing());
    for y in 0..h {
        for x in 0..w {
            let pts: Vec<(f64, f64)> =
                b_values.iter().zip(images).filter(|(_, im)| im.get(x, y) > 0.0).map(|(b, im)| (*b, im.get(x, y).ln())).collect();
            if pts.len() < 2 || pts.iter().all(|p| p.0 == pts[0].0) {
                continue;
            }
            let n = pts.len() as f64;
            let (mb, ml) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
            let sbb: f64 = pts.iter().map(|p| (p.0 - mb) * (p.0 - mb)).sum();
            let sbl: f64 = pts.iter().map(|p| (p.0 - mb) * (p.1 - ml)).sum();
            adc.set(x, y, -sbl / sbb);
            fitted.set(x, y, true);
        }
    }
    Ok(AdcMap { adc, fitted })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub snr: f64,
    pub nex: String,
    pub domain: String,
    pub region: Region,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mae: f64,
}

/// CSV with `snr,nex,domain,region,psnr_db,ssim,mae`; `+∞` PSNR is written as `inf`.
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["snr", "nex", "domain", "region", "psnr_db", "ssim", "mae"]).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([
            r.snr.to_string(),
            r.nex.clone(),
            r.domain.clone(),
            r.region.to_string(),
            format!("{:.10}", r.psnr_db),
            format!("{:.10}", r.ssim),
            format!("{:.10}", r.mae),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
