//! In-plane affine motion between repetitions, registration back to the
//! reference pose, and MSE-driven affine estimation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::par;
use crate::rng::SimRng;
use crate::slice::{RealSlice, Sample, Slice};

/// `p' = A·(p − c) + c + t`, with `c` the slice centre and `t` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub linear: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub const fn identity() -> Self {
        Self { linear: [[1.0, 0.0], [0.0, 1.0]], translation: [0.0, 0.0] }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { translation: [tx, ty], ..Self::identity() }
    }

    /// Rotation by `rotation_deg` (positive turns +x towards +y), isotropic
    /// scale, then translation.
    pub fn similarity(tx: f64, ty: f64, rotation_deg: f64, scale: f64) -> Self {
        let (s, c) = rotation_deg.to_radians().sin_cos();
        Self { linear: [[scale * c, -scale * s], [scale * s, scale * c]], translation: [tx, ty] }
    }

    pub fn det(&self) -> f64 {
        let a = self.linear;
        a[0][0] * a[1][1] - a[0][1] * a[1][0]
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn check_invertible(&self) -> Result<()> {
        let d = self.det();
        ensure!(d.is_finite() && d.abs() > 1e-6, Numerical, "singular affine transform (det {d:e})");
        ensure!(self.translation.iter().all(|v| v.is_finite()), Numerical, "non-finite translation");
        Ok(())
    }

    pub fn inverse(&self) -> Result<Self> {
        self.check_invertible()?;
        if self.linear == Self::identity().linear {
            return Ok(Self::translation(-self.translation[0], -self.translation[1]));
        }
        let d = self.det();
        let a = self.linear;
        let inv = [[a[1][1] / d, -a[0][1] / d], [-a[1][0] / d, a[0][0] / d]];
        let t = self.translation;
        let it = [-(inv[0][0] * t[0] + inv[0][1] * t[1]), -(inv[1][0] * t[0] + inv[1][1] * t[1])];
        Ok(Self { linear: inv, translation: it })
    }

    /// Maps a centred offset `p − c`.
    pub fn map_centred(&self, p: [f64; 2]) -> [f64; 2] {
        let a = self.linear;
        [
            a[0][0] * p[0] + a[0][1] * p[1] + self.translation[0],
            a[1][0] * p[0] + a[1][1] * p[1] + self.translation[1],
        ]
    }

    /// Rotation angle of the linear part, in degrees.
    pub fn rotation_deg(&self) -> f64 {
        self.linear[1][0].atan2(self.linear[0][0]).to_degrees()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Nearest,
    Bicubic,
}

/// Keys cubic convolution weights, a = −0.5, for taps at offsets −1..=2.
fn keys_weights(f: f64) -> [f64; 4] {
    const A: f64 = -0.5;
    let near = |t: f64| ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0;
    let far = |t: f64| ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A;
    [far(1.0 + f), near(f), near(1.0 - f), far(2.0 - f)]
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

fn sample_at<T: Sample>(src: &Slice<T>, x: f64, y: f64, interp: Interpolation) -> T {
    let (w, h) = (src.width() as isize, src.height() as isize);
    match interp {
        Interpolation::Nearest => {
            let (ix, iy) = (x.round() as isize, y.round() as isize);
            if ix < 0 || iy < 0 || ix >= w || iy >= h {
                T::default()
            } else {
                src.get(ix as usize, iy as usize)
            }
        }
        Interpolation::Bicubic => {
            if x < -0.5 || y < -0.5 || x > w as f64 - 0.5 || y > h as f64 - 0.5 {
                return T::default();
            }
            let (fx, fy) = (x.floor(), y.floor());
            let (wx, wy) = (keys_weights(x - fx), keys_weights(y - fy));
            let (x0, y0) = (fx as isize - 1, fy as isize - 1);
            let mut acc = T::default();
            for (j, &cy) in wy.iter().enumerate() {
                let yy = y0 + j as isize;
                if cy == 0.0 || yy < 0 || yy >= h {
                    continue;
                }
                let mut row = T::default();
                for (i, &cx) in wx.iter().enumerate() {
                    let xx = x0 + i as isize;
                    if cx == 0.0 || xx < 0 || xx >= w {
                        continue;
                    }
                    row += src.get(xx as usize, yy as usize) * cx;
                }
                acc += row * cy;
            }
            acc
        }
    }
}

/// `output(p) = input(t⁻¹(p))`; samples falling outside the slice are zero.
pub fn apply_affine<T: Sample>(slice: &Slice<T>, t: &AffineTransform, interp: Interpolation) -> Result<Slice<T>> {
    let inv = t.inverse()?;
    if t.is_identity() {
        return Ok(slice.clone());
    }
    let (w, h) = (slice.width(), slice.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let rows = par::map_range(h, |y| {
        (0..w)
            .map(|x| {
                let q = inv.map_centred([x as f64 - cx, y as f64 - cy]);
                sample_at(slice, snap(q[0] + cx), snap(q[1] + cy), interp)
            })
            .collect::<Vec<T>>()
    });
    Ok(slice.with_data(rows.concat()))
}

/// Undo a known transform with bicubic resampling.
pub fn register_back<T: Sample>(slice: &Slice<T>, known: &AffineTransform) -> Result<Slice<T>> {
    apply_affine(slice, &known.inverse()?, Interpolation::Bicubic)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationParams {
    pub levels: usize,
    /// Coordinate-descent sweeps per pyramid level.
    pub iters: usize,
    /// Initial step sizes: pixels (at full resolution), degrees, scale.
    pub translation_step: f64,
    pub rotation_step: f64,
    pub scale_step: f64,
    pub tolerance_px: f64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self { levels: 3, iters: 200, translation_step: 2.0, rotation_step: 2.0, scale_step: 0.02, tolerance_px: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Registration {
    /// Transform with `moving ≈ apply_affine(fixed, transform)`.
    pub transform: AffineTransform,
    pub mse: f64,
    /// Set when the sweep budget ran out or the alignment explains less
    /// than half of the combined image variance.
    pub warning: bool,
}

fn downsample(s: &RealSlice) -> RealSlice {
    let (w, h) = ((s.width() / 2).max(1), (s.height() / 2).max(1));
    RealSlice::from_fn(w, h, |x, y| {
        let mut acc = 0.0;
        let mut n = 0.0;
        for dy in 0..2 {
            for dx in 0..2 {
                let (xx, yy) = (2 * x + dx, 2 * y + dy);
                if xx < s.width() && yy < s.height() {
                    acc += s.get(xx, yy);
                    n += 1.0;
                }
            }
        }
        acc / n
    })
}

fn mse(a: &RealSlice, b: &RealSlice) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn variance(a: &RealSlice) -> f64 {
    let n = a.len() as f64;
    let m = a.data().iter().sum::<f64>() / n;
    a.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
}

/// Multi-resolution coordinate descent over translation, rotation and
/// isotropic scale, minimising `MSE(fixed, register_back(moving, T))`.
pub fn estimate_affine(fixed: &RealSlice, moving: &RealSlice, params: &RegistrationParams) -> Result<Registration> {
    fixed.check_same_shape(moving)?;
    ensure!(params.levels >= 1 && params.iters >= 1, Config, "registration needs at least one level and one sweep");
    let mut pyramid = vec![(fixed.clone(), moving.clone())];
    for _ in 1..params.levels {
        let (f, m) = pyramid.last().unwrap();
        if f.width() < 16 || f.height() < 16 {
            break;
        }
        pyramid.push((downsample(f), downsample(m)));
    }
    // tx, ty (full-resolution pixels), rotation (deg), scale
    let mut p = [0.0, 0.0, 0.0, 1.0];
    let mut exhausted = false;
    let to_t = |p: &[f64; 4], factor: f64| AffineTransform::similarity(p[0] / factor, p[1] / factor, p[2], p[3]);
    for (level, (f, m)) in pyramid.iter().enumerate().rev() {
        let factor = (1usize << level) as f64;
        let cost = |p: &[f64; 4]| -> Result<f64> { Ok(mse(f, &register_back(m, &to_t(p, factor))?)) };
        let mut steps = [params.translation_step * factor, params.translation_step * factor, params.rotation_step, params.scale_step];
        let mut best = cost(&p)?;
        let mut sweeps = 0;
        while steps[0] / factor > params.tolerance_px {
            if sweeps == params.iters {
                exhausted = true;
                break;
            }
            sweeps += 1;
            let mut improved = false;
            for k in 0..4 {
                for dir in [1.0, -1.0] {
                    let mut trial = p;
                    trial[k] += dir * steps[k];
                    if k == 3 && trial[3] <= 0.1 {
                        continue;
                    }
                    let c = cost(&trial)?;
                    if c < best {
                        best = c;
                        p = trial;
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                steps.iter_mut().for_each(|s| *s *= 0.5);
            }
        }
    }
    let transform = to_t(&p, 1.0);
    let final_mse = mse(fixed, &register_back(moving, &transform)?);
    if !final_mse.is_finite() {
        return Err(Error::Numerical("registration produced a non-finite MSE".into()));
    }
    let warning = exhausted || final_mse > 0.5 * (variance(fixed) + variance(moving));
    Ok(Registration { transform, mse: final_mse, warning })
}

/// One transform per repetition, the first being the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MotionTrace {
    pub transforms: Vec<AffineTransform>,
}

impl MotionTrace {
    pub fn nex(&self) -> usize {
        self.transforms.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let trace: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        ensure!(!trace.transforms.is_empty(), Format, "{}: empty motion trace", path.display());
        for t in &trace.transforms {
            t.check_invertible()?;
        }
        Ok(trace)
    }
}

/// Rigid in-plane motion: translations uniform in `±max_translation_px`,
/// rotation uniform in `±max_rotation_deg`.
pub fn generate_motion_trace(seed: u64, nex: usize, max_translation_px: f64, max_rotation_deg: f64) -> Result<MotionTrace> {
    ensure!(nex >= 1, Config, "NEX must be at least 1");
    ensure!(
        max_translation_px >= 0.0 && max_rotation_deg >= 0.0,
        Config,
        "motion bounds must be non-negative"
    );
    let mut rng = SimRng::seed_from_u64(seed);
    let mut draw = |b: f64| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
    let mut transforms = vec![AffineTransform::identity()];
    for _ in 1..nex {
        let (tx, ty, r) = (draw(max_translation_px), draw(max_translation_px), draw(max_rotation_deg));
        transforms.push(if r == 0.0 { AffineTransform::translation(tx, ty) } else { AffineTransform::similarity(tx, ty, r, 1.0) });
    }
    Ok(MotionTrace { transforms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::gaussian_blur;
    use crate::phantom::procedural_phantom;
    use crate::phantom::TissueProperties;
    use crate::slice::{Complex64, ComplexSlice, Mask};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn textured(w: usize, h: usize) -> RealSlice {
        let map = procedural_phantom(5, 96, 96, 40, 4).unwrap();
        let vol = crate::phantom::synthesize_signal(&map, &TissueProperties::brainweb_default(), &Default::default()).unwrap();
        let s = &vol.slices()[20];
        let img = RealSlice::from_fn(w, h, |x, y| {
            let (sx, sy) = (x * s.width() / w, y * s.height() / h);
            s.get(sx, sy)
        });
        gaussian_blur(&img, 1.0)
    }

    /// Dense oracle: evaluate the separable cubic sum literally over all
    /// source pixels.
    fn dense_bicubic(src: &RealSlice, x: f64, y: f64) -> f64 {
        let k = |t: f64| {
            let t = t.abs();
            if t <= 1.0 {
                1.5 * t.powi(3) - 2.5 * t * t + 1.0
            } else if t < 2.0 {
                -0.5 * t.powi(3) + 2.5 * t * t - 4.0 * t + 2.0
            } else {
                0.0
            }
        };
        let mut acc = 0.0;
        for j in 0..src.height() {
            for i in 0..src.width() {
                acc += src.get(i, j) * k(x - i as f64) * k(y - j as f64);
            }
        }
        acc
    }

    #[test]
    fn keys_weights_partition_unity() {
        for f in [0.0, 0.1, 0.5, 0.9] {
            let w = keys_weights(f);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert_eq!(keys_weights(0.0), [0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_and_integer_shift() {
        let s = RealSlice::from_fn(20, 12, |x, y| (x * 31 + y * 7) as f64);
        assert_eq!(apply_affine(&s, &AffineTransform::identity(), Interpolation::Nearest).unwrap(), s);
        assert_eq!(register_back(&s, &AffineTransform::identity()).unwrap(), s);
        let out = apply_affine(&s, &AffineTransform::translation(2.0, -3.0), Interpolation::Nearest).unwrap();
        for y in 0..12 {
            for x in 0..20 {
                let (sx, sy) = (x as isize - 2, y as isize + 3);
                let want = if (0..20).contains(&sx) && (0..12).contains(&sy) { s.get(sx as usize, sy as usize) } else { 0.0 };
                assert_eq!(out.get(x, y), want);
            }
        }
    }

    #[test]
    fn singular_transform_rejected() {
        let t = AffineTransform { linear: [[1.0, 2.0], [0.5, 1.0]], translation: [0.0, 0.0] };
        let s = RealSlice::zeros(4, 4);
        assert!(matches!(apply_affine(&s, &t, Interpolation::Nearest), Err(Error::Numerical(_))));
        assert!(register_back(&s, &t).is_err());
    }

    #[test]
    fn rotation_round_trip_nearest() {
        let s = textured(64, 64);
        let fwd = apply_affine(&s, &AffineTransform::similarity(0.0, 0.0, 10.0, 1.0), Interpolation::Nearest).unwrap();
        let back = apply_affine(&fwd, &AffineTransform::similarity(0.0, 0.0, -10.0, 1.0), Interpolation::Nearest).unwrap();
        // brute-force oracle: resample twice by explicit rotation formulae
        let c = 31.5;
        let rot = |img: &RealSlice, deg: f64| {
            let (sn, cs) = (-deg).to_radians().sin_cos();
            RealSlice::from_fn(64, 64, |x, y| {
                let (dx, dy) = (x as f64 - c, y as f64 - c);
                let (sx, sy) = ((cs * dx - sn * dy + c).round(), (sn * dx + cs * dy + c).round());
                if sx < 0.0 || sy < 0.0 || sx > 63.0 || sy > 63.0 { 0.0 } else { img.get(sx as usize, sy as usize) }
            })
        };
        let oracle = rot(&rot(&s, 10.0), -10.0);
        let (mut agree, mut total) = (0, 0);
        for y in 5..59 {
            for x in 5..59 {
                total += 1;
                if back.get(x, y) == oracle.get(x, y) {
                    agree += 1;
                }
            }
        }
        assert!(agree as f64 >= 0.95 * total as f64, "{agree}/{total}");
    }

    #[test]
    fn integer_shift_registers_back_exactly() {
        let s = textured(48, 40);
        let t = AffineTransform::translation(3.0, -2.0);
        let moved = apply_affine(&s, &t, Interpolation::Nearest).unwrap();
        let back = register_back(&moved, &t).unwrap();
        for y in 5..35 {
            for x in 5..43 {
                assert!((back.get(x, y) - s.get(x, y)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn subpixel_matches_dense_oracle() {
        let s = textured(32, 32);
        let t = AffineTransform::translation(0.37, -0.61);
        let out = apply_affine(&s, &t, Interpolation::Bicubic).unwrap();
        for y in 3..29 {
            for x in 3..29 {
                let o = dense_bicubic(&s, x as f64 - 0.37, y as f64 + 0.61);
                assert!((out.get(x, y) - o).abs() < 1e-12);
            }
        }
        let back = register_back(&out, &t).unwrap();
        let mut max_err: f64 = 0.0;
        let peak = s.data().iter().cloned().fold(0.0, f64::max);
        for y in 4..28 {
            for x in 4..28 {
                max_err = max_err.max((back.get(x, y) - s.get(x, y)).abs());
            }
        }
        // bicubic applied twice on a σ=1 blurred image
        assert!(max_err < 0.05 * peak, "{max_err} vs {peak}");
    }

    #[test]
    fn complex_slices_resample_componentwise() {
        let re = textured(24, 24);
        let im = re.map(|v| -0.5 * v);
        let c = ComplexSlice::from_parts(&re, &im).unwrap();
        let t = AffineTransform::similarity(0.3, 0.7, 4.0, 1.0);
        let out = apply_affine(&c, &t, Interpolation::Bicubic).unwrap();
        let r = apply_affine(&re, &t, Interpolation::Bicubic).unwrap();
        for (a, b) in out.data().iter().zip(r.data()) {
            assert!((a - Complex64::new(*b, -0.5 * b)).norm() < 1e-12);
        }
    }

    #[test]
    fn estimate_identity() {
        let s = textured(64, 64);
        let r = estimate_affine(&s, &s, &RegistrationParams::default()).unwrap();
        assert!(r.transform.translation.iter().all(|t| t.abs() < 0.05));
        assert!(r.transform.rotation_deg().abs() < 0.1);
        assert!(!r.warning);
    }

    #[test]
    fn estimate_recovers_translation() {
        let s = textured(64, 64);
        let t = AffineTransform::translation(3.0, 1.5);
        let moving = apply_affine(&s, &t, Interpolation::Bicubic).unwrap();
        let r = estimate_affine(&s, &moving, &RegistrationParams::default()).unwrap();
        assert!((r.transform.translation[0] - 3.0).abs() < 0.1, "{:?}", r.transform);
        assert!((r.transform.translation[1] - 1.5).abs() < 0.1, "{:?}", r.transform);
        assert!(!r.warning);
    }

    #[test]
    fn estimate_recovers_rigid_motion() {
        let s = textured(64, 64);
        let t = AffineTransform::similarity(-1.2, 0.8, 1.5, 1.0);
        let moving = apply_affine(&s, &t, Interpolation::Bicubic).unwrap();
        let r = estimate_affine(&s, &moving, &RegistrationParams::default()).unwrap();
        assert!((r.transform.translation[0] + 1.2).abs() < 0.1, "{:?}", r.transform);
        assert!((r.transform.translation[1] - 0.8).abs() < 0.1, "{:?}", r.transform);
        assert!((r.transform.rotation_deg() - 1.5).abs() < 0.2, "{:?}", r.transform);
    }

    #[test]
    fn noise_pair_warns() {
        let a = crate::calibration::generate_noise_map(1, 48, 48, None).unwrap().data.re();
        let b = crate::calibration::generate_noise_map(2, 48, 48, None).unwrap().data.re();
        assert!(estimate_affine(&a, &b, &RegistrationParams::default()).unwrap().warning);
    }

    #[test]
    fn trace_examples() {
        assert_eq!(generate_motion_trace(1, 1, 2.0, 2.0).unwrap().transforms, vec![AffineTransform::identity()]);
        assert!(generate_motion_trace(1, 6, 0.0, 0.0).unwrap().transforms.iter().all(AffineTransform::is_identity));
        assert_eq!(generate_motion_trace(9, 25, 2.0, 2.0).unwrap(), generate_motion_trace(9, 25, 2.0, 2.0).unwrap());
        assert!(generate_motion_trace(9, 0, 2.0, 2.0).is_err());
        let tr = generate_motion_trace(9, 25, 2.0, 2.0).unwrap();
        for t in &tr.transforms[1..] {
            assert!(t.translation.iter().all(|v| v.abs() <= 2.0) && t.rotation_deg().abs() <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn trace_json_shape() {
        let tr = generate_motion_trace(3, 3, 1.0, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.json");
        tr.save(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 3);
        assert!(v[1]["linear"][0].as_array().unwrap().len() == 2 && v[1]["translation"].is_array());
        assert_eq!(MotionTrace::load(&path).unwrap(), tr);
    }

    fn support(s: &RealSlice) -> Mask {
        Mask::from_fn(s.width(), s.height(), |x, y| s.get(x, y).abs() > 1e-9)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn integer_shift_keeps_histogram(tx in -4i32..=4, ty in -4i32..=4, seed in 0u64..100) {
            let mut rng = SimRng::seed_from_u64(seed);
            let s = RealSlice::from_fn(24, 20, |x, y| if (5..19).contains(&x) && (5..15).contains(&y) { rng.random_range(1.0..2.0) } else { 0.0 });
            let out = apply_affine(&s, &AffineTransform::translation(tx as f64, ty as f64), Interpolation::Nearest).unwrap();
            let mut a: Vec<f64> = s.data().to_vec();
            let mut b: Vec<f64> = out.data().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn register_back_support_bound(tx in -3.0f64..3.0, ty in -3.0f64..3.0, seed in 0u64..100) {
            let mut rng = SimRng::seed_from_u64(seed);
            let s = RealSlice::from_fn(32, 32, |x, y| if (10..22).contains(&x) && (9..23).contains(&y) { rng.random_range(1.0..2.0) } else { 0.0 });
            let t = AffineTransform::translation(tx.round(), ty.round());
            let back = register_back(&apply_affine(&s, &t, Interpolation::Nearest).unwrap(), &t).unwrap();
            let allowed = crate::morphology::dilate(&support(&s), 1);
            let got = support(&back);
            for y in 0..32 {
                for x in 0..32 {
                    prop_assert!(!got.get(x, y) || allowed.get(x, y));
                }
            }
        }

        #[test]
        fn register_back_support_bound_general(tx in -2.0f64..2.0, ty in -2.0f64..2.0, r in -5.0f64..5.0, seed in 0u64..100) {
            let mut rng = SimRng::seed_from_u64(seed);
            let s = RealSlice::from_fn(40, 40, |x, y| if (12..28).contains(&x) && (10..30).contains(&y) { rng.random_range(1.0..2.0) } else { 0.0 });
            let t = AffineTransform::similarity(tx, ty, r, 1.0);
            let back = register_back(&apply_affine(&s, &t, Interpolation::Nearest).unwrap(), &t).unwrap();
            // ringing reaches the cubic kernel radius
            let allowed = crate::morphology::dilate(&support(&s), 2);
            let got = support(&back);
            for y in 0..40 {
                for x in 0..40 {
                    prop_assert!(!got.get(x, y) || allowed.get(x, y));
                }
            }
        }

        #[test]
        fn inverse_composes_to_identity(tx in -5.0f64..5.0, ty in -5.0f64..5.0, r in -20.0f64..20.0, sc in 0.8f64..1.2) {
            let t = AffineTransform::similarity(tx, ty, r, sc);
            let i = t.inverse().unwrap();
            let p = [3.3, -7.1];
            let q = i.map_centred(t.map_centred(p));
            prop_assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
        }
    }
}
