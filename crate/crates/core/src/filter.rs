//! Separable Gaussian smoothing.
//!
//! The kernel is sampled at integer offsets, truncated at `4σ` and
//! renormalised to unit sum. Borders use half-sample symmetric reflection
//! (`d c b a | a b c d | d c b a`).

use crate::slice::{Sample, Slice};

pub const TRUNCATE_SIGMAS: f64 = 4.0;

/// Normalised 1-D kernel of length `2r+1`, `r = ceil(4σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (TRUNCATE_SIGMAS * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

fn convolve_rows<T: Sample>(src: &Slice<T>, kernel: &[f64]) -> Slice<T> {
    let (w, h) = (src.width(), src.height());
    let r = (kernel.len() / 2) as isize;
    let mut out = src.clone();
    for y in 0..h {
        let row = src.row(y);
        let dst = out.row_mut(y);
        for (x, d) in dst.iter_mut().enumerate() {
            let mut acc = T::default();
            for (j, &kv) in kernel.iter().enumerate() {
                acc += row[reflect(x as isize + j as isize - r, w)] * kv;
            }
            *d = acc;
        }
    }
    out
}

fn convolve_cols<T: Sample>(src: &Slice<T>, kernel: &[f64]) -> Slice<T> {
    let h = src.height();
    let r = (kernel.len() / 2) as isize;
    let mut out = src.clone();
    for y in 0..h {
        let dst = out.row_mut(y);
        dst.iter_mut().for_each(|v| *v = T::default());
        for (j, &kv) in kernel.iter().enumerate() {
            let sy = reflect(y as isize + j as isize - r, h);
            let srow = src.row(sy);
            for (d, &s) in dst.iter_mut().zip(srow) {
                *d += s * kv;
            }
        }
    }
    out
}

/// Separable Gaussian blur; `sigma == 0` returns the input unchanged.
pub fn gaussian_blur<T: Sample>(slice: &Slice<T>, sigma: f64) -> Slice<T> {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    if sigma == 0.0 {
        return slice.clone();
    }
    let k = gaussian_kernel(sigma);
    convolve_cols(&convolve_rows(slice, &k), &k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slice::Complex64;

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 0);
        assert_eq!(reflect(-2, 5), 1);
        assert_eq!(reflect(5, 5), 4);
        assert_eq!(reflect(6, 5), 3);
        assert_eq!(reflect(-12, 3), 0);
        assert_eq!(reflect(2, 1), 0);
    }

    #[test]
    fn kernel_is_normalised_and_truncated() {
        let k = gaussian_kernel(0.65);
        assert_eq!(k.len(), 2 * 3 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
    }

    #[test]
    fn complex_blur_is_componentwise() {
        let s = crate::slice::ComplexSlice::from_fn(9, 7, |x, y| Complex64::new((x * y) as f64, x as f64 - y as f64));
        let b = gaussian_blur(&s, 1.1);
        let re = gaussian_blur(&s.re(), 1.1);
        let im = gaussian_blur(&s.im(), 1.1);
        for i in 0..s.len() {
            assert!((b.data()[i].re - re.data()[i]).abs() < 1e-12);
            assert!((b.data()[i].im - im.data()[i]).abs() < 1e-12);
        }
    }
}
