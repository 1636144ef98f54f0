//! Centered, unitary Fourier transforms along one slice axis.
//!
//! Forward: `X = fftshift(fft(ifftshift(x))) / sqrt(N)`, so the zero frequency
//! sits at index `N / 2` and both directions preserve energy. Forward
//! transforms map image space towards k-space (`e^{-j...}` kernel).

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::par;
use crate::slice::{Complex64, ComplexSlice, Domain};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// In-place centered unitary transform of a single line.
pub fn fft_centered(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n == 0 {
        return;
    }
    let fft = plan(n, inverse);
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    transform_line(buf, fft.as_ref(), &mut scratch);
}

fn transform_line(buf: &mut [Complex64], fft: &dyn Fft<f64>, scratch: &mut [Complex64]) {
    let n = buf.len();
    buf.rotate_left(n / 2);
    fft.process_with_scratch(buf, scratch);
    buf.rotate_right(n / 2);
    let s = 1.0 / (n as f64).sqrt();
    buf.iter_mut().for_each(|v| *v *= s);
}

fn transform_rows(data: &mut [Complex64], width: usize, inverse: bool) {
    let fft = plan(width, inverse);
    let rows_per_chunk = (4096 / width).max(1);
    par::for_each_chunk_mut(data, width * rows_per_chunk, |_, chunk| {
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        for row in chunk.chunks_mut(width) {
            transform_line(row, fft.as_ref(), &mut scratch);
        }
    });
}

fn transpose(data: &[Complex64], width: usize, height: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::default(); data.len()];
    for y in 0..height {
        for x in 0..width {
            out[x * height + y] = data[y * width + x];
        }
    }
    out
}

fn check_domain(slice: &ComplexSlice, expected: Domain, op: &str) -> Result<()> {
    if slice.domain() != expected {
        return Err(Error::Config(format!(
            "{op} expects a {expected:?} slice, got {:?}",
            slice.domain()
        )));
    }
    Ok(())
}

/// Transform every column (along Y). Forward maps IMAGE to HYBRID_XKY.
pub fn fft_cols(slice: &ComplexSlice, inverse: bool) -> Result<ComplexSlice> {
    let (from, to) = if inverse {
        (Domain::HybridXky, Domain::Image)
    } else {
        (Domain::Image, Domain::HybridXky)
    };
    check_domain(slice, from, "fft_cols")?;
    let (w, h) = (slice.width(), slice.height());
    let mut cols = transpose(slice.data(), w, h);
    transform_rows(&mut cols, h, inverse);
    Ok(slice.with_data(transpose(&cols, h, w)).with_domain(to))
}

/// Transform every row (along X). Forward maps HYBRID_XKY to KSPACE.
pub fn fft_rows(slice: &ComplexSlice, inverse: bool) -> Result<ComplexSlice> {
    let (from, to) = if inverse {
        (Domain::KSpace, Domain::HybridXky)
    } else {
        (Domain::HybridXky, Domain::KSpace)
    };
    check_domain(slice, from, "fft_rows")?;
    let mut out = slice.clone();
    transform_rows(out.data_mut(), slice.width(), inverse);
    Ok(out.with_domain(to))
}

/// IMAGE to KSPACE.
pub fn fft2(image: &ComplexSlice) -> Result<ComplexSlice> {
    fft_rows(&fft_cols(image, false)?, false)
}

/// KSPACE to IMAGE.
pub fn ifft2(kspace: &ComplexSlice) -> Result<ComplexSlice> {
    fft_cols(&fft_rows(kspace, true)?, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slice::Spacing;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    /// Direct O(N²) centered unitary DFT.
    fn dft_oracle(x: &[Complex64], inverse: bool) -> Vec<Complex64> {
        let n = x.len();
        let c = (n / 2) as f64;
        let sign = if inverse { 1.0 } else { -1.0 };
        (0..n)
            .map(|k| {
                let mut acc = Complex64::default();
                for (m, &v) in x.iter().enumerate() {
                    let arg = sign * 2.0 * PI * (k as f64 - c) * (m as f64 - c) / n as f64;
                    acc += v * Complex64::from_polar(1.0, arg);
                }
                acc / (n as f64).sqrt()
            })
            .collect()
    }

    fn slice_from(w: usize, h: usize, v: Vec<Complex64>) -> ComplexSlice {
        ComplexSlice::new(w, h, v, Spacing::default()).unwrap()
    }

    #[test]
    fn constant_column_maps_to_center_bin() {
        let s = slice_from(1, 8, vec![Complex64::new(1.0, 0.0); 8]);
        let k = fft_cols(&s, false).unwrap();
        assert_eq!(k.domain(), Domain::HybridXky);
        for y in 0..8 {
            let expect = if y == 4 { 8f64.sqrt() } else { 0.0 };
            assert!((k.get(0, y) - Complex64::new(expect, 0.0)).norm() < 1e-12, "bin {y}");
        }
    }

    #[test]
    fn center_delta_is_flat() {
        let mut v = vec![Complex64::default(); 16];
        v[8] = Complex64::new(1.0, 0.0);
        let s = slice_from(1, 16, v);
        let k = fft_cols(&s, false).unwrap();
        for y in 0..16 {
            assert!((k.get(0, y).norm() - 0.25).abs() < 1e-12);
        }

        let mut v = vec![Complex64::default(); 16];
        v[8] = Complex64::new(1.0, 0.0);
        let s = slice_from(16, 1, v).with_domain(Domain::HybridXky);
        let k = fft_rows(&s, false).unwrap();
        for x in 0..16 {
            assert!((k.get(x, 0).norm() - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn four_sample_row_matches_direct_sum() {
        let x = vec![
            Complex64::new(1.0, 0.0),
            Complex64::default(),
            Complex64::default(),
            Complex64::default(),
        ];
        let s = slice_from(4, 1, x.clone()).with_domain(Domain::HybridXky);
        let k = fft_rows(&s, false).unwrap();
        let oracle = dft_oracle(&x, false);
        for i in 0..4 {
            assert!((k.get(i, 0) - oracle[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn domain_is_checked() {
        let s = slice_from(4, 4, vec![Complex64::default(); 16]);
        assert!(fft_rows(&s, false).is_err());
        assert!(fft_cols(&s, true).is_err());
    }

    fn arb_slice() -> impl Strategy<Value = ComplexSlice> {
        (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
            prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), w * h).prop_map(move |v| {
                slice_from(w, h, v.into_iter().map(|(a, b)| Complex64::new(a, b)).collect())
            })
        })
    }

    proptest! {
        #[test]
        fn matches_oracle_and_round_trips(s in arb_slice()) {
            let h = fft_cols(&s, false).unwrap();
            for x in 0..s.width() {
                let col: Vec<_> = (0..s.height()).map(|y| s.get(x, y)).collect();
                let o = dft_oracle(&col, false);
                for y in 0..s.height() {
                    prop_assert!((h.get(x, y) - o[y]).norm() < 1e-10);
                }
            }
            let k = fft_rows(&h, false).unwrap();
            let back = ifft2(&k).unwrap();
            let err = s.data().iter().zip(back.data()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            prop_assert!(err < 1e-12);
            // Parseval
            let e0 = s.energy();
            prop_assert!((k.energy() - e0).abs() <= 1e-10 * e0.max(1e-300));
        }

        #[test]
        fn linearity(a in arb_slice(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in 0u64..1000) {
            let b = a.map(|v| Complex64::new(v.im + seed as f64 * 1e-3, -v.re));
            let combo = a.zip_map(&b, |x, y| x * alpha + y * beta).unwrap();
            let lhs = fft_cols(&combo, false).unwrap();
            let fa = fft_cols(&a, false).unwrap();
            let fb = fft_cols(&b, false).unwrap();
            for i in 0..lhs.len() {
                let rhs = fa.data()[i] * alpha + fb.data()[i] * beta;
                prop_assert!((lhs.data()[i] - rhs).norm() < 1e-10 * (1.0 + rhs.norm()));
            }
        }
    }
}
