//! Image, k-space and hybrid-space containers.
//!
//! Storage is row-major: `x` indexes columns (frequency encoding), `y` indexes
//! rows (phase encoding).

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Mul, Sub};

pub use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Pixel spacing in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub dx: f64,
    pub dy: f64,
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing { dx: 1.0, dy: 1.0 }
    }
}

/// Which space a slice lives in. Only the Fourier operations change it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Image,
    #[serde(rename = "kspace")]
    KSpace,
    /// x-ky space: transformed along Y only.
    #[serde(rename = "hybrid")]
    HybridXky,
}

/// Scalar types a slice can hold.
pub trait Sample:
    Copy
    + Default
    + Send
    + Sync
    + PartialEq
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<f64, Output = Self>
    + AddAssign
    + 'static
{
    fn is_finite(&self) -> bool;
    fn norm_sqr(&self) -> f64;
}

impl Sample for f64 {
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
    fn norm_sqr(&self) -> f64 {
        self * self
    }
}

impl Sample for Complex64 {
    fn is_finite(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
    fn norm_sqr(&self) -> f64 {
        Complex64::norm_sqr(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slice<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
    spacing: Spacing,
    domain: Domain,
}

pub type RealSlice = Slice<f64>;
pub type ComplexSlice = Slice<Complex64>;

impl<T: Sample> Slice<T> {
    /// Validating constructor; the slice is tagged as image domain.
    pub fn new(width: usize, height: usize, data: Vec<T>, spacing: Spacing) -> Result<Self> {
        ensure!(width > 0 && height > 0, Dimension, "empty slice {width}x{height}");
        ensure!(
            data.len() == width * height,
            Dimension,
            "data length {} does not match {width}x{height}",
            data.len()
        );
        ensure!(
            spacing.dx > 0.0 && spacing.dy > 0.0,
            Config,
            "spacing must be positive, got ({}, {})",
            spacing.dx,
            spacing.dy
        );
        ensure!(data.iter().all(Sample::is_finite), Format, "slice contains non-finite samples");
        Ok(Slice { width, height, data, spacing, domain: Domain::Image })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "empty slice");
        Slice {
            width,
            height,
            data: vec![T::default(); width * height],
            spacing: Spacing::default(),
            domain: Domain::Image,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut out = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                out.data[y * width + x] = f(x, y);
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub(crate) fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn row_mut(&mut self, y: usize) -> &mut [T] {
        &mut self.data[y * self.width..(y + 1) * self.width]
    }

    /// Same dimensions, spacing and domain; new contents.
    pub fn with_data<U: Sample>(&self, data: Vec<U>) -> Slice<U> {
        assert_eq!(data.len(), self.data.len());
        Slice { width: self.width, height: self.height, data, spacing: self.spacing, domain: self.domain }
    }

    pub fn map<U: Sample>(&self, f: impl Fn(T) -> U) -> Slice<U> {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map<U: Sample, V: Sample>(&self, other: &Slice<U>, f: impl Fn(T, U) -> V) -> Result<Slice<V>> {
        self.check_same_shape(other)?;
        Ok(self.with_data(self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect()))
    }

    pub fn check_same_shape<U>(&self, other: &Slice<U>) -> Result<()> {
        ensure!(
            self.width == other.width && self.height == other.height,
            Dimension,
            "{}x{} vs {}x{}",
            self.width,
            self.height,
            other.width,
            other.height
        );
        Ok(())
    }

    pub fn check_mask(&self, mask: &Mask) -> Result<()> {
        ensure!(
            self.width == mask.width && self.height == mask.height,
            Dimension,
            "mask {}x{} does not match slice {}x{}",
            mask.width,
            mask.height,
            self.width,
            self.height
        );
        Ok(())
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(Sample::norm_sqr).sum()
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// Integer shift along Y with zero fill: output row `y` takes input row `y - dy`.
    pub fn shift_rows(&self, dy: isize) -> Self {
        let mut out = self.with_data(vec![T::default(); self.data.len()]);
        for y in 0..self.height {
            let src = y as isize - dy;
            if src >= 0 && (src as usize) < self.height {
                out.row_mut(y).copy_from_slice(self.row(src as usize));
            }
        }
        out
    }
}

impl ComplexSlice {
    pub fn from_real(real: &RealSlice) -> Self {
        real.map(|v| Complex64::new(v, 0.0))
    }

    pub fn from_parts(re: &RealSlice, im: &RealSlice) -> Result<Self> {
        re.zip_map(im, Complex64::new)
    }

    pub fn re(&self) -> RealSlice {
        self.map(|c| c.re).with_domain(Domain::Image)
    }

    pub fn im(&self) -> RealSlice {
        self.map(|c| c.im).with_domain(Domain::Image)
    }
}

/// Per-pixel magnitude `sqrt(re² + im²)`.
pub fn modulus(slice: &ComplexSlice) -> RealSlice {
    slice.map(|c| c.norm()).with_domain(Domain::Image)
}

/// An ordered stack of equally sized slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<S> {
    slices: Vec<S>,
    slice_thickness: f64,
}

impl<T: Sample> Volume<Slice<T>> {
    pub fn new(slices: Vec<Slice<T>>, slice_thickness: f64) -> Result<Self> {
        ensure!(!slices.is_empty(), Dimension, "volume must contain at least one slice");
        ensure!(slice_thickness > 0.0, Config, "slice thickness must be positive");
        let first = &slices[0];
        for s in &slices[1..] {
            first.check_same_shape(s)?;
        }
        Ok(Volume { slices, slice_thickness })
    }

    pub fn width(&self) -> usize {
        self.slices[0].width()
    }

    pub fn height(&self) -> usize {
        self.slices[0].height()
    }
}

impl<S> Volume<S> {
    pub fn slices(&self) -> &[S] {
        &self.slices
    }

    pub fn into_slices(self) -> Vec<S> {
        self.slices
    }

    pub fn depth(&self) -> usize {
        self.slices.len()
    }

    pub fn slice_thickness(&self) -> f64 {
        self.slice_thickness
    }
}

/// Binary pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        ensure!(
            data.len() == width * height,
            Dimension,
            "mask data length {} does not match {width}x{height}",
            data.len()
        );
        Ok(Mask { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Mask { width, height, data: vec![false; width * height] }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Mask { width, height, data: vec![true; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Mask::empty(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(x, y);
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn invert(&self) -> Mask {
        Mask { width: self.width, height: self.height, data: self.data.iter().map(|b| !b).collect() }
    }

    /// First and last set column of row `y`, if any.
    pub fn row_extent(&self, y: usize) -> Option<(usize, usize)> {
        let row = &self.data[y * self.width..(y + 1) * self.width];
        let first = row.iter().position(|&b| b)?;
        let last = row.iter().rposition(|&b| b)?;
        Some((first, last))
    }

    /// Zero every pixel of `slice` outside the mask.
    pub fn apply<T: Sample>(&self, slice: &Slice<T>) -> Result<Slice<T>> {
        slice.check_mask(self)?;
        Ok(slice.with_data(
            slice.data().iter().zip(&self.data).map(|(&v, &m)| if m { v } else { T::default() }).collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modulus_examples() {
        let s = ComplexSlice::new(
            3,
            1,
            vec![Complex64::new(3.0, 4.0), Complex64::new(0.0, 0.0), Complex64::new(1.0, 1.0)],
            Spacing::default(),
        )
        .unwrap();
        let m = modulus(&s);
        assert_eq!(m.get(0, 0), 5.0);
        assert_eq!(m.get(1, 0), 0.0);
        assert!((m.get(2, 0) - 1.41421356237309505).abs() < 1e-12);
    }

    #[test]
    fn constructor_validates() {
        assert!(RealSlice::new(2, 2, vec![0.0; 3], Spacing::default()).is_err());
        assert!(RealSlice::new(2, 2, vec![0.0; 4], Spacing { dx: 0.0, dy: 1.0 }).is_err());
        assert!(RealSlice::new(2, 1, vec![0.0, f64::NAN], Spacing::default()).is_err());
        assert!(Volume::new(Vec::<RealSlice>::new(), 1.0).is_err());
        assert!(Volume::new(vec![RealSlice::zeros(2, 2), RealSlice::zeros(3, 2)], 1.0).is_err());
    }

    #[test]
    fn shift_rows_zero_fills() {
        let s = RealSlice::from_fn(2, 4, |_, y| y as f64 + 1.0);
        let d = s.shift_rows(1);
        assert_eq!(d.row(0), &[0.0, 0.0]);
        assert_eq!(d.row(1), &[1.0, 1.0]);
        assert_eq!(d.shift_rows(-1).row(0), &[1.0, 1.0]);
    }

    #[test]
    fn row_extent() {
        let m = Mask::from_fn(6, 2, |x, y| y == 1 && (2..=4).contains(&x));
        assert_eq!(m.row_extent(0), None);
        assert_eq!(m.row_extent(1), Some((2, 4)));
    }
}
