//! Complex and real 2D planes.
//!
//! Both types are row-major. [`ComplexImage`] keeps separate real and
//! imaginary planes so that real-valued kernels can act on each plane
//! without complex storage.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexImage {
    height: usize,
    width: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexImage {
    pub fn new(height: usize, width: usize, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid(format!("empty image {height}x{width}")));
        }
        if re.len() != height * width || im.len() != height * width {
            return Err(mismatch(format!(
                "planes of length {}/{} for a {height}x{width} image",
                re.len(),
                im.len()
            )));
        }
        if re.iter().chain(im.iter()).any(|v| !v.is_finite()) {
            return Err(crate::Error::NonFinite("image entries".into()));
        }
        Ok(Self { height, width, re, im })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        Self { height, width, re: vec![0.0; height * width], im: vec![0.0; height * width] }
    }

    pub fn from_real(height: usize, width: usize, re: Vec<f64>) -> Result<Self> {
        let im = vec![0.0; re.len()];
        Self::new(height, width, re, im)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        let mut re = Vec::with_capacity(height * width);
        let mut im = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                let z = f(i, j);
                re.push(z.re);
                im.push(z.im);
            }
        }
        Self { height, width, re, im }
    }

    pub(crate) fn from_complex(height: usize, width: usize, data: &[Complex64]) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            re: data.iter().map(|z| z.re).collect(),
            im: data.iter().map(|z| z.im).collect(),
        }
    }

    /// Kronecker delta at `(i, j)`.
    pub fn delta(height: usize, width: usize, i: usize, j: usize) -> Self {
        let mut x = Self::zeros(height, width);
        x.re[i * width + j] = 1.0;
        x
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn planes_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.re, &mut self.im)
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        let n = i * self.width + j;
        Complex64::new(self.re[n], self.im[n])
    }

    pub fn at(&self, n: usize) -> Complex64 {
        Complex64::new(self.re[n], self.im[n])
    }

    pub fn set(&mut self, i: usize, j: usize, z: Complex64) {
        let n = i * self.width + j;
        self.re[n] = z.re;
        self.im[n] = z.im;
    }

    pub fn set_at(&mut self, n: usize, z: Complex64) {
        self.re[n] = z.re;
        self.im[n] = z.im;
    }

    pub fn to_complex_vec(&self) -> Vec<Complex64> {
        self.re.iter().zip(&self.im).map(|(&r, &i)| Complex64::new(r, i)).collect()
    }

    pub fn same_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(mismatch(format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().chain(self.im.iter()).all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.re.iter().chain(self.im.iter()).map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Largest modulus.
    pub fn max_abs(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).fold(0.0, f64::max)
    }

    pub fn abs(&self) -> RealImage {
        RealImage {
            height: self.height,
            width: self.width,
            values: self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).collect(),
        }
    }

    pub fn real_part(&self) -> ComplexImage {
        Self { height: self.height, width: self.width, re: self.re.clone(), im: vec![0.0; self.len()] }
    }

    pub fn imag_part(&self) -> ComplexImage {
        Self { height: self.height, width: self.width, re: self.im.clone(), im: vec![0.0; self.len()] }
    }

    pub fn scale(&self, a: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            re: self.re.iter().map(|v| a * v).collect(),
            im: self.im.iter().map(|v| a * v).collect(),
        }
    }

    pub fn scale_complex(&self, a: Complex64) -> Self {
        let mut out = Self::zeros(self.height, self.width);
        for n in 0..self.len() {
            out.set_at(n, a * self.at(n));
        }
        out
    }

    /// `self + a * x`.
    pub fn add_scaled(&self, a: f64, x: &Self) -> Self {
        assert_eq!(self.dims(), x.dims(), "add_scaled dimension mismatch");
        let mut out = self.clone();
        out.axpy(a, x);
        out
    }

    /// In-place `self += a * x`.
    pub fn axpy(&mut self, a: f64, x: &Self) {
        assert_eq!(self.dims(), x.dims(), "axpy dimension mismatch");
        for (s, v) in self.re.iter_mut().zip(&x.re) {
            *s += a * v;
        }
        for (s, v) in self.im.iter_mut().zip(&x.im) {
            *s += a * v;
        }
    }

    pub fn add(&self, x: &Self) -> Self {
        self.add_scaled(1.0, x)
    }

    pub fn sub(&self, x: &Self) -> Self {
        self.add_scaled(-1.0, x)
    }

    /// Applies `f` to every entry as a complex number.
    pub fn map(&self, mut f: impl FnMut(Complex64) -> Complex64) -> Self {
        let mut out = Self::zeros(self.height, self.width);
        for n in 0..self.len() {
            out.set_at(n, f(self.at(n)));
        }
        out
    }

    /// Real inner product on the underlying `R^{2N}`, i.e. `Re <x, y>`.
    pub fn real_dot(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.dims(), other.dims());
        let a: f64 = self.re.iter().zip(&other.re).map(|(a, b)| a * b).sum();
        let b: f64 = self.im.iter().zip(&other.im).map(|(a, b)| a * b).sum();
        a + b
    }
}

/// Sesquilinear inner product `sum_j conj(x[j]) * y[j]`.
pub fn inner(x: &ComplexImage, y: &ComplexImage) -> Result<Complex64> {
    x.same_dims(y)?;
    let mut acc = Complex64::new(0.0, 0.0);
    for n in 0..x.len() {
        acc += x.at(n).conj() * y.at(n);
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealImage {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl RealImage {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid(format!("empty image {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(mismatch(format!(
                "plane of length {} for a {height}x{width} image",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::NonFinite("real image entries".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        Self { height, width, values: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexImage::from_fn(h, w, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn inner_of_self_is_squared_norm() {
        let x = random(5, 7, 1);
        let p = inner(&x, &x).unwrap();
        assert!(p.im.abs() < 1e-14);
        assert!((p.re - x.norm_sq()).abs() < 1e-12);
        assert!(p.re >= 0.0);
    }

    #[test]
    fn inner_of_distinct_deltas_vanishes() {
        let a = ComplexImage::delta(4, 4, 0, 1);
        let b = ComplexImage::delta(4, 4, 2, 3);
        assert_eq!(inner(&a, &b).unwrap(), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn inner_is_conjugate_linear_in_first_slot() {
        let x = random(6, 6, 2);
        let ix = x.scale_complex(Complex64::i());
        let p = inner(&ix, &x).unwrap();
        let n = x.norm_sq();
        assert!((p - Complex64::new(0.0, -n)).norm() < 1e-12);
    }

    #[test]
    fn inner_is_conjugate_symmetric() {
        let x = random(6, 5, 3);
        let y = random(6, 5, 4);
        let a = inner(&x, &y).unwrap();
        let b = inner(&y, &x).unwrap();
        assert!((a - b.conj()).norm() < 1e-12);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ComplexImage::new(0, 3, vec![], vec![]).is_err());
        assert!(ComplexImage::new(2, 2, vec![0.0; 4], vec![0.0; 3]).is_err());
        assert!(ComplexImage::new(1, 1, vec![f64::NAN], vec![0.0]).is_err());
        assert!(inner(&random(2, 3, 0), &random(3, 2, 0)).is_err());
    }
}
