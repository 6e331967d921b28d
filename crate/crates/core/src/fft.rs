//! Unitary 2D DFT.
//!
//! Both directions are scaled by `1/sqrt(h*w)`, so `fft2` is unitary and
//! `ifft2` is simultaneously its inverse and its adjoint. Spectra are kept in
//! FFT-native order (DC at index `(0, 0)`); [`fftshift`] and [`ifftshift`]
//! convert to and from the DC-centered display order.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::image::ComplexImage;

struct Plan2 {
    rows_fwd: Arc<dyn Fft<f64>>,
    rows_inv: Arc<dyn Fft<f64>>,
    cols_fwd: Arc<dyn Fft<f64>>,
    cols_inv: Arc<dyn Fft<f64>>,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
    static PLANS: RefCell<HashMap<(usize, usize), Arc<Plan2>>> = RefCell::new(HashMap::new());
}

fn plan(h: usize, w: usize) -> Arc<Plan2> {
    PLANS.with(|plans| {
        if let Some(p) = plans.borrow().get(&(h, w)) {
            return p.clone();
        }
        let p = PLANNER.with(|planner| {
            let mut planner = planner.borrow_mut();
            Arc::new(Plan2 {
                rows_fwd: planner.plan_fft_forward(w),
                rows_inv: planner.plan_fft_inverse(w),
                cols_fwd: planner.plan_fft_forward(h),
                cols_inv: planner.plan_fft_inverse(h),
            })
        });
        plans.borrow_mut().insert((h, w), p.clone());
        p
    })
}

/// In-place unitary 2D transform of a row-major `h x w` buffer.
pub(crate) fn transform(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(buf.len(), h * w);
    let p = plan(h, w);
    let (rows, cols) = if inverse { (&p.rows_inv, &p.cols_inv) } else { (&p.rows_fwd, &p.cols_fwd) };
    rows.process(buf);
    if h > 1 {
        let mut t = vec![Complex64::new(0.0, 0.0); h * w];
        for i in 0..h {
            for j in 0..w {
                t[j * h + i] = buf[i * w + j];
            }
        }
        cols.process(&mut t);
        for j in 0..w {
            for i in 0..h {
                buf[i * w + j] = t[j * h + i];
            }
        }
    }
    let s = 1.0 / ((h * w) as f64).sqrt();
    for z in buf.iter_mut() {
        *z *= s;
    }
}

pub fn fft2(x: &ComplexImage) -> ComplexImage {
    let (h, w) = x.dims();
    let mut buf = x.to_complex_vec();
    transform(&mut buf, h, w, false);
    ComplexImage::from_complex(h, w, &buf)
}

pub fn ifft2(x: &ComplexImage) -> ComplexImage {
    let (h, w) = x.dims();
    let mut buf = x.to_complex_vec();
    transform(&mut buf, h, w, true);
    ComplexImage::from_complex(h, w, &buf)
}

/// Moves the DC entry from `(0, 0)` to `(h/2, w/2)`.
pub fn fftshift<T: Clone>(data: &[T], h: usize, w: usize) -> Vec<T> {
    roll(data, h, w, h / 2, w / 2)
}

/// Inverse of [`fftshift`]; differs from it for odd sizes.
pub fn ifftshift<T: Clone>(data: &[T], h: usize, w: usize) -> Vec<T> {
    roll(data, h, w, h - h / 2, w - w / 2)
}

fn roll<T: Clone>(data: &[T], h: usize, w: usize, di: usize, dj: usize) -> Vec<T> {
    assert_eq!(data.len(), h * w);
    let mut out = data.to_vec();
    for i in 0..h {
        for j in 0..w {
            out[((i + di) % h) * w + (j + dj) % w] = data[i * w + j].clone();
        }
    }
    out
}
