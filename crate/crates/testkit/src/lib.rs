//! Independent reference implementations used as test oracles.
//!
//! Everything here works on plain vectors and is written as directly as
//! possible: naive DFT sums, dense matrices, explicit index arithmetic.
//! Nothing depends on the library under test.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::f64::consts::PI;

pub type C = Complex64;

fn c(re: f64, im: f64) -> C {
    C::new(re, im)
}

/// Unitary 2D DFT by direct summation; `inverse` flips the sign.
pub fn dft2(x: &[C], h: usize, w: usize, inverse: bool) -> Vec<C> {
    let sign = if inverse { 1.0 } else { -1.0 };
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let mut out = vec![c(0.0, 0.0); h * w];
    for k in 0..h {
        for l in 0..w {
            let mut acc = c(0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let phase = sign * 2.0 * PI * ((k * i) as f64 / h as f64 + (l * j) as f64 / w as f64);
                    acc += x[i * w + j] * C::from_polar(1.0, phase);
                }
            }
            out[k * w + l] = acc * scale;
        }
    }
    out
}

/// Dense unitary DFT matrix acting on row-major `h x w` images.
pub fn dft_matrix(h: usize, w: usize) -> DMatrix<C> {
    let n = h * w;
    let scale = 1.0 / (n as f64).sqrt();
    DMatrix::from_fn(n, n, |row, col| {
        let (k, l) = (row / w, row % w);
        let (i, j) = (col / w, col % w);
        let phase = -2.0 * PI * ((k * i) as f64 / h as f64 + (l * j) as f64 / w as f64);
        C::from_polar(scale, phase)
    })
}

/// Periodic convolution of `s` with a `kf x kf` kernel whose tap `(a, b)`
/// sits at offset `(a - kf/2, b - kf/2)`.
pub fn conv_kernel(s: &[C], h: usize, w: usize, taps: &[f64], kf: usize) -> Vec<C> {
    let r = (kf / 2) as isize;
    let mut out = vec![c(0.0, 0.0); h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = c(0.0, 0.0);
            for a in 0..kf as isize {
                for b in 0..kf as isize {
                    let si = (i - (a - r)).rem_euclid(h as isize);
                    let sj = (j - (b - r)).rem_euclid(w as isize);
                    acc += s[(si * w as isize + sj) as usize] * taps[(a * kf as isize + b) as usize];
                }
            }
            out[(i * w as isize + j) as usize] = acc;
        }
    }
    out
}

/// Dense `N x N` matrix of convolution with one kernel.
pub fn conv_matrix(h: usize, w: usize, taps: &[f64], kf: usize) -> DMatrix<C> {
    let n = h * w;
    let mut m = DMatrix::from_element(n, n, c(0.0, 0.0));
    for col in 0..n {
        let mut e = vec![c(0.0, 0.0); n];
        e[col] = c(1.0, 0.0);
        for (row, v) in conv_kernel(&e, h, w, taps, kf).into_iter().enumerate() {
            m[(row, col)] = v;
        }
    }
    m
}

/// `D = [C_1 ... C_K]`, mapping stacked codes to an image.
pub fn dictionary_matrix(h: usize, w: usize, filters: &[Vec<f64>], kf: usize) -> DMatrix<C> {
    let n = h * w;
    let mut d = DMatrix::from_element(n, n * filters.len(), c(0.0, 0.0));
    for (k, f) in filters.iter().enumerate() {
        d.view_mut((0, k * n), (n, n)).copy_from(&conv_matrix(h, w, f, kf));
    }
    d
}

/// Diagonal selection matrix of the retained coefficients.
pub fn mask_matrix(keep: &[bool]) -> DMatrix<C> {
    DMatrix::from_fn(keep.len(), keep.len(), |i, j| if i == j && keep[i] { c(1.0, 0.0) } else { c(0.0, 0.0) })
}

/// `A = M F`.
pub fn forward_matrix(h: usize, w: usize, keep: &[bool]) -> DMatrix<C> {
    mask_matrix(keep) * dft_matrix(h, w)
}

/// `B = M F D`.
pub fn synthesis_matrix(h: usize, w: usize, filters: &[Vec<f64>], kf: usize, keep: &[bool]) -> DMatrix<C> {
    forward_matrix(h, w, keep) * dictionary_matrix(h, w, filters, kf)
}

/// Dense periodic forward differences, stacked `[horizontal; vertical]`.
pub fn gradient_matrix(h: usize, w: usize) -> DMatrix<C> {
    let n = h * w;
    let mut g = DMatrix::from_element(2 * n, n, c(0.0, 0.0));
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            g[(p, i * w + (j + 1) % w)] += c(1.0, 0.0);
            g[(p, p)] -= c(1.0, 0.0);
            g[(n + p, ((i + 1) % h) * w + j)] += c(1.0, 0.0);
            g[(n + p, p)] -= c(1.0, 0.0);
        }
    }
    g
}

/// Largest singular value squared.
pub fn spectral_norm_sq(m: &DMatrix<C>) -> f64 {
    let s = m.clone().svd(false, false).singular_values;
    let top = s.iter().copied().fold(0.0, f64::max);
    top * top
}

pub fn to_vector(x: &[C]) -> DVector<C> {
    DVector::from_column_slice(x)
}

/// `(I + beta G^T G)^{-1} x0` by dense LU factorization.
pub fn lowpass_dense_solve(x0: &[C], h: usize, w: usize, beta: f64) -> Vec<C> {
    let g = gradient_matrix(h, w);
    let system = DMatrix::<C>::identity(h * w, h * w) + (g.adjoint() * &g).scale(beta);
    system.lu().solve(&to_vector(x0)).expect("system is positive definite").as_slice().to_vec()
}

/// `(I + beta G^T G)^{-1} x0` evaluated per frequency.
pub fn lowpass_closed_form(x0: &[C], h: usize, w: usize, beta: f64) -> Vec<C> {
    let spec = dft2(x0, h, w, false);
    let filtered: Vec<C> = (0..h * w)
        .map(|n| {
            let (k, l) = (n / w, n % w);
            let sym = (2.0 - 2.0 * (2.0 * PI * k as f64 / h as f64).cos())
                + (2.0 - 2.0 * (2.0 * PI * l as f64 / w as f64).cos());
            spec[n] / (1.0 + beta * sym)
        })
        .collect();
    dft2(&filtered, h, w, true)
}

/// Complex soft-threshold by brute-force minimization of
/// `1/2 |x - z|^2 + theta |x|`: a `points x points` Cartesian grid over the
/// box `|Re x|, |Im x| <= |z|`, then `levels` finer grids spanning ten cells
/// of the previous one around its best point. Zero is always a candidate.
pub fn prox_grid_search(z: C, theta: f64, points: usize, levels: usize) -> C {
    let objective = |x: C| 0.5 * (x - z).norm_sqr() + theta * x.norm();
    let mut best = (objective(c(0.0, 0.0)), c(0.0, 0.0));
    let mut centre = c(0.0, 0.0);
    let mut half = z.norm().max(1e-300);
    for _ in 0..=levels {
        let step = 2.0 * half / (points - 1) as f64;
        for a in 0..points {
            for b in 0..points {
                let x = centre + c(-half + a as f64 * step, -half + b as f64 * step);
                let v = objective(x);
                if v < best.0 {
                    best = (v, x);
                }
            }
        }
        centre = best.1;
        half = 5.0 * step;
    }
    best.1
}

/// Dense weighted LASSO `1/2 ||B s - y||^2 + sum lam_i |s_i|` solved by ISTA.
///
/// The complex problem is carried as a real one of twice the size,
/// `[Re s; Im s]`, with the real symmetric Gram matrix.
pub struct DenseLasso {
    n: usize,
    gram: Vec<f64>,
    rhs: Vec<f64>,
    b: DMatrix<C>,
    y: DVector<C>,
    lam: Vec<f64>,
}

impl DenseLasso {
    pub fn new(b: DMatrix<C>, y: &[C], lam: Vec<f64>) -> Self {
        let y = to_vector(y);
        let g = b.adjoint() * &b;
        let rc = b.adjoint() * &y;
        let n = rc.len();
        let m = 2 * n;
        let mut gram = vec![0.0; m * m];
        for i in 0..n {
            for j in 0..n {
                let v = g[(i, j)];
                gram[i * m + j] = v.re;
                gram[i * m + n + j] = -v.im;
                gram[(n + i) * m + j] = v.im;
                gram[(n + i) * m + n + j] = v.re;
            }
        }
        let rhs = rc.iter().map(|v| v.re).chain(rc.iter().map(|v| v.im)).collect();
        Self { n, gram, rhs, b, y, lam }
    }

    pub fn objective(&self, s: &DVector<C>) -> f64 {
        let r = &self.b * s - &self.y;
        0.5 * r.norm_squared() + s.iter().zip(&self.lam).map(|(v, l)| l * v.norm()).sum::<f64>()
    }

    /// Plain ISTA from zero for at most `iters` steps. Stops once an
    /// iteration leaves the iterate bitwise unchanged, or after 1000
    /// consecutive iterations whose largest change is at rounding level
    /// (the iterate then cycles in its last bits). Returns the final iterate
    /// and the number of steps taken.
    pub fn ista(&self, tau: f64, iters: usize) -> (DVector<C>, usize) {
        let (n, m) = (self.n, 2 * self.n);
        let mut s = vec![0.0; m];
        let mut next = vec![0.0; m];
        let mut taken = iters;
        let mut quiet = 0usize;
        for it in 1..=iters {
            for i in 0..m {
                let row = &self.gram[i * m..(i + 1) * m];
                let g: f64 = row.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() - self.rhs[i];
                next[i] = s[i] - tau * g;
            }
            for j in 0..n {
                let (re, im) = (next[j], next[n + j]);
                let r = re.hypot(im);
                let theta = tau * self.lam[j];
                let f = if r <= theta { 0.0 } else { 1.0 - theta / r };
                next[j] = re * f;
                next[n + j] = im * f;
            }
            if next == s {
                taken = it;
                break;
            }
            let scale = s.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let change = s.iter().zip(&next).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
            quiet = if change <= 8.0 * f64::EPSILON * scale { quiet + 1 } else { 0 };
            std::mem::swap(&mut s, &mut next);
            if quiet >= 1000 {
                taken = it;
                break;
            }
        }
        (DVector::from_iterator(n, (0..n).map(|j| c(s[j], s[n + j]))), taken)
    }
}

/// One convolution layer: `out x in x 3 x 3` weights and `out` biases.
pub struct Layer<'a> {
    pub cin: usize,
    pub cout: usize,
    pub weights: &'a [f64],
    pub bias: &'a [f64],
}

fn conv3(x: &[Vec<f64>], h: usize, w: usize, l: &Layer) -> Vec<Vec<f64>> {
    (0..l.cout)
        .map(|o| {
            let mut out = vec![0.0; h * w];
            for i in 0..h {
                for j in 0..w {
                    let mut acc = l.bias[o];
                    for cidx in 0..l.cin {
                        for a in 0..3 {
                            for b in 0..3 {
                                let ii = (i + h + a - 1) % h;
                                let jj = (j + w + b - 1) % w;
                                acc += l.weights[((o * l.cin + cidx) * 3 + a) * 3 + b] * x[cidx][ii * w + jj];
                            }
                        }
                    }
                    out[i * w + j] = acc;
                }
            }
            out
        })
        .collect()
}

fn relu(x: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    x.into_iter().map(|p| p.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

fn avg_pool(x: &[Vec<f64>], h: usize, w: usize) -> Vec<Vec<f64>> {
    x.iter()
        .map(|p| {
            let mut out = vec![0.0; (h / 2) * (w / 2)];
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    out[i * (w / 2) + j] =
                        (p[2 * i * w + 2 * j] + p[2 * i * w + 2 * j + 1] + p[(2 * i + 1) * w + 2 * j] + p[(2 * i + 1) * w + 2 * j + 1])
                            / 4.0;
                }
            }
            out
        })
        .collect()
}

fn nearest_up(x: &[Vec<f64>], h: usize, w: usize) -> Vec<Vec<f64>> {
    x.iter()
        .map(|p| {
            let mut out = vec![0.0; 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[i * 2 * w + j] = p[(i / 2) * w + j / 2];
                }
            }
            out
        })
        .collect()
}

/// Encoder-decoder forward pass `enc1, enc2, bottleneck, dec2, dec1` with
/// skip concatenations (upsampled features first), then `bound * sigmoid`.
pub fn cnn_forward(re: &[f64], im: &[f64], h: usize, w: usize, layers: &[Layer; 5], bound: f64) -> Vec<Vec<f64>> {
    let input = vec![re.to_vec(), im.to_vec()];
    let e1 = relu(conv3(&input, h, w, &layers[0]));
    let e2 = relu(conv3(&avg_pool(&e1, h, w), h / 2, w / 2, &layers[1]));
    let e3 = relu(conv3(&avg_pool(&e2, h / 2, w / 2), h / 4, w / 4, &layers[2]));
    let mut c2 = nearest_up(&e3, h / 4, w / 4);
    c2.extend(e2.iter().cloned());
    let d2 = relu(conv3(&c2, h / 2, w / 2, &layers[3]));
    let mut c1 = nearest_up(&d2, h / 2, w / 2);
    c1.extend(e1.iter().cloned());
    conv3(&c1, h, w, &layers[4])
        .into_iter()
        .map(|p| p.into_iter().map(|u| bound / (1.0 + (-u).exp())).collect())
        .collect()
}

/// `10 log10(peak^2 / mse)` over mask pixels of magnitude images.
pub fn psnr_reference(x: &[f64], t: &[f64], mask: &[bool]) -> f64 {
    let mut peak = 0.0f64;
    let mut sse = 0.0;
    let mut n = 0usize;
    for i in 0..x.len() {
        if mask[i] {
            peak = peak.max(t[i]);
            sse += (x[i] - t[i]).powi(2);
            n += 1;
        }
    }
    10.0 * (peak * peak / (sse / n as f64)).log10()
}

/// Sliding-window SSIM with an 11x11 Gaussian (sigma 1.5) on images zeroed
/// outside `mask`, averaged over fully interior windows centred in `mask`.
pub fn ssim_reference(x: &[f64], t: &[f64], mask: &[bool], h: usize, w: usize) -> f64 {
    let win = 11usize;
    let r = 5usize;
    let mut g = [[0.0f64; 11]; 11];
    let mut total_w = 0.0;
    for (a, row) in g.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let (da, db) = (a as f64 - 5.0, b as f64 - 5.0);
            *v = (-(da * da + db * db) / (2.0 * 1.5 * 1.5)).exp();
            total_w += *v;
        }
    }
    let xm: Vec<f64> = x.iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
    let tm: Vec<f64> = t.iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
    let peak = t.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).fold(0.0, f64::max);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let mut sum = 0.0;
    let mut count = 0;
    for i in r..h - r {
        for j in r..w - r {
            if !mask[i * w + j] {
                continue;
            }
            let mut mu = (0.0, 0.0);
            for a in 0..win {
                for b in 0..win {
                    let n = (i + a - r) * w + (j + b - r);
                    let wt = g[a][b] / total_w;
                    mu.0 += wt * xm[n];
                    mu.1 += wt * tm[n];
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for a in 0..win {
                for b in 0..win {
                    let n = (i + a - r) * w + (j + b - r);
                    let wt = g[a][b] / total_w;
                    vx += wt * (xm[n] - mu.0).powi(2);
                    vy += wt * (tm[n] - mu.1).powi(2);
                    cov += wt * (xm[n] - mu.0) * (tm[n] - mu.1);
                }
            }
            sum += ((2.0 * mu.0 * mu.1 + c1) * (2.0 * cov + c2)) / ((mu.0 * mu.0 + mu.1 * mu.1 + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

/// Central difference `(f(h) - f(-h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
