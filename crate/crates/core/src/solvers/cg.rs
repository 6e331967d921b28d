//! Conjugate gradients on complex images viewed as vectors in `R^{2N}`.

use crate::error::{invalid, Error, Result};
use crate::image::ComplexImage;

#[derive(Debug, Clone)]
pub struct CgResult {
    pub x: ComplexImage,
    /// True relative residual `||b - M x|| / ||b||` of the returned iterate.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Recurrence residual norms `||r_i||`, starting with `||b||`.
    pub residual_history: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Step {
    p: ComplexImage,
    q: ComplexImage,
    r_next: ComplexImage,
    rr: f64,
    rr_next: f64,
    pq: f64,
    alpha: f64,
    /// `beta_i` when the search direction was updated after this step.
    beta: Option<f64>,
}

/// Everything needed to differentiate the computed iterate through the
/// recorded iterations.
#[derive(Debug, Clone)]
pub struct CgTape {
    b: ComplexImage,
    steps: Vec<Step>,
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("conjugate gradient {what}")));
    }
    Ok(())
}

fn solve(
    mut apply: impl FnMut(&ComplexImage) -> ComplexImage,
    b: &ComplexImage,
    iters: usize,
    tol: f64,
    record: bool,
) -> Result<(CgResult, CgTape)> {
    if iters == 0 {
        return Err(invalid("conjugate gradient needs at least one iteration"));
    }
    if !b.is_finite() {
        return Err(Error::NonFinite("conjugate gradient right-hand side".into()));
    }
    let (h, w) = b.dims();
    let bn = b.norm();
    let mut tape = CgTape { b: b.clone(), steps: Vec::new() };
    if bn == 0.0 {
        let res = CgResult {
            x: ComplexImage::zeros(h, w),
            residual: 0.0,
            iterations: 0,
            converged: true,
            residual_history: vec![0.0],
        };
        return Ok((res, tape));
    }
    let mut x = ComplexImage::zeros(h, w);
    let mut r = b.clone();
    let mut p = b.clone();
    let mut rr = r.norm_sq();
    let mut history = vec![rr.sqrt()];
    let mut converged = false;
    let mut done = 0;
    for i in 0..iters {
        let q = apply(&p);
        let pq = p.real_dot(&q);
        check_finite(pq, "curvature")?;
        if pq <= 0.0 {
            return Err(invalid("conjugate gradient operator is not positive definite"));
        }
        let alpha = rr / pq;
        x.axpy(alpha, &p);
        let r_next = r.add_scaled(-alpha, &q);
        let rr_next = r_next.norm_sq();
        check_finite(rr_next, "residual")?;
        history.push(rr_next.sqrt());
        done = i + 1;
        converged = rr_next.sqrt() <= tol * bn;
        let beta = if converged || i + 1 == iters { None } else { Some(rr_next / rr) };
        let next_p = beta.map(|beta| r_next.add_scaled(beta, &p));
        if record {
            tape.steps.push(Step {
                p: p.clone(),
                q,
                r_next: r_next.clone(),
                rr,
                rr_next,
                pq,
                alpha,
                beta,
            });
        }
        r = r_next;
        rr = rr_next;
        match next_p {
            Some(np) => p = np,
            None => break,
        }
    }
    let residual = b.sub(&apply(&x)).norm() / bn;
    Ok((CgResult { x, residual, iterations: done, converged, residual_history: history }, tape))
}

/// Solves `M x = b` from `x = 0`, stopping at `||r|| <= tol ||b||` or after
/// `iters` iterations. `apply` must be symmetric positive definite with
/// respect to `Re <., .>`.
pub fn cg_solve(
    apply: impl FnMut(&ComplexImage) -> ComplexImage,
    b: &ComplexImage,
    iters: usize,
    tol: f64,
) -> Result<CgResult> {
    solve(apply, b, iters, tol, false).map(|(r, _)| r)
}

/// As [`cg_solve`], keeping the iteration history for [`CgTape::backward`].
pub fn cg_record(
    apply: impl FnMut(&ComplexImage) -> ComplexImage,
    b: &ComplexImage,
    iters: usize,
    tol: f64,
) -> Result<(CgResult, CgTape)> {
    solve(apply, b, iters, tol, true)
}

impl CgTape {
    pub fn iterations(&self) -> usize {
        self.steps.len()
    }

    /// Reverse pass through the recorded iterations given the cotangent of
    /// the returned iterate. `apply` is the same symmetric operator;
    /// `q_bar` receives `(p_i, cotangent of q_i = M p_i)` for every step so
    /// that the caller can accumulate gradients of parameters of `M`.
    /// Returns the cotangent of `b`.
    pub fn backward(
        &self,
        x_bar: &ComplexImage,
        mut apply: impl FnMut(&ComplexImage) -> ComplexImage,
        mut q_bar: impl FnMut(&ComplexImage, &ComplexImage),
    ) -> ComplexImage {
        let (h, w) = self.b.dims();
        let xb = x_bar.clone();
        let mut rb = ComplexImage::zeros(h, w);
        let mut pb = ComplexImage::zeros(h, w);
        let mut rrb = 0.0;
        for st in self.steps.iter().rev() {
            let mut pb_i = ComplexImage::zeros(h, w);
            let mut rrb_i = 0.0;
            if let Some(beta) = st.beta {
                // p_{i+1} = r_{i+1} + beta p_i, beta = rr_{i+1} / rr_i
                rb.axpy(1.0, &pb);
                let beta_bar = pb.real_dot(&st.p);
                pb_i.axpy(beta, &pb);
                rrb += beta_bar / st.rr;
                rrb_i -= beta_bar * st.rr_next / (st.rr * st.rr);
            }
            // rr_{i+1} = <r_{i+1}, r_{i+1}>
            rb.axpy(2.0 * rrb, &st.r_next);
            // r_{i+1} = r_i - alpha q_i
            let mut alpha_bar = -rb.real_dot(&st.q);
            let mut qb = rb.scale(-st.alpha);
            // x_{i+1} = x_i + alpha p_i
            alpha_bar += xb.real_dot(&st.p);
            pb_i.axpy(st.alpha, &xb);
            // alpha = rr_i / pq_i
            rrb_i += alpha_bar / st.pq;
            let pq_bar = -alpha_bar * st.rr / (st.pq * st.pq);
            pb_i.axpy(pq_bar, &st.q);
            qb.axpy(pq_bar, &st.p);
            // q_i = M p_i
            pb_i.axpy(1.0, &apply(&qb));
            q_bar(&st.p, &qb);
            pb = pb_i;
            rrb = rrb_i;
        }
        // r_0 = p_0 = b, rr_0 = <b, b>
        let mut b_bar = rb.add(&pb);
        b_bar.axpy(2.0 * rrb, &self.b);
        b_bar
    }
}
