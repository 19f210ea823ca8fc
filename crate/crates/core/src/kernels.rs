//! Eigensystem impulse responses as exponential mixtures and their correlation kernels.
//!
//! Every eigensystem response is stored as `h(t) = f·δ(t) + Σ r_k e^{p_k t} u(t)`.
//! Differentiation, integration and cascading keep that form, and the
//! cross-correlation of two mixtures driven by unit white noise is again a sum
//! of exponentials in the lag, which [`CorrKernel`] holds in closed form.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{EigenSpace, TurbineSpec};

/// Relative distance below which two poles are treated as a repeated pole and split.
pub const POLE_SPLIT_REL: f64 = 1e-5;
/// Pole sums smaller than this make a correlation integral diverge.
pub const RESONANCE_TOL: f64 = 1e-12;
/// Real part above which a computed pole is considered unstable.
pub const UNSTABLE_TOL: f64 = 1e-10;

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn split_width(p: Complex64) -> f64 {
    POLE_SPLIT_REL * p.norm().max(1.0)
}

/// Poles and residues of `s / (s² + γ s + λ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenSystemPoles {
    pub index: usize,
    pub lambda: f64,
    pub a: Complex64,
    pub b: Complex64,
    pub c: Complex64,
    pub d: Complex64,
}

/// Second-order eigensystem poles; a critically damped pair is split by a small real offset.
pub fn poles_second_order(lambda: f64, gamma: f64) -> EigenSystemPoles {
    let p = c(-gamma / 2.0);
    let mut s = c(gamma * gamma - 4.0 * lambda).sqrt();
    if s.norm() < split_width(p) {
        s = c(split_width(p));
    }
    let cc = (c(-gamma) + s) / 2.0;
    let dd = (c(-gamma) - s) / 2.0;
    let (a, b) = if lambda == 0.0 {
        // exact cancellation of the integrator pole
        (c(0.0), c(1.0))
    } else {
        (cc / (cc - dd), -dd / (cc - dd))
    };
    EigenSystemPoles {
        index: 0,
        lambda,
        a,
        b,
        c: cc,
        d: dd,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelQuantity {
    Angle,
    Speed,
    Rocof,
}

/// `h(t) = feedthrough·δ(t) + Σ r_k e^{p_k t} u(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpMixKernel {
    pub terms: Vec<(Complex64, Complex64)>,
    pub feedthrough: f64,
}

impl ExpMixKernel {
    pub fn new(terms: Vec<(Complex64, Complex64)>) -> Self {
        Self { terms, feedthrough: 0.0 }
    }

    pub fn zero() -> Self {
        Self::new(Vec::new())
    }

    /// First-order lag `1/(τ s + 1)`.
    pub fn first_order_lag(tau: f64) -> Self {
        Self::new(vec![(c(1.0 / tau), c(-1.0 / tau))])
    }

    /// Strictly proper part at `t` (right limit at 0, zero for negative t).
    pub fn eval(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        self.terms.iter().map(|&(r, p)| (r * (p * t).exp()).re).sum()
    }

    /// Complex evaluation, used to check realness.
    pub fn eval_complex(&self, t: f64) -> Complex64 {
        self.terms.iter().map(|&(r, p)| r * (p * t).exp()).sum()
    }

    /// Σ r_k, the jump of the strictly proper part at t = 0.
    pub fn initial_value(&self) -> f64 {
        self.terms.iter().map(|&(r, _)| r.re).sum()
    }

    pub fn scaled(&self, w: f64) -> Self {
        Self {
            terms: self.terms.iter().map(|&(r, p)| (r * w, p)).collect(),
            feedthrough: self.feedthrough * w,
        }
    }

    /// Sum of two responses.
    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for &(r, p) in &other.terms {
            match out.terms.iter_mut().find(|(_, q)| *q == p) {
                Some(t) => t.0 += r,
                None => out.terms.push((r, p)),
            }
        }
        out.feedthrough += other.feedthrough;
        out
    }

    /// Time derivative; the jump at 0 becomes a feedthrough.
    pub fn derivative(&self) -> Result<Self> {
        if self.feedthrough != 0.0 {
            return Err(Error::Invalid("derivative of a response with feedthrough".into()));
        }
        Ok(Self {
            terms: self.terms.iter().map(|&(r, p)| (r * p, p)).collect(),
            feedthrough: self.initial_value(),
        })
    }

    /// Running integral `∫₀ᵗ h`, valid when the result stays bounded.
    pub fn integral(&self) -> Result<Self> {
        if self.feedthrough != 0.0 {
            return Err(Error::Invalid("integral of a response with feedthrough".into()));
        }
        if self.terms.iter().any(|&(_, p)| p.norm() < RESONANCE_TOL) {
            return Err(Error::Invalid("integral of a response with a pole at zero".into()));
        }
        // ∫ r e^{pt} = (r/p)(e^{pt} − 1); the constant cancels when Σ r/p = 0,
        // which holds for every transfer with a zero at the origin.
        let dc: Complex64 = self.terms.iter().map(|&(r, p)| r / p).sum();
        if dc.norm() > 1e-9 * self.terms.iter().map(|&(r, p)| (r / p).norm()).sum::<f64>().max(1e-300) {
            return Err(Error::Invalid("integral has a nonzero steady state".into()));
        }
        Ok(Self::new(self.terms.iter().map(|&(r, p)| (r / p, p)).collect()))
    }

    /// Cascade with `1/(τ s + 1)`.
    pub fn cascade_lag(&self, tau: f64) -> Self {
        let mut q = c(-1.0 / tau);
        if let Some(&(_, p)) = self.terms.iter().find(|&&(_, p)| (p - q).norm() < split_width(q)) {
            q = p - split_width(q);
        }
        let g = |s: Complex64| c(1.0 / tau) / (s - q);
        let mut terms: Vec<_> = self.terms.iter().map(|&(r, p)| (r * g(p), p)).collect();
        let h_at_q: Complex64 = self.terms.iter().map(|&(r, p)| r / (q - p)).sum::<Complex64>() + self.feedthrough;
        terms.push((c(1.0 / tau) * h_at_q, q));
        Self::new(terms)
    }

    pub fn max_real_pole(&self) -> f64 {
        self.terms.iter().map(|&(_, p)| p.re).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Expansion of an eigensystem into its response for one quantity.
pub fn to_expmix(poles: &EigenSystemPoles, quantity: KernelQuantity) -> Result<ExpMixKernel> {
    let mut terms = Vec::with_capacity(2);
    if poles.a != c(0.0) {
        terms.push((poles.a, poles.c));
    }
    terms.push((poles.b, poles.d));
    let speed = ExpMixKernel::new(terms);
    match quantity {
        KernelQuantity::Speed => Ok(speed),
        KernelQuantity::Angle => {
            if poles.lambda <= 0.0 {
                return Err(Error::ZeroModeAngle(poles.index));
            }
            // residues of 1/(s² + γs + λ) are r/p
            Ok(ExpMixKernel::new(speed.terms.iter().map(|&(r, p)| (r / p, p)).collect()))
        }
        KernelQuantity::Rocof => speed.derivative(),
    }
}

fn poly_eval(coef: &[f64], s: Complex64) -> Complex64 {
    coef.iter().fold(c(0.0), |acc, &a| acc * s + a)
}

fn poly_deriv(coef: &[f64]) -> Vec<f64> {
    let n = coef.len() - 1;
    coef[..n].iter().enumerate().map(|(k, &a)| a * (n - k) as f64).collect()
}

/// Roots of a real polynomial with coefficients in descending powers.
pub fn poly_roots(coef: &[f64]) -> Result<Vec<Complex64>> {
    let n = coef.len() - 1;
    if n == 0 {
        return Ok(Vec::new());
    }
    let lead = coef[0];
    if lead == 0.0 {
        return Err(Error::Invalid("leading polynomial coefficient is zero".into()));
    }
    let mut comp = DMatrix::zeros(n, n);
    for k in 0..n {
        comp[(0, k)] = -coef[k + 1] / lead;
    }
    for k in 1..n {
        comp[(k, k - 1)] = 1.0;
    }
    let eig = comp.complex_eigenvalues();
    let dcoef = poly_deriv(coef);
    let mut roots: Vec<Complex64> = eig.iter().copied().collect();
    for r in roots.iter_mut() {
        for _ in 0..4 {
            let f = poly_eval(coef, *r);
            let df = poly_eval(&dcoef, *r);
            if df.norm() == 0.0 {
                break;
            }
            let step = f / df;
            if !step.re.is_finite() || !step.im.is_finite() {
                break;
            }
            *r -= step;
        }
        if r.im.abs() < 1e-14 * r.norm().max(1.0) {
            r.im = 0.0;
        }
    }
    if roots.iter().any(|r| !r.re.is_finite() || !r.im.is_finite()) {
        return Err(Error::Eigen("polynomial root finder produced non-finite roots".into()));
    }
    Ok(roots)
}

/// Partial-fraction expansion of a strictly proper `num/den`, splitting repeated poles.
pub fn rational_expmix(num: &[f64], den: &[f64]) -> Result<ExpMixKernel> {
    if num.len() >= den.len() {
        return Err(Error::Invalid("transfer function must be strictly proper".into()));
    }
    let mut roots = poly_roots(den)?;
    roots.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    for k in 1..roots.len() {
        for l in 0..k {
            let w = split_width(roots[l]);
            if (roots[k] - roots[l]).norm() < w {
                roots[k] = roots[l] + w;
            }
        }
    }
    if let Some(p) = roots.iter().find(|p| p.re > UNSTABLE_TOL) {
        return Err(Error::UnstablePole { re: p.re, im: p.im });
    }
    let lead = den[0];
    let terms = roots
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let mut q = c(lead);
            for (l, &o) in roots.iter().enumerate() {
                if l != k {
                    q *= p - o;
                }
            }
            (poly_eval(num, p) / q, p)
        })
        .collect();
    Ok(ExpMixKernel::new(terms))
}

/// Speed response `s(τs+1) / (τs³ + (1+γτ)s² + (γ+r+τλ)s + λ)` of the turbine/droop eigensystem.
pub fn poles_third_order(lambda: f64, gamma: f64, turbine: &TurbineSpec) -> Result<ExpMixKernel> {
    let tau = turbine.tau;
    let r = turbine.droop_r;
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("turbine tau must be positive, got {tau}")));
    }
    if lambda == 0.0 {
        // the factor s cancels
        rational_expmix(&[tau, 1.0], &[tau, 1.0 + gamma * tau, gamma + r])
    } else {
        rational_expmix(&[tau, 1.0, 0.0], &[tau, 1.0 + gamma * tau, gamma + r + tau * lambda, lambda])
    }
}

/// Response of eigensystem `(λ, γ)` for a quantity, with optional turbine/droop dynamics.
pub fn mode_kernel(
    lambda: f64,
    gamma: f64,
    turbine: Option<&TurbineSpec>,
    quantity: KernelQuantity,
) -> Result<ExpMixKernel> {
    let speed = match turbine {
        None => return to_expmix(&poles_second_order(lambda, gamma), quantity),
        Some(t) => poles_third_order(lambda, gamma, t)?,
    };
    match quantity {
        KernelQuantity::Speed => Ok(speed),
        KernelQuantity::Rocof => speed.derivative(),
        KernelQuantity::Angle => {
            if lambda <= 0.0 {
                return Err(Error::ZeroModeAngle(0));
            }
            speed.integral()
        }
    }
}

fn push_merge(list: &mut Vec<(Complex64, Complex64)>, coef: Complex64, pole: Complex64) {
    match list.iter_mut().find(|(_, p)| *p == pole) {
        Some(t) => t.0 += coef,
        None => list.push((coef, pole)),
    }
}

/// Cross-correlation `k(τ) = ∫ g_A(τ+s) g_B(s) ds` of two responses to a common white input.
///
/// `pos` holds the terms used for τ > 0 (exponent `p τ`), `neg` those for τ < 0
/// (exponent `−p τ`). The `jump_*` lists come from a feedthrough on the other side
/// and take half weight at τ = 0. `impulse` is the weight of `δ(τ)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrKernel {
    pub pos: Vec<(Complex64, Complex64)>,
    pub neg: Vec<(Complex64, Complex64)>,
    pub jump_pos: Vec<(Complex64, Complex64)>,
    pub jump_neg: Vec<(Complex64, Complex64)>,
    pub impulse: f64,
}

impl CorrKernel {
    /// `weight · ∫ g_a(τ+s) g_b(s) ds`.
    pub fn from_pair(ga: &ExpMixKernel, gb: &ExpMixKernel, weight: f64) -> Result<Self> {
        let mut out = Self::default();
        out.accumulate(ga, gb, weight)?;
        Ok(out)
    }

    pub fn accumulate(&mut self, ga: &ExpMixKernel, gb: &ExpMixKernel, weight: f64) -> Result<()> {
        if weight == 0.0 {
            return Ok(());
        }
        for &(r, p) in &ga.terms {
            for &(s, q) in &gb.terms {
                let sum = p + q;
                if sum.norm() < RESONANCE_TOL {
                    return Err(Error::ResonantPoles(sum.norm()));
                }
                let base = r * s / (-sum) * weight;
                push_merge(&mut self.pos, base, p);
                push_merge(&mut self.neg, base, q);
            }
        }
        if gb.feedthrough != 0.0 {
            for &(r, p) in &ga.terms {
                push_merge(&mut self.jump_pos, r * gb.feedthrough * weight, p);
            }
        }
        if ga.feedthrough != 0.0 {
            for &(s, q) in &gb.terms {
                push_merge(&mut self.jump_neg, s * ga.feedthrough * weight, q);
            }
        }
        self.impulse += ga.feedthrough * gb.feedthrough * weight;
        Ok(())
    }

    pub fn add(&mut self, other: &Self) {
        for &(a, p) in &other.pos {
            push_merge(&mut self.pos, a, p);
        }
        for &(a, p) in &other.neg {
            push_merge(&mut self.neg, a, p);
        }
        for &(a, p) in &other.jump_pos {
            push_merge(&mut self.jump_pos, a, p);
        }
        for &(a, p) in &other.jump_neg {
            push_merge(&mut self.jump_neg, a, p);
        }
        self.impulse += other.impulse;
    }

    fn sum(list: &[(Complex64, Complex64)], t: f64) -> Complex64 {
        list.iter().map(|&(a, p)| a * (p * t).exp()).sum()
    }

    /// Kernel value excluding the `δ(τ)` part, with complex residue kept.
    pub fn eval_complex(&self, tau: f64) -> Complex64 {
        if tau > 0.0 {
            Self::sum(&self.pos, tau) + Self::sum(&self.jump_pos, tau)
        } else if tau < 0.0 {
            Self::sum(&self.neg, -tau) + Self::sum(&self.jump_neg, -tau)
        } else {
            // the regular part is continuous; average both sides for robustness to round-off
            (Self::sum(&self.pos, 0.0) + Self::sum(&self.neg, 0.0)) * 0.5
                + (Self::sum(&self.jump_pos, 0.0) + Self::sum(&self.jump_neg, 0.0)) * 0.5
        }
    }

    /// Kernel value excluding the `δ(τ)` part.
    pub fn eval(&self, tau: f64) -> f64 {
        self.eval_complex(tau).re
    }

    pub fn impulse_weight(&self) -> f64 {
        self.impulse
    }

    pub fn is_zero(&self) -> bool {
        self.pos.is_empty() && self.neg.is_empty() && self.jump_pos.is_empty() && self.jump_neg.is_empty() && self.impulse == 0.0
    }
}

/// `∫ h_i(τ+s) h_j(s) ds`, excluding any `δ(τ)` term.
pub fn cross_corr(hi: &ExpMixKernel, hj: &ExpMixKernel, tau: f64) -> Result<f64> {
    Ok(CorrKernel::from_pair(hi, hj, 1.0)?.eval(tau))
}

/// `[K̃_τ]_{ij}` over the retained eigenstates for a pair of quantities.
pub fn kernel_matrix(
    space: &EigenSpace,
    quantities: (KernelQuantity, KernelQuantity),
    tau: f64,
    turbine: Option<&TurbineSpec>,
) -> Result<DMatrix<f64>> {
    let d = space.retained.len();
    if d == 0 {
        return Err(Error::Invalid("no retained eigenstates".into()));
    }
    let kernels = |q: KernelQuantity| -> Result<Vec<ExpMixKernel>> {
        space
            .retained
            .iter()
            .map(|&i| {
                mode_kernel(space.eigvals[i], space.gamma, turbine, q).map_err(|e| match e {
                    Error::ZeroModeAngle(_) => Error::ZeroModeAngle(i),
                    other => other,
                })
            })
            .collect()
    };
    let left = kernels(quantities.0)?;
    let right = kernels(quantities.1)?;
    let mut out = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            out[(i, j)] = cross_corr(&left[i], &right[j], tau)?;
        }
    }
    Ok(out)
}

/// `|H(jw)|²` of the speed transfer `s/(s² + γs + λ)`.
pub fn freq_response_sq(lambda: f64, gamma: f64, w: f64) -> f64 {
    if lambda == 0.0 {
        return w * w / (w * w + gamma * gamma);
    }
    let x = lambda / w - w;
    1.0 / (x * x + gamma * gamma)
}

/// Closed-form second-order kernels, kept as independent references for the engine.
pub mod closed_form {
    use super::*;

    /// Speed impulse response `a e^{ct} + b e^{dt}` with `u(0) = 1/2`.
    pub fn impulse(lambda: f64, gamma: f64, t: f64) -> f64 {
        let p = poles_second_order(lambda, gamma);
        let v = p.a * (p.c * t.abs()).exp() + p.b * (p.d * t.abs()).exp();
        if t > 0.0 {
            v.re
        } else if t == 0.0 {
            0.5 * v.re
        } else {
            0.0
        }
    }

    /// `k_ii(τ) = (h(τ) + h(−τ)) / 2γ`.
    pub fn auto(lambda: f64, gamma: f64, tau: f64) -> f64 {
        (impulse(lambda, gamma, tau) + impulse(lambda, gamma, -tau)) / (2.0 * gamma)
    }

    /// `k_ij(τ) = a_ij e^{c_i τ} + b_ij e^{d_i τ}` for τ ≥ 0, and `k_ji(−τ)` otherwise.
    pub fn cross(lambda_i: f64, lambda_j: f64, gamma: f64, tau: f64) -> f64 {
        if tau < 0.0 {
            return cross(lambda_j, lambda_i, gamma, -tau);
        }
        let pi = poles_second_order(lambda_i, gamma);
        let pj = poles_second_order(lambda_j, gamma);
        let (ci, di, cj, dj) = (pi.c, pi.d, pj.c, pj.d);
        let aij = -ci * ci / ((ci + cj) * (ci + dj) * (ci - di));
        let bij = di * di / ((cj + di) * (di + dj) * (ci - di));
        let mut v = bij * (di * tau).exp();
        // the c-pole term vanishes identically at λ_i = 0 (c_i = 0 is cancelled)
        if lambda_i != 0.0 {
            v += aij * (ci * tau).exp();
        }
        v.re
    }
}
