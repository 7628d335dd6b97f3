//! Leaky integrate-and-fire neurons with hard reset and an arctan surrogate.
//!
//! Charge:  `U[t] = V[t-1] + (X[t] - (V[t-1] - V_reset)) / k_tau`
//! Fire:    `S[t] = H(U[t] - V_th)` with `H(0) = 1`
//! Reset:   `V[t] = U[t] (1 - S[t]) + V_reset S[t]`
//!
//! The forward pass uses the exact step; only the backward pass sees the
//! surrogate. The reset multiplication is treated as a constant in backward.

use std::f64::consts::FRAC_PI_2;

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{BackwardCtx, BackwardRule, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    /// Decay factor; 1 means no leak.
    pub k_tau: f64,
    pub v_th: f64,
    pub v_reset: f64,
    /// Sharpness of the arctan surrogate. Zero disables gradient flow
    /// through spikes entirely.
    pub surrogate_alpha: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            k_tau: 2.0,
            v_th: 1.0,
            v_reset: 0.0,
            surrogate_alpha: 2.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.k_tau, self.v_th, self.v_reset, self.surrogate_alpha]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return invalid("LIF parameters must be finite");
        }
        if self.k_tau < 1.0 {
            return invalid(format!("k_tau must be >= 1, got {}", self.k_tau));
        }
        if self.v_th <= self.v_reset {
            return invalid(format!("v_th ({}) must exceed v_reset ({})", self.v_th, self.v_reset));
        }
        if self.surrogate_alpha < 0.0 {
            return invalid("surrogate_alpha must be non-negative");
        }
        Ok(())
    }

    pub fn with_threshold(mut self, v_th: f64) -> Self {
        self.v_th = v_th;
        self
    }
}

/// Membrane potential carried between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState<S: Scalar = f32> {
    pub v: Tensor<S>,
}

impl<S: Scalar> LifState<S> {
    pub fn at_rest(shape: &[usize], p: &LifParams) -> Self {
        LifState {
            v: Tensor::full(shape, S::cast(p.v_reset)),
        }
    }
}

#[inline]
fn heaviside(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// dS/dU of the arctan surrogate: `alpha / (2 (1 + (pi/2 alpha (u - v_th))^2))`.
#[inline]
pub fn surrogate(u: f64, v_th: f64, alpha: f64) -> f64 {
    let z = FRAC_PI_2 * alpha * (u - v_th);
    alpha / (2.0 * (1.0 + z * z))
}

pub fn surrogate_grad<S: Scalar>(u: &Tensor<S>, p: &LifParams) -> Tensor<S> {
    Tensor::from_fn(u.shape(), |i| {
        S::cast(surrogate(u.data()[i].wide(), p.v_th, p.surrogate_alpha))
    })
}

/// One charge/fire/reset step. Returns `(spikes, new_state, membrane U)`.
fn step_raw<S: Scalar>(x: &[S], v: &[S], p: &LifParams, spikes: &mut [S], v_next: &mut [S], u_out: &mut [S]) {
    let inv_k = 1.0 / p.k_tau;
    for i in 0..x.len() {
        let vp = v[i].wide();
        let u = S::cast(vp + inv_k * (x[i].wide() - (vp - p.v_reset)));
        let s = heaviside(u.wide() - p.v_th);
        spikes[i] = S::cast(s);
        v_next[i] = if s == 1.0 { S::cast(p.v_reset) } else { u };
        u_out[i] = u;
    }
}

pub fn lif_step<S: Scalar>(x_t: &Tensor<S>, state: &LifState<S>, p: &LifParams) -> Result<(Tensor<S>, LifState<S>)> {
    if x_t.shape() != state.v.shape() {
        return shape_err(format!(
            "LIF input {:?} does not match state {:?}",
            x_t.shape(),
            state.v.shape()
        ));
    }
    let n = x_t.numel();
    let mut s = vec![S::ZERO; n];
    let mut v = vec![S::ZERO; n];
    let mut u = vec![S::ZERO; n];
    step_raw(x_t.data(), state.v.data(), p, &mut s, &mut v, &mut u);
    Ok((
        Tensor::from_vec_unchecked(x_t.shape(), s)?,
        LifState {
            v: Tensor::from_vec_unchecked(x_t.shape(), v)?,
        },
    ))
}

/// Run from rest over axis 0. Returns spikes and the membrane potential `U`
/// at every step (kept for the backward pass).
fn run_sequence<S: Scalar>(x: &Tensor<S>, p: &LifParams) -> Result<(Tensor<S>, Vec<S>)> {
    if x.rank() == 0 || x.shape()[0] == 0 {
        return invalid("LIF sequence needs at least one timestep");
    }
    let steps = x.shape()[0];
    let per = x.numel() / steps;
    let mut v = vec![S::cast(p.v_reset); per];
    let mut v_next = vec![S::ZERO; per];
    let mut spikes = vec![S::ZERO; x.numel()];
    let mut u = vec![S::ZERO; x.numel()];
    for t in 0..steps {
        let r = t * per..(t + 1) * per;
        step_raw(
            &x.data()[r.clone()],
            &v,
            p,
            &mut spikes[r.clone()],
            &mut v_next,
            &mut u[r],
        );
        std::mem::swap(&mut v, &mut v_next);
    }
    Ok((Tensor::from_vec_unchecked(x.shape(), spikes)?, u))
}

pub fn lif_sequence<S: Scalar>(x: &Tensor<S>, p: &LifParams) -> Result<Tensor<S>> {
    p.validate()?;
    Ok(run_sequence(x, p)?.0)
}

/// Like [`lif_sequence`], also returning the pre-reset membrane `U`.
pub fn lif_sequence_membrane<S: Scalar>(x: &Tensor<S>, p: &LifParams) -> Result<(Tensor<S>, Tensor<S>)> {
    p.validate()?;
    let (s, u) = run_sequence(x, p)?;
    let u = Tensor::from_vec_unchecked(x.shape(), u)?;
    Ok((s, u))
}

struct LifSequenceRule<S: Scalar> {
    params: LifParams,
    membrane: Vec<S>,
}

impl<S: Scalar> BackwardRule<S> for LifSequenceRule<S> {
    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Result<Vec<Option<Vec<S>>>> {
        let spikes = ctx.output().data();
        let g = ctx.grad_output();
        let steps = ctx.output().shape()[0];
        let per = spikes.len() / steps;
        let p = &self.params;
        let leak = 1.0 - 1.0 / p.k_tau;
        let mut dx = vec![S::ZERO; spikes.len()];
        // Gradient flowing into V[t] from step t+1.
        let mut dv = vec![0.0f64; per];
        for t in (0..steps).rev() {
            for i in 0..per {
                let k = t * per + i;
                let ds = g[k].wide();
                let du = ds * surrogate(self.membrane[k].wide(), p.v_th, p.surrogate_alpha)
                    + dv[i] * (1.0 - spikes[k].wide());
                dx[k] = S::cast(du / p.k_tau);
                dv[i] = du * leak;
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Recorded LIF layer over a `[T, ...]` input.
pub fn lif_sequence_op<S: Scalar>(tape: &mut Tape<S>, x: Var, p: &LifParams) -> Result<Var> {
    p.validate()?;
    let (spikes, membrane) = run_sequence(tape.value(x), p)?;
    let rule = LifSequenceRule { params: *p, membrane };
    Ok(tape.custom(&[x], spikes, Box::new(rule)))
}

struct ThresholdRule {
    v_th: f64,
    alpha: f64,
}

impl<S: Scalar> BackwardRule<S> for ThresholdRule {
    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Result<Vec<Option<Vec<S>>>> {
        let u = ctx.input(0).data();
        let g = ctx.grad_output();
        let dx = u
            .iter()
            .zip(g)
            .map(|(&u, &d)| S::cast(d.wide() * surrogate(u.wide(), self.v_th, self.alpha)))
            .collect();
        Ok(vec![Some(dx)])
    }
}

/// Stateless threshold unit: `1` where `u >= v_th`.
pub fn threshold<S: Scalar>(u: &Tensor<S>, v_th: f64) -> Tensor<S> {
    Tensor::from_fn(u.shape(), |i| S::cast(heaviside(u.data()[i].wide() - v_th)))
}

/// Recorded stateless threshold with the arctan surrogate in backward.
pub fn threshold_op<S: Scalar>(tape: &mut Tape<S>, u: Var, v_th: f64, alpha: f64) -> Var {
    let out = threshold(tape.value(u), v_th);
    tape.custom(&[u], out, Box::new(ThresholdRule { v_th, alpha }))
}
