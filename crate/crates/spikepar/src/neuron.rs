//! Leaky integrate-and-fire dynamics as a discrete-time multistep layer.
//!
//! Discretization is forward Euler with a unit step:
//! `u' = u + (1/tau)*(-(u - u_rest) + R*x)`, spike where `u' >= u_th`,
//! hard reset to `u_r`. Training uses a surrogate derivative for the spike
//! nonlinearity with the reset path detached; a soft mode replaces the
//! Heaviside with the surrogate sigmoid in forward and backward so the whole
//! network admits finite-difference validation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use std::rc::Rc;

#[derive(Debug, Clone, Copy)]
pub struct LifParams<S> {
    pub tau_m: S,
    pub u_rest: S,
    pub u_th: S,
    pub u_r: S,
    pub r: S,
}

impl<S: Scalar> LifParams<S> {
    pub fn new(tau_m: S, u_rest: S, u_th: S, u_r: S, r: S) -> Result<Self> {
        if !(tau_m > S::zero()) {
            return Err(Error::Config(format!("tau_m must be positive, got {tau_m}")));
        }
        if !(u_r < u_th) {
            return Err(Error::Config(format!("u_r ({u_r}) must be below u_th ({u_th})")));
        }
        if !(u_rest <= u_th) {
            return Err(Error::Config(format!("u_rest ({u_rest}) must not exceed u_th ({u_th})")));
        }
        Ok(LifParams { tau_m, u_rest, u_th, u_r, r })
    }

    /// Membrane carry factor per step, `1 - 1/tau`.
    pub fn leak(&self) -> S {
        S::one() - S::one() / self.tau_m
    }

    /// Input coupling per step, `R/tau`.
    pub fn drive(&self) -> S {
        self.r / self.tau_m
    }
}

impl<S: Scalar> Default for LifParams<S> {
    fn default() -> Self {
        LifParams {
            tau_m: S::of_f64(2.0),
            u_rest: S::zero(),
            u_th: S::one(),
            u_r: S::zero(),
            r: S::one(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateKind {
    Sigmoid,
    Arctan,
    Rectangular,
}

#[derive(Debug, Clone, Copy)]
pub struct SurrogateSpec<S> {
    pub kind: SurrogateKind,
    pub width: S,
}

impl<S: Scalar> SurrogateSpec<S> {
    pub fn new(kind: SurrogateKind, width: S) -> Result<Self> {
        if !(width > S::zero()) {
            return Err(Error::Config(format!("surrogate width must be positive, got {width}")));
        }
        Ok(SurrogateSpec { kind, width })
    }

    /// Smooth spike stand-in evaluated at `u - u_th`.
    pub fn soft(&self, d: S) -> S {
        let w = self.width;
        match self.kind {
            SurrogateKind::Sigmoid => (w * d).sigmoid(),
            SurrogateKind::Arctan => {
                S::half() + (w * d).atan() / S::of_f64(std::f64::consts::PI)
            }
            SurrogateKind::Rectangular => {
                let v = S::half() + w * d;
                v.max(S::zero()).min(S::one())
            }
        }
    }

    /// d(soft)/du evaluated at `u - u_th`; nonnegative, maximal at 0.
    pub fn derivative(&self, d: S) -> S {
        let w = self.width;
        match self.kind {
            SurrogateKind::Sigmoid => {
                let s = (w * d).sigmoid();
                w * s * (S::one() - s)
            }
            SurrogateKind::Arctan => {
                let t = w * d;
                w / (S::of_f64(std::f64::consts::PI) * (S::one() + t * t))
            }
            SurrogateKind::Rectangular => {
                if (w * d).abs() < S::half() {
                    w
                } else {
                    S::zero()
                }
            }
        }
    }
}

impl<S: Scalar> Default for SurrogateSpec<S> {
    fn default() -> Self {
        SurrogateSpec { kind: SurrogateKind::Sigmoid, width: S::of_f64(4.0) }
    }
}

#[derive(Debug, Clone)]
pub struct LifState<S> {
    pub u: Tensor<S>,
    pub t: usize,
}

impl<S: Scalar> LifState<S> {
    pub fn resting(shape: &[usize], p: &LifParams<S>) -> Self {
        LifState { u: Tensor::full(shape, p.u_rest), t: 0 }
    }
}

/// One Euler step of the LIF dynamics. Returns the binary spike tensor and
/// the post-reset state.
pub fn lif_step<S: Scalar>(
    state: &LifState<S>,
    x_t: &Tensor<S>,
    p: &LifParams<S>,
) -> Result<(Tensor<S>, LifState<S>)> {
    if state.u.shape != x_t.shape {
        return Err(Error::ShapeMismatch {
            op: "lif_step",
            lhs: state.u.shape.clone(),
            rhs: x_t.shape.clone(),
        });
    }
    let inv_tau = S::one() / p.tau_m;
    let mut spikes = Tensor::zeros(&state.u.shape);
    let mut u_next = state.u.clone();
    for i in 0..u_next.data.len() {
        let u = state.u.data[i];
        let u_pre = u + inv_tau * (-(u - p.u_rest) + p.r * x_t.data[i]);
        if u_pre >= p.u_th {
            spikes.data[i] = S::one();
            u_next.data[i] = p.u_r;
        } else {
            u_next.data[i] = u_pre;
        }
    }
    Ok((spikes, LifState { u: u_next, t: state.t + 1 }))
}

/// Surrogate spike derivative at the given pre-reset membrane values.
pub fn surrogate_backward<S: Scalar>(
    u_pre_reset: &Tensor<S>,
    p: &LifParams<S>,
    s: &SurrogateSpec<S>,
) -> Tensor<S> {
    Tensor {
        shape: u_pre_reset.shape.clone(),
        data: u_pre_reset.data.iter().map(|&u| s.derivative(u - p.u_th)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeMode {
    /// Binary spikes forward, surrogate gradient backward, reset detached.
    Hard,
    /// Smooth surrogate forward and backward (gradient-check mode).
    Soft,
}

impl<S: Scalar> Tape<S> {
    /// Multistep LIF layer over the leading time axis of `x: [T, ...]`.
    /// Membrane state starts at `u_rest` and is carried across steps within
    /// this call only.
    pub fn lif_multistep(
        &self,
        x: Var,
        p: &LifParams<S>,
        spec: &SurrogateSpec<S>,
        mode: SpikeMode,
    ) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape.is_empty() || vx.shape[0] == 0 {
            return Err(Error::Usage("lif_multistep requires T >= 1".into()));
        }
        let t_steps = vx.shape[0];
        let n = vx.numel() / t_steps;
        let leak = p.leak();
        let drive = p.drive();
        let rest_in = p.u_rest / p.tau_m;

        let mut out = vec![S::zero(); vx.numel()];
        let mut u_pre = vec![S::zero(); vx.numel()];
        let mut u = vec![p.u_rest; n];
        match mode {
            SpikeMode::Hard => {
                for t in 0..t_steps {
                    let base = t * n;
                    for i in 0..n {
                        let up = u[i] * leak + rest_in + drive * vx.data[base + i];
                        u_pre[base + i] = up;
                        if up >= p.u_th {
                            out[base + i] = S::one();
                            u[i] = p.u_r;
                        } else {
                            u[i] = up;
                        }
                    }
                }
            }
            SpikeMode::Soft => {
                for t in 0..t_steps {
                    let base = t * n;
                    for i in 0..n {
                        let up = u[i] * leak + rest_in + drive * vx.data[base + i];
                        u_pre[base + i] = up;
                        let s = spec.soft(up - p.u_th);
                        out[base + i] = s;
                        u[i] = s * p.u_r + (S::one() - s) * up;
                    }
                }
            }
        }

        let out_t = Tensor { shape: vx.shape.clone(), data: out };
        let out_rc = Rc::new(out_t);
        let spikes = Rc::clone(&out_rc);
        let u_pre = Rc::new(u_pre);
        let (p, spec) = (*p, *spec);
        Ok(self.push_rc(
            out_rc,
            &[x],
            Some(Box::new(move |g| {
                let mut dx = vec![S::zero(); g.len()];
                let mut carry = vec![S::zero(); n];
                for t in (0..t_steps).rev() {
                    let base = t * n;
                    for i in 0..n {
                        let up = u_pre[base + i];
                        let sd = spec.derivative(up - p.u_th);
                        let d = match mode {
                            SpikeMode::Hard => {
                                // reset path detached: membrane gradient is cut
                                // where the element spiked
                                let gate = S::one() - spikes.data[base + i];
                                g[base + i] * sd + carry[i] * leak * gate
                            }
                            SpikeMode::Soft => {
                                let s = spikes.data[base + i];
                                let dpost = (S::one() - s) + sd * (p.u_r - up);
                                g[base + i] * sd + carry[i] * leak * dpost
                            }
                        };
                        dx[base + i] = d * drive;
                        carry[i] = d;
                    }
                }
                vec![Some(dx)]
            })),
        ))
    }
}

/// Plain (non-tape) multistep forward used by oracles and quick inference.
pub fn multistep_lif<S: Scalar>(
    x: &Tensor<S>,
    p: &LifParams<S>,
    spec: &SurrogateSpec<S>,
) -> Result<Tensor<S>> {
    let tape = Tape::no_grad();
    let v = tape.leaf(x.clone(), false);
    let y = tape.lif_multistep(v, p, spec, SpikeMode::Hard)?;
    Ok(tape.value(y).as_ref().clone())
}

/// Smooth multistep forward (see [`SpikeMode::Soft`]).
pub fn soft_forward<S: Scalar>(
    x: &Tensor<S>,
    p: &LifParams<S>,
    spec: &SurrogateSpec<S>,
) -> Result<Tensor<S>> {
    let tape = Tape::no_grad();
    let v = tape.leaf(x.clone(), false);
    let y = tape.lif_multistep(v, p, spec, SpikeMode::Soft)?;
    Ok(tape.value(y).as_ref().clone())
}
