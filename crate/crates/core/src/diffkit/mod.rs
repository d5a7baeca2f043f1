//! Gradient machinery.
//!
//! Model code is written once against the [`Real`] scalar trait and the [`Ops`]
//! recorder. With [`Plain`] it evaluates on `f64`; with a [`Tape`] every
//! primitive is recorded so a single reverse sweep yields the gradient with
//! respect to the flat parameter vector. Dense conditioner networks are
//! recorded as one block each and differentiated with a hand-written adjoint,
//! the spline arithmetic is recorded scalar by scalar.

mod fd;
mod tape;

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::conditioner::ConditionerNet;

pub use fd::{score_fd, score_fd_with, velocity_fd, velocity_fd_with};
pub use tape::{grad, GradVector, Tape, Var};

/// Scalar type the flow is generic over: `f64` or a tape variable.
pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    /// `log(1 + e^x)`, evaluated without overflow.
    fn softplus(self) -> Self;

    fn square(self) -> Self {
        self * self
    }
}

/// Creates constants and evaluates conditioner networks for one scalar type.
pub trait Ops: Copy {
    type S: Real;

    fn constant(self, v: f64) -> Self::S;

    /// Evaluates `net` on `inputs ++ [tail]`, writing the outputs into `out`.
    fn dense(
        self,
        net: &ConditionerNet,
        params: &[f64],
        inputs: &[Self::S],
        tail: f64,
        out: &mut Vec<Self::S>,
    );
}

thread_local! {
    static PLAIN_ARENA: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Plain `f64` evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct Plain;

impl Ops for Plain {
    type S = f64;

    fn constant(self, v: f64) -> f64 {
        v
    }

    fn dense(self, net: &ConditionerNet, params: &[f64], inputs: &[f64], tail: f64, out: &mut Vec<f64>) {
        PLAIN_ARENA.with(|cell| {
            let mut arena = cell.borrow_mut();
            arena.clear();
            arena.extend_from_slice(inputs);
            arena.push(tail);
            net.forward_cached(params, &mut arena, 0, out);
        });
    }
}

impl Real for f64 {
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    #[inline]
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }
    #[inline]
    fn softplus(self) -> f64 {
        softplus(self)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
