//! Input-gradient (Lipschitz) penalty.
//!
//! The penalized objective adds `lambda * (||grad_x f(x)|| - c)^2`, averaged
//! over the batch, where `f` is a scalarized network output:
//!
//! * 1 output: the output itself;
//! * 2 outputs: the margin `z_1 - z_0`;
//! * more outputs: `sum_k p_k z_k` with `p` the softmax probabilities held
//!   fixed (detached) at the evaluation point.
//!
//! Differentiating the penalty with respect to the *parameters* requires
//! second derivatives of the activation. [`PenaltyMode::Exact`] runs a full
//! double-backpropagation sweep and therefore rejects relu, whose second
//! derivative vanishes almost everywhere. [`PenaltyMode::FiniteDiff`]
//! sidesteps that by differencing the ordinary parameter gradient at two
//! inputs displaced along the input-gradient direction; it works for every
//! activation at the same asymptotic cost (two extra forward/backward
//! passes per batch).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{backward_from_cotangents, forward_cached, ForwardCache, Gradients, Mlp};

/// Displacement used by [`PenaltyMode::FiniteDiff`]; central differencing
/// makes the truncation error quadratic in this step.
pub const PENALTY_FD_STEP: f64 = 1e-4;

/// Below this input-gradient norm a sample contributes nothing to the
/// penalty gradient (the norm is not differentiable at zero).
const ZERO_NORM_GUARD: f64 = 1e-12;

/// How penalty parameter-gradients are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// Double backpropagation; exact, needs a twice-differentiable activation.
    #[default]
    Exact,
    /// Central difference of the parameter gradient along the input-gradient
    /// direction; works for relu.
    FiniteDiff,
}

/// Penalty settings as they appear in training configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradPenalty {
    /// Penalty weight; zero disables the term.
    pub lambda: f64,
    /// Target input-gradient norm (the Lipschitz ceiling being enforced).
    pub c: f64,
    #[serde(default)]
    pub mode: PenaltyMode,
}

impl GradPenalty {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::invalid(
                "grad_penalty.lambda",
                format!("must be finite and >= 0, got {}", self.lambda),
            ));
        }
        if !self.c.is_finite() || self.c < 0.0 {
            return Err(Error::invalid(
                "grad_penalty.c",
                format!("must be finite and >= 0, got {}", self.c),
            ));
        }
        Ok(())
    }
}

/// Output cotangent of the scalarization for one logits row.
fn scalarization_cotangent(logits_row: &[f64]) -> Vec<f64> {
    match logits_row.len() {
        1 => vec![1.0],
        2 => vec![-1.0, 1.0],
        _ => {
            let max = logits_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut p: Vec<f64> = logits_row.iter().map(|&z| (z - max).exp()).collect();
            let sum: f64 = p.iter().sum();
            for v in p.iter_mut() {
                *v /= sum;
            }
            p
        }
    }
}

/// Per-sample state of the input-gradient backward recursion, kept when the
/// exact penalty needs to differentiate through it.
struct InputGradTape {
    /// `u[j] = df/d(preact of layer j)`, one vector per layer.
    u: Vec<Vec<f64>>,
    /// `m[j] = df/d(input of layer j)`, one vector per layer.
    m: Vec<Vec<f64>>,
    /// `df/dx` in raw input coordinates (standardizer chained in).
    grad: Vec<f64>,
}

/// Run the input-gradient recursion for one sample of a cached forward pass.
fn input_grad_sample(mlp: &Mlp, cache: &ForwardCache, sample: usize) -> InputGradTape {
    let depth = mlp.layers.len();
    let mut u: Vec<Vec<f64>> = vec![Vec::new(); depth];
    let mut m: Vec<Vec<f64>> = vec![Vec::new(); depth];

    let k = mlp.spec.output_dim;
    let logits_row = &cache.logits()[sample * k..(sample + 1) * k];
    u[depth - 1] = scalarization_cotangent(logits_row);

    for j in (0..depth).rev() {
        let layer = &mlp.layers[j];
        let mut mj = vec![0.0; layer.in_dim];
        layer.transpose_apply(&u[j], &mut mj);
        m[j] = mj;
        if j > 0 {
            let z = &cache.preacts[j - 1]
                [sample * layer.in_dim..(sample + 1) * layer.in_dim];
            u[j - 1] = m[j]
                .iter()
                .zip(z)
                .map(|(&mi, &zi)| mi * mlp.spec.activation.derivative(zi))
                .collect();
        }
    }

    let grad = match &mlp.standardizer {
        Some(std) => m[0]
            .iter()
            .zip(&std.inv_std)
            .map(|(&g, &s)| g * s)
            .collect(),
        None => m[0].clone(),
    };
    InputGradTape { u, m, grad }
}

/// Gradient of the scalarized output with respect to each input row;
/// row-major `batch x input_dim`, in raw (un-standardized) coordinates.
pub fn input_gradient(mlp: &Mlp, x: &[f64]) -> Result<Vec<f64>> {
    let cache = forward_cached(mlp, x)?;
    let d = mlp.spec.input_dim;
    let mut out = vec![0.0; cache.batch * d];
    for i in 0..cache.batch {
        let tape = input_grad_sample(mlp, &cache, i);
        out[i * d..(i + 1) * d].copy_from_slice(&tape.grad);
    }
    Ok(out)
}

/// Batch-mean penalty value `mean_i lambda * (||grad_x f(x_i)|| - c)^2`.
pub fn grad_penalty_value(mlp: &Mlp, x: &[f64], lambda: f64, c: f64) -> Result<f64> {
    GradPenalty {
        lambda,
        c,
        mode: PenaltyMode::Exact,
    }
    .validate()?;
    let grads = input_gradient(mlp, x)?;
    let d = mlp.spec.input_dim;
    let batch = grads.len() / d;
    let mut total = 0.0;
    for row in grads.chunks_exact(d) {
        let r = row.iter().map(|&g| g * g).sum::<f64>().sqrt();
        total += lambda * (r - c) * (r - c);
    }
    Ok(total / batch as f64)
}

/// Gradients of the batch-mean penalty with respect to every parameter.
///
/// `Exact` differentiates the input-gradient recursion itself (double
/// backprop) and fails with an unsupported-activation error for relu.
/// `FiniteDiff` works for any activation. For three or more outputs both
/// modes hold the softmax weights fixed at the evaluation point.
pub fn grad_penalty_backward(
    mlp: &Mlp,
    x: &[f64],
    lambda: f64,
    c: f64,
    mode: PenaltyMode,
) -> Result<Gradients> {
    penalty_backward_with_value(mlp, x, lambda, c, mode).map(|(_, g)| g)
}

/// Shared implementation: the training loop wants the value and the
/// gradients from one pass.
pub(crate) fn penalty_backward_with_value(
    mlp: &Mlp,
    x: &[f64],
    lambda: f64,
    c: f64,
    mode: PenaltyMode,
) -> Result<(f64, Gradients)> {
    GradPenalty { lambda, c, mode }.validate()?;
    if mode == PenaltyMode::Exact && mlp.spec.activation == crate::nn::Activation::Relu {
        return Err(Error::UnsupportedActivation { activation: "relu" });
    }
    let cache = forward_cached(mlp, x)?;
    match mode {
        PenaltyMode::Exact => exact_penalty(mlp, &cache, lambda, c),
        PenaltyMode::FiniteDiff => fd_penalty(mlp, x, &cache, lambda, c),
    }
}

/// Double backpropagation. Reverse-mode differentiation of the scalar
/// `h_i = s_i * <g_i, g_i-detached>` through both the input-gradient
/// recursion and the forward pass that fed it, where `s_i` folds in the
/// chain factor `2*lambda*(r_i - c)/r_i` and the batch mean.
fn exact_penalty(
    mlp: &Mlp,
    cache: &ForwardCache,
    lambda: f64,
    c: f64,
) -> Result<(f64, Gradients)> {
    let depth = mlp.layers.len();
    let batch = cache.batch;
    let act = mlp.spec.activation;
    let mut grads = Gradients::zeros_like(mlp);
    let mut value = 0.0;

    for i in 0..batch {
        let tape = input_grad_sample(mlp, cache, i);
        let r = tape.grad.iter().map(|&g| g * g).sum::<f64>().sqrt();
        value += lambda * (r - c) * (r - c);
        if r < ZERO_NORM_GUARD {
            continue;
        }
        let s = 2.0 * lambda * (r - c) / (r * batch as f64);

        // Adjoint seed on m[0]: h = <g-detached, g>, g = inv_std .* m[0].
        let mut m_hat: Vec<f64> = match &mlp.standardizer {
            Some(std) => tape
                .grad
                .iter()
                .zip(&std.inv_std)
                .map(|(&g, &sd)| s * g * sd)
                .collect(),
            None => tape.grad.iter().map(|&g| s * g).collect(),
        };

        // Sweep up through the backward recursion. z_hat_bwd[j] collects the
        // phi'' term at the preactivation of layer j.
        let mut z_hat_bwd: Vec<Vec<f64>> = vec![Vec::new(); depth];
        for j in 0..depth {
            let layer = &mlp.layers[j];
            // m[j] = W_j^T u[j]  =>  W_hat_j += u[j] (x) m_hat, u_hat = W_j m_hat.
            {
                let g = &mut grads.layers[j];
                for (o, &uo) in tape.u[j].iter().enumerate() {
                    if uo == 0.0 {
                        continue;
                    }
                    let wrow = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (w, &mh) in wrow.iter_mut().zip(&m_hat) {
                        *w += uo * mh;
                    }
                }
            }
            if j + 1 == depth {
                break; // u at the top is the detached cotangent
            }
            let mut u_hat = vec![0.0; layer.out_dim];
            layer.affine_no_bias(&m_hat, &mut u_hat);
            // u[j] = phi'(z_j) .* m[j+1]
            let z = &cache.preacts[j][i * layer.out_dim..(i + 1) * layer.out_dim];
            z_hat_bwd[j] = u_hat
                .iter()
                .zip(&tape.m[j + 1])
                .zip(z)
                .map(|((&uh, &mj), &zj)| uh * mj * act.second_derivative(zj))
                .collect();
            m_hat = u_hat
                .iter()
                .zip(z)
                .map(|(&uh, &zj)| uh * act.derivative(zj))
                .collect();
        }

        // Sweep down through the forward pass. The top preactivation feeds
        // only the detached cotangent, so its adjoint is zero.
        let mut z_hat: Vec<f64> = Vec::new();
        for l in (0..depth).rev() {
            let layer = &mlp.layers[l];
            let mut total = if l + 1 == depth {
                vec![0.0; layer.out_dim]
            } else {
                // a_l feeds layer l+1: a_hat = W_{l+1}^T z_hat_{l+1}.
                let next = &mlp.layers[l + 1];
                let mut a_hat = vec![0.0; next.in_dim];
                next.transpose_apply(&z_hat, &mut a_hat);
                let z = &cache.preacts[l][i * layer.out_dim..(i + 1) * layer.out_dim];
                a_hat
                    .iter()
                    .zip(z)
                    .map(|(&ah, &zj)| ah * act.derivative(zj))
                    .collect()
            };
            if l < depth - 1 && !z_hat_bwd[l].is_empty() {
                for (t, &zb) in total.iter_mut().zip(&z_hat_bwd[l]) {
                    *t += zb;
                }
            }
            let a_in =
                &cache.activations[l][i * layer.in_dim..(i + 1) * layer.in_dim];
            let g = &mut grads.layers[l];
            for (o, &zh) in total.iter().enumerate() {
                if zh != 0.0 {
                    let wrow = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (w, &a) in wrow.iter_mut().zip(a_in) {
                        *w += zh * a;
                    }
                }
                g.biases[o] += zh;
            }
            z_hat = total;
        }
    }
    Ok((value / batch as f64, grads))
}

/// Finite-difference mode: `d/dtheta <g_i-detached/r_i, g_i>` is the
/// directional derivative of the parameter gradient along the unit
/// input-gradient direction, approximated centrally at two displaced inputs.
fn fd_penalty(
    mlp: &Mlp,
    x: &[f64],
    cache: &ForwardCache,
    lambda: f64,
    c: f64,
) -> Result<(f64, Gradients)> {
    let d = mlp.spec.input_dim;
    let k = mlp.spec.output_dim;
    let batch = cache.batch;
    let eps = PENALTY_FD_STEP;

    let mut value = 0.0;
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    // Cotangent rows carry each sample's chain factor; zero rows drop out.
    let mut cot_plus = vec![0.0; batch * k];
    let mut cot_minus = vec![0.0; batch * k];
    let mut any = false;
    for i in 0..batch {
        let tape = input_grad_sample(mlp, cache, i);
        let r = tape.grad.iter().map(|&g| g * g).sum::<f64>().sqrt();
        value += lambda * (r - c) * (r - c);
        if r < ZERO_NORM_GUARD {
            continue;
        }
        any = true;
        for (j, &g) in tape.grad.iter().enumerate() {
            let step = eps * g / r;
            plus[i * d + j] += step;
            minus[i * d + j] -= step;
        }
        // d(penalty_i)/dtheta = s_i * r_i * d/dtheta (directional derivative),
        // and the central difference divides by 2*eps.
        let scale = lambda * (r - c) / (batch as f64 * eps);
        let logits_row = &cache.logits()[i * k..(i + 1) * k];
        let cot = scalarization_cotangent(logits_row);
        for (j, &cj) in cot.iter().enumerate() {
            cot_plus[i * k + j] = scale * cj;
            cot_minus[i * k + j] = -scale * cj;
        }
    }
    value /= batch as f64;

    if !any {
        return Ok((value, Gradients::zeros_like(mlp)));
    }
    let cache_plus = forward_cached(mlp, &plus)?;
    let mut grads = backward_from_cotangents(mlp, &cache_plus, &cot_plus);
    let cache_minus = forward_cached(mlp, &minus)?;
    let grads_minus = backward_from_cotangents(mlp, &cache_minus, &cot_minus);
    grads.add_scaled(&grads_minus, 1.0);
    Ok((value, grads))
}

impl crate::nn::Layer {
    /// `out = W v` without the bias; used by the adjoint sweep.
    #[inline]
    fn affine_no_bias(&self, v: &[f64], out: &mut [f64]) {
        for (o, out_val) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = 0.0;
            for (w, a) in row.iter().zip(v) {
                acc += w * a;
            }
            *out_val = acc;
        }
    }
}
