use crate::error::{Error, Result};

/// Layer normalization with population variance.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    Ok(layer_norm_cached(x, gamma, beta, eps)?.0)
}

/// Layer norm that also returns the normalized input `x̂` and `1/σ`, which the
/// backward pass needs.
pub fn layer_norm_cached(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    if x.len() != gamma.len() || x.len() != beta.len() {
        return Err(Error::Dimension {
            op: "layer_norm",
            left: (x.len(), 1),
            right: (gamma.len(), beta.len()),
        });
    }
    if x.is_empty() {
        return Err(Error::Argument("layer_norm of an empty vector".into()));
    }
    if eps <= 0.0 {
        return Err(Error::Argument(format!("layer_norm epsilon must be positive, got {eps}")));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = xhat
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(h, (g, b))| h * g + b)
        .collect();
    Ok((y, xhat, inv_std))
}

/// Backward of [`layer_norm_cached`]. Returns `(dx, dγ, dβ)`.
pub fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: f64,
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = xhat.len() as f64;
    let dgamma: Vec<f64> = dy.iter().zip(xhat).map(|(d, h)| d * h).collect();
    let dbeta = dy.to_vec();
    let dxhat: Vec<f64> = dy.iter().zip(gamma).map(|(d, g)| d * g).collect();
    let sum_dxhat: f64 = dxhat.iter().sum();
    let sum_dxhat_xhat: f64 = dxhat.iter().zip(xhat).map(|(d, h)| d * h).sum();
    let dx = dxhat
        .iter()
        .zip(xhat)
        .map(|(d, h)| inv_std / n * (n * d - sum_dxhat - h * sum_dxhat_xhat))
        .collect();
    (dx, dgamma, dbeta)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input contains a non-finite logit".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}
