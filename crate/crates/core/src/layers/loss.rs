use crate::error::{LayerError, TensorError};
use crate::tensor::Tensor;

/// Logistic function, evaluated without overflow for any finite input.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean sigmoid cross-entropy over all `B·C` entries, and its gradient with
/// respect to the logits.
///
/// Uses `max(z, 0) − z·t + ln(1 + e^{−|z|})`, which never exponentiates a
/// positive number.
pub fn sigmoid_xent(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor), LayerError> {
    if logits.shape() != targets.shape() {
        return Err(TensorError::Shape {
            op: "sigmoid_xent",
            left: logits.shape().to_vec(),
            right: targets.shape().to_vec(),
        }
        .into());
    }
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = logits.zeros_like();
    for ((g, &z), &t) in grad
        .data_mut()
        .iter_mut()
        .zip(logits.data())
        .zip(targets.data())
    {
        loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        *g = (sigmoid(z) - t) / n;
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone)]
pub struct TripletGrads {
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negative: Tensor,
}

/// `mean_i max(0, margin + ‖a_i − p_i‖² − ‖a_i − n_i‖²)` with its
/// subgradients (zero at the hinge corner).
pub fn triplet_ranking_loss(
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    margin: f64,
) -> Result<(f64, TripletGrads), LayerError> {
    for other in [positive, negative] {
        if other.shape() != anchor.shape() {
            return Err(TensorError::Shape {
                op: "triplet_ranking_loss",
                left: anchor.shape().to_vec(),
                right: other.shape().to_vec(),
            }
            .into());
        }
    }
    if margin <= 0.0 {
        return Err(LayerError::Config(format!("triplet margin must be positive, got {margin}")));
    }
    let (b, _) = anchor.dims2()?;
    let scale = 1.0 / b.max(1) as f64;
    let mut grads = TripletGrads {
        anchor: anchor.zeros_like(),
        positive: anchor.zeros_like(),
        negative: anchor.zeros_like(),
    };
    let mut loss = 0.0;
    for i in 0..b {
        let (a, p, n) = (anchor.row(i), positive.row(i), negative.row(i));
        let d_pos: f64 = a.iter().zip(p).map(|(x, y)| (x - y) * (x - y)).sum();
        let d_neg: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum();
        let hinge = margin + d_pos - d_neg;
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge;
        let ga = grads.anchor.row_mut(i);
        for j in 0..a.len() {
            ga[j] = 2.0 * (n[j] - p[j]) * scale;
        }
        let gp = grads.positive.row_mut(i);
        for j in 0..a.len() {
            gp[j] = -2.0 * (a[j] - p[j]) * scale;
        }
        let gn = grads.negative.row_mut(i);
        for j in 0..a.len() {
            gn[j] = 2.0 * (a[j] - n[j]) * scale;
        }
    }
    Ok((loss * scale, grads))
}
