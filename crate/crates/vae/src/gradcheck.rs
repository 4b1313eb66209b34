//! Central-difference verification of [`VaeModel::loss_and_grad`].

use ndarray::Array2;
use serde::Serialize;

use crate::error::Result;
use crate::model::{TrainItem, VaeModel};
use crate::recon::ReconConfig;

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    /// `‖g_fd − g‖ / max(‖g_fd‖, ‖g‖)`, zero when both vanish.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
}

/// Compares analytic gradients with central differences of step `h` for
/// every element of every trainable tensor.
pub fn check_gradients(model: &VaeModel, items: &[&TrainItem], eps: &Array2<f64>, beta: f64, cfg: &ReconConfig, h: f64) -> Result<Vec<TensorCheck>> {
    let (_, analytic) = model.loss_and_grad(items, eps, beta, cfg)?;
    let names = model.tensor_names();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(analytic.len());
    for (t, grad) in analytic.iter().enumerate() {
        let mut numeric = Array2::zeros(grad.raw_dim());
        for idx in 0..grad.len() {
            let original = probe.tensors()[t].as_slice().expect("contiguous")[idx];
            probe.tensors_mut()[t].as_slice_mut().expect("contiguous")[idx] = original + h;
            let plus = probe.loss(items, eps, beta, cfg)?.loss;
            probe.tensors_mut()[t].as_slice_mut().expect("contiguous")[idx] = original - h;
            let minus = probe.loss(items, eps, beta, cfg)?.loss;
            probe.tensors_mut()[t].as_slice_mut().expect("contiguous")[idx] = original;
            numeric.as_slice_mut().expect("contiguous")[idx] = (plus - minus) / (2.0 * h);
        }
        let diff = &numeric - grad;
        let diff_norm = diff.mapv(|v| v * v).sum().sqrt();
        let an = grad.mapv(|v| v * v).sum().sqrt();
        let num = numeric.mapv(|v| v * v).sum().sqrt();
        let scale = an.max(num);
        let rel_error = if scale < 1e-12 { 0.0 } else { diff_norm / scale };
        let max_abs_error = diff.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        out.push(TensorCheck { name: names[t].clone(), rel_error, max_abs_error, analytic_norm: an });
    }
    Ok(out)
}
