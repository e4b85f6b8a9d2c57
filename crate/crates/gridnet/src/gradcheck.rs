//! Central-difference check of the analytic parameter gradient.

use crate::error::Result;
use crate::loss::LossConfig;
use crate::model::{FrameInput, GridNet};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    /// Largest `|a - n| / max(|a|, |n|, floor)`.
    pub max_rel_error: f64,
    /// Parameter name and element index of the worst entry.
    pub worst: (String, usize),
    pub worst_values: (f64, f64),
}

/// Compares every parameter's analytic gradient with `(L(w+h) - L(w-h)) / 2h`.
pub fn check_gradients(model: &GridNet, seq: &[FrameInput], target: &[f64], loss: &LossConfig, h: f64, floor: f64) -> Result<GradCheck> {
    let (_, grads) = model.loss_and_grad(seq, target, loss)?;
    let names = model.param_names();
    let mut probe = model.clone();
    let mut out = GradCheck { checked: 0, max_rel_error: 0.0, worst: (String::new(), 0), worst_values: (0.0, 0.0) };
    for (k, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let w0 = probe.params()[k].data[j];
            probe.params_mut()[k].data[j] = w0 + h;
            let up = probe.loss(seq, target, loss)?.total;
            probe.params_mut()[k].data[j] = w0 - h;
            let down = probe.loss(seq, target, loss)?.total;
            probe.params_mut()[k].data[j] = w0;
            let num = (up - down) / (2.0 * h);
            let rel = (g[j] - num).abs() / g[j].abs().max(num.abs()).max(floor);
            out.checked += 1;
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst = (names[k].clone(), j);
                out.worst_values = (g[j], num);
            }
        }
    }
    Ok(out)
}
