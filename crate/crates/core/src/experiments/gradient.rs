//! Loss and analytic gradients of the attention layer.

use alloc::vec::Vec;

use crate::error::{dim_err, Result};
use crate::model::{argmax, forward_unchecked, softmax, AttentionConfig, AttentionWeights, Example, Task};
use crate::numerics::{dot, Matrix};

/// `m += s * a bᵀ`
fn add_outer(m: &mut Matrix, a: &[f64], b: &[f64], s: f64) {
    for (i, &ai) in a.iter().enumerate() {
        let f = s * ai;
        if f != 0.0 {
            for (x, &bj) in m.row_mut(i).iter_mut().zip(b) {
                *x += f * bj;
            }
        }
    }
}

/// Per-example loss and its gradient with respect to the prediction.
/// Cross-entropy on softmax of the prediction (labels are distributions,
/// usually one-hot) or mean squared error over the output entries.
pub fn loss_and_output_grad(prediction: &[f64], label: &[f64], task: Task) -> (f64, Vec<f64>) {
    match task {
        Task::Classification { .. } => {
            let p = softmax(prediction);
            let max = prediction.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(prediction.iter().map(|x| libm::exp(x - max)).sum::<f64>());
            let mass: f64 = label.iter().sum();
            let loss = label.iter().zip(prediction).map(|(y, z)| y * (lse - z)).sum();
            let grad = p.iter().zip(label).map(|(pi, yi)| mass * pi - yi).collect();
            (loss, grad)
        }
        Task::Regression => {
            let k = prediction.len() as f64;
            let diff: Vec<f64> = prediction.iter().zip(label).map(|(a, b)| a - b).collect();
            (dot(&diff, &diff) / k, diff.iter().map(|x| 2.0 * x / k).collect())
        }
    }
}

/// Mean loss over `batch` and its gradient, shaped like the weights.
pub fn gradient(
    w: &AttentionWeights,
    cfg: &AttentionConfig,
    batch: &[&Example],
    task: Task,
) -> Result<(f64, AttentionWeights)> {
    w.validate(cfg)?;
    if batch.is_empty() {
        return Err(dim_err!("empty batch"));
    }
    let mut g = AttentionWeights::zeros(cfg);
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for ex in batch {
        if ex.label.len() != cfg.d_out {
            return Err(dim_err!("label width {} vs d_out {}", ex.label.len(), cfg.d_out));
        }
        let tr = forward_unchecked(w, cfg, &ex.context, &ex.query)?;
        let (loss, g_y) = loss_and_output_grad(&tr.prediction, &ex.label, task);
        total += loss;

        add_outer(&mut g.readout, &tr.output, &g_y, scale);
        let g_o = w.readout.mul_vec(&g_y)?;
        for (h, (hw, ht)) in w.heads.iter().zip(&tr.heads).enumerate() {
            let rows = h * cfg.d_v..(h + 1) * cfg.d_v;
            let mut g_p = Vec::with_capacity(cfg.d_v);
            for (j, r) in rows.enumerate() {
                g_p.push(dot(w.output.row(r), &g_o));
                let s = scale * ht.projected[j];
                for (x, &go) in g.output.row_mut(r).iter_mut().zip(&g_o) {
                    *x += s * go;
                }
            }
            let gh = &mut g.heads[h];
            add_outer(&mut gh.value, &ht.attended, &g_p, scale);
            let g_z = hw.value.mul_vec(&g_p)?;
            let g_theta = ex.context.mul_vec(&g_z)?;
            let theta = &ht.coefficients;
            let mean = dot(theta, &g_theta);
            let g_alpha: Vec<f64> = theta.iter().zip(&g_theta).map(|(t, gt)| t * (gt - mean)).collect();
            // alpha = E W_K q with q = W_Qᵀ e
            let q = hw.query.tr_mul_vec(&ex.query)?;
            let et_ga = ex.context.tr_mul_vec(&g_alpha)?;
            add_outer(&mut gh.key, &et_ga, &q, scale);
            let g_q = hw.key.tr_mul_vec(&et_ga)?;
            add_outer(&mut gh.query, &ex.query, &g_q, scale);
        }
    }
    Ok((total * scale, g))
}

/// Mean loss only.
pub fn mean_loss(w: &AttentionWeights, cfg: &AttentionConfig, batch: &[&Example], task: Task) -> Result<f64> {
    w.validate(cfg)?;
    let mut total = 0.0;
    for ex in batch {
        let tr = forward_unchecked(w, cfg, &ex.context, &ex.query)?;
        total += loss_and_output_grad(&tr.prediction, &ex.label, task).0;
    }
    Ok(total / batch.len().max(1) as f64)
}

/// Fraction of examples whose predicted class (argmax) matches the label's.
pub fn accuracy(w: &AttentionWeights, cfg: &AttentionConfig, batch: &[&Example]) -> Result<f64> {
    w.validate(cfg)?;
    let mut hits = 0usize;
    for ex in batch {
        let tr = forward_unchecked(w, cfg, &ex.context, &ex.query)?;
        if argmax(&tr.prediction) == argmax(&ex.label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / batch.len().max(1) as f64)
}

/// Mean over examples of the squared error averaged over outputs.
pub fn mse(w: &AttentionWeights, cfg: &AttentionConfig, batch: &[&Example]) -> Result<f64> {
    mean_loss(w, cfg, batch, Task::Regression)
}
