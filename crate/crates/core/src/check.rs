//! Verification oracles: a central finite-difference gradient for checking
//! the hand-written reverse-mode gradients, and the comparison report used
//! by the acceptance suite.
//!
//! Perturbations are injected into the f64 view of the parameters, so the
//! oracle sees exactly symmetric steps with no storage quantization; its
//! error is pure truncation, O(h^2).

use std::collections::BTreeMap;

use crate::denoiser::Denoiser;
use crate::error::Result;
use crate::tensor::Tensor;

/// Central finite-difference gradient of the batch loss with step `h`,
/// entry by entry over every parameter.
pub fn fd_loss_gradient(
    model: &Denoiser,
    xs: &[Tensor],
    ts: &[usize],
    conds: &[Option<u32>],
    targets: &[Tensor],
    h: f64,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let arch = model.arch().clone();
    let xs64: Vec<Vec<f64>> = xs.iter().map(|x| x.data().iter().map(|&v| v as f64).collect()).collect();
    let tg64: Vec<Vec<f64>> = targets.iter().map(|x| x.data().iter().map(|&v| v as f64).collect()).collect();

    let mut out = BTreeMap::new();
    for (name, shape) in arch.param_shapes() {
        let n: usize = shape.iter().product();
        let mut g = Vec::with_capacity(n);
        for i in 0..n {
            let eval = |delta: f64| -> Result<f64> {
                let mut net = model.to_f64();
                if name == "cond.emb" {
                    let e = arch.embed_dim;
                    *net.cond_entry_mut(i / e, i % e).expect("cond entry") += delta;
                } else {
                    net.param_mut(&name).expect("param")[i] += delta;
                }
                net.loss(&xs64, ts, conds, &tg64)
            };
            let up = eval(h)?;
            let down = eval(-h)?;
            g.push((up - down) / (2.0 * h));
        }
        out.insert(name, g);
    }
    Ok(out)
}

/// Worst-case relative disagreement between two gradient collections.
pub struct GradCompare {
    pub max_rel_err: f64,
    pub worst_entry: String,
    pub checked: usize,
    pub skipped: usize,
}

/// Per-entry relative error `|a-b| / max(|a|,|b|)`, excluding entries where
/// both magnitudes are below 1e-8.
pub fn compare_grads(
    reverse: &BTreeMap<String, Tensor>,
    fd: &BTreeMap<String, Vec<f64>>,
) -> GradCompare {
    let mut max_rel_err = 0.0f64;
    let mut worst_entry = String::from("-");
    let mut checked = 0;
    let mut skipped = 0;
    for (name, rg) in reverse {
        let fg = &fd[name];
        for (i, (&a32, &b)) in rg.data().iter().zip(fg).enumerate() {
            let a = a32 as f64;
            if a.abs() < 1e-8 && b.abs() < 1e-8 {
                skipped += 1;
                continue;
            }
            checked += 1;
            let rel = (a - b).abs() / a.abs().max(b.abs());
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_entry = format!("{name}[{i}] rev={a} fd={b}");
            }
        }
    }
    GradCompare { max_rel_err, worst_entry, checked, skipped }
}
