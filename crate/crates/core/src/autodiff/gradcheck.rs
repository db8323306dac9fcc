//! Central finite-difference verification of analytic gradients.

use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::param::ParamStore;
use crate::error::{Error, Result};

/// Default step for central differences in `f64`.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Entries with a relative error above this at the first step are retried.
const RETRY_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over entries of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

fn scalar_loss(g: &Graph<f64>, v: Var) -> Result<f64> {
    let value = g.value(v);
    if value.numel() != 1 {
        return Err(Error::Shape(format!("grad_check needs a scalar objective, got {:?}", value.shape())));
    }
    Ok(value.data()[0])
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h`, perturbing every entry of every parameter in `store`. Entries
/// that disagree at `h` are re-measured at `h/10` and `h/100` and the best
/// agreement is kept.
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut f: F, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    scalar_loss(&g, loss)?;
    g.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
    for (id, grad) in g.param_grads() {
        analytic[id.index()].copy_from_slice(grad.data());
    }
    drop(g);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = f(&mut g, store)?;
        scalar_loss(&g, v)
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, entries_checked: 0 };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for k in 0..store.value(id).numel() {
            let a = analytic[id.index()][k];
            let mut rel = f64::INFINITY;
            // A step that straddles a ReLU kink gives a wrong quotient; such
            // entries are retried at smaller steps before being reported.
            for step in [h, h / 10.0, h / 100.0] {
                let original = store.value(id).data()[k];
                store.value_mut(id).data_mut()[k] = original + step;
                let plus = eval(store)?;
                store.value_mut(id).data_mut()[k] = original - step;
                let minus = eval(store)?;
                store.value_mut(id).data_mut()[k] = original;
                let numeric = (plus - minus) / (2.0 * step);
                let r = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
                rel = rel.min(r);
                if rel <= RETRY_THRESHOLD {
                    break;
                }
            }
            report.entries_checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}
