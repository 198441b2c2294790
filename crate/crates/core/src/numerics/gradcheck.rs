//! Central finite-difference oracle for tape gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |ad - fd| / max(1, |ad|, |fd|)` over all coordinates.
    pub max_rel_error: f64,
    /// `(tensor index, flat offset)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
    /// [`Graph::kink_margin`] of the unperturbed evaluation.
    pub kink_margin: f64,
}

/// Compare reverse-mode gradients of `f` with central differences.
///
/// `f` receives a fresh graph and one leaf per entry of `params` and must
/// return a scalar. Every probe rebuilds the graph from scratch, so the
/// finite-difference side never touches the reverse pass.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::param(format!("eps must lie in (0, 1e-3], got {eps}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    check_finite(g.value(loss).data()[0], "base point")?;
    let grads = g.backward(loss)?;
    let kink_margin = g.kink_margin();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut probe = params.to_vec();
    let mut worst = (0, 0);
    let mut max_rel_error: f64 = 0.0;
    let mut coordinates = 0;
    for (ti, var) in vars.iter().enumerate() {
        let ad = grads.wrt(*var);
        for k in 0..params[ti].len() {
            let orig = params[ti].data()[k];
            probe[ti].data_mut()[k] = orig + eps;
            let up = eval(&probe)?;
            probe[ti].data_mut()[k] = orig - eps;
            let down = eval(&probe)?;
            probe[ti].data_mut()[k] = orig;
            let at = format!("parameter {ti}, offset {k}");
            check_finite(up, &at)?;
            check_finite(down, &at)?;

            let fd = (up - down) / (2.0 * eps);
            let a = ad.data()[k];
            let rel = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = (ti, k);
            }
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        coordinates,
        kink_margin,
    })
}

fn check_finite(x: f64, at: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite loss {x} at {at}")))
    }
}
