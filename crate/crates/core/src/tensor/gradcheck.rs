use super::{Graph, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    /// Analytic and central-difference values at `worst`.
    pub worst_values: (f64, f64),
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar from leaves bound to `params` (in order). The relative
/// error per coordinate is `|a − n| / max(1e-8, |a| + |n|)`. With
/// `max_coords = Some(m)`, at most `m` evenly spaced coordinates of each
/// parameter are probed.
pub fn finite_diff_check<F, E>(
    params: &[Tensor],
    step: f64,
    max_coords: Option<usize>,
    f: F,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    if !(step > 0.0) {
        return Err(TensorError::Invalid {
            op: "finite_diff_check",
            msg: format!("step must be positive, got {step}"),
        }
        .into());
    }
    let analytic = {
        let mut g = Graph::new();
        let vars = params
            .iter()
            .map(|p| g.leaf(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let root = f(&mut g, &vars)?;
        let grads = g.backward(root).map_err(E::from)?;
        vars.iter().map(|&v| grads.wrt(v)).collect::<Vec<_>>()
    };

    let eval = |ps: &[Tensor]| -> std::result::Result<f64, E> {
        let mut g = Graph::new();
        let vars = ps.iter().map(|p| g.constant(p.clone())).collect::<Result<Vec<_>>>()?;
        let root = f(&mut g, &vars)?;
        let v = g.value(root).item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "finite_diff_check" }.into());
        }
        Ok(v)
    };

    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        coords_checked: 0,
    };
    for pi in 0..params.len() {
        let n = params[pi].numel();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => (0..m).map(|c| c * n / m).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = params[pi].data()[c];
            probe[pi].data_mut()[c] = orig + step;
            let up = eval(&probe)?;
            probe[pi].data_mut()[c] = orig - step;
            let down = eval(&probe)?;
            probe[pi].data_mut()[c] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi].data()[c];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, c);
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![2, 2], vec![0.3, -1.2, 2.5, 0.01]).unwrap();
        let r = finite_diff_check(&[x], 1e-5, None, |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
        assert_eq!(r.coords_checked, 4);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::zeros(&[1]);
        assert!(finite_diff_check(&[x], 0.0, None, |g, v| g.sum(v[0])).is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // detach breaks the gradient path, so analytic (0) and numeric (1) disagree.
        let x = Tensor::full(&[3], 0.5);
        let r = finite_diff_check(&[x], 1e-5, None, |g, v| {
            let d = g.detach(v[0])?;
            g.sum(d)
        })
        .unwrap();
        assert!(r.max_rel_err > 0.5);
    }

    #[test]
    fn coordinate_budget_limits_probes() {
        let x = Tensor::full(&[100], 0.1);
        let r = finite_diff_check(&[x], 1e-5, Some(7), |g, v| g.sum(v[0])).unwrap();
        assert_eq!(r.coords_checked, 7);
    }
}
