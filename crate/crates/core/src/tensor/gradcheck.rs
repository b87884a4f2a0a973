use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct WorstCoordinate {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest relative error within each parameter tensor, in input order.
    pub per_tensor: Vec<f64>,
    /// Worst coordinates overall, largest error first.
    pub worst: Vec<WorstCoordinate>,
    pub coordinates: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

const WORST_KEPT: usize = 8;

/// Compares tape gradients of `f` against central differences
/// `(f(θ+h·e_i) − f(θ−h·e_i)) / 2h` for every coordinate of every tensor in
/// `params`. Relative error is `|a−n| / max(|a|, |n|, 1e-8)`.
///
/// `f` builds a scalar loss on the given tape from the parameter variables,
/// which arrive in the same order as `params`.
pub fn grad_check<F>(params: &[Tensor], step: f64, tolerance: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect()
    };

    let eval = |work: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = work.iter().map(|p| tape.input(p)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut work = params.to_vec();
    let mut per_tensor = vec![0.0f64; params.len()];
    let mut worst: Vec<WorstCoordinate> = Vec::new();
    let mut coordinates = 0;
    for t in 0..params.len() {
        for i in 0..params[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[t].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[t].data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic[t].data()[i];
            let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            coordinates += 1;
            per_tensor[t] = per_tensor[t].max(rel_error);
            if worst.len() < WORST_KEPT || rel_error > worst[worst.len() - 1].rel_error {
                worst.push(WorstCoordinate {
                    tensor: t,
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error,
                });
                worst.sort_by(|x, y| y.rel_error.total_cmp(&x.rel_error));
                worst.truncate(WORST_KEPT);
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: per_tensor.iter().copied().fold(0.0, f64::max),
        per_tensor,
        worst,
        coordinates,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm_is_exact() {
        let theta = Tensor::new(vec![4], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let report = grad_check(&[theta], 1e-3, 1e-8, |tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            let s = tape.sum(sq)?;
            tape.scale(s, 0.5)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert!(report.passed());
        assert_eq!(report.coordinates, 4);
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let theta = Tensor::new(vec![3], vec![0.5, 1.0, -2.0]).unwrap();
        let report = grad_check(&[theta], 1e-3, 1e-4, |tape, v| {
            // cube with a backward rule that forgets the factor 3
            let x = tape.value(v[0]).clone();
            let value = Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|t| t.powi(3)).collect(),
            )?;
            let saved = x.clone();
            let cube = tape.custom(
                &[v[0]],
                value,
                Box::new(move |g| {
                    let data = g
                        .data()
                        .iter()
                        .zip(saved.data())
                        .map(|(gv, t)| gv * t * t)
                        .collect();
                    vec![Tensor::new(saved.shape().to_vec(), data).unwrap()]
                }),
            )?;
            tape.sum(cube)
        })
        .unwrap();
        assert!(report.max_rel_error > 1e-4);
        assert!(!report.passed());
        assert!(!report.worst.is_empty());
    }
}
