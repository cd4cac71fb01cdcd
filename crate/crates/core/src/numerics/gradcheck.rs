use super::{rng, Matrix, ParameterSet};
use crate::error::{Error, Result};

/// Which coordinates of each trainable parameter to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// Up to `per_param` seeded coordinates per parameter tensor.
    Sample { per_param: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    pub loss: f64,
}

/// Compares analytic gradients against central differences.
///
/// `f` evaluates the scalar loss and accumulates analytic gradients into
/// the parameters' `grad` buffers. The relative error of a coordinate is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn gradcheck<M, F>(model: &mut M, eps: f64, coords: Coords, mut f: F) -> Result<GradcheckReport>
where
    M: ParameterSet + ?Sized,
    F: FnMut(&mut M) -> Result<f64>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Input(format!("gradcheck epsilon {eps} outside (0, 1e-2]")));
    }
    model.zero_grads();
    let loss = f(model)?;
    if !loss.is_finite() {
        return Err(Error::Gradcheck(format!("non-finite loss {loss} at the base point")));
    }
    let mut analytic: Vec<(String, Matrix)> = Vec::new();
    model.visit(&mut |p| {
        if !p.frozen {
            analytic.push((p.name.clone(), p.grad.clone()));
        }
    });
    model.zero_grads();

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        loss,
    };
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let n = grad.data().len();
        let indices: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::Sample { per_param, seed } => {
                if n <= per_param {
                    (0..n).collect()
                } else {
                    let mut r = rng::stream(seed, name);
                    let mut all: Vec<usize> = (0..n).collect();
                    rng::shuffle(&mut r, &mut all);
                    all.truncate(per_param);
                    all.sort_unstable();
                    all
                }
            }
        };
        for idx in indices {
            let orig = read_coord(model, pi, idx);
            let mut eval = |value: f64, model: &mut M| -> Result<f64> {
                write_coord(model, pi, idx, value);
                let out = f(model);
                write_coord(model, pi, idx, orig);
                model.zero_grads();
                let v = out?;
                if !v.is_finite() {
                    return Err(Error::Gradcheck(format!(
                        "non-finite loss when perturbing {name}[{idx}]"
                    )));
                }
                Ok(v)
            };
            let plus = eval(orig + eps, model)?;
            let minus = eval(orig - eps, model)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[idx];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

fn read_coord<M: ParameterSet + ?Sized>(model: &M, which: usize, idx: usize) -> f64 {
    let mut i = 0;
    let mut out = 0.0;
    model.visit(&mut |p| {
        if p.frozen {
            return;
        }
        if i == which {
            out = p.value.data()[idx];
        }
        i += 1;
    });
    out
}

fn write_coord<M: ParameterSet + ?Sized>(model: &mut M, which: usize, idx: usize, v: f64) {
    let mut i = 0;
    model.visit_mut(&mut |p| {
        if p.frozen {
            return;
        }
        if i == which {
            p.value.data_mut()[idx] = v;
        }
        i += 1;
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Parameter;

    fn sum_of_squares(ps: &mut Vec<Parameter>) -> Result<f64> {
        let mut total = 0.0;
        for p in ps.iter_mut() {
            for (g, v) in p.grad.data_mut().iter_mut().zip(p.value.data()) {
                *g += 2.0 * v;
                total += v * v;
            }
        }
        Ok(total)
    }

    #[test]
    fn quadratic_is_exact() {
        let mut ps = vec![Parameter::trainable(
            "w",
            Matrix::from_rows(&[vec![0.5, -1.5], vec![2.0, 0.25]]).unwrap(),
        )];
        let before = ps[0].value.clone();
        let rep = gradcheck(&mut ps, 1e-5, Coords::All, sum_of_squares).unwrap();
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");
        assert_eq!(rep.checked, 4);
        assert_eq!(ps[0].value, before, "values restored bit-exactly");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut ps = vec![Parameter::trainable("w", Matrix::from_fn(3, 2, |r, c| (r * c) as f64))];
        let rep = gradcheck(&mut ps, 1e-3, Coords::All, |_| Ok(4.2)).unwrap();
        assert!(rep.max_rel_error < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut ps = vec![Parameter::trainable("w", Matrix::row_vector(&[3.0]))];
        let rep = gradcheck(&mut ps, 1e-5, Coords::All, |ps| {
            let v = ps[0].value.data()[0];
            ps[0].grad.data_mut()[0] += v; // true gradient is 2v
            Ok(v * v)
        })
        .unwrap();
        assert!(rep.max_rel_error > 0.4);
    }

    #[test]
    fn non_finite_loss_names_coordinate() {
        let mut ps = vec![Parameter::trainable("w", Matrix::row_vector(&[0.0, 1.0]))];
        let err = gradcheck(&mut ps, 1e-5, Coords::All, |ps| {
            let v = ps[0].value.data()[1];
            Ok(if v != 1.0 { f64::NAN } else { 0.0 })
        })
        .unwrap_err();
        assert!(err.to_string().contains("w[1]"), "{err}");
    }

    #[test]
    fn bad_epsilon_rejected() {
        let mut ps: Vec<Parameter> = vec![];
        assert!(gradcheck(&mut ps, 0.1, Coords::All, |_| Ok(0.0)).is_err());
    }
}
