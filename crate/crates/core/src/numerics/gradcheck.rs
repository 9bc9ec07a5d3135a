//! Central finite-difference oracle for analytic gradients.

use std::collections::HashMap;

use super::graph::{Graph, NodeId};
use super::param::{Module, Parameter};
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over entries of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub entries: usize,
}

fn set_entry<M: Module + ?Sized>(model: &mut M, name: &str, idx: usize, value: f64) {
    model.visit_mut(&mut |p: &mut Parameter| {
        if p.name == name {
            p.tensor.data_mut()[idx] = value;
        }
    });
}

fn lift<E: std::fmt::Display>(e: E) -> NumericsError {
    NumericsError::Oracle(format!("loss evaluation failed: {e}"))
}

fn eval<M: Module + ?Sized, E: std::fmt::Display>(
    model: &M,
    loss: &dyn Fn(&M, &mut Graph) -> Result<NodeId, E>,
) -> Result<f64, NumericsError> {
    let mut g = Graph::new();
    let l = loss(model, &mut g).map_err(lift)?;
    g.check()?;
    Ok(g.value(l).data()[0])
}

/// Compares reverse-mode gradients of `loss` against central differences
/// for every entry of every parameter selected by `trainable`.
pub fn grad_check<M, P, F, E>(model: &mut M, trainable: P, eps: f64, loss: F) -> Result<GradCheckReport, NumericsError>
where
    M: Module + ?Sized,
    P: Fn(&str) -> bool + Clone + 'static,
    F: Fn(&M, &mut Graph) -> Result<NodeId, E>,
    E: std::fmt::Display,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(NumericsError::Config(format!("grad_check step {eps} outside [1e-6, 1e-4]")));
    }
    let base = eval(model, &loss)?;
    if eval(model, &loss)?.to_bits() != base.to_bits() {
        return Err(NumericsError::Oracle("loss is not deterministic".into()));
    }

    let mut g = Graph::with_trainable(trainable.clone());
    let l = loss(model, &mut g).map_err(lift)?;
    let grads = g.backward(l)?;
    let analytic: HashMap<String, Tensor> = grads
        .params()
        .filter_map(|(n, t)| t.map(|t| (n.to_string(), t.clone())))
        .collect();

    let mut targets = Vec::new();
    model.visit(&mut |p| {
        if trainable(&p.name) {
            targets.push((p.name.clone(), p.tensor.data().to_vec()));
        }
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        entries: 0,
    };
    for (name, values) in targets {
        for (i, &orig) in values.iter().enumerate() {
            set_entry(model, &name, i, orig + eps);
            let plus = eval(model, &loss);
            set_entry(model, &name, i, orig - eps);
            let minus = eval(model, &loss);
            set_entry(model, &name, i, orig);
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.entries += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Unary;

    #[test]
    fn quadratic_at_three() {
        let mut x = Parameter::new("x", Tensor::scalar(3.0));
        let r = grad_check(&mut x, |_| true, 1e-5, |p, g| {
            let n = g.param(p);
            Ok::<_, NumericsError>(g.unary(n, Unary::Square))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.entries, 1);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut x = Parameter::new("x", Tensor::row(vec![0.3, -1.0, 2.5, 0.0]));
        let r = grad_check(&mut x, |_| true, 1e-5, |p, g| {
            let n = g.param(p);
            let s = g.softmax(n, None);
            Ok::<_, NumericsError>(g.sum(s))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn step_size_is_range_checked() {
        let mut x = Parameter::new("x", Tensor::scalar(1.0));
        let r = grad_check(&mut x, |_| true, 1e-2, |p, g| Ok::<_, NumericsError>(g.param(p)));
        assert!(matches!(r, Err(NumericsError::Config(_))));
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        use std::cell::Cell;
        let counter = Cell::new(0.0);
        let mut x = Parameter::new("x", Tensor::scalar(1.0));
        let r = grad_check(&mut x, |_| true, 1e-5, |p, g| {
            counter.set(counter.get() + 1.0);
            let n = g.param(p);
            Ok::<_, NumericsError>(g.scale(n, counter.get()))
        });
        assert!(matches!(r, Err(NumericsError::Oracle(_))));
    }
}
