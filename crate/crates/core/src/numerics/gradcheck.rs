//! Central-difference verification of tape gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Result, StlinkError};

/// Something with parameters and a scalar objective recorded on a tape.
pub trait Differentiable {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn objective(&self, tape: &mut Tape) -> Result<Var>;
}

/// Adapter for a bare parameter store plus closure.
pub struct FnObjective<F> {
    pub store: ParamStore,
    pub f: F,
}

impl<F> Differentiable for FnObjective<F>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn objective(&self, tape: &mut Tape) -> Result<Var> {
        (self.f)(&self.store, tape)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator; gradients smaller than this
    /// are compared absolutely against it.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-4, floor: 1e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct GradEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn eval<D: Differentiable + ?Sized>(d: &D) -> Result<f64> {
    let mut tape = Tape::new();
    let v = d.objective(&mut tape)?;
    Ok(tape.scalar(v))
}

/// Compares tape gradients with `(f(p + h) - f(p - h)) / 2h` for every trainable scalar.
pub fn grad_check<D: Differentiable + ?Sized>(d: &mut D, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let loss = d.objective(&mut tape)?;
    if !tape.scalar(loss).is_finite() {
        return Err(StlinkError::NonFiniteObjective { param: "<unperturbed>".into(), index: 0 });
    }
    tape.backward(loss);
    let mut store = d.params().clone();
    store.zero_grad();
    tape.accumulate_param_grads(&mut store);
    drop(tape);

    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable()).map(|(id, _)| id).collect();
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None, tol: cfg.tol };
    for id in ids {
        let p = store.get(id);
        let analytic = p.tensor.grad().unwrap().to_vec();
        for (index, &a) in analytic.iter().enumerate() {
            let orig = d.params().get(id).tensor.data()[index];
            d.params_mut().get_mut(id).tensor.data_mut()[index] = orig + cfg.h;
            let plus = eval(d);
            d.params_mut().get_mut(id).tensor.data_mut()[index] = orig - cfg.h;
            let minus = eval(d);
            d.params_mut().get_mut(id).tensor.data_mut()[index] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(StlinkError::NonFiniteObjective { param: p.name.clone(), index });
            }
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let rel_error = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if rel_error > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel_error);
                report.worst = Some(GradEntry { param: p.name.clone(), index, analytic: a, numeric, rel_error });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamKind, Tensor};
    use rand::{Rng, SeedableRng};

    #[test]
    fn square_passes() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamKind::Head, None, Tensor::new(vec![1], vec![3.0]).unwrap());
        let mut obj = FnObjective {
            store,
            f: move |s: &ParamStore, t: &mut Tape| {
                let v = t.param(s, w);
                let sq = t.mul(v, v);
                Ok(t.sum(sq))
            },
        };
        let cfg = GradCheckConfig { h: 1e-4, ..Default::default() };
        let r = grad_check(&mut obj, cfg).unwrap();
        let worst = r.worst.clone().unwrap();
        assert_eq!(worst.analytic, 6.0);
        assert!((worst.numeric - 6.0).abs() < 1e-6);
        assert!(r.passed());
    }

    #[test]
    fn softmax_dot_constant_passes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let d = 8;
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            ParamKind::Head,
            None,
            Tensor::from_fn(vec![1, d], |_| rng.random_range(-2.0..2.0)),
        );
        let c: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut obj = FnObjective {
            store,
            f: move |s: &ParamStore, t: &mut Tape| {
                let v = t.param(s, w);
                let sm = t.softmax_rows(v);
                let cv = t.constant(1, d, c.clone());
                let p = t.mul(sm, cv);
                Ok(t.sum(p))
            },
        };
        let r = grad_check(&mut obj, GradCheckConfig::default()).unwrap();
        assert_eq!(r.checked, d);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamKind::Head, None, Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        store.get_mut(w).tensor.set_requires_grad(false);
        let mut obj = FnObjective {
            store,
            f: move |s: &ParamStore, t: &mut Tape| {
                let v = t.param(s, w);
                Ok(t.sum(v))
            },
        };
        let r = grad_check(&mut obj, GradCheckConfig::default()).unwrap();
        assert_eq!(r.checked, 0);
    }

    #[test]
    fn non_finite_objective_names_parameter() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamKind::Head, None, Tensor::new(vec![1], vec![0.0]).unwrap());
        let mut obj = FnObjective {
            store,
            f: move |s: &ParamStore, t: &mut Tape| {
                let v = t.param(s, w);
                let r = t.sqrt(v);
                Ok(t.sum(r))
            },
        };
        // sqrt(-h) is NaN on the minus side
        match grad_check(&mut obj, GradCheckConfig::default()) {
            Err(StlinkError::NonFiniteObjective { param, index }) => {
                assert_eq!(param, "w");
                assert_eq!(index, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
