use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_store_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Index of a parameter inside its [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    /// Momentum buffer; empty until the first Nesterov step.
    pub velocity: Vec<f64>,
}

/// Named trainable arrays with gradient slots.
///
/// Every store carries a process-unique id. Tape gradients are only ever
/// accumulated into the store whose parameters were read, so a backward
/// pass through one network can never write into another.
#[derive(Debug)]
pub struct ParameterStore {
    id: u64,
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl Clone for ParameterStore {
    fn clone(&self) -> Self {
        ParameterStore {
            id: fresh_store_id(),
            params: self.params.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore {
            id: fresh_store_id(),
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            grad: vec![0.0; value.len()],
            value,
            velocity: Vec::new(),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// All gradients concatenated in parameter order.
    pub fn flat_grad(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.grad.iter().copied()).collect()
    }

    /// All values concatenated in parameter order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Overwrites values (same layout as [`Self::flat_values`]).
    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(Error::DimMismatch {
                what: "flat parameter vector".into(),
                expected: self.num_values(),
                found: values.len(),
            });
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        for p in &self.params {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global L2 norm of the gradient before clipping.
    pub grad_norm: f64,
    /// Factor applied to the gradient (1 when no clipping happened).
    pub clip_scale: f64,
}

/// Plain SGD with global-L2-norm clipping: the gradient is rescaled to norm
/// `clip` when larger, then `value -= lr * grad`. Gradients are zeroed on
/// success. Pass `f64::INFINITY` to disable clipping.
pub fn sgd_step(params: &mut ParameterStore, lr: f64, clip: f64) -> Result<StepStats> {
    params.check_finite()?;
    let grad_norm = params.grad_norm();
    let clip_scale = if grad_norm > clip { clip / grad_norm } else { 1.0 };
    for p in &mut params.params {
        for (v, g) in p.value.data_mut().iter_mut().zip(&p.grad) {
            *v -= lr * clip_scale * g;
        }
    }
    params.zero_grad();
    Ok(StepStats {
        grad_norm,
        clip_scale,
    })
}

/// Nesterov momentum in the form `v <- mu*v + g; value -= lr*(g + mu*v)`.
/// Gradients are zeroed on success.
pub fn nesterov_step(params: &mut ParameterStore, lr: f64, momentum: f64) -> Result<StepStats> {
    params.check_finite()?;
    let grad_norm = params.grad_norm();
    for p in &mut params.params {
        if p.velocity.len() != p.grad.len() {
            p.velocity = vec![0.0; p.grad.len()];
        }
        for ((v, vel), g) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.velocity.iter_mut())
            .zip(&p.grad)
        {
            *vel = momentum * *vel + g;
            *v -= lr * (g + momentum * *vel);
        }
    }
    params.zero_grad();
    Ok(StepStats {
        grad_norm,
        clip_scale: 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64, grad: f64) -> (ParameterStore, ParamId) {
        let mut s = ParameterStore::new();
        let id = s.add("theta", Tensor::vector(vec![value]));
        s.get_mut(id).grad[0] = grad;
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let (mut s, id) = scalar_store(1.25, 0.0);
        sgd_step(&mut s, 0.1, 1.0).unwrap();
        assert_eq!(s.value(id).data(), &[1.25]);
        nesterov_step(&mut s, 0.1, 0.9).unwrap();
        assert_eq!(s.value(id).data(), &[1.25]);
    }

    #[test]
    fn sgd_scalar_arithmetic() {
        let (mut s, id) = scalar_store(1.0, 0.5);
        sgd_step(&mut s, 0.1, 10.0).unwrap();
        assert!((s.value(id).item() - 0.95).abs() < 1e-15);
        assert_eq!(s.get(id).grad[0], 0.0);
    }

    #[test]
    fn clipping_rescales_by_global_norm() {
        let mut s = ParameterStore::new();
        let a = s.add("a", Tensor::vector(vec![0.0]));
        let b = s.add("b", Tensor::vector(vec![0.0]));
        s.get_mut(a).grad[0] = 3.0;
        s.get_mut(b).grad[0] = 4.0;
        let stats = sgd_step(&mut s, 1.0, 1.0).unwrap();
        assert!((stats.grad_norm - 5.0).abs() < 1e-15);
        assert!((stats.clip_scale - 0.2).abs() < 1e-15);
        assert!((s.value(a).item() + 0.6).abs() < 1e-15);
        assert!((s.value(b).item() + 0.8).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut s, _) = scalar_store(1.0, f64::NAN);
        let err = sgd_step(&mut s, 0.1, 1.0).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert!(nesterov_step(&mut s, 0.1, 0.9).is_err());
    }

    #[test]
    fn nesterov_without_momentum_is_sgd() {
        let (mut a, ia) = scalar_store(2.0, 0.3);
        let (mut b, ib) = scalar_store(2.0, 0.3);
        sgd_step(&mut a, 0.05, f64::INFINITY).unwrap();
        nesterov_step(&mut b, 0.05, 0.0).unwrap();
        assert_eq!(a.value(ia), b.value(ib));
    }

    #[test]
    fn nesterov_descends_quadratic() {
        let (mut s, id) = scalar_store(1.0, 0.0);
        let mut f = 1.0;
        for _ in 0..2 {
            let theta = s.value(id).item();
            s.get_mut(id).grad[0] = 2.0 * theta;
            nesterov_step(&mut s, 0.05, 0.9).unwrap();
            let next = s.value(id).item().powi(2);
            assert!(next < f);
            f = next;
        }
    }

    #[test]
    fn clones_get_distinct_ids() {
        let s = ParameterStore::new();
        assert_ne!(s.id(), s.clone().id());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn unclipped_sgd_moves_by_exactly_lr_times_grad(
                vals in prop::collection::vec(-5.0f64..5.0, 1..8),
                grads in prop::collection::vec(-5.0f64..5.0, 8),
                lr in 1e-4f64..1.0,
            ) {
                let mut s = ParameterStore::new();
                let id = s.add("p", Tensor::vector(vals.clone()));
                s.get_mut(id).grad.copy_from_slice(&grads[..vals.len()]);
                sgd_step(&mut s, lr, f64::INFINITY).unwrap();
                for (i, v) in s.value(id).data().iter().enumerate() {
                    prop_assert_eq!(*v, vals[i] - lr * grads[i]);
                }
            }
        }
    }
}
