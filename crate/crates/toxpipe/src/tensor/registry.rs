//! Named, group-frozen trainable parameters with per-parameter Adam state.

use std::collections::{BTreeSet, HashMap};

use super::TensorError;

/// Adam hyperparameters. `lr = 0` is allowed and makes every update a
/// no-op, which the zero-shot transfer baseline relies on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), TensorError> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TensorError::Invalid {
                op: "adam_step",
                reason: format!("bad config {self:?}"),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Parameter {
    name: String,
    group: String,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    moment1: Vec<f64>,
    moment2: Vec<f64>,
    grad_seen: bool,
}

/// Hierarchically grouped trainable arrays. Frozen groups still receive
/// gradients but are skipped by [`ParamRegistry::adam_step`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamRegistry {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
    frozen: BTreeSet<String>,
    step: u64,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter under a freezable group. Names must be unique;
    /// registration order is the iteration (and serialization) order.
    pub fn register(
        &mut self,
        group: &str,
        name: &str,
        shape: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<usize, TensorError> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(TensorError::BadLength {
                shape,
                len: values.len(),
            });
        }
        if self.by_name.contains_key(name) {
            return Err(TensorError::DuplicateParam {
                name: name.to_string(),
            });
        }
        let len = values.len();
        let index = self.params.len();
        self.params.push(Parameter {
            name: name.to_string(),
            group: group.to_string(),
            shape,
            values,
            grad: vec![0.0; len],
            moment1: vec![0.0; len],
            moment2: vec![0.0; len],
            grad_seen: false,
        });
        self.by_name.insert(name.to_string(), index);
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.params[index].name
    }

    pub fn group(&self, index: usize) -> &str {
        &self.params[index].group
    }

    pub fn shape(&self, index: usize) -> &[usize] {
        &self.params[index].shape
    }

    pub fn values(&self, index: usize) -> &[f64] {
        &self.params[index].values
    }

    pub fn values_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.params[index].values
    }

    pub fn grad(&self, index: usize) -> &[f64] {
        &self.params[index].grad
    }

    pub fn moments(&self, index: usize) -> (&[f64], &[f64]) {
        let p = &self.params[index];
        (&p.moment1, &p.moment2)
    }

    pub fn set_moments(
        &mut self,
        index: usize,
        moment1: Vec<f64>,
        moment2: Vec<f64>,
    ) -> Result<(), TensorError> {
        let p = &mut self.params[index];
        if moment1.len() != p.values.len() || moment2.len() != p.values.len() {
            return Err(TensorError::BadLength {
                shape: p.shape.clone(),
                len: moment1.len(),
            });
        }
        p.moment1 = moment1;
        p.moment2 = moment2;
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// Distinct group names in registration order of first appearance.
    pub fn groups(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for p in &self.params {
            if seen.insert(p.group.clone()) {
                out.push(p.group.clone());
            }
        }
        out
    }

    pub fn set_frozen_groups(&mut self, groups: BTreeSet<String>) {
        self.frozen = groups;
    }

    pub fn frozen_groups(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn is_frozen(&self, index: usize) -> bool {
        self.frozen.contains(&self.params[index].group)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
            p.grad_seen = false;
        }
    }

    /// Adds tape gradients into the registry accumulators.
    pub fn accumulate_grads(&mut self, grads: Vec<(usize, Vec<f64>)>) {
        for (index, grad) in grads {
            let p = &mut self.params[index];
            debug_assert_eq!(grad.len(), p.grad.len());
            for (g, d) in p.grad.iter_mut().zip(&grad) {
                *g += d;
            }
            p.grad_seen = true;
        }
    }

    /// Resets Adam moments and the step counter, as when fine-tuning starts
    /// over on a new dataset.
    pub fn reset_moments(&mut self) {
        for p in &mut self.params {
            p.moment1.fill(0.0);
            p.moment2.fill(0.0);
        }
        self.step = 0;
    }

    /// One bias-corrected Adam update over all unfrozen parameters. The
    /// step counter advances once per call. Frozen parameters are left
    /// bitwise untouched, moments included.
    pub fn adam_step(&mut self, config: &AdamConfig) -> Result<(), TensorError> {
        config.validate()?;
        for p in &self.params {
            if !self.frozen.contains(&p.group) && !p.grad_seen {
                return Err(TensorError::MissingGrad {
                    name: p.name.clone(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - config.beta1.powi(t);
        let bias2 = 1.0 - config.beta2.powi(t);
        for p in &mut self.params {
            if self.frozen.contains(&p.group) {
                continue;
            }
            for i in 0..p.values.len() {
                let g = p.grad[i];
                p.moment1[i] = config.beta1 * p.moment1[i] + (1.0 - config.beta1) * g;
                p.moment2[i] = config.beta2 * p.moment2[i] + (1.0 - config.beta2) * g * g;
                let m_hat = p.moment1[i] / bias1;
                let v_hat = p.moment2[i] / bias2;
                p.values[i] -= config.lr * m_hat / (v_hat.sqrt() + config.epsilon);
            }
        }
        Ok(())
    }

    /// Total number of trainable scalars across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param_registry(value: f64) -> ParamRegistry {
        let mut registry = ParamRegistry::new();
        registry
            .register("head", "head.w", vec![1], vec![value])
            .unwrap();
        registry
    }

    #[test]
    fn first_adam_step_matches_hand_computation() {
        // m_hat = 1, v_hat = 1 at t = 1, so the update is lr / (1 + eps).
        let mut registry = single_param_registry(0.0);
        registry.accumulate_grads(vec![(0, vec![1.0])]);
        registry.adam_step(&AdamConfig::with_lr(0.001)).unwrap();
        let expected = -0.001 * (1.0 / (1.0 + 1e-8));
        assert!((registry.values(0)[0] - expected).abs() < 1e-12);
        assert_eq!(registry.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_values_unchanged() {
        let mut registry = single_param_registry(0.7);
        for _ in 0..5 {
            registry.zero_grads();
            registry.accumulate_grads(vec![(0, vec![0.0])]);
            registry.adam_step(&AdamConfig::with_lr(0.1)).unwrap();
        }
        assert_eq!(registry.values(0)[0], 0.7);
    }

    #[test]
    fn frozen_group_is_bitwise_untouched() {
        let mut registry = ParamRegistry::new();
        registry
            .register("embeddings", "embeddings.token", vec![2], vec![0.25, -1.5])
            .unwrap();
        registry
            .register("head", "head.w", vec![1], vec![1.0])
            .unwrap();
        registry.set_frozen_groups(["embeddings".to_string()].into());

        let before = registry.clone();
        registry.accumulate_grads(vec![(0, vec![1.0, 1.0]), (1, vec![1.0])]);
        registry.adam_step(&AdamConfig::with_lr(0.01)).unwrap();

        assert_eq!(registry.values(0), before.values(0));
        assert_eq!(registry.moments(0), before.moments(0));
        assert_ne!(registry.values(1), before.values(1));
    }

    #[test]
    fn missing_gradient_on_unfrozen_param_is_named() {
        let mut registry = ParamRegistry::new();
        registry
            .register("head", "head.bias", vec![1], vec![0.0])
            .unwrap();
        let err = registry.adam_step(&AdamConfig::default()).unwrap_err();
        match err {
            TensorError::MissingGrad { name } => assert_eq!(name, "head.bias"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn frozen_params_may_skip_gradients() {
        let mut registry = single_param_registry(1.0);
        registry.set_frozen_groups(["head".to_string()].into());
        registry.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(registry.values(0)[0], 1.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut registry = single_param_registry(0.0);
        assert!(matches!(
            registry.register("head", "head.w", vec![1], vec![0.0]),
            Err(TensorError::DuplicateParam { .. })
        ));
    }

    #[test]
    fn lr_zero_step_is_value_preserving() {
        let mut registry = single_param_registry(0.375);
        registry.accumulate_grads(vec![(0, vec![2.5])]);
        registry.adam_step(&AdamConfig::with_lr(0.0)).unwrap();
        assert_eq!(registry.values(0)[0], 0.375);
        // Moments do advance; only the values stay put.
        assert_ne!(registry.moments(0).0[0], 0.0);
    }

    #[test]
    fn groups_listed_in_first_appearance_order() {
        let mut registry = ParamRegistry::new();
        registry
            .register("embeddings", "embeddings.token", vec![1], vec![0.0])
            .unwrap();
        registry
            .register("encoder.0", "encoder.0.w", vec![1], vec![0.0])
            .unwrap();
        registry
            .register("encoder.0", "encoder.0.b", vec![1], vec![0.0])
            .unwrap();
        registry
            .register("encoder.1", "encoder.1.w", vec![1], vec![0.0])
            .unwrap();
        registry
            .register("head", "head.w", vec![1], vec![0.0])
            .unwrap();
        assert_eq!(
            registry.groups(),
            vec!["embeddings", "encoder.0", "encoder.1", "head"]
        );
    }
}
