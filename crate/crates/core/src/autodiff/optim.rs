use super::{AutodiffError, ParamSet, Tensor};

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl OptimizerState {
    pub fn adamw(params: &ParamSet, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            step: 0,
            first_moment: params.iter().map(|p| Tensor::zeros(p.value().shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.value().shape())).collect(),
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its current gradient. Gradients are left untouched.
    pub fn adamw_step(&mut self, params: &mut ParamSet) -> Result<(), AutodiffError> {
        if params.len() != self.first_moment.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adamw",
                detail: format!("{} params, {} moment buffers", params.len(), self.first_moment.len()),
            });
        }
        if let Some(p) = params.iter().find(|p| p.grad().is_none()) {
            return Err(AutodiffError::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps, wd) = (self.learning_rate, self.beta1, self.beta2, self.epsilon, self.weight_decay);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let grad = params.grad_mut(id).expect("checked above").data().to_vec();
            let m = self.first_moment[k].data_mut();
            let v = self.second_moment[k].data_mut();
            let value = params.value_mut(id).data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                value[j] *= 1.0 - lr * wd;
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                value[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::scalar(value));
        ps.zero_grads();
        ps.grad_mut(id).unwrap().data_mut()[0] = grad;
        ps
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::from_vec(vec![0.3, -1.2, 4.0]));
        ps.zero_grads();
        let before = ps.value(ps.find("a").unwrap()).clone();
        let mut opt = OptimizerState::adamw(&ps, 1e-3).with_weight_decay(0.0);
        for _ in 0..5 {
            opt.adamw_step(&mut ps).unwrap();
        }
        assert_eq!(ps.value(ps.find("a").unwrap()), &before);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn zero_grad_decay_scales() {
        let mut ps = single(2.0, 0.0);
        let mut opt = OptimizerState::adamw(&ps, 0.1).with_weight_decay(0.5);
        opt.adamw_step(&mut ps).unwrap();
        let v = ps.value(ps.find("w").unwrap()).item();
        assert_eq!(v, 2.0 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = single(0.0, 1.0);
        let mut opt = OptimizerState::adamw(&ps, 1e-4);
        opt.adamw_step(&mut ps).unwrap();
        let v = ps.value(ps.find("w").unwrap()).item();
        // m_hat = v_hat = 1 at t = 1, so the step is lr / (1 + eps).
        assert!((v + 1e-4 / (1.0 + 1e-8)).abs() < 1e-15, "{v}");
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut ps = ParamSet::new();
        ps.add("orphan", Tensor::scalar(1.0));
        let mut opt = OptimizerState::adamw(&ps, 1e-3);
        assert!(matches!(opt.adamw_step(&mut ps), Err(AutodiffError::MissingGrad(n)) if n == "orphan"));
    }
}
