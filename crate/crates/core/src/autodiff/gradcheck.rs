use super::{AutodiffError, Graph, Tensor, Var};

/// Builds a scalar loss from a single input inside a fresh graph.
pub trait ScalarFn: Fn(&mut Graph, Var) -> Result<Var, AutodiffError> {}
impl<F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>> ScalarFn for F {}

fn evaluate(f: &impl ScalarFn, x: &Tensor) -> Result<f64, AutodiffError> {
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), false)?;
    let out = f(&mut g, v)?;
    let t = g.value(out);
    if !t.is_scalar() {
        return Err(AutodiffError::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Analytic gradient of `f` at `x` by reverse mode.
pub fn analytic_grad(f: &impl ScalarFn, x: &Tensor) -> Result<(f64, Tensor), AutodiffError> {
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true)?;
    let out = f(&mut g, v)?;
    g.backward(out)?;
    let value = g.value(out).item();
    let grad = g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((value, grad))
}

/// Max over coordinates of `|analytic - central| / max(|analytic|, |central|, 1e-8)`.
pub fn finite_diff_check(f: impl ScalarFn, x: &Tensor, h: f64) -> Result<f64, AutodiffError> {
    if !(h > 0.0) {
        return Err(AutodiffError::InvalidStep(h));
    }
    let (value, grad) = analytic_grad(&f, x)?;
    let again = evaluate(&f, x)?;
    if again.to_bits() != value.to_bits() {
        return Err(AutodiffError::NonDeterministic { first: value, second: again });
    }
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let central = (plus - minus) / (2.0 * h);
        let analytic = grad.data()[i];
        let denom = analytic.abs().max(central.abs()).max(1e-8);
        worst = worst.max((analytic - central).abs() / denom);
    }
    Ok(worst)
}

type CaseFn = Box<dyn Fn(&mut Graph, Var) -> Result<Var, AutodiffError>>;

/// One finite-difference check over a single op kind.
pub struct GradCase {
    pub name: &'static str,
    /// No branch points: held to the tighter tolerance.
    pub smooth: bool,
    pub input: Tensor,
    f: CaseFn,
}

impl GradCase {
    pub fn run(&self, h: f64) -> Result<f64, AutodiffError> {
        finite_diff_check(&self.f, &self.input, h)
    }
}

/// Contracts `out` against fixed weights so every coordinate matters.
fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var, AutodiffError> {
    let w = g.constant(weights.clone().reshape(g.shape(out))?)?;
    let m = g.mul(out, w)?;
    g.sum(m)
}

/// Cases covering every differentiable op kind, with inputs drawn from `[-1, 1]`.
pub fn op_suite(seed: u64) -> Vec<GradCase> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: &[usize]| Tensor::uniform(shape, 1.0, &mut rng);
    let mut cases = Vec::new();
    let mut push = |name, smooth, input: Tensor, out_numel: usize, weights: Tensor, body: CaseFn| {
        assert_eq!(weights.numel(), out_numel);
        let f: CaseFn = Box::new(move |g: &mut Graph, x: Var| {
            let out = body(g, x)?;
            if g.value(out).is_scalar() {
                let w = g.constant(weights.clone().reshape(&[1])?)?;
                return g.mul(out, w);
            }
            project(g, out, &weights)
        });
        cases.push(GradCase { name, smooth, input, f });
    };

    let other = u(&[3, 4]);
    push("add", true, u(&[3, 4]), 12, u(&[12]), Box::new(move |g, x| {
        let o = g.constant(other.clone())?;
        g.add(x, o)
    }));
    let bias = u(&[4]);
    push("add-broadcast", true, u(&[2, 3, 4]), 24, u(&[24]), Box::new(move |g, x| {
        let b = g.constant(bias.clone())?;
        g.add(x, b)
    }));
    let rows = u(&[2, 1, 4]);
    push("add-broadcast-grad-rhs", true, u(&[2, 1, 4]), 24, u(&[24]), Box::new(move |g, x| {
        let o = g.constant(rows.clone().reshape(&[2, 1, 4])?)?;
        let big = g.constant(Tensor::filled(&[2, 3, 4], 0.5))?;
        let s = g.add(big, x)?;
        g.mul(s, o)
    }));
    let other = u(&[3, 4]);
    push("mul", true, u(&[3, 4]), 12, u(&[12]), Box::new(move |g, x| {
        let o = g.constant(other.clone())?;
        let xx = g.mul(x, x)?;
        g.mul(xx, o)
    }));
    let right = u(&[4, 5]);
    push("matmul-left", true, u(&[2, 3, 4]), 30, u(&[30]), Box::new(move |g, x| {
        let r = g.constant(right.clone())?;
        g.matmul(x, r)
    }));
    let left = u(&[2, 3, 4]);
    push("matmul-right-shared", true, u(&[4, 5]), 30, u(&[30]), Box::new(move |g, x| {
        let l = g.constant(left.clone())?;
        g.matmul(l, x)
    }));
    let left = u(&[2, 3, 4]);
    push("matmul-batched", true, u(&[2, 4, 2]), 12, u(&[12]), Box::new(move |g, x| {
        let l = g.constant(left.clone())?;
        let m = g.matmul(l, x)?;
        let mx = g.mul(m, m)?;
        g.add(m, mx)
    }));
    push("transpose", true, u(&[2, 3, 4]), 24, u(&[24]), Box::new(|g, x| {
        let t = g.transpose(x)?;
        g.mul(t, t)
    }));
    let tail = u(&[2, 2, 4]);
    push("concat", true, u(&[2, 3, 4]), 40, u(&[40]), Box::new(move |g, x| {
        let t = g.constant(tail.clone())?;
        let c = g.concat(&[x, t], 1)?;
        g.mul(c, c)
    }));
    push("slice", true, u(&[3, 5]), 6, u(&[6]), Box::new(|g, x| {
        let s = g.slice(x, 1, 1, 2)?;
        g.tanh(s)
    }));
    push("embedding-lookup", true, u(&[5, 3]), 12, u(&[12]), Box::new(|g, x| {
        let e = g.embedding(x, &[4, 0, 4, 2], &[2, 2])?;
        g.mul(e, e)
    }));
    // Keep inputs away from the kink so the central difference does not straddle it.
    let relu_in = {
        let mut t = u(&[12]);
        t.data_mut().iter_mut().for_each(|v| {
            if v.abs() < 0.05 {
                *v = 0.3
            }
        });
        t
    };
    push("relu", false, relu_in, 12, u(&[12]), Box::new(|g, x| g.relu(x)));
    push("gelu", true, u(&[12]), 12, u(&[12]), Box::new(|g, x| g.gelu(x)));
    push("tanh", true, u(&[12]), 12, u(&[12]), Box::new(|g, x| g.tanh(x)));
    let (gamma, beta) = (u(&[6]), u(&[6]));
    push("layer-norm", true, u(&[3, 6]), 18, u(&[18]), Box::new(move |g, x| {
        let gm = g.constant(gamma.clone())?;
        let bt = g.constant(beta.clone())?;
        g.layer_norm(x, gm, bt)
    }));
    let xs = u(&[3, 6]);
    let beta = u(&[6]);
    push("layer-norm-gamma", true, u(&[6]), 18, u(&[18]), Box::new(move |g, gm| {
        let x = g.constant(xs.clone())?;
        let bt = g.constant(beta.clone())?;
        g.layer_norm(x, gm, bt)
    }));
    push("softmax", true, u(&[3, 5]), 15, u(&[15]), Box::new(|g, x| g.softmax(x)));
    push("log-softmax", true, u(&[3, 5]), 15, u(&[15]), Box::new(|g, x| g.log_softmax(x)));
    let log_in = {
        let mut t = u(&[10]);
        t.data_mut().iter_mut().for_each(|v| *v = 1.0 + 0.5 * *v);
        t
    };
    push("log", true, log_in, 10, u(&[10]), Box::new(|g, x| g.log(x)));
    push("exp", true, u(&[10]), 10, u(&[10]), Box::new(|g, x| g.exp(x)));
    push("sum", true, u(&[8]), 1, u(&[1]), Box::new(|g, x| {
        let e = g.exp(x)?;
        g.sum(e)
    }));
    push("mean", true, u(&[2, 4]), 1, u(&[1]), Box::new(|g, x| {
        let s = g.mul(x, x)?;
        g.mean(s)
    }));
    push("scale", true, u(&[6]), 6, u(&[6]), Box::new(|g, x| {
        let s = g.scale(x, -2.5)?;
        g.tanh(s)
    }));
    push("reshape", true, u(&[2, 6]), 12, u(&[12]), Box::new(|g, x| {
        let r = g.reshape(x, &[3, 4])?;
        g.softmax(r)
    }));
    push("permute", true, u(&[2, 3, 4]), 24, u(&[24]), Box::new(|g, x| {
        let p = g.permute(x, &[1, 2, 0])?;
        g.softmax(p)
    }));
    push("cross-entropy", true, u(&[4, 5]), 1, u(&[1]), Box::new(|g, x| {
        g.cross_entropy(x, &[Some(1), None, Some(4), Some(0)])
    }));
    cases
}
