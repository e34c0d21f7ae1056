use super::{NetParams, ParamGrads};

/// Adam moments plus hyper-parameters. Moments mirror the parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(params: &NetParams, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        OptimState { m: zeros.clone(), v: zeros, step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut NetParams, grads: &ParamGrads, state: &mut OptimState) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (k, tensor) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[k], &mut state.v[k], &grads.tensors[k]);
        for i in 0..tensor.data.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            tensor.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = NetParams::init(1);
        let before = p.clone();
        let g = ParamGrads::zeros_like(&p);
        let mut s = OptimState::new(&p, 1e-3);
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut s);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn matches_scalar_trace() {
        let mut p = NetParams::zeros(0);
        let mut s = OptimState::new(&p, 1e-3);
        let gs = [0.5, -0.2, 0.1];
        // reference: textbook recursion on one scalar
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        for (t, &g) in gs.iter().enumerate() {
            let mut grads = ParamGrads::zeros_like(&p);
            grads.tensors[0][0] = g;
            adam_step(&mut p, &grads, &mut s);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            x -= 1e-3 * mh / (vh.sqrt() + 1e-8);
            assert!((p.tensors()[0].data[0] - x).abs() < 1e-15);
        }
        // the first step moves by lr * g / (|g| + eps)
        let mut q = NetParams::zeros(0);
        let mut s = OptimState::new(&q, 1e-3);
        let mut grads = ParamGrads::zeros_like(&q);
        grads.tensors[0][0] = 0.5;
        adam_step(&mut q, &grads, &mut s);
        assert!((q.tensors()[0].data[0] + 1e-3 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
    }
}
