//! Small fully connected networks over a flat parameter vector.
//!
//! Hidden layers use `tanh`, the output layer is affine. Parameters are stored layer by
//! layer as `W` (`out x in`, row-major) followed by `b` (`out`). All passes are batched:
//! one row of the input matrix per sample.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
}

/// Activations of every layer from one forward pass; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct Forward {
    acts: Vec<Array2<f64>>,
}

impl Forward {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("forward pass has at least one layer")
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.acts.pop().expect("forward pass has at least one layer")
    }
}

impl Mlp {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self::from_sizes(sizes)
    }

    pub fn from_sizes(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(config_err(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Mlp { sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn hidden(&self) -> &[usize] {
        &self.sizes[1..self.sizes.len() - 1]
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.sizes.len());
        let mut o = 0;
        offs.push(0);
        for w in self.sizes.windows(2) {
            o += w[1] * w[0] + w[1];
            offs.push(o);
        }
        offs
    }

    fn layer<'a>(&self, params: &'a [f64], offset: usize, l: usize) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = ArrayView2::from_shape((n_out, n_in), &params[offset..offset + n_out * n_in]).unwrap();
        let b = ArrayView1::from(&params[offset + n_out * n_in..offset + n_out * n_in + n_out]);
        (w, b)
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(self.n_params());
        for w in self.sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[1] * w[0] + w[1] {
                params.push(rng.random_range(-bound..bound));
            }
        }
        params
    }

    /// Mutable views of the last layer's weights and biases.
    pub fn output_layer_mut<'a>(&self, params: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64]) {
        let offs = self.layer_offsets();
        let l = self.sizes.len() - 2;
        let n_w = self.sizes[l] * self.sizes[l + 1];
        let (w, b) = params[offs[l]..offs[l + 1]].split_at_mut(n_w);
        (w, b)
    }

    /// Mutable view of the first layer's weights.
    pub fn input_weights_mut<'a>(&self, params: &'a mut [f64]) -> &'a mut [f64] {
        &mut params[..self.sizes[0] * self.sizes[1]]
    }

    pub fn forward(&self, params: &[f64], input: ArrayView2<f64>) -> Forward {
        debug_assert_eq!(params.len(), self.n_params());
        debug_assert_eq!(input.ncols(), self.input_dim());
        let offs = self.layer_offsets();
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_owned());
        for l in 0..n_layers {
            let (w, b) = self.layer(params, offs[l], l);
            let mut z = acts[l].dot(&w.t());
            z += &b;
            if l + 1 < n_layers {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        Forward { acts }
    }

    /// Accumulates `d(loss)/d(params)` into `grad` given `d_out = d(loss)/d(output)`.
    /// Returns `d(loss)/d(input)` when `want_input` is set.
    pub fn backward(
        &self,
        params: &[f64],
        fwd: &Forward,
        d_out: Array2<f64>,
        grad: &mut [f64],
        want_input: bool,
    ) -> Option<Array2<f64>> {
        debug_assert_eq!(grad.len(), self.n_params());
        let offs = self.layer_offsets();
        let n_layers = self.sizes.len() - 1;
        let mut delta = d_out;
        for l in (0..n_layers).rev() {
            let (w, _) = self.layer(params, offs[l], l);
            let a_prev = &fwd.acts[l];
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let gw = delta.t().dot(a_prev);
            let gb: Array1<f64> = delta.sum_axis(Axis(0));
            let slot = &mut grad[offs[l]..offs[l + 1]];
            for (g, v) in slot[..n_out * n_in].iter_mut().zip(gw.iter()) {
                *g += v;
            }
            for (g, v) in slot[n_out * n_in..].iter_mut().zip(gb.iter()) {
                *g += v;
            }
            if l == 0 && !want_input {
                return None;
            }
            let mut d_prev = delta.dot(&w);
            if l > 0 {
                ndarray::Zip::from(&mut d_prev).and(a_prev).for_each(|d, &a| *d *= 1.0 - a * a);
            }
            delta = d_prev;
        }
        Some(delta)
    }
}

/// `log(1 + e^z)`, stable for large `|z|`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Derivative of [`softplus`], the logistic sigmoid.
pub fn softplus_grad(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar_loss(net: &Mlp, p: &[f64], x: &Array2<f64>) -> f64 {
        let out = net.forward(p, x.view()).into_output();
        out.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum::<f64>() * 0.5
    }

    #[test]
    fn param_count() {
        let net = Mlp::new(3, &[4, 5], 2).unwrap();
        assert_eq!(net.n_params(), 4 * 3 + 4 + 5 * 4 + 5 + 2 * 5 + 2);
        assert_eq!(net.init(1).len(), net.n_params());
        assert_eq!(net.init(1), net.init(1));
        assert_ne!(net.init(1), net.init(2));
    }

    #[test]
    fn rejects_zero_width() {
        assert!(Mlp::new(3, &[0], 1).is_err());
        assert!(Mlp::from_sizes(vec![3]).is_err());
    }

    #[test]
    fn single_affine_layer() {
        let net = Mlp::new(2, &[], 1).unwrap();
        let p = [2.0, -1.0, 0.5];
        let out = net.forward(&p, array![[1.0, 3.0], [0.0, 0.0]].view()).into_output();
        assert_eq!(out, array![[-0.5], [0.5]]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = Mlp::new(3, &[6, 5], 2).unwrap();
        let p = net.init(7);
        let x = array![[0.3, -0.2, 0.9], [-1.0, 0.4, 0.1], [0.0, 0.5, -0.7]];
        let fwd = net.forward(&p, x.view());
        let mut d_out = fwd.output().clone();
        for (i, v) in d_out.iter_mut().enumerate() {
            *v *= i as f64 + 1.0;
        }
        let mut grad = vec![0.0; p.len()];
        let d_in = net.backward(&p, &fwd, d_out, &mut grad, true).unwrap();
        let h = 1e-6;
        for j in 0..p.len() {
            let mut pp = p.clone();
            pp[j] += h;
            let up = scalar_loss(&net, &pp, &x);
            pp[j] -= 2.0 * h;
            let dn = scalar_loss(&net, &pp, &x);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - grad[j]).abs() < 1e-7 * (1.0 + fd.abs()), "param {j}: {fd} vs {}", grad[j]);
        }
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                let mut xx = x.clone();
                xx[[r, c]] += h;
                let up = scalar_loss(&net, &p, &xx);
                xx[[r, c]] -= 2.0 * h;
                let dn = scalar_loss(&net, &p, &xx);
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - d_in[[r, c]]).abs() < 1e-7 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn softplus_helpers() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        for z in [-5.0, -0.3, 0.0, 1.2, 40.0] {
            let h = 1e-6;
            let fd = (softplus(z + h) - softplus(z - h)) / (2.0 * h);
            assert!((fd - softplus_grad(z)).abs() < 1e-8);
        }
        for y in [1e-3, 0.2, 1.0, 5.0, 50.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }
}
