use crate::error::{Error, Result};

/// Autonomous vector field `x' = f(x)`.
pub trait VectorField {
    fn eval(&self, x: &[f64], out: &mut [f64]);
}

impl<F> VectorField for F
where
    F: Fn(&[f64], &mut [f64]),
{
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        self(x, out)
    }
}

/// One classical fourth-order Runge-Kutta step of length `tau`.
pub fn rk4_step<F: VectorField + ?Sized>(field: &F, x: &[f64], tau: f64) -> Result<Vec<f64>> {
    let m = x.len();
    let mut k1 = vec![0.0; m];
    let mut k2 = vec![0.0; m];
    let mut k3 = vec![0.0; m];
    let mut k4 = vec![0.0; m];
    let mut tmp = vec![0.0; m];

    field.eval(x, &mut k1);
    for i in 0..m {
        tmp[i] = x[i] + 0.5 * tau * k1[i];
    }
    field.eval(&tmp, &mut k2);
    for i in 0..m {
        tmp[i] = x[i] + 0.5 * tau * k2[i];
    }
    field.eval(&tmp, &mut k3);
    for i in 0..m {
        tmp[i] = x[i] + tau * k3[i];
    }
    field.eval(&tmp, &mut k4);

    let next: Vec<f64> = (0..m)
        .map(|i| x[i] + tau / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::Integration {
            x: x.to_vec(),
            tau,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(lambda: f64) -> impl Fn(&[f64], &mut [f64]) {
        move |x: &[f64], out: &mut [f64]| {
            for (o, v) in out.iter_mut().zip(x) {
                *o = lambda * v;
            }
        }
    }

    #[test]
    fn zero_field_is_identity() {
        let zero = |_: &[f64], out: &mut [f64]| out.fill(0.0);
        assert_eq!(rk4_step(&zero, &[1.0, 2.0], 0.01).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn exponential_growth_matches_closed_form() {
        let next = rk4_step(&linear(1.0), &[1.0], 0.1).unwrap();
        assert!((next[0] - 0.1f64.exp()).abs() <= 1e-6);
    }

    #[test]
    fn fourth_order_convergence() {
        // one step error is O(tau^5); over a fixed horizon the global error is O(tau^4)
        let horizon = 1.0;
        let err = |tau: f64| {
            let steps = (horizon / tau).round() as usize;
            let mut x = vec![1.0];
            for _ in 0..steps {
                x = rk4_step(&linear(-2.0), &x, tau).unwrap();
            }
            (x[0] - (-2.0 * horizon).exp()).abs() / (-2.0 * horizon).exp()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 16.0).abs() < 1.5, "ratio {ratio}");
    }

    #[test]
    fn blow_up_is_reported() {
        let wild = |x: &[f64], out: &mut [f64]| out[0] = x[0].powi(8) * 1e300;
        match rk4_step(&wild, &[10.0], 1.0) {
            Err(Error::Integration { x, tau }) => {
                assert_eq!(x, vec![10.0]);
                assert_eq!(tau, 1.0);
            }
            other => panic!("expected integration failure, got {other:?}"),
        }
    }
}
