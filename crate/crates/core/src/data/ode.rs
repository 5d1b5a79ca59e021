//! Classical fourth-order Runge–Kutta integration.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integrates `dy/dt = f(y)` from `y0` for `steps` fixed steps of size `dt`.
///
/// Row `k` of the result holds the state after `k + 1` steps; `y0` itself
/// is not included.
pub fn integrate_rk4<F>(f: F, y0: &[f64], dt: f64, steps: usize) -> Result<Tensor>
where
    F: Fn(&[f64], &mut [f64]),
{
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid("integrate_rk4", format!("dt must be positive, got {dt}")));
    }
    if steps == 0 {
        return Err(Error::invalid("integrate_rk4", "steps must be at least 1"));
    }
    let n = y0.len();
    let mut out = Vec::with_capacity(steps * n);
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for step in 1..=steps {
        f(&y, &mut k1);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * dt * k1[i];
        }
        f(&tmp, &mut k2);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * dt * k2[i];
        }
        f(&tmp, &mut k3);
        for i in 0..n {
            tmp[i] = y[i] + dt * k3[i];
        }
        f(&tmp, &mut k4);
        for i in 0..n {
            y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration { step });
        }
        out.extend_from_slice(&y);
    }
    Ok(Tensor::matrix(steps, n, out))
}

/// Van der Pol field `(y₂, a·y₂·(1 − y₁²) − b·y₁)`.
pub fn van_der_pol(a: f64, b: f64) -> impl Fn(&[f64], &mut [f64]) {
    move |y, dy| {
        dy[0] = y[1];
        dy[1] = a * y[1] * (1.0 - y[0] * y[0]) - b * y[0];
    }
}

pub fn lorenz(sigma: f64, rho: f64, beta: f64) -> impl Fn(&[f64], &mut [f64]) {
    move |y, dy| {
        dy[0] = sigma * (y[1] - y[0]);
        dy[1] = y[0] * (rho - y[2]) - y[1];
        dy[2] = y[0] * y[1] - beta * y[2];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_is_constant() {
        let traj = integrate_rk4(|_, dy| dy.fill(0.0), &[1.0, 2.0], 0.1, 5).unwrap();
        for i in 0..5 {
            assert_eq!(traj.row(i), &[1.0, 2.0]);
        }
    }

    #[test]
    fn exponential_decay() {
        let traj = integrate_rk4(|y, dy| dy[0] = -y[0], &[1.0], 0.01, 100).unwrap();
        assert!((traj.get(99, 0) - (-1.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn fourth_order_convergence() {
        let err = |dt: f64| {
            let steps = (1.0 / dt).round() as usize;
            let traj = integrate_rk4(|y, dy| dy[0] = -3.0 * y[0], &[1.0], dt, steps).unwrap();
            (traj.get(steps - 1, 0) - (-3.0f64).exp()).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn harmonic_energy_conserved() {
        let traj = integrate_rk4(van_der_pol(0.0, 1.0), &[1.0, 0.0], 0.01, 1000).unwrap();
        for i in 0..1000 {
            let e = traj.get(i, 0).powi(2) + traj.get(i, 1).powi(2);
            assert!((e - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn blow_up_reports_step() {
        let err = integrate_rk4(|y, dy| dy[0] = y[0] * y[0], &[1.0], 0.5, 50).unwrap_err();
        assert!(matches!(err, Error::Integration { .. }));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(integrate_rk4(|_, _| {}, &[0.0], 0.0, 1).is_err());
        assert!(integrate_rk4(|_, _| {}, &[0.0], 0.1, 0).is_err());
    }
}
