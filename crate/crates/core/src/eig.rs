//! Eigenvalues of small dense real matrices.
//!
//! Householder reduction to upper Hessenberg form followed by the Francis
//! double-shift QR iteration (the EISPACK `hqr` scheme). Eigenvectors are
//! recovered afterwards by complex inverse iteration.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type ComplexScalar = Complex64;

const MAX_QR_ITERATIONS: usize = 100;

#[derive(Clone, Debug)]
pub struct Eigen {
    pub values: Vec<ComplexScalar>,
    /// Unit-norm eigenvectors, one per eigenvalue.
    pub vectors: Vec<Vec<ComplexScalar>>,
}

pub fn eig_dense(k: &Tensor) -> Result<Eigen> {
    let values = eigenvalues(k)?;
    let vectors = values
        .iter()
        .map(|&lambda| eigenvector(k, lambda))
        .collect::<Result<Vec<_>>>()?;
    Ok(Eigen { values, vectors })
}

/// Closed form for the `2 × 2` case via trace and determinant.
pub fn eig2x2(k: &Tensor) -> Result<[ComplexScalar; 2]> {
    if k.shape() != [2, 2] {
        return Err(Error::invalid("eig2x2", format!("shape {:?}", k.shape())));
    }
    let (a, b, c, d) = (k.get(0, 0), k.get(0, 1), k.get(1, 0), k.get(1, 1));
    let half_tr = 0.5 * (a + d);
    let disc = 0.25 * (a - d) * (a - d) + b * c;
    Ok(if disc >= 0.0 {
        let r = disc.sqrt();
        [Complex64::new(half_tr + r, 0.0), Complex64::new(half_tr - r, 0.0)]
    } else {
        let r = (-disc).sqrt();
        [Complex64::new(half_tr, r), Complex64::new(half_tr, -r)]
    })
}

pub fn eigenvalues(k: &Tensor) -> Result<Vec<ComplexScalar>> {
    if !k.is_matrix() || k.rows() != k.cols() || k.rows() == 0 {
        return Err(Error::invalid("eig", format!("not square: {:?}", k.shape())));
    }
    if !k.is_finite() {
        return Err(Error::invalid("eig", "non-finite input"));
    }
    let mut h: Vec<Vec<f64>> = k.to_rows();
    hessenberg(&mut h);
    let (re, im) = hqr(&mut h)?;
    Ok(re.into_iter().zip(im).map(|(r, i)| Complex64::new(r, i)).collect())
}

fn hessenberg(h: &mut [Vec<f64>]) {
    let n = h.len();
    if n < 3 {
        return;
    }
    let high = n - 1;
    let mut ort = vec![0.0; n];
    for m in 1..high {
        let scale: f64 = (m..=high).map(|i| h[i][m - 1].abs()).sum();
        if scale == 0.0 {
            continue;
        }
        let mut hh = 0.0;
        for i in (m..=high).rev() {
            ort[i] = h[i][m - 1] / scale;
            hh += ort[i] * ort[i];
        }
        let mut g = hh.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        hh -= ort[m] * g;
        ort[m] -= g;
        for j in m..n {
            let f = (m..=high).rev().map(|i| ort[i] * h[i][j]).sum::<f64>() / hh;
            for i in m..=high {
                h[i][j] -= f * ort[i];
            }
        }
        for row in h.iter_mut().take(high + 1) {
            let f = (m..=high).rev().map(|j| ort[j] * row[j]).sum::<f64>() / hh;
            for j in m..=high {
                row[j] -= f * ort[j];
            }
        }
        ort[m] *= scale;
        h[m][m - 1] = scale * g;
    }
}

#[allow(clippy::many_single_char_names, unused_assignments)]
fn hqr(h: &mut [Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let nn = h.len();
    let mut d = vec![0.0; nn];
    let mut e = vec![0.0; nn];
    let low = 0usize;
    let eps = f64::EPSILON;
    let mut exshift = 0.0;
    let (mut p, mut q, mut r, mut s, mut z) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut w, mut x, mut y);

    let mut norm = 0.0;
    for i in 0..nn {
        for j in i.saturating_sub(1)..nn {
            norm += h[i][j].abs();
        }
    }

    let mut n = nn as isize - 1;
    let mut iter = 0usize;
    while n >= low as isize {
        let nu = n as usize;
        // Look for a single small sub-diagonal element.
        let mut l = nu;
        while l > low {
            s = h[l - 1][l - 1].abs() + h[l][l].abs();
            if s == 0.0 {
                s = norm;
            }
            if h[l][l - 1].abs() < eps * s {
                break;
            }
            l -= 1;
        }

        if l == nu {
            // One root.
            h[nu][nu] += exshift;
            d[nu] = h[nu][nu];
            e[nu] = 0.0;
            n -= 1;
            iter = 0;
        } else if l + 1 == nu {
            // Two roots.
            w = h[nu][nu - 1] * h[nu - 1][nu];
            p = (h[nu - 1][nu - 1] - h[nu][nu]) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            h[nu][nu] += exshift;
            h[nu - 1][nu - 1] += exshift;
            x = h[nu][nu];
            if q >= 0.0 {
                z = if p >= 0.0 { p + z } else { p - z };
                d[nu - 1] = x + z;
                d[nu] = d[nu - 1];
                if z != 0.0 {
                    d[nu] = x - w / z;
                }
                e[nu - 1] = 0.0;
                e[nu] = 0.0;
            } else {
                d[nu - 1] = x + p;
                d[nu] = x + p;
                e[nu - 1] = z;
                e[nu] = -z;
            }
            n -= 2;
            iter = 0;
        } else {
            x = h[nu][nu];
            y = 0.0;
            w = 0.0;
            if l < nu {
                y = h[nu - 1][nu - 1];
                w = h[nu][nu - 1] * h[nu - 1][nu];
            }
            // Exceptional shifts break cycles.
            if iter == 10 {
                exshift += x;
                for (i, row) in h.iter_mut().enumerate().take(nu + 1).skip(low) {
                    row[i] -= x;
                }
                s = h[nu][nu - 1].abs() + h[nu - 1][nu - 2].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for (i, row) in h.iter_mut().enumerate().take(nu + 1).skip(low) {
                        row[i] -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = x;
                    w = x;
                }
            }
            iter += 1;
            if iter > MAX_QR_ITERATIONS {
                return Err(Error::NoConvergence {
                    routine: "hessenberg qr",
                    iterations: MAX_QR_ITERATIONS,
                });
            }

            // Look for two consecutive small sub-diagonal elements.
            let mut m = nu - 2;
            loop {
                z = h[m][m];
                r = x - z;
                s = y - z;
                p = (r * s - w) / h[m + 1][m] + h[m][m + 1];
                q = h[m + 1][m + 1] - z - r - s;
                r = h[m + 2][m + 1];
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                if h[m][m - 1].abs() * (q.abs() + r.abs())
                    < eps * (p.abs() * (h[m - 1][m - 1].abs() + z.abs() + h[m + 1][m + 1].abs()))
                {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=nu {
                h[i][i - 2] = 0.0;
                if i > m + 2 {
                    h[i][i - 3] = 0.0;
                }
            }

            // Double QR step on rows l..=n and columns m..=n.
            let mut k = m;
            while k < nu {
                let notlast = k != nu - 1;
                if k != m {
                    p = h[k][k - 1];
                    q = h[k + 1][k - 1];
                    r = if notlast { h[k + 2][k - 1] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x == 0.0 {
                        k += 1;
                        continue;
                    }
                    p /= x;
                    q /= x;
                    r /= x;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s != 0.0 {
                    if k != m {
                        h[k][k - 1] = -s * x;
                    } else if l != m {
                        h[k][k - 1] = -h[k][k - 1];
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..nn {
                        p = h[k][j] + q * h[k + 1][j];
                        if notlast {
                            p += r * h[k + 2][j];
                            h[k + 2][j] -= p * z;
                        }
                        h[k][j] -= p * x;
                        h[k + 1][j] -= p * y;
                    }
                    for row in h.iter_mut().take(nu.min(k + 3) + 1) {
                        p = x * row[k] + y * row[k + 1];
                        if notlast {
                            p += z * row[k + 2];
                            row[k + 2] -= p * r;
                        }
                        row[k] -= p;
                        row[k + 1] -= p * q;
                    }
                }
                k += 1;
            }
        }
    }
    Ok((d, e))
}

/// Inverse iteration on `k − λI` in complex arithmetic.
fn eigenvector(k: &Tensor, lambda: ComplexScalar) -> Result<Vec<ComplexScalar>> {
    let n = k.rows();
    let scale = k.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let shift = lambda + Complex64::new(scale * 1e-10, 0.0);
    let mut a: Vec<Vec<ComplexScalar>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let v = Complex64::new(k.get(i, j), 0.0);
                    if i == j {
                        v - shift
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    let lu = ComplexLu::factor(&mut a, scale * f64::EPSILON);
    let mut x: Vec<ComplexScalar> = (0..n)
        .map(|i| Complex64::new(1.0 + 0.1 * i as f64, 0.0))
        .collect();
    for _ in 0..3 {
        x = lu.solve(&x);
        normalize(&mut x);
    }
    Ok(x)
}

fn normalize(x: &mut [ComplexScalar]) {
    let norm = x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    // Fix the phase so the largest component is real and positive.
    let pivot = x
        .iter()
        .copied()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
        .unwrap_or(Complex64::new(1.0, 0.0));
    let phase = if pivot.norm() > 0.0 {
        pivot.conj() / pivot.norm()
    } else {
        Complex64::new(1.0, 0.0)
    };
    for v in x.iter_mut() {
        *v = *v * phase / norm;
    }
}

/// Complex LU with partial pivoting; zero pivots are replaced by `tiny`.
pub(crate) struct ComplexLu {
    lu: Vec<Vec<ComplexScalar>>,
    perm: Vec<usize>,
    sign: f64,
}

impl ComplexLu {
    pub(crate) fn factor(a: &mut [Vec<ComplexScalar>], tiny: f64) -> Self {
        let n = a.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[i][k].norm().total_cmp(&a[j][k].norm()))
                .unwrap_or(k);
            if p != k {
                a.swap(p, k);
                perm.swap(p, k);
                sign = -sign;
            }
            if a[k][k].norm() == 0.0 {
                a[k][k] = Complex64::new(tiny.max(f64::MIN_POSITIVE), 0.0);
            }
            for i in k + 1..n {
                let f = a[i][k] / a[k][k];
                a[i][k] = f;
                for j in k + 1..n {
                    let t = a[k][j];
                    a[i][j] -= f * t;
                }
            }
        }
        ComplexLu {
            lu: a.to_vec(),
            perm,
            sign,
        }
    }

    pub(crate) fn det(&self) -> ComplexScalar {
        let mut d = Complex64::new(self.sign, 0.0);
        for (i, row) in self.lu.iter().enumerate() {
            d *= row[i];
        }
        d
    }

    fn solve(&self, b: &[ComplexScalar]) -> Vec<ComplexScalar> {
        let n = self.lu.len();
        let mut y: Vec<ComplexScalar> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                let t = y[j];
                y[i] -= self.lu[i][j] * t;
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let t = y[j];
                y[i] -= self.lu[i][j] * t;
            }
            y[i] /= self.lu[i][i];
        }
        y
    }
}

/// `det(k − λI)` evaluated through complex LU.
pub fn characteristic_residual(k: &Tensor, lambda: ComplexScalar) -> ComplexScalar {
    let n = k.rows();
    let mut a: Vec<Vec<ComplexScalar>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let v = Complex64::new(k.get(i, j), 0.0);
                    if i == j {
                        v - lambda
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    ComplexLu::factor(&mut a, 0.0).det()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_4;

    fn sorted(mut v: Vec<ComplexScalar>) -> Vec<ComplexScalar> {
        v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        v
    }

    #[test]
    fn identity() {
        let vals = eigenvalues(&Tensor::eye(2)).unwrap();
        for v in vals {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn rotation() {
        let (c, s) = (FRAC_PI_4.cos(), FRAC_PI_4.sin());
        let k = Tensor::matrix(2, 2, vec![c, -s, s, c]);
        let vals = sorted(eigenvalues(&k).unwrap());
        assert!((vals[0] - Complex64::new(c, -s)).norm() < 1e-14);
        assert!((vals[1] - Complex64::new(c, s)).norm() < 1e-14);
        let closed = sorted(eig2x2(&k).unwrap().to_vec());
        assert!((closed[0] - vals[0]).norm() < 1e-14);
    }

    #[test]
    fn trace_det_identities_and_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [3, 4, 5, 7] {
            for _ in 0..20 {
                let k = Tensor::matrix(
                    n,
                    n,
                    (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                );
                let vals = eigenvalues(&k).unwrap();
                assert_eq!(vals.len(), n);
                let trace: f64 = (0..n).map(|i| k.get(i, i)).sum();
                let sum: ComplexScalar = vals.iter().sum();
                let prod: ComplexScalar = vals.iter().product();
                let det = linalg::det(&k).unwrap();
                assert!((sum.re - trace).abs() <= 1e-8 * trace.abs().max(1.0));
                assert!(sum.im.abs() < 1e-10);
                assert!((prod.re - det).abs() <= 1e-8 * det.abs().max(1e-3));
                for v in &vals {
                    assert!(characteristic_residual(&k, *v).norm() < 1e-6);
                    // conjugate closure
                    assert!(vals.iter().any(|w| (w - v.conj()).norm() < 1e-10));
                }
            }
        }
    }

    #[test]
    fn eigenvectors_satisfy_definition() {
        let k = Tensor::matrix(
            3,
            3,
            vec![0.5, -0.9, 0.1, 0.8, 0.4, 0.0, 0.2, 0.1, -0.3],
        );
        let eig = eig_dense(&k).unwrap();
        for (lambda, v) in eig.values.iter().zip(&eig.vectors) {
            for i in 0..3 {
                let kv: ComplexScalar = (0..3).map(|j| v[j] * k.get(i, j)).sum();
                assert!((kv - v[i] * lambda).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn rejects_non_square() {
        assert!(eigenvalues(&Tensor::zeros(&[2, 3])).is_err());
    }
}
