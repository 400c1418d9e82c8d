//! Small dense kernels for latent Gaussians parameterised by a lower
//! triangular Cholesky factor. Matrices are row-major `n×n` slices.

/// Solves `L x = b` in place by forward substitution.
pub(crate) fn forward_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for j in 0..i {
            s -= l[i * n + j] * b[j];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Inverse of a lower-triangular matrix (itself lower triangular).
pub(crate) fn lower_inverse(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    let mut col = vec![0.0; n];
    for c in 0..n {
        col.iter_mut().for_each(|x| *x = 0.0);
        col[c] = 1.0;
        forward_solve(l, n, &mut col);
        for r in 0..n {
            inv[r * n + c] = col[r];
        }
    }
    inv
}

pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[j * n + i] = a[i * n + j];
        }
    }
    out
}

/// `L·Lᵀ`.
pub(crate) fn outer_self(l: &[f64], n: usize) -> Vec<f64> {
    matmul(l, &transpose(l, n), n)
}

/// `KL(N(mq, Lq Lqᵀ) ‖ N(mp, Lp Lpᵀ))` in nats.
///
/// With diagonal factors every off-diagonal contribution is an exact zero,
/// so the result is bitwise identical to feeding the same diagonal through
/// a dense factor with zeroed off-diagonal entries.
pub(crate) fn gaussian_kl(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64], n: usize) -> f64 {
    let mut trace = 0.0;
    let mut col = vec![0.0; n];
    for c in 0..n {
        for r in 0..n {
            col[r] = lq[r * n + c];
        }
        forward_solve(lp, n, &mut col);
        trace += col.iter().map(|v| v * v).sum::<f64>();
    }
    let mut y: Vec<f64> = mp.iter().zip(mq).map(|(p, q)| p - q).collect();
    forward_solve(lp, n, &mut y);
    let maha: f64 = y.iter().map(|v| v * v).sum();
    let mut logdet = 0.0;
    for i in 0..n {
        logdet += lp[i * n + i].ln() - lq[i * n + i].ln();
    }
    0.5 * (trace + maha - n as f64) + logdet
}

/// Gradients of [`gaussian_kl`] scaled by `upstream`, accumulated into the
/// output slices. Only lower-triangular factor entries receive gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gaussian_kl_grad(
    mq: &[f64],
    lq: &[f64],
    mp: &[f64],
    lp: &[f64],
    n: usize,
    upstream: f64,
    gmq: &mut [f64],
    glq: &mut [f64],
    gmp: &mut [f64],
    glp: &mut [f64],
) {
    let lp_inv = lower_inverse(lp, n);
    // Σp⁻¹ = Lp⁻ᵀ Lp⁻¹
    let prec = matmul(&transpose(&lp_inv, n), &lp_inv, n);
    let d: Vec<f64> = mp.iter().zip(mq).map(|(p, q)| p - q).collect();
    let mut prec_d = vec![0.0; n];
    for i in 0..n {
        prec_d[i] = (0..n).map(|j| prec[i * n + j] * d[j]).sum();
    }
    for i in 0..n {
        gmq[i] -= upstream * prec_d[i];
        gmp[i] += upstream * prec_d[i];
    }

    let prec_lq = matmul(&prec, lq, n);
    // -Σp⁻¹ (Σq + d dᵀ) Σp⁻¹ Lp
    let mut inner = outer_self(lq, n);
    for i in 0..n {
        for j in 0..n {
            inner[i * n + j] += d[i] * d[j];
        }
    }
    let prec_lp = matmul(&prec, lp, n);
    let g_lp = matmul(&matmul(&prec, &inner, n), &prec_lp, n);
    for i in 0..n {
        for j in 0..=i {
            let mut a = prec_lq[i * n + j];
            let mut b = -g_lp[i * n + j];
            if i == j {
                a -= 1.0 / lq[i * n + i];
                b += 1.0 / lp[i * n + i];
            }
            glq[i * n + j] += upstream * a;
            glp[i * n + j] += upstream * b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lower(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                l[i * n + j] = if i == j { 0.6 + next().abs() } else { next() };
            }
        }
        l
    }

    #[test]
    fn kl_gradient_matches_central_differences() {
        let n = 3;
        let lq = lower(n, 1);
        let lp = lower(n, 2);
        let mq = vec![0.3, -0.2, 0.5];
        let mp = vec![-0.1, 0.4, 0.0];
        let mut g = [vec![0.0; n], vec![0.0; n * n], vec![0.0; n], vec![0.0; n * n]];
        {
            let [a, b, c, d] = &mut g;
            gaussian_kl_grad(&mq, &lq, &mp, &lp, n, 1.0, a, b, c, d);
        }
        let h = 1e-6;
        let base = [mq, lq, mp, lp];
        for which in 0..4 {
            for k in 0..base[which].len() {
                if which % 2 == 1 && (k % n) > (k / n) {
                    continue;
                }
                let eval = |delta: f64| {
                    let mut p = base.clone();
                    p[which][k] += delta;
                    gaussian_kl(&p[0], &p[1], &p[2], &p[3], n)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g[which][k];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                    "param {which}[{k}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn lower_inverse_is_inverse() {
        let n = 4;
        let l = lower(n, 9);
        let prod = matmul(&l, &lower_inverse(&l, n), n);
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[i * n + j] - want).abs() < 1e-12);
            }
        }
    }
}
