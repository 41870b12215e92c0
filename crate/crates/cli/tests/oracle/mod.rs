//! Reference computations that share no code with the library: moments by
//! two-pass summation, and tr((Σ_r Σ_g)^½) from the eigenvalues of the
//! product, found as roots of its characteristic polynomial.

#![allow(dead_code)]

pub fn mean(xs: &[Vec<f64>]) -> Vec<f64> {
    let d = xs[0].len();
    let mut m = vec![0.0; d];
    for x in xs {
        for j in 0..d {
            m[j] += x[j];
        }
    }
    m.iter().map(|v| v / xs.len() as f64).collect()
}

/// Unbiased covariance.
pub fn covariance(xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = xs[0].len();
    let m = mean(xs);
    let mut c = vec![vec![0.0; d]; d];
    for x in xs {
        for i in 0..d {
            for j in 0..d {
                c[i][j] += (x[i] - m[i]) * (x[j] - m[j]);
            }
        }
    }
    let n1 = (xs.len() - 1) as f64;
    c.iter().map(|r| r.iter().map(|v| v / n1).collect()).collect()
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n).map(|i| (0..m).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect()).collect()
}

fn trace(a: &[Vec<f64>]) -> f64 {
    (0..a.len()).map(|i| a[i][i]).sum()
}

/// Eigenvalues of a d×d matrix (d ≤ 3) known to have real non-negative
/// spectrum, from its characteristic polynomial, polished by Newton steps.
pub fn real_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    match a.len() {
        1 => vec![a[0][0]],
        2 => {
            let t = a[0][0] + a[1][1];
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            let disc = (t * t - 4.0 * det).max(0.0).sqrt();
            // Larger root first, smaller one via the product to avoid cancellation.
            let l1 = 0.5 * (t + disc);
            let l2 = if l1 != 0.0 { det / l1 } else { 0.0 };
            vec![l1, l2]
        }
        3 => {
            let c2 = trace(a);
            let c1 = a[0][0] * a[1][1] - a[0][1] * a[1][0] + a[0][0] * a[2][2] - a[0][2] * a[2][0]
                + a[1][1] * a[2][2]
                - a[1][2] * a[2][1];
            let c0 = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
            // λ³ − c2 λ² + c1 λ − c0 = 0; substitute λ = t + c2/3.
            let s = c2 / 3.0;
            let p = c1 - c2 * c2 / 3.0;
            let q = -(2.0 * c2 * c2 * c2 / 27.0 - c2 * c1 / 3.0 + c0);
            let roots = if p.abs() < 1e-300 {
                vec![s + (-q).cbrt(); 3]
            } else {
                let r = 2.0 * (-p / 3.0).max(0.0).sqrt();
                let arg = if r == 0.0 { 0.0 } else { (3.0 * q / (p * r)).clamp(-1.0, 1.0) };
                let phi = arg.acos() / 3.0;
                (0..3).map(|k| s + r * (phi - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos()).collect()
            };
            let f = |l: f64| ((l - c2) * l + c1) * l - c0;
            let df = |l: f64| (3.0 * l - 2.0 * c2) * l + c1;
            roots
                .into_iter()
                .map(|mut l| {
                    for _ in 0..3 {
                        let d = df(l);
                        if d.abs() < 1e-300 {
                            break;
                        }
                        let next = l - f(l) / d;
                        if !next.is_finite() {
                            break;
                        }
                        l = next;
                    }
                    l
                })
                .collect()
        }
        d => panic!("oracle handles d <= 3, got {d}"),
    }
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(real: &[Vec<f64>], fake: &[Vec<f64>]) -> f64 {
    let (mr, mg) = (mean(real), mean(fake));
    let (sr, sg) = (covariance(real), covariance(fake));
    let shift: f64 = mr.iter().zip(&mg).map(|(a, b)| (a - b) * (a - b)).sum();
    let cross: f64 = real_eigenvalues(&matmul(&sr, &sg)).iter().map(|l| l.max(0.0).sqrt()).sum();
    shift + trace(&sr) + trace(&sg) - 2.0 * cross
}

/// exp(E_x KL(p(y|x) ‖ p(y))) over one split.
pub fn inception_score(probs: &[Vec<f64>]) -> f64 {
    let c = probs[0].len();
    let n = probs.len() as f64;
    let marginal: Vec<f64> = (0..c).map(|k| probs.iter().map(|p| p[k]).sum::<f64>() / n).collect();
    let kl: f64 = probs
        .iter()
        .map(|p| (0..c).filter(|&k| p[k] > 0.0).map(|k| p[k] * (p[k].ln() - marginal[k].ln())).sum::<f64>())
        .sum::<f64>()
        / n;
    kl.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalues_of_known_matrices() {
        let d = vec![vec![3.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 2.0]];
        let mut l = real_eigenvalues(&d);
        l.sort_by(f64::total_cmp);
        for (a, b) in l.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let m = vec![vec![2.0, 1.0], vec![1.0, 2.0]];
        let mut l = real_eigenvalues(&m);
        l.sort_by(f64::total_cmp);
        assert!((l[0] - 1.0).abs() < 1e-14 && (l[1] - 3.0).abs() < 1e-14);
    }
}
