/// Central-difference gradient `(f(x + h e_k) - f(x - h e_k)) / 2h`.
///
/// The function is evaluated `2 * point.len()` times; evaluation errors are
/// returned as-is.
pub fn finite_diff_gradient<F, E>(mut f: F, point: &[f64], step: f64) -> Result<Vec<f64>, E>
where
    F: FnMut(&[f64]) -> Result<f64, E>,
{
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + step;
        let plus = f(&x)?;
        x[k] = orig - step;
        let minus = f(&x)?;
        x[k] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SeededRng;
    use std::convert::Infallible;

    #[test]
    fn quadratic_norm() {
        let g = finite_diff_gradient(
            |x| Ok::<_, Infallible>(0.5 * x.iter().map(|v| v * v).sum::<f64>()),
            &[1.0, 2.0],
            1e-5,
        )
        .unwrap();
        assert!((g[0] - 1.0).abs() < 1e-8 && (g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function() {
        let g = finite_diff_gradient(|_| Ok::<_, Infallible>(3.5), &[0.1, -4.0, 2.0], 1e-5).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn exponential_of_product() {
        let (a, b) = (0.3, 0.7);
        let g = finite_diff_gradient(|x| Ok::<_, Infallible>((x[0] * x[1]).exp()), &[a, b], 1e-5)
            .unwrap();
        let e = (a * b).exp();
        let exact = [b * e, a * e];
        for (gi, ei) in g.iter().zip(exact) {
            assert!(((gi - ei) / ei).abs() < 1e-7);
        }
    }

    #[test]
    fn symmetric_quadratic_form() {
        let mut rng = SeededRng::new(21);
        for _ in 0..10 {
            let d = 4;
            let b: Vec<f64> = (0..d * d).map(|_| rng.standard_normal()).collect();
            let a: Vec<f64> = (0..d * d)
                .map(|k| 0.5 * (b[k] + b[(k % d) * d + k / d]))
                .collect();
            let x: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
            let quad = |x: &[f64]| {
                let mut s = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        s += x[i] * a[i * d + j] * x[j];
                    }
                }
                Ok::<_, Infallible>(0.5 * s)
            };
            let g = finite_diff_gradient(quad, &x, 1e-5).unwrap();
            let ax: Vec<f64> = (0..d)
                .map(|i| (0..d).map(|j| a[i * d + j] * x[j]).sum())
                .collect();
            let norm = ax.iter().map(|v| v * v).sum::<f64>().sqrt();
            let err = g
                .iter()
                .zip(&ax)
                .map(|(u, v)| (u - v).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(err / norm < 1e-7);
        }
    }

    #[test]
    fn errors_propagate() {
        let r: Result<Vec<f64>, &str> = finite_diff_gradient(|_| Err("boom"), &[1.0], 1e-3);
        assert_eq!(r.unwrap_err(), "boom");
    }
}
