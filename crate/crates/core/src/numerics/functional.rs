//! Plain slice-level reference ops.

use crate::error::{Result, StlinkError};

/// Max-subtracted softmax, in place.
pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Softmax over a vector.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(StlinkError::EmptyReduction);
    }
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Softmax along one axis of a row-major `rows x cols` matrix (`axis` 0 or 1).
pub fn softmax_axis(x: &[f64], rows: usize, cols: usize, axis: usize) -> Result<Vec<f64>> {
    if rows == 0 || cols == 0 {
        return Err(StlinkError::EmptyReduction);
    }
    let mut out = x.to_vec();
    match axis {
        1 => out.chunks_mut(cols).for_each(softmax_in_place),
        0 => {
            for c in 0..cols {
                let mut col: Vec<f64> = (0..rows).map(|r| x[r * cols + c]).collect();
                softmax_in_place(&mut col);
                for r in 0..rows {
                    out[r * cols + c] = col[r];
                }
            }
        }
        _ => return Err(StlinkError::InvalidConfig(format!("softmax axis {axis} out of range for a matrix"))),
    }
    Ok(out)
}

/// Layer normalization with population variance.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(StlinkError::EmptyInput);
    }
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(crate::error::shape_err("layer_norm affine", x.len(), gamma.len().max(beta.len())));
    }
    if eps <= 0.0 {
        return Err(StlinkError::InvalidConfig("layer_norm eps must be positive".into()));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rs = 1.0 / (var + eps).sqrt();
    Ok(x.iter().zip(gamma).zip(beta).map(|((v, g), b)| (v - mean) * rs * g + b).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let e = std::f64::consts::E;
        let s = softmax(&[1.0, 0.0]).unwrap();
        assert!((s[0] - e / (1.0 + e)).abs() < 1e-12);
        assert!((s[0] - 0.7311).abs() < 1e-4 && (s[1] - 0.2689).abs() < 1e-4);
        for v in softmax(&[5.0, 5.0, 5.0]).unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(softmax(&[]), Err(StlinkError::EmptyReduction)));
    }

    #[test]
    fn softmax_columns() {
        let s = softmax_axis(&[1.0, 0.0, 0.0, 0.0], 2, 2, 0).unwrap();
        assert!((s[0] + s[2] - 1.0).abs() < 1e-12);
        assert!((s[1] - 0.5).abs() < 1e-12);
        assert!(softmax_axis(&[], 0, 3, 1).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        assert_eq!(layer_norm(&[1.0; 3], &[1.0; 3], &[0.0; 3], 1e-5).unwrap(), vec![0.0; 3]);
        assert_eq!(layer_norm(&[1.0; 3], &[1.0; 3], &[5.0; 3], 1e-5).unwrap(), vec![5.0; 3]);
        // mean 2, population variance 2/3
        let expect = 1.0 / (2.0f64 / 3.0 + 1e-5).sqrt();
        let y = layer_norm(&[1.0, 2.0, 3.0], &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert!((y[0] + expect).abs() < 1e-12 && y[1].abs() < 1e-12 && (y[2] - expect).abs() < 1e-12);
        assert!((y[2] - 1.2247).abs() < 1e-4);
        assert!(matches!(layer_norm(&[], &[], &[], 1e-5), Err(StlinkError::EmptyInput)));
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(xs in prop::collection::vec(-50.0f64..50.0, 1..32), c in -50.0f64..50.0) {
            let a = softmax(&xs).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p - q).abs() < 1e-6);
                prop_assert!(*p >= 0.0);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn layer_norm_is_shift_invariant(xs in prop::collection::vec(-10.0f64..10.0, 2..32), c in -100.0f64..100.0) {
            let n = xs.len();
            let g = vec![1.3; n];
            let b = vec![-0.2; n];
            let a = layer_norm(&xs, &g, &b, 1e-5).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let s = layer_norm(&shifted, &g, &b, 1e-5).unwrap();
            for (p, q) in a.iter().zip(&s) {
                prop_assert!((p - q).abs() < 1e-6);
            }
        }

        #[test]
        fn layer_norm_standardizes(xs in prop::collection::vec(-10.0f64..10.0, 2..32)) {
            let n = xs.len();
            let y = layer_norm(&xs, &vec![1.0; n], &vec![0.0; n], 1e-5).unwrap();
            let mean = y.iter().sum::<f64>() / n as f64;
            let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!(var <= 1.0 + 1e-9);
            let xm = xs.iter().sum::<f64>() / n as f64;
            let xv = xs.iter().map(|v| (v - xm) * (v - xm)).sum::<f64>() / n as f64;
            prop_assert!((var - xv / (xv + 1e-5)).abs() < 1e-9);
        }

        #[test]
        fn forward_ops_stay_finite(xs in prop::collection::vec(-1e3f64..1e3, 1..64)) {
            let n = xs.len();
            prop_assert!(softmax(&xs).unwrap().iter().all(|v| v.is_finite()));
            prop_assert!(layer_norm(&xs, &vec![1.0; n], &vec![0.0; n], 1e-5).unwrap().iter().all(|v| v.is_finite()));
        }
    }
}
