//! Dense matrix exponential: scaling and squaring with a degree-13 Padé
//! approximant (Higham, SIAM J. Matrix Anal. Appl. 26 (2005)).

use nalgebra::DMatrix;

const B13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

const THETA_13: f64 = 5.371920351148152;

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `exp(a)` for a square matrix. Panics if `a` is not square or the Padé
/// denominator is singular (cannot happen for finite input after scaling).
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm needs a square matrix");
    let n = a.nrows();
    if n == 0 {
        return a.clone();
    }
    let norm = one_norm(a);
    let squarings = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil() as i32
    } else {
        0
    };
    let a = a / 2f64.powi(squarings);
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = &a6 * (&a6 * B13[13] + &a4 * B13[11] + &a2 * B13[9])
        + &a6 * B13[7]
        + &a4 * B13[5]
        + &a2 * B13[3]
        + &id * B13[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * B13[12] + &a4 * B13[10] + &a2 * B13[8])
        + &a6 * B13[6]
        + &a4 * B13[4]
        + &a2 * B13[2]
        + &id * B13[0];
    let p = &v + &u;
    let q = &v - &u;
    let mut r = q
        .lu()
        .solve(&p)
        .expect("Padé denominator is nonsingular after scaling");
    for _ in 0..squarings {
        r = &r * &r;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gives_identity() {
        let z = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(expm(&z), DMatrix::identity(3, 3));
    }

    #[test]
    fn two_state_generator_matches_eigen_decomposition() {
        // [-k k; k -k] has eigenvalues 0 and -2k.
        for &(k, t) in &[(0.5, 1.0), (3.0, 2.5), (40.0, 1.0)] {
            let a = DMatrix::from_row_slice(2, 2, &[-k * t, k * t, k * t, -k * t]);
            let e = expm(&a);
            let d = (-2.0 * k * t).exp();
            let expected = [0.5 + 0.5 * d, 0.5 - 0.5 * d];
            assert!((e[(0, 0)] - expected[0]).abs() < 1e-14);
            assert!((e[(0, 1)] - expected[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn diagonal_and_nilpotent() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -2.0, 0.3]));
        let e = expm(&a);
        for (i, x) in [1.0f64, -2.0, 0.3].iter().enumerate() {
            assert!((e[(i, i)] / x.exp() - 1.0).abs() < 1e-14);
        }
        let n = DMatrix::from_row_slice(2, 2, &[0.0, 7.0, 0.0, 0.0]);
        let e = expm(&n);
        assert!((e[(0, 1)] - 7.0).abs() < 1e-13);
        assert!((e[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn inverse_of_negated() {
        let a = DMatrix::from_row_slice(3, 3, &[-1.0, 0.6, 0.4, 0.2, -0.5, 0.3, 1.5, 0.5, -2.0]);
        let p = expm(&a) * expm(&(-&a));
        assert!((p - DMatrix::identity(3, 3)).abs().max() < 1e-12);
    }
}
