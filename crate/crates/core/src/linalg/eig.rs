use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{norm2, Cholesky, DenseMatrix, LinalgError, Result};

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Ascending.
    pub values: Vec<f64>,
    /// Eigenvectors stored as columns, in the order of `values`.
    pub vectors: DenseMatrix,
}

const SYMMETRY_TOL: f64 = 1e-12;
const POWER_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

/// Symmetric eigensolve by Householder tridiagonalisation and implicit QL.
pub fn sym_eig(a: &DenseMatrix) -> Result<SymEig> {
    a.check_symmetric(SYMMETRY_TOL)?;
    let n = a.rows();
    if n == 0 {
        return Ok(SymEig { values: vec![], vectors: DenseMatrix::zeros(0, 0) });
    }
    let mut v = a.clone();
    v.symmetrize();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, &mut d, &mut e);
    ql_implicit(&mut v, &mut d, &mut e)?;
    Ok(SymEig { values: d, vectors: v })
}

/// Solves `K φ = λ M φ` for symmetric `K` and SPD `M`.
///
/// Reduced to standard form through `M = L Lᵀ`; eigenvectors come back
/// M-orthonormal.
pub fn generalized_sym_eig(k: &DenseMatrix, m: &DenseMatrix) -> Result<SymEig> {
    k.check_symmetric(SYMMETRY_TOL)?;
    if k.shape() != m.shape() {
        return Err(LinalgError::DimensionMismatch {
            op: "generalized_sym_eig",
            left: k.shape(),
            right: m.shape(),
        });
    }
    let chol = Cholesky::factor(m)?;
    let n = k.rows();
    // C = L⁻¹ K L⁻ᵀ, built column by column.
    let mut x = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let col = chol.forward(&k.column(j));
        x.set_column(j, &col);
    }
    let xt = x.transpose();
    let mut c = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let col = chol.forward(&xt.column(j));
        c.set_column(j, &col);
    }
    c.symmetrize();
    let eig = sym_eig(&c)?;
    let mut phi = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let col = chol.backward(&eig.vectors.column(j));
        phi.set_column(j, &col);
    }
    Ok(SymEig { values: eig.values, vectors: phi })
}

/// Largest singular value by power iteration on `AᵀA`.
///
/// Stops when the Rayleigh quotient changes by less than `1e-8` relative.
pub fn op_norm_2(a: &DenseMatrix) -> f64 {
    let n = a.cols();
    if n == 0 || a.rows() == 0 || a.max_abs() == 0.0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut rho_prev = 0.0;
    for _ in 0..20_000 {
        let av = a.matvec(&v).expect("shape checked");
        let rho = av.iter().map(|x| x * x).sum::<f64>();
        let w = a.tr_matvec(&av).expect("shape checked");
        let nw = norm2(&w);
        if nw == 0.0 {
            return rho.sqrt();
        }
        v = w.into_iter().map(|x| x / nw).collect();
        if (rho - rho_prev).abs() < 1e-8 * rho {
            // one more Rayleigh quotient at the refined vector
            let av = a.matvec(&v).expect("shape checked");
            let rho_new = av.iter().map(|x| x * x).sum::<f64>();
            return rho_new.max(rho).sqrt();
        }
        rho_prev = rho;
    }
    rho_prev.sqrt()
}

// Householder reduction to tridiagonal form, accumulating the transform in
// `v`. On exit `d` holds the diagonal and `e[1..]` the sub-diagonal.
fn tridiagonalize(v: &mut DenseMatrix, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
                v[(j, i)] = 0.0;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                let f = d[j];
                v[(j, i)] = f;
                let mut g = e[j] + v[(j, j)] * f;
                for k in (j + 1)..i {
                    g += v[(k, j)] * d[k];
                    e[k] += v[(k, j)] * f;
                }
                e[j] = g;
            }
            let mut f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                let f = d[j];
                let g = e[j];
                for k in j..i {
                    v[(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n.saturating_sub(1) {
        v[(n - 1, i)] = v[(i, i)];
        v[(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[(k, i + 1)] * v[(k, j)];
                }
                for k in 0..=i {
                    v[(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[(n - 1, j)];
        v[(n - 1, j)] = 0.0;
    }
    v[(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

// Implicit QL on the tridiagonal (d, e); eigenvalues sorted ascending.
fn ql_implicit(v: &mut DenseMatrix, d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1 = 0.0_f64;
    let eps = f64::EPSILON;
    let max_iter = 60 * n.max(1);
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > max_iter {
                    let residual = e.iter().map(|x| x.abs()).fold(0.0, f64::max);
                    return Err(LinalgError::NoConvergence { size: n, residual });
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;
                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        let h = v[(k, i + 1)];
                        v[(k, i + 1)] = s * v[(k, i)] + c * h;
                        v[(k, i)] = c * v[(k, i)] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    // selection sort keeps the column permutation simple
    for i in 0..n.saturating_sub(1) {
        let mut k = i;
        let mut p = d[i];
        for (j, &dj) in d.iter().enumerate().skip(i + 1) {
            if dj < p {
                k = j;
                p = dj;
            }
        }
        if k != i {
            d[k] = d[i];
            d[i] = p;
            for row in 0..n {
                let tmp = v[(row, i)];
                v[(row, i)] = v[(row, k)];
                v[(row, k)] = tmp;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_symmetric(n: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = DenseMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
        a = a.add(&a.transpose()).unwrap();
        a
    }

    fn residual(a: &DenseMatrix, eig: &SymEig) -> f64 {
        let av = a.matmul(&eig.vectors).unwrap();
        let vl = eig.vectors.matmul(&DenseMatrix::from_diag(&eig.values)).unwrap();
        av.sub(&vl).unwrap().max_abs()
    }

    #[test]
    fn identity_2x2() {
        let eig = sym_eig(&DenseMatrix::identity(2)).unwrap();
        assert_eq!(eig.values, vec![1.0, 1.0]);
    }

    #[test]
    fn two_by_two_characteristic_roots() {
        let a = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let eig = sym_eig(&a).unwrap();
        assert!((eig.values[0] - 1.0).abs() < 1e-14);
        assert!((eig.values[1] - 3.0).abs() < 1e-14);
        assert!(residual(&a, &eig) < 1e-13);
    }

    #[test]
    fn diagonal_gives_permuted_identity() {
        let a = DenseMatrix::from_diag(&[5.0, 3.0]);
        let eig = sym_eig(&a).unwrap();
        assert_eq!(eig.values, vec![3.0, 5.0]);
        for j in 0..2 {
            let col = eig.vectors.column(j);
            let nonzero: Vec<_> = col.iter().filter(|x| x.abs() > 0.5).collect();
            assert_eq!(nonzero.len(), 1);
            assert!((nonzero[0].abs() - 1.0).abs() < 1e-15);
        }
        assert!((eig.vectors[(1, 0)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_nonsymmetric() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]);
        assert!(matches!(sym_eig(&a), Err(LinalgError::NotSymmetric { .. })));
    }

    #[test]
    fn random_symmetric_residual_and_orthonormality() {
        for (n, seed) in [(1, 1), (5, 2), (17, 3), (40, 4), (64, 5)] {
            let a = random_symmetric(n, seed);
            let eig = sym_eig(&a).unwrap();
            let norm = a.frobenius_norm();
            assert!(residual(&a, &eig) <= 1e-10 * norm, "n={n}");
            let vtv = eig.vectors.tr_matmul(&eig.vectors).unwrap();
            assert!(vtv.sub(&DenseMatrix::identity(n)).unwrap().max_abs() < 1e-10);
            assert!(eig.values.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn generalized_identity_mass_matches_standard() {
        let k = random_symmetric(6, 9);
        let g = generalized_sym_eig(&k, &DenseMatrix::identity(6)).unwrap();
        let s = sym_eig(&k).unwrap();
        for (a, b) in g.values.iter().zip(&s.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn generalized_k_equals_m_gives_unit_spectrum() {
        let b = random_symmetric(5, 11);
        let m = b.matmul(&b).unwrap().add(&DenseMatrix::identity(5)).unwrap();
        let g = generalized_sym_eig(&m, &m).unwrap();
        for l in g.values {
            assert!((l - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn generalized_path_graph_closed_form() {
        // Dirichlet path Laplacian (1/h)·tridiag(-1,2,-1) against lumped mass h·I.
        let n = 9;
        let h = 1.0 / (n as f64 + 1.0);
        let k = DenseMatrix::from_fn(n, n, |i, j| {
            if i == j {
                2.0 / h
            } else if i.abs_diff(j) == 1 {
                -1.0 / h
            } else {
                0.0
            }
        });
        let m = DenseMatrix::from_diag(&vec![h; n]);
        let g = generalized_sym_eig(&k, &m).unwrap();
        for (idx, lam) in g.values.iter().enumerate() {
            let kk = (idx + 1) as f64;
            let expected = 2.0 * (1.0 - (kk * std::f64::consts::PI / (n as f64 + 1.0)).cos()) / (h * h);
            assert!((lam - expected).abs() <= 1e-9 * expected, "{lam} vs {expected}");
        }
        // M-orthonormality and residual
        let phitmphi = g.vectors.tr_matmul(&m.matmul(&g.vectors).unwrap()).unwrap();
        assert!(phitmphi.sub(&DenseMatrix::identity(n)).unwrap().max_abs() < 1e-9);
        let kphi = k.matmul(&g.vectors).unwrap();
        let mphil = m.matmul(&g.vectors).unwrap().matmul(&DenseMatrix::from_diag(&g.values)).unwrap();
        assert!(kphi.sub(&mphil).unwrap().max_abs() < 1e-9 * k.max_abs());
    }

    #[test]
    fn generalized_rejects_indefinite_mass() {
        let k = DenseMatrix::identity(2);
        let m = DenseMatrix::from_diag(&[1.0, -1.0]);
        assert!(matches!(
            generalized_sym_eig(&k, &m),
            Err(LinalgError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn op_norm_simple_cases() {
        assert!((op_norm_2(&DenseMatrix::identity(7)) - 1.0).abs() < 1e-12);
        assert!((op_norm_2(&DenseMatrix::from_diag(&[2.0, 5.0])) - 5.0).abs() < 1e-7);
        assert_eq!(op_norm_2(&DenseMatrix::zeros(3, 4)), 0.0);
    }

    #[test]
    fn op_norm_matches_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let a = DenseMatrix::from_fn(8, 8, |_, _| StandardNormal.sample(&mut rng));
            let ata = a.tr_matmul(&a).unwrap();
            let oracle = sym_eig(&ata).unwrap().values.last().unwrap().sqrt();
            let est = op_norm_2(&a);
            assert!((est - oracle).abs() <= 1e-6 * oracle, "{est} vs {oracle}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn reconstruction_error_small(n in 1usize..=64, seed in any::<u64>()) {
            let a = random_symmetric(n, seed);
            let eig = sym_eig(&a).unwrap();
            let recon = eig.vectors
                .matmul(&DenseMatrix::from_diag(&eig.values)).unwrap()
                .matmul_tr(&eig.vectors).unwrap();
            let err = recon.sub(&a).unwrap().frobenius_norm();
            prop_assert!(err <= 1e-9 * a.frobenius_norm());
        }

        #[test]
        fn op_norm_dominates_samples(rows in 1usize..12, cols in 1usize..12, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng));
            let bound = op_norm_2(&a);
            for _ in 0..100 {
                let x: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect();
                let ratio = norm2(&a.matvec(&x).unwrap()) / norm2(&x);
                prop_assert!(ratio <= bound * (1.0 + 1e-9));
            }
        }
    }
}
