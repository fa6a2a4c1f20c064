//! Scatter matrices, shrinkage, the generalized symmetric-definite
//! eigenproblem and per-neuron discriminating power.
//!
//! Everything here is plain (non-differentiated) f64 analysis used for
//! reporting and for the pruning-time mask. The training losses rebuild the
//! scatter computation on the tape in `push` using trace/diagonal forms, so
//! no eigenvector is ever differentiated.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{gemm, linalg, Tensor};

/// The scatter triple of one evaluation batch: Σ_a (all), Σ_w (within
/// class), Σ_b (between class), as unnormalized centered Gram sums, plus
/// per-class sample counts.
#[derive(Clone, Debug)]
pub struct ScatterSet {
    pub sigma_a: Tensor,
    pub sigma_w: Tensor,
    pub sigma_b: Tensor,
    pub class_counts: BTreeMap<usize, usize>,
    pub d: usize,
}

/// Generalized eigenpairs of (Σ_b, Σ_w) sorted by descending eigenvalue,
/// plus diag(Σ_w⁻¹Σ_b), the per-axis discriminating power.
#[derive(Clone, Debug)]
pub struct DiscriminantSpectrum {
    pub eigenvalues: Vec<f64>,
    /// Columns are generalized eigenvectors, normalized so eᵀ·Σ_w·e = 1.
    pub eigenvectors: Tensor,
    pub neuron_powers: Vec<f64>,
}

impl DiscriminantSpectrum {
    pub fn total_power(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// Fraction of total eigenvalue mass in the top `k` discriminants.
    pub fn accumulated_fraction(&self, k: usize) -> f64 {
        let total = self.total_power();
        if total <= 0.0 {
            return 0.0;
        }
        self.eigenvalues.iter().take(k).sum::<f64>() / total
    }
}

/// X̃ = (I − n⁻¹·11ᵀ)·X: subtract each column's mean.
pub fn center(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::Contract(format!("center expects a 2-D matrix, got {:?}", x.shape())));
    }
    let (n, d) = (x.rows(), x.cols());
    if n == 0 {
        return Err(Error::Contract("center of an empty matrix".into()));
    }
    let mut means = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            means[j] += x.at2(i, j);
        }
    }
    for m in means.iter_mut() {
        *m /= n as f64;
    }
    let mut out = x.data().to_vec();
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] -= means[j];
        }
    }
    Tensor::from_vec([n, d], out)
}

fn gram(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut g = vec![0.0; d * d];
    gemm::dgemm(
        d,
        n,
        d,
        x.data(),
        gemm::Layout::Transposed,
        x.data(),
        gemm::Layout::Normal,
        &mut g,
        false,
    );
    Tensor::from_vec([d, d], g).expect("square gram")
}

/// Scatter triple of a labeled batch. Σ_w sums per-class centered Grams
/// (a class with a single sample contributes zero and is logged), Σ_a is
/// the globally centered Gram, Σ_b is their difference by definition.
pub fn scatter(latent: &Tensor, labels: &[usize]) -> Result<ScatterSet> {
    if latent.rank() != 2 {
        return Err(Error::Contract(format!(
            "scatter expects [n×d] latent, got {:?}",
            latent.shape()
        )));
    }
    let (n, d) = (latent.rows(), latent.cols());
    if n == 0 {
        return Err(Error::Contract("scatter of an empty batch".into()));
    }
    if labels.len() != n {
        return Err(Error::Contract(format!(
            "scatter got {n} rows but {} labels",
            labels.len()
        )));
    }

    let mut class_rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        class_rows.entry(l).or_default().push(i);
    }

    let sigma_a = gram(&center(latent)?);

    let mut sigma_w = Tensor::zeros([d, d]);
    for (class, rows) in &class_rows {
        if rows.len() < 2 {
            log::warn!("class {class} has {} sample(s); zero within-scatter contribution", rows.len());
            continue;
        }
        let mut sub = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            sub.extend_from_slice(&latent.data()[r * d..(r + 1) * d]);
        }
        let sub = Tensor::from_vec([rows.len(), d], sub)?;
        let g = gram(&center(&sub)?);
        sigma_w.update_in_place(|dst| {
            for (a, b) in dst.iter_mut().zip(g.data()) {
                *a += b;
            }
        });
    }

    let mut sigma_b = sigma_a.clone();
    {
        let w = sigma_w.clone();
        sigma_b.update_in_place(|dst| {
            for (a, b) in dst.iter_mut().zip(w.data()) {
                *a -= b;
            }
        });
    }

    let class_counts = class_rows.into_iter().map(|(c, rows)| (c, rows.len())).collect();
    Ok(ScatterSet { sigma_a, sigma_w, sigma_b, class_counts, d })
}

/// Σ_w + ε·I with ε = epsilon_rel·trace(Σ_w)/d (ε = epsilon_rel when the
/// trace is zero). Makes a PSD matrix strictly positive-definite.
pub fn shrink(sigma_w: &Tensor, epsilon_rel: f64) -> Result<Tensor> {
    if sigma_w.rank() != 2 || sigma_w.rows() != sigma_w.cols() {
        return Err(Error::Contract(format!("shrink expects square matrix, got {:?}", sigma_w.shape())));
    }
    let d = sigma_w.rows();
    let tr: f64 = (0..d).map(|i| sigma_w.at2(i, i)).sum();
    let eps = if tr == 0.0 { epsilon_rel } else { epsilon_rel * tr / d as f64 };
    let mut out = sigma_w.data().to_vec();
    for i in 0..d {
        out[i * d + i] += eps;
    }
    Tensor::from_vec([d, d], out)
}

/// Solve Σ_b·e = v·Σ_w·e by symmetric reduction: factor Σ_w = L·Lᵀ, run an
/// ordinary symmetric eigendecomposition on L⁻¹·Σ_b·L⁻ᵀ and map the vectors
/// back through L⁻ᵀ. Also computes diag(Σ_w⁻¹Σ_b).
pub fn generalized_eig(sigma_b: &Tensor, sigma_w_shrunk: &Tensor) -> Result<DiscriminantSpectrum> {
    let d = sigma_w_shrunk.rows();
    if sigma_b.shape() != [d, d] {
        return Err(Error::Contract(format!(
            "pencil shapes disagree: {:?} vs {:?}",
            sigma_b.shape(),
            sigma_w_shrunk.shape()
        )));
    }
    let l = linalg::cholesky(sigma_w_shrunk.data(), d)?;
    // m = L⁻¹ · Σ_b · L⁻ᵀ, built in two triangular solves
    let a1 = linalg::forward_subst(&l, d, sigma_b.data(), d); // L⁻¹·Σ_b
    // mᵀ = L⁻¹·a1ᵀ  (m is symmetric, so solve on the transpose)
    let mut a1_t = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            a1_t[j * d + i] = a1[i * d + j];
        }
    }
    let m = linalg::forward_subst(&l, d, &a1_t, d);
    let (eigenvalues, u) = linalg::jacobi_eigh(&m, d);
    // map back: E = L⁻ᵀ·U (columns stay paired with eigenvalues)
    let e = linalg::back_subst_t(&l, d, &u, d);
    let neuron_powers = {
        let solved = linalg::spd_solve_with_factor(&l, d, sigma_b.data(), d);
        (0..d).map(|i| solved[i * d + i]).collect()
    };
    Ok(DiscriminantSpectrum {
        eigenvalues,
        eigenvectors: Tensor::from_vec([d, d], e)?,
        neuron_powers,
    })
}

/// diag(Σ_w⁻¹Σ_b) alone, by solve (never an explicit inverse).
pub fn neuron_power(sigma_b: &Tensor, sigma_w_shrunk: &Tensor) -> Result<Vec<f64>> {
    let d = sigma_w_shrunk.rows();
    if sigma_b.shape() != [d, d] {
        return Err(Error::Contract("neuron_power pencil shapes disagree".into()));
    }
    let solved = linalg::spd_solve(sigma_w_shrunk.data(), d, sigma_b.data(), d)?;
    Ok((0..d).map(|i| solved[i * d + i]).collect())
}

/// Row-major matrix dump with a header row naming dimensions.
pub fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let (r, c) = (m.rows(), m.cols());
    let header: Vec<String> = (0..c).map(|j| format!("dim{j}")).collect();
    writeln!(f, "{}", header.join(","))?;
    for i in 0..r {
        let row: Vec<String> = (0..c).map(|j| format!("{}", m.at2(i, j))).collect();
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

/// Discriminant table: rank, eigenvalue, accumulated fraction, neuron power
/// of the same index.
pub fn write_spectrum_csv(path: &Path, spectrum: &DiscriminantSpectrum) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "rank,eigenvalue,accumulated_fraction,neuron_power")?;
    let total = spectrum.total_power();
    let mut acc = 0.0;
    for (i, &v) in spectrum.eigenvalues.iter().enumerate() {
        acc += v;
        let frac = if total > 0.0 { acc / total } else { 0.0 };
        writeln!(f, "{i},{v},{frac},{}", spectrum.neuron_powers.get(i).copied().unwrap_or(0.0))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn rand_matrix(n: usize, d: usize, seed: &mut u64) -> Tensor {
        Tensor::from_vec([n, d], (0..n * d).map(|_| lcg(seed)).collect()).unwrap()
    }

    #[test]
    fn center_constant_rows_and_hand_case() {
        let x = Tensor::from_vec([3, 2], vec![5.0, -2.0, 5.0, -2.0, 5.0, -2.0]).unwrap();
        let c = center(&x).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));

        let x2 = Tensor::from_vec([2, 1], vec![1.0, 3.0]).unwrap();
        let c2 = center(&x2).unwrap();
        assert_eq!(c2.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn center_zeroes_column_means() {
        let mut seed = 3;
        let x = rand_matrix(20, 5, &mut seed);
        let c = center(&x).unwrap();
        for j in 0..5 {
            let mean: f64 = (0..20).map(|i| c.at2(i, j)).sum::<f64>() / 20.0;
            assert!(mean.abs() < 1e-14);
        }
    }

    #[test]
    fn one_sample_per_class_means_zero_within_scatter() {
        let mut seed = 9;
        let x = rand_matrix(4, 3, &mut seed);
        let s = scatter(&x, &[0, 1, 2, 3]).unwrap();
        assert!(s.sigma_w.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.sigma_b.data(), s.sigma_a.data());
    }

    #[test]
    fn single_class_means_zero_between_scatter() {
        let mut seed = 10;
        let x = rand_matrix(6, 3, &mut seed);
        let s = scatter(&x, &[2, 2, 2, 2, 2, 2]).unwrap();
        assert!(s.sigma_b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scatter_matches_per_class_covariance_oracle() {
        let mut seed = 11;
        let n = 14;
        let x = rand_matrix(n, 2, &mut seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let s = scatter(&x, &labels).unwrap();

        // textbook: Σ_w = Σ_classes Σ_{x∈c} (x−μ_c)(x−μ_c)ᵀ
        let mut want = [0.0; 4];
        for class in 0..2 {
            let rows: Vec<usize> = (0..n).filter(|i| labels[*i] == class).collect();
            let mut mu = [0.0; 2];
            for &r in &rows {
                mu[0] += x.at2(r, 0);
                mu[1] += x.at2(r, 1);
            }
            mu[0] /= rows.len() as f64;
            mu[1] /= rows.len() as f64;
            for &r in &rows {
                let dx = [x.at2(r, 0) - mu[0], x.at2(r, 1) - mu[1]];
                for a in 0..2 {
                    for b in 0..2 {
                        want[a * 2 + b] += dx[a] * dx[b];
                    }
                }
            }
        }
        for (got, w) in s.sigma_w.data().iter().zip(&want) {
            assert!((got - w).abs() < 1e-12);
        }
    }

    #[test]
    fn scatter_identity_holds_bitwise_and_under_row_permutation() {
        let mut seed = 12;
        let n = 18;
        let x = rand_matrix(n, 4, &mut seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let s = scatter(&x, &labels).unwrap();
        // Σ_a − Σ_w − Σ_b must be exactly zero as constructed
        for i in 0..16 {
            assert_eq!(s.sigma_a.data()[i] - s.sigma_w.data()[i] - s.sigma_b.data()[i], 0.0);
        }

        // reversed row order: same matrices within 1e-12
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut xd = Vec::new();
        let mut lp = Vec::new();
        for &p in &perm {
            xd.extend_from_slice(&x.data()[p * 4..(p + 1) * 4]);
            lp.push(labels[p]);
        }
        let s2 = scatter(&Tensor::from_vec([n, 4], xd).unwrap(), &lp).unwrap();
        assert!(s.sigma_w.max_abs_diff(&s2.sigma_w) < 1e-12);
        assert!(s.sigma_a.max_abs_diff(&s2.sigma_a) < 1e-12);
        assert!(s.sigma_b.max_abs_diff(&s2.sigma_b) < 1e-12);
    }

    #[test]
    fn shrink_hand_cases() {
        let z = Tensor::zeros([3, 3]);
        let sz = shrink(&z, 1e-3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1e-3 } else { 0.0 };
                assert_eq!(sz.at2(i, j), want);
            }
        }
        let si = shrink(&Tensor::eye(2), 0.5).unwrap();
        assert_eq!(si.at2(0, 0), 1.5);
        assert_eq!(si.at2(1, 1), 1.5);
        assert_eq!(si.at2(0, 1), 0.0);
    }

    #[test]
    fn shrink_floors_smallest_eigenvalue() {
        let mut seed = 13;
        // random PSD with a zero eigenvalue (rank deficient: outer product)
        let v = rand_matrix(4, 1, &mut seed);
        let mut a = vec![0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                a[i * 4 + j] = v.data()[i] * v.data()[j];
            }
        }
        let a = Tensor::from_vec([4, 4], a).unwrap();
        let eps_rel = 1e-2;
        let shrunk = shrink(&a, eps_rel).unwrap();
        let tr: f64 = (0..4).map(|i| a.at2(i, i)).sum();
        let eps = eps_rel * tr / 4.0;
        let (w, _) = linalg::jacobi_eigh(shrunk.data(), 4);
        assert!(w.iter().all(|&x| x >= eps * (1.0 - 1e-12)));
    }

    #[test]
    fn generalized_eig_diagonal_cases() {
        let sw = Tensor::eye(2);
        let sb = Tensor::from_vec([2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let spec = generalized_eig(&sb, &sw).unwrap();
        assert!((spec.eigenvalues[0] - 3.0).abs() < 1e-12);
        assert!((spec.eigenvalues[1] - 1.0).abs() < 1e-12);
        // eigenvectors along the standard basis
        let e = &spec.eigenvectors;
        assert!((e.at2(0, 0).abs() - 1.0).abs() < 1e-12);
        assert!(e.at2(1, 0).abs() < 1e-12);

        let zero = Tensor::zeros([2, 2]);
        let spec0 = generalized_eig(&zero, &sw).unwrap();
        assert!(spec0.eigenvalues.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn generalized_eig_residual_small_on_random_pencils() {
        let mut seed = 77;
        for _ in 0..10 {
            let d = 8;
            let m1 = rand_matrix(d + 4, d, &mut seed);
            let m2 = rand_matrix(d + 4, d, &mut seed);
            let sw = shrink(&gram(&m1), 1e-3).unwrap();
            let sb = gram(&m2);
            let spec = generalized_eig(&sb, &sw).unwrap();
            for j in 0..d {
                let v = spec.eigenvalues[j];
                for i in 0..d {
                    let mut lhs = 0.0;
                    let mut rhs = 0.0;
                    for k in 0..d {
                        lhs += sb.at2(i, k) * spec.eigenvectors.at2(k, j);
                        rhs += sw.at2(i, k) * spec.eigenvectors.at2(k, j);
                    }
                    assert!(
                        (lhs - v * rhs).abs() < 1e-8,
                        "residual too large at pair {j}: {}",
                        (lhs - v * rhs).abs()
                    );
                }
            }
        }
    }

    #[test]
    fn d2_eigenvalues_match_characteristic_polynomial_roots() {
        let mut seed = 31;
        for _ in 0..20 {
            let m1 = rand_matrix(6, 2, &mut seed);
            let m2 = rand_matrix(6, 2, &mut seed);
            let sw = shrink(&gram(&m1), 1e-3).unwrap();
            let sb = gram(&m2);
            let spec = generalized_eig(&sb, &sw).unwrap();

            // det(Σb − vΣw) = 0 expanded as a·v² + b·v + c = 0
            let (w11, w12, w22) = (sw.at2(0, 0), sw.at2(0, 1), sw.at2(1, 1));
            let (b11, b12, b22) = (sb.at2(0, 0), sb.at2(0, 1), sb.at2(1, 1));
            let a = w11 * w22 - w12 * w12;
            let b = -(b11 * w22 + b22 * w11 - 2.0 * b12 * w12);
            let c = b11 * b22 - b12 * b12;
            let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
            let mut roots = [(-b + disc) / (2.0 * a), (-b - disc) / (2.0 * a)];
            roots.sort_by(|x, y| y.partial_cmp(x).unwrap());
            for (got, want) in spec.eigenvalues.iter().zip(&roots) {
                let scale = want.abs().max(1.0);
                assert!((got - want).abs() / scale < 1e-9, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn neuron_power_diagonal_and_trace_identity() {
        let sw = Tensor::from_vec([2, 2], vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        let sb = Tensor::from_vec([2, 2], vec![6.0, 0.0, 0.0, 1.0]).unwrap();
        let p = neuron_power(&sb, &sw).unwrap();
        assert!((p[0] - 3.0).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);

        let zero = Tensor::zeros([2, 2]);
        let pz = neuron_power(&zero, &sw).unwrap();
        assert!(pz.iter().all(|&v| v == 0.0));

        // Σ neuron_power = Σ eigenvalues (trace identity), random pencil
        let mut seed = 5;
        let m1 = rand_matrix(10, 6, &mut seed);
        let m2 = rand_matrix(10, 6, &mut seed);
        let sw = shrink(&gram(&m1), 1e-3).unwrap();
        let sb = gram(&m2);
        let spec = generalized_eig(&sb, &sw).unwrap();
        let powers = neuron_power(&sb, &sw).unwrap();
        let sum_p: f64 = powers.iter().sum();
        let sum_v: f64 = spec.eigenvalues.iter().sum();
        assert!((sum_p - sum_v).abs() / sum_v.abs().max(1e-12) < 1e-8);
    }

    #[test]
    fn rank_bound_k_minus_one() {
        // 3 classes in 6 dimensions: Σ_b has rank ≤ 2
        let mut seed = 21;
        let n_per = 20;
        let d = 6;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let means = [[2.0, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0, 3.0, 0.0, 0.0, 0.0, 0.0], [
            0.0, 0.0, 1.5, 0.0, 0.0, 0.0,
        ]];
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..n_per {
                for j in 0..d {
                    data.push(mean[j] + 0.1 * lcg(&mut seed));
                }
                labels.push(c);
            }
        }
        let x = Tensor::from_vec([3 * n_per, d], data).unwrap();
        let s = scatter(&x, &labels).unwrap();
        let sw = shrink(&s.sigma_w, 1e-3).unwrap();
        let spec = generalized_eig(&s.sigma_b, &sw).unwrap();
        let vmax = spec.eigenvalues[0];
        for &v in &spec.eigenvalues[2..] {
            assert!(v.abs() <= 1e-8 * vmax, "eigenvalue {v} beyond k−1 not negligible");
        }
    }

    #[test]
    fn eigenvalues_rotation_invariant_but_neuron_powers_are_not() {
        // crafted: two well-separated classes along axis 0
        let mut seed = 8;
        let n_per = 30;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for _ in 0..n_per {
                data.push(c as f64 * 4.0 + 0.2 * lcg(&mut seed));
                data.push(0.3 * lcg(&mut seed));
                labels.push(c);
            }
        }
        let x = Tensor::from_vec([2 * n_per, 2], data).unwrap();

        let rotate = |x: &Tensor, theta: f64| {
            let (c, s) = (theta.cos(), theta.sin());
            let mut out = Vec::with_capacity(x.numel());
            for i in 0..x.rows() {
                let (a, b) = (x.at2(i, 0), x.at2(i, 1));
                out.push(c * a - s * b);
                out.push(s * a + c * b);
            }
            Tensor::from_vec([x.rows(), 2], out).unwrap()
        };

        let eval = |x: &Tensor| {
            let s = scatter(x, &labels).unwrap();
            let sw = shrink(&s.sigma_w, 1e-3).unwrap();
            let spec = generalized_eig(&s.sigma_b, &sw).unwrap();
            let powers = neuron_power(&s.sigma_b, &sw).unwrap();
            (spec.eigenvalues, powers)
        };

        let (v0, p0) = eval(&x);
        let (v1, p1) = eval(&rotate(&x, std::f64::consts::FRAC_PI_4));
        // eigenvalues agree within 1e-8 relative to the spectrum scale
        let vmax = v0[0].abs().max(1e-12);
        for (a, b) in v0.iter().zip(&v1) {
            assert!((a - b).abs() / vmax < 1e-8, "{a} vs {b}");
        }
        // neuron powers move: axis-aligned case concentrates power on dim 0,
        // the rotated case splits it
        let concentration0 = p0[0] / (p0[0] + p0[1]);
        let concentration1 = p1[0] / (p1[0] + p1[1]);
        assert!(concentration0 > 0.95);
        assert!(concentration1 < 0.8);
    }

    #[test]
    fn csv_dumps_have_headers() {
        let dir = std::env::temp_dir().join("pushprune_stats_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let m = Tensor::eye(2);
        let mp = dir.join("m.csv");
        write_matrix_csv(&mp, &m).unwrap();
        let text = std::fs::read_to_string(&mp).unwrap();
        assert!(text.starts_with("dim0,dim1\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
