use proptest::prelude::*;
use rand::Rng;
use spc_core::data::{encode_idx_images, encode_idx_labels, parse_idx_images, parse_idx_labels, preprocess_mnist, IdxImages, RawImages};
use spc_core::linalg::Matrix;
use spc_core::masks::*;
use spc_core::measurement::{FullRankInverse, MeasurementModel};
use spc_core::noise::{poisson, standard_normal, NoiseModel, RngStream};
use spc_core::theory::{predict, TheoryBasis};

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn flux_is_preserved(
        (m, x) in (1usize..12, 1usize..12).prop_flat_map(|(r, c)| (matrix(r, c, -1.0, 1.0), prop::collection::vec(0.0..=1.0f64, c))),
        total in 1.0..1e8f64,
        scale in 0.1..10.0f64,
        rail in prop_oneof![Just(RailMode::DualOneSensor), Just(RailMode::DualTwoSensors)],
        nonneg in any::<bool>(),
    ) {
        let m = if nonneg { m.map(f64::abs) } else { m };
        let Ok(set) = MaskSet::from_matrix(m, MaskFamily::Learned) else { return Ok(()) };
        let set = set.with_exposure_scale(scale).unwrap();
        let lambda = photon_distribution_factor(&set, &PhotonBudget::from_total(total).unwrap(), rail).unwrap();
        // both rails draw photons, so count |M| x
        let flux: f64 = set.matrix().map(f64::abs).matvec(&x).iter().sum::<f64>() * lambda;
        prop_assert!(flux <= total * scale * (1.0 + 1e-12), "{flux} > {}", total * scale);
    }

    #[test]
    fn dual_rail_recombines_exactly((r, c) in (1usize..10, 1usize..10), seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 0).rng();
        let m = Matrix::from_fn(r, c, |_, _| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if rng.gen_bool(0.2) { 0.0 } else { v * 10f64.powi(rng.gen_range(-6..6)) }
        });
        let pair = dual_rail_split(&m);
        prop_assert!(pair.positive.as_slice().iter().chain(pair.negative.as_slice()).all(|v| *v >= 0.0));
        let back = pair.recombine();
        prop_assert!(back.as_slice().iter().zip(m.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits() || (*a == 0.0 && *b == 0.0)));
    }

    #[test]
    fn idx_round_trip(rows in 1usize..6, cols in 1usize..6, count in 0usize..5, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 0).rng();
        let images = IdxImages { rows, cols, pixels: (0..rows * cols * count).map(|_| rng.gen()).collect() };
        let labels: Vec<u8> = (0..count).map(|_| rng.gen_range(0..10)).collect();
        prop_assert_eq!(parse_idx_images(&encode_idx_images(&images), "p").unwrap(), images);
        prop_assert_eq!(parse_idx_labels(&encode_idx_labels(&labels), "l").unwrap(), labels);
    }

    #[test]
    fn mnist_preprocessing_range(count in 1usize..4, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 0).rng();
        let images = IdxImages { rows: 28, cols: 28, pixels: (0..28 * 28 * count).map(|_| rng.gen()).collect() };
        let raw = RawImages::<f64>::from_idx(&images, vec![3; count]).unwrap();
        let ds = preprocess_mnist(&raw).unwrap();
        prop_assert_eq!(ds.num_pixels(), 1024);
        prop_assert!(ds.samples().as_slice().iter().all(|v| (0.3..=1.0).contains(v)));
    }

    #[test]
    fn predictors_scale_homogeneously(
        x in prop::collection::vec(0.01..1.0f64, 16),
        sigma in 0.1..10.0f64,
        total in 1.0..1e9f64,
        a in 0.5..20.0f64,
    ) {
        let close = |p: f64, q: f64| (p / q - 1.0).abs() < 1e-10;
        for basis in [TheoryBasis::Raster, TheoryBasis::Hadamard] {
            let g = |s: f64, t: f64| predict(basis, NoiseModel::Gaussian { sigma: s }, &x, t).unwrap().mean_variance();
            let p = |t: f64| predict(basis, NoiseModel::Poisson, &x, t).unwrap().mean_variance();
            prop_assert!(close(g(a * sigma, total), a * a * g(sigma, total)));
            prop_assert!(close(g(sigma, a * total), g(sigma, total) / (a * a)));
            prop_assert!(close(p(a * total), p(total) / a));
        }
    }

    #[test]
    fn samplers_replay_under_a_fixed_stream(seed in any::<u64>(), stream in any::<u64>(), rate in 0.0..500.0f64) {
        let draw = || {
            let mut rng = RngStream::new(seed, stream).rng();
            (0..20).map(|_| (poisson(rate, &mut rng), standard_normal(&mut rng).to_bits())).collect::<Vec<_>>()
        };
        prop_assert_eq!(draw(), draw());
    }
}

/// Principal axes by power iteration with deflation, independent of the
/// library's eigensolver.
fn power_oracle(cov: &[Vec<f64>], k: usize) -> Vec<(f64, Vec<f64>)> {
    let n = cov.len();
    let mut a: Vec<Vec<f64>> = cov.to_vec();
    let mut out = Vec::new();
    for c in 0..k {
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7 + c * 3) % 5) as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..20_000 {
            let w: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i][j] * v[j]).sum()).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
            let delta: f64 = next.iter().zip(&v).map(|(p, q)| (p - q).abs()).sum();
            v = next;
            lambda = norm;
            if delta < 1e-15 {
                break;
            }
        }
        for i in 0..n {
            for j in 0..n {
                a[i][j] -= lambda * v[i] * v[j];
            }
        }
        out.push((lambda, v));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pca_matches_power_iteration(seed in any::<u64>()) {
        let (n, samples) = (10, 80);
        let mut rng = RngStream::new(seed, 0).rng();
        // axis scales with clear gaps so power iteration converges
        let scale: Vec<f64> = (0..n).map(|j| 0.6f64.powi(j as i32)).collect();
        let rot = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0f64));
        let z = Matrix::from_fn(samples, n, |_, j| standard_normal(&mut rng) * scale[j]);
        let data = z.matmul(&rot);
        let pca = pca_masks(&data, 5).unwrap();

        let (mean, cov) = covariance(&data);
        prop_assert_eq!(mean.len(), n);
        let cov: Vec<Vec<f64>> = cov.row_iter().map(|r| r.to_vec()).collect();
        let oracle = power_oracle(&cov, 5);
        for (k, (lambda, v)) in oracle.iter().enumerate() {
            prop_assert!((pca.eigenvalues[k] / lambda - 1.0).abs() < 1e-6, "{k}: {} vs {lambda}", pca.eigenvalues[k]);
            let dot: f64 = pca.components.row(k).iter().zip(v).map(|(a, b)| a * b).sum();
            prop_assert!(dot.abs() > 1.0 - 1e-6, "{k}: |dot| = {}", dot.abs());
        }
        let g = pca.components.matmul_t(&pca.components);
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((g[(i, j)] - want).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn hadamard_is_orthogonal_up_to_1024() {
    let mut n = 1;
    while n <= 1024 {
        let s = hadamard_signs(n).unwrap();
        for i in 0..n {
            for k in i..n {
                let dot: i64 = (0..n).map(|j| (s[i * n + j] as i64) * (s[k * n + j] as i64)).sum();
                assert_eq!(dot, if i == k { n as i64 } else { 0 }, "N={n} rows {i},{k}");
            }
        }
        let h = hadamard::<f64>(n).unwrap();
        let changes: Vec<usize> = h.matrix().row_iter().map(sign_changes).collect();
        assert_eq!(changes, (0..n).collect::<Vec<_>>(), "N={n}");
        n *= 2;
    }
}

const TRIALS: usize = 10_000;

/// Per-trial reconstructions, `TRIALS × N`.
fn reconstructions(set: &MaskSet<f64>, x: &[f64], noise: NoiseModel, total: f64, seed: u64) -> Vec<Vec<f64>> {
    let model = MeasurementModel::new(set, &PhotonBudget::from_total(total).unwrap(), noise, RailMode::DualOneSensor).unwrap();
    let inv = FullRankInverse::new(set).unwrap();
    let mut rng = RngStream::new(seed, 0).rng();
    (0..TRIALS).map(|_| inv.apply(&model.measure(x, &mut rng).unwrap().y_tilde)).collect()
}

fn moments(r: &[Vec<f64>]) -> (Vec<f64>, Matrix<f64>) {
    let (t, n) = (r.len() as f64, r[0].len());
    let mean: Vec<f64> = (0..n).map(|j| r.iter().map(|v| v[j]).sum::<f64>() / t).collect();
    let cov = Matrix::from_fn(n, n, |i, j| r.iter().map(|v| (v[i] - mean[i]) * (v[j] - mean[j])).sum::<f64>() / (t - 1.0));
    (mean, cov)
}

fn scene(n: usize) -> Vec<f64> {
    let mut rng = RngStream::new(42, 0).rng();
    (0..n).map(|_| rng.gen_range(0.05..1.0)).collect()
}

fn families(n: usize) -> Vec<MaskSet<f64>> {
    vec![
        raster(n).unwrap(),
        impulse(n).unwrap(),
        hadamard(n).unwrap(),
        truncated_hadamard(n, n).unwrap(),
        binary_random(n, n, 3, 0.5).unwrap(),
    ]
}

#[test]
fn reconstructions_are_unbiased() {
    let n = 16;
    let x = scene(n);
    for (f, set) in families(n).iter().enumerate() {
        for (s, noise) in [NoiseModel::Gaussian { sigma: 1.0 }, NoiseModel::Poisson].into_iter().enumerate() {
            let r = reconstructions(set, &x, noise, 1e4, 100 + (2 * f + s) as u64);
            let (mean, cov) = moments(&r);
            for j in 0..n {
                let se = (cov[(j, j)] / TRIALS as f64).sqrt();
                assert!((mean[j] - x[j]).abs() < 3.0 * se, "{:?} {noise:?} pixel {j}: {} vs {} (se {se})", set.family(), mean[j], x[j]);
            }
        }
    }
}

#[test]
fn raster_covariances_match_closed_forms() {
    let n = 16;
    let nf = n as f64;
    let x = scene(n);
    let total = 1e4;
    let floor = |v: f64| 5.0 * v / (TRIALS as f64).sqrt();

    let (_, cov) = moments(&reconstructions(&raster(n).unwrap(), &x, NoiseModel::Gaussian { sigma: 1.0 }, total, 7));
    let want = nf.powi(4) / (total * total);
    for i in 0..n {
        assert!((cov[(i, i)] / want - 1.0).abs() < 0.05, "gaussian diag {i}: {}", cov[(i, i)]);
        for j in 0..i {
            assert!(cov[(i, j)].abs() < floor(want), "gaussian offdiag {i},{j}: {}", cov[(i, j)]);
        }
    }

    let (_, cov) = moments(&reconstructions(&raster(n).unwrap(), &x, NoiseModel::Poisson, total, 8));
    for i in 0..n {
        let want = nf * nf / total * x[i];
        assert!((cov[(i, i)] / want - 1.0).abs() < 0.05, "poisson diag {i}: {} vs {want}", cov[(i, i)]);
        for j in 0..i {
            let bound = floor((nf * nf / total) * (x[i] * x[j]).sqrt());
            assert!(cov[(i, j)].abs() < bound, "poisson offdiag {i},{j}: {}", cov[(i, j)]);
        }
    }
}

#[test]
fn hadamard_poisson_variance_is_flat() {
    let n = 16;
    let nf = n as f64;
    let x = scene(n);
    let total = 1e4;
    let want = 2.0 * nf * x.iter().sum::<f64>() / total;
    let (_, cov) = moments(&reconstructions(&hadamard(n).unwrap(), &x, NoiseModel::Poisson, total, 9));
    for i in 0..n {
        assert!((cov[(i, i)] / want - 1.0).abs() < 0.05, "pixel {i}: {} vs {want}", cov[(i, i)]);
    }
}

#[test]
fn mse_falls_with_budget() {
    let n = 16;
    let x = scene(n);
    for set in families(n) {
        for noise in [NoiseModel::Gaussian { sigma: 1.0 }, NoiseModel::Poisson] {
            let mse = |total: f64| {
                let r = reconstructions(&set, &x, noise, total, 11);
                r.iter().map(|v| v.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64).sum::<f64>() / TRIALS as f64
            };
            let (lo, hi) = (mse(1e3), mse(1e4));
            assert!(hi < lo, "{:?} {noise:?}: {hi} !< {lo}", set.family());
        }
    }
}
