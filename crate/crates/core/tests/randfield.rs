use proptest::prelude::*;
use vflow_core::difftensor::Array;
use vflow_core::randfield::{build_basis, make_reference, read_field, write_field, GrfSpec, KlBasis};
use vflow_core::rng;

fn gram_error(b: &KlBasis) -> f64 {
    let w = b.quadrature_weights();
    let p = b.n_points();
    let f = b.functions.data();
    let mut worst: f64 = 0.0;
    for i in 0..b.dim() {
        for j in 0..b.dim() {
            let ip: f64 = (0..p).map(|x| w[x] * f[i * p + x] * f[j * p + x]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((ip - target).abs());
        }
    }
    worst
}

#[test]
fn eigenfunctions_are_orthonormal_on_solver_grids() {
    for spec in [GrfSpec::darcy1d(64), GrfSpec::darcy2d(64), GrfSpec::ns2d(64)] {
        let b = build_basis(&spec).unwrap();
        let err = gram_error(&b);
        assert!(err < 1e-6, "{:?}: gram error {err:e}", spec.geometry);
    }
}

#[test]
fn eigenvalues_non_increasing_and_strict_except_ties() {
    for spec in [GrfSpec::darcy1d(64), GrfSpec::darcy2d(64), GrfSpec::ns2d(64)] {
        let b = build_basis(&spec).unwrap();
        for w in b.eigenvalues.windows(2) {
            assert!(w[0] >= w[1]);
        }
        for (i, w) in b.modes.windows(2).enumerate() {
            let same = w[0].k[0].pow(2) + w[0].k[1].pow(2) == w[1].k[0].pow(2) + w[1].k[1].pow(2);
            if !same {
                assert!(b.eigenvalues[i] > b.eigenvalues[i + 1]);
            }
        }
    }
}

#[test]
fn first_mode_value_at_origin() {
    let b = build_basis(&GrfSpec::darcy1d(8)).unwrap();
    let mut xi = vec![0.0; 8];
    xi[0] = 1.0;
    let m = b.synthesize(&xi).unwrap();
    let expect = (4.0 * (std::f64::consts::PI.powi(2) + 1.0).powi(-2)).sqrt() * 2f64.sqrt();
    assert!((m.data()[0] - expect).abs() < 1e-12);
    assert!((m.data()[0] - 0.2602).abs() < 1e-4);
}

#[test]
fn zero_coefficients_give_mean() {
    let b = build_basis(&GrfSpec::darcy2d(16)).unwrap();
    let m = b.synthesize(&[0.0; 16]).unwrap();
    assert!(m.data().iter().all(|&v| v == 0.0));
    let mean = Array::full(&[71, 71], 0.5);
    let b = b.with_mean(mean.clone()).unwrap();
    assert_eq!(b.synthesize(&[0.0; 16]).unwrap(), mean);
    assert!(b.synthesize(&[0.0; 15]).is_err());
}

#[test]
fn monte_carlo_variance_matches_kernel_diagonal() {
    let spec = GrfSpec::darcy1d(16).with_grid(128);
    let b = build_basis(&spec).unwrap();
    let n = 20_000;
    let mut r = rng::seeded(5);
    let xi = rng::normal_vec(&mut r, n * 16);
    let fields = b.synthesize_batch(&xi, n).unwrap();
    let target = b.pointwise_variance();
    let p = b.n_points();
    for x in 0..p {
        let mut s = 0.0;
        let mut s2 = 0.0;
        for i in 0..n {
            let v = fields.data()[i * p + x];
            s += v;
            s2 += v * v;
        }
        let var = s2 / n as f64 - (s / n as f64).powi(2);
        assert!((var - target[x]).abs() / target[x] < 0.05, "point {x}: {var} vs {}", target[x]);
    }
}

#[test]
fn reference_is_deterministic_and_bounded() {
    for spec in [GrfSpec::darcy1d(256), GrfSpec::ns2d(256)] {
        let b = build_basis(&spec).unwrap();
        let (f1, xi1) = make_reference(&b, 11).unwrap();
        let (f2, xi2) = make_reference(&b, 11).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(xi1, xi2);
        assert!(xi1.iter().all(|v| (-10.0..=10.0).contains(v)));
        let (_, xi3) = make_reference(&b, 12).unwrap();
        assert_ne!(xi1, xi3);
        assert!(b.synthesize(&vec![0.0; 256]).unwrap().data().iter().all(|&v| v == 0.0));
    }
    let small = build_basis(&GrfSpec::darcy1d(32)).unwrap();
    assert!(make_reference(&small, 0).is_err());
}

#[test]
fn grid_file_round_trip() {
    let b = build_basis(&GrfSpec::darcy2d(8)).unwrap();
    let f = b.synthesize(&[1.0, -2.0, 0.5, 0.0, 3.0, 1.0, 1.0, 1.0]).unwrap();
    let mut buf = Vec::new();
    write_field(&mut buf, &f).unwrap();
    assert_eq!(&buf[..7], b"VFGRID1");
    assert_eq!(u32::from_le_bytes(buf[7..11].try_into().unwrap()), 2);
    assert_eq!(u64::from_le_bytes(buf[11..19].try_into().unwrap()), 71);
    assert_eq!(buf.len(), 7 + 4 + 16 + 71 * 71 * 8);
    assert_eq!(read_field(buf.as_slice()).unwrap(), f);
    assert!(read_field(&buf[..buf.len() - 3]).is_err());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_field(bad.as_slice()).is_err());
}

#[test]
fn eval_at_matches_grid_table() {
    let b = build_basis(&GrfSpec::ns2d(6)).unwrap();
    let pts = vec![vec![3.0 / 128.0, 5.0 / 128.0]];
    let direct = b.eval_at(&pts);
    let p = b.n_points();
    for j in 0..6 {
        assert!((direct.data()[j] - b.functions.data()[j * p + 3 * 128 + 5]).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn synthesis_is_linear(a in -5.0f64..5.0, c in -5.0f64..5.0, seed in 0u64..1000) {
        let b = build_basis(&GrfSpec::darcy1d(12).with_grid(200)).unwrap();
        let mut r = rng::seeded(seed);
        let xi = rng::normal_vec(&mut r, 12);
        let eta = rng::normal_vec(&mut r, 12);
        let comb: Vec<f64> = xi.iter().zip(&eta).map(|(x, e)| a * x + c * e).collect();
        let lhs = b.synthesize(&comb).unwrap();
        let fx = b.synthesize(&xi).unwrap();
        let fe = b.synthesize(&eta).unwrap();
        for i in 0..200 {
            let rhs = a * fx.data()[i] + c * fe.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() < 1e-12 * (1.0 + rhs.abs()));
        }
    }
}
