use mftg_core::prob::{self, FinitePmf, PerturbationVector, ProductShape, ZeroRule};
use proptest::prelude::*;

fn pmf(max_len: usize) -> impl Strategy<Value = FinitePmf> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..1.0], 2..=max_len)
        .prop_filter("some mass", |w| w.iter().any(|x| *x > 0.0))
        .prop_map(|w| FinitePmf::normalized(ProductShape::flat(w.len()), w).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn perturbation_keeps_support(mu in pmf(9), z in prop::collection::vec(1e-6f64..20.0, 9)) {
        let z = PerturbationVector::new(z[..mu.len()].to_vec()).unwrap();
        let out = prob::perturb(&mu, &z, ZeroRule::Normalizer).unwrap();
        prop_assert!((out.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for k in 0..mu.len() {
            prop_assert_eq!(out.weight(k) > 0.0, mu.weight(k) > 0.0);
        }
    }

    #[test]
    fn quadrature_mean_is_equivariant(mu in pmf(7), shift in 0usize..7) {
        let n = mu.len();
        let rotated: Vec<f64> = (0..n).map(|k| mu.weight((k + shift) % n)).collect();
        let rotated = FinitePmf::from_weights(rotated).unwrap();
        let a = prob::perturbed_mean_quadrature(&mu).unwrap();
        let b = prob::perturbed_mean_quadrature(&rotated).unwrap();
        prop_assert!((a.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for k in 0..n {
            prop_assert!((b.weight(k) - a.weight((k + shift) % n)).abs() < 1e-9);
        }
    }

    #[test]
    fn inverse_cdf_lands_in_support(mu in pmf(9), u in 0.0f64..1.0) {
        let k = prob::inverse_cdf_sample(&mu, u).unwrap();
        prop_assert!(mu.weight(k) > 0.0);
    }

    #[test]
    fn disintegration_round_trips(a in pmf(4), b in pmf(3), c in pmf(3)) {
        let joint = prob::product(&[a.clone(), b, c]).unwrap();
        let (base, kernel) = prob::disintegrate(&joint, 1).unwrap();
        prop_assert!(base.max_abs_diff(&a) < 1e-12);
        let back = prob::mix(&base, &kernel).unwrap();
        prop_assert!(back.max_abs_diff(&joint.clone().reshaped(back.shape().clone()).unwrap()) < 1e-12);
        let m = prob::marginal(&joint, &[0]).unwrap();
        prop_assert!(m.max_abs_diff(&a) < 1e-12);
    }
}

#[test]
fn dirac_is_fixed_by_perturbation() {
    let mu = FinitePmf::dirac(ProductShape::flat(4), 2);
    assert_eq!(prob::perturbed_mean_quadrature(&mu).unwrap(), mu);
    let z = PerturbationVector::new(vec![0.3, 2.0, 7.0, 0.1]).unwrap();
    assert_eq!(prob::perturb(&mu, &z, ZeroRule::Normalizer).unwrap(), mu);
}
