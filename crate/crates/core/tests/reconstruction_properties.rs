use mftg_core::prob::{FinitePmf, ProductShape};
use mftg_core::reconstruction::{admissible, project_admissible, reconstruct_xi, verify_xi, TeamStateActionLaw};
use proptest::prelude::*;

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, k).prop_map(|w| {
        let total: f64 = w.iter().sum();
        if total == 0.0 {
            vec![1.0 / w.len() as f64; w.len()]
        } else {
            w.into_iter().map(|x| x / total).collect()
        }
    })
}

/// `(μ over 2 × 3, kernels of two teams with 2 and 3 actions)`.
fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (
        simplex(6),
        prop::collection::vec(simplex(2), 6),
        prop::collection::vec(simplex(3), 6),
    )
}

proptest! {
    #[test]
    fn reconstruction_has_both_properties((mu, k0, k1) in instance()) {
        let mu = FinitePmf::normalized(ProductShape::new(vec![2, 3]).unwrap(), mu).unwrap();
        let a_hats = vec![
            TeamStateActionLaw::from_kernel(&mu, &k0).unwrap(),
            TeamStateActionLaw::from_kernel(&mu, &k1).unwrap(),
        ];
        let rec = reconstruct_xi(&mu, &a_hats).unwrap();
        let report = verify_xi(&rec.joint, &mu, &a_hats).unwrap();
        prop_assert!(report.certifies(1e-12));
        prop_assert!(rec.joint.state_marginal().max_abs_diff(&mu) < 1e-12);
        for (i, a) in a_hats.iter().enumerate() {
            let back = rec.joint.team_marginal(i);
            prop_assert!(back.law().max_abs_diff(a.law()) < 1e-12);
        }
    }

    #[test]
    fn projection_is_admissible((mu, k0, _) in instance(), other in simplex(6)) {
        let shape = ProductShape::new(vec![2, 3]).unwrap();
        let mu = FinitePmf::normalized(shape.clone(), mu).unwrap();
        let nu = FinitePmf::normalized(shape, other).unwrap();
        let off = TeamStateActionLaw::from_kernel(&nu, &k0).unwrap();
        let fixed = project_admissible(&mu, &off).unwrap();
        prop_assert!(admissible(&mu, &fixed).unwrap().residual <= 1e-12);
    }
}

#[test]
fn mismatched_marginal_is_projected() {
    let shape = ProductShape::flat(2);
    let mu = FinitePmf::new(shape.clone(), vec![0.5, 0.5]).unwrap();
    let nu = FinitePmf::new(shape, vec![0.9, 0.1]).unwrap();
    let a = TeamStateActionLaw::vertex(&nu, 2, 0);
    assert!(!admissible(&mu, &a).unwrap().admissible);
    let rec = reconstruct_xi(&mu, &[a]).unwrap();
    assert_eq!(rec.projected, vec![0]);
    assert!(rec.joint.state_marginal().max_abs_diff(&mu) < 1e-15);
}
