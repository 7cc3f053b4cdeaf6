use proptest::prelude::*;
use sfb_core::adaptation::{
    bias_correct_binary, bias_correct_multiclass, estimate_binary_accuracies, PseudoLabelStats,
};
use sfb_core::linalg::Matrix;
use sfb_core::prob::{
    combine_binary, combine_multiclass, logit, project_to_simplex, sigmoid, Probability, SimplexVector,
};

fn prob() -> impl Strategy<Value = f64> {
    0.001f64..0.999
}

fn simplex(k: usize) -> impl Strategy<Value = SimplexVector> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(|v| SimplexVector::normalize(v).unwrap())
}

proptest! {
    #[test]
    fn logit_sigmoid_round_trip(p in prob()) {
        let back = sigmoid(logit(Probability::new(p).unwrap())).value();
        prop_assert!((back - p).abs() < 1e-12);
    }

    #[test]
    fn binary_fusion_matches_two_class_fusion(s in prob(), u in prob(), pi in prob()) {
        let b = combine_binary(Probability::new(s).unwrap(), Probability::new(u).unwrap(), Probability::new(pi).unwrap()).unwrap();
        let two = |p: f64| SimplexVector::new(vec![1.0 - p, p]).unwrap();
        let m = combine_multiclass(&two(s), &two(u), &two(pi)).unwrap();
        prop_assert!((b.value() - m.as_slice()[1]).abs() < 1e-9);
    }

    #[test]
    fn fusion_is_symmetric_and_prior_neutral(s in simplex(4), u in simplex(4), pi in simplex(4)) {
        let a = combine_multiclass(&s, &u, &pi).unwrap();
        let b = combine_multiclass(&u, &s, &pi).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        // an unstable prediction equal to the prior carries no information
        let c = combine_multiclass(&s, &pi, &pi).unwrap();
        for (x, y) in c.as_slice().iter().zip(s.as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_lands_on_simplex(v in prop::collection::vec(-5.0f64..5.0, 2..7)) {
        let p = project_to_simplex(&v).unwrap();
        prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.as_slice().iter().all(|x| *x >= 0.0));
        let again = project_to_simplex(p.as_slice()).unwrap();
        for (x, y) in again.as_slice().iter().zip(p.as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn estimated_accuracies_are_probabilities(ps in prop::collection::vec(prob(), 2..50)) {
        if let Ok(PseudoLabelStats::Binary { eps0, eps1 }) =
            estimate_binary_accuracies(&ps.iter().map(|p| Probability::new(*p).unwrap()).collect::<Vec<_>>())
        {
            prop_assert!((0.0..=1.0).contains(&eps0));
            prop_assert!((0.0..=1.0).contains(&eps1));
        }
    }

    #[test]
    fn binary_correction_inverts_channel(p in 0.0f64..1.0, eps0 in 0.6f64..1.0, eps1 in 0.6f64..1.0) {
        let noisy = eps1 * p + (1.0 - eps0) * (1.0 - p);
        let stats = PseudoLabelStats::Binary { eps0, eps1 };
        let back = bias_correct_binary(Probability::new(noisy).unwrap(), &stats).unwrap().value();
        prop_assert!((back - p).abs() < 1e-9);
    }

    #[test]
    fn multiclass_correction_inverts_channel(
        p in simplex(3),
        off in prop::collection::vec(0.0f64..0.15, 9),
    ) {
        // column-stochastic with a dominant diagonal
        let mut c = Matrix::zeros(3, 3);
        for j in 0..3 {
            let mut col_sum = 0.0;
            for i in 0..3 {
                if i != j {
                    c[(i, j)] = off[3 * i + j];
                    col_sum += off[3 * i + j];
                }
            }
            c[(j, j)] = 1.0 - col_sum;
        }
        let noisy = SimplexVector::new(c.mat_vec(p.as_slice())).unwrap();
        let back = bias_correct_multiclass(&noisy, &PseudoLabelStats::Multiclass { confusion: c }).unwrap();
        for (x, y) in back.as_slice().iter().zip(p.as_slice()) {
            prop_assert!((x - y).abs() < 1e-4, "{:?} vs {:?}", back, p);
        }
    }
}
