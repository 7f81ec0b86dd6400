use ibloss::data::{make_gaussian_mixture, GaussianMixtureSpec};
use ibloss::eval::{evaluate, influence_report};
use ibloss::losses::lambda_weights;
use ibloss::model::MlpParams;
use proptest::prelude::*;

fn sizes() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..6, 2..5)
}

proptest! {
    #[test]
    fn checkpoint_round_trips_bit_exactly(sizes in sizes(), seed in any::<u64>()) {
        let model = MlpParams::init(&sizes, seed).unwrap();
        let back = MlpParams::from_bytes(&model.to_bytes()).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(back.to_bytes(), model.to_bytes());
    }

    #[test]
    fn truncated_checkpoint_is_rejected(sizes in sizes(), seed in any::<u64>(), cut in 1usize..16) {
        let bytes = MlpParams::init(&sizes, seed).unwrap().to_bytes();
        prop_assert!(MlpParams::from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn lambda_sums_to_alpha_and_is_antitone(counts in prop::collection::vec(1usize..10_000, 2..12), alpha in 0.1f64..20.0) {
        let w = lambda_weights(&counts, alpha).unwrap();
        let total: f64 = w.lambda.iter().sum();
        prop_assert!((total - alpha).abs() <= 1e-12 * alpha.max(1.0));
        for i in 0..counts.len() {
            for j in 0..counts.len() {
                if counts[i] < counts[j] {
                    prop_assert!(w.lambda[i] > w.lambda[j]);
                }
            }
        }
    }

    #[test]
    fn confusion_rows_match_class_totals(seed in 0u64..1000) {
        let ds = make_gaussian_mixture(&GaussianMixtureSpec {
            means: vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]],
            scale: 0.8,
            n_per_class: 7,
            seed,
        }).unwrap();
        let model = MlpParams::init(&[2, 4, 3], seed).unwrap();
        let m = evaluate(&model, &ds, 2).unwrap();
        let mut trace = 0.0;
        for k in 0..3 {
            let row: f64 = m.confusion.row(k).iter().sum();
            prop_assert_eq!(row as usize, m.class_totals[k]);
            trace += m.confusion.get(k, k);
        }
        prop_assert_eq!(trace / ds.len() as f64, m.overall_accuracy);
    }

    #[test]
    fn influence_report_ignores_sample_order(seed in 0u64..1000) {
        let ds = make_gaussian_mixture(&GaussianMixtureSpec {
            means: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            scale: 0.5,
            n_per_class: 6,
            seed,
        }).unwrap();
        let model = MlpParams::init(&[2, 5, 2], seed).unwrap();
        let order: Vec<usize> = (0..ds.len()).rev().collect();
        let rev = ds.subset(&order, "rev").unwrap();
        let a = influence_report(&model, &ds, 3).unwrap();
        let b = influence_report(&model, &rev, 3).unwrap();
        for (i, &j) in order.iter().enumerate() {
            prop_assert_eq!(a.normalized[j], b.normalized[i]);
        }
        for (ca, cb) in a.classes.iter().zip(&b.classes) {
            prop_assert!((ca.mean_raw - cb.mean_raw).abs() <= 1e-12 * ca.mean_raw.max(1.0));
            // Tied factors may swap indices; the selected values may not.
            let va: Vec<f64> = ca.top.iter().map(|&i| a.raw[i]).collect();
            let vb: Vec<f64> = cb.top.iter().map(|&i| b.raw[i]).collect();
            prop_assert_eq!(va, vb);
        }
    }
}
