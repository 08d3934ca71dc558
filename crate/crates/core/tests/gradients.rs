use fedsilo_core::model::{Loss, ModelSpec};
use fedsilo_core::{gradient_check, LocalDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const INSTANCES: u64 = 20;

fn random_spec(kind: &str, rng: &mut ChaCha8Rng) -> ModelSpec {
    let classes = rng.random_range(2..=5);
    let spec = match kind {
        "logistic" => ModelSpec::logistic(rng.random_range(2..=8), classes),
        "mlp" => {
            let depth = rng.random_range(1..=2);
            let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=6)).collect();
            ModelSpec::mlp(rng.random_range(2..=6), &hidden, classes)
        }
        _ => {
            let side = rng.random_range(10..=12);
            ModelSpec::cnn2(
                [rng.random_range(1..=2), side, side],
                [rng.random_range(2..=3), rng.random_range(2..=4)],
                3,
                rng.random_range(4..=8),
                classes,
            )
        }
    };
    spec.with_seed(rng.random())
}

fn check_kind(kind: &str) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for instance in 0..INSTANCES {
        let spec = random_spec(kind, &mut rng);
        let network = spec.network().unwrap();
        let mut params = spec.init::<f64>().unwrap().into_values();
        // non-zero biases keep ReLUs away from their kink at init
        params.iter_mut().for_each(|p| *p += rng.random_range(-0.1..0.1));
        let n = 3;
        let features: Vec<f64> = (0..n * spec.input_len())
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.num_classes)).collect();
        let data =
            LocalDataset::new(features, spec.input_len(), labels, spec.num_classes, 0.0, 0).unwrap();
        let loss = if instance % 2 == 0 { Loss::CrossEntropy } else { Loss::Mse };
        let check = gradient_check(&network, &params, &data, &[0, 1, 2], loss, H);
        assert!(
            check.relative_error <= 1e-5 && check.max_abs_diff <= 1e-6,
            "{kind} instance {instance} ({loss:?}): {check:?}"
        );
    }
}

#[test]
fn logistic_regression_gradients_match_finite_differences() {
    check_kind("logistic");
}

#[test]
fn mlp_gradients_match_finite_differences() {
    check_kind("mlp");
}

#[test]
fn cnn2_gradients_match_finite_differences() {
    check_kind("cnn2");
}
