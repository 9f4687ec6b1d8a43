mod common;

use common::{fixture, toy_fixture};
use genplanner_core::cvae::{diagonal_gaussian_kl, generate_config_cvae, train_cluvae, CluvaeHyper, CluvaeModel, CvaeBatch};
use genplanner_core::dataset::{DatasetSpec, TrainingExample};
use genplanner_core::rng::seeded;
use genplanner_core::spatial::validate_configuration;
use genplanner_core::Error;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn small() -> CluvaeHyper {
    CluvaeHyper { latent: 4, hidden: 16, epochs: 20, batch_size: 8, ..CluvaeHyper::default() }
}

fn forced_encoder(model: &mut CluvaeModel<f64>, bias: &[f64]) {
    let last = model.weights.encoder.layers.last_mut().unwrap();
    last.weight.fill(0.0);
    last.bias.assign(&ndarray::Array1::from(bias.to_vec()));
}

#[test]
fn kl_is_zero_when_posterior_is_the_prior() {
    let fx = toy_fixture();
    let mut model = CluvaeModel::<f64>::new(fx.shape.clone(), fx.examples[0].condition.dim(), small(), 1.0, 1).unwrap();
    forced_encoder(&mut model, &[0.0; 8]);
    let items: Vec<&TrainingExample<f64>> = fx.examples.iter().collect();
    let batch = CvaeBatch::new(&items, Array2::zeros((items.len(), 4))).unwrap();
    assert_eq!(model.elbo_components(&batch).unwrap().kl, 0.0);
}

#[test]
fn kl_of_unit_mean_shift_is_one_half() {
    let fx = toy_fixture();
    let mut model = CluvaeModel::<f64>::new(fx.shape.clone(), fx.examples[0].condition.dim(), small(), 1.0, 1).unwrap();
    forced_encoder(&mut model, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let items: Vec<&TrainingExample<f64>> = fx.examples.iter().collect();
    let batch = CvaeBatch::new(&items, Array2::zeros((items.len(), 4))).unwrap();
    assert_eq!(model.elbo_components(&batch).unwrap().kl, 0.5);
}

/// Monte-Carlo estimate of E_q[log q(z) - log p(z)] against the closed form.
#[test]
fn closed_form_kl_matches_monte_carlo() {
    let mut rng = seeded(21);
    for _ in 0..3 {
        let k = 4;
        let mu: Vec<f64> = (0..k).map(|_| rng.random_range(-1.5..1.5)).collect();
        let lv: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let draws = 100_000;
        let mut values = Vec::with_capacity(draws);
        for _ in 0..draws {
            let mut log_ratio = 0.0;
            for d in 0..k {
                let eps: f64 = StandardNormal.sample(&mut rng);
                let z = mu[d] + (0.5 * lv[d]).exp() * eps;
                let log_q = -0.5 * (eps * eps + lv[d]);
                let log_p = -0.5 * z * z;
                log_ratio += log_q - log_p;
            }
            values.push(log_ratio);
        }
        let mean = values.iter().sum::<f64>() / draws as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        let exact = diagonal_gaussian_kl(&mu, &lv);
        assert!((mean - exact).abs() < 3.0 * se, "mc {mean} exact {exact} se {se}");
    }
}

#[test]
fn training_reduces_loss_and_keeps_kl_non_negative() {
    let fx = fixture(DatasetSpec { n: 6, zones: 3, categories: 6, features: 4, cities: 96, ..DatasetSpec::default() }, 4);
    let model = train_cluvae(&fx.examples, &fx.shape, &CluvaeHyper { epochs: 30, ..small() }, 13).unwrap();
    assert_eq!(model.training_log.len(), 30);
    let first = model.training_log[0].total;
    let last = model.training_log.last().unwrap().total;
    assert!(last <= 0.7 * first, "first {first} last {last}");
    assert!(model.training_log.iter().all(|e| e.kl >= 0.0));
}

#[test]
fn overfitting_one_sample_without_kl_reduces_reconstruction() {
    let fx = fixture(DatasetSpec { n: 4, zones: 2, categories: 4, features: 3, cities: 1, ..DatasetSpec::default() }, 3);
    let repeated = vec![fx.examples[0].clone(); 16];
    let hyper = CluvaeHyper { beta_kl: 0.0, epochs: 150, batch_size: 16, ..small() };
    let model = train_cluvae(&repeated, &fx.shape, &hyper, 4).unwrap();
    let recon: Vec<f64> = model.training_log.iter().map(|e| e.recon_x).collect();
    let smoothed: Vec<f64> = recon.chunks(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    assert!(smoothed.windows(2).all(|w| w[1] <= w[0]), "smoothed reconstruction is not monotone");
    assert!(recon.last().unwrap() < &(0.1 * recon[0]));
}

#[test]
fn seeded_runs_are_bitwise_identical() {
    let fx = toy_fixture();
    let a = train_cluvae(&fx.examples, &fx.shape, &small(), 8).unwrap();
    let b = train_cluvae(&fx.examples, &fx.shape, &small(), 8).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = train_cluvae(&fx.examples, &fx.shape, &small(), 9).unwrap();
    assert_ne!(a.weights, c.weights);
}

#[test]
fn generation_is_deterministic_and_valid() {
    let fx = toy_fixture();
    let model = train_cluvae(&fx.examples, &fx.shape, &small(), 2).unwrap();
    let cond = &fx.examples[0].condition;
    let (c1, z1) = generate_config_cvae(&model, cond, 5).unwrap();
    let (c2, z2) = generate_config_cvae(&model, cond, 5).unwrap();
    assert_eq!((&c1, &z1), (&c2, &z2));
    assert!(validate_configuration(&c1).is_ok());
    assert_eq!(z1.zone_count, fx.shape.zones());
    let mut short = cond.clone();
    short.values.push(0.0);
    assert!(matches!(generate_config_cvae(&model, &short, 5), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn empty_dataset_is_rejected() {
    let fx = toy_fixture();
    assert!(matches!(train_cluvae::<f64>(&[], &fx.shape, &small(), 1), Err(Error::EmptyDataset)));
}
