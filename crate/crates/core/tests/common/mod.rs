#![allow(dead_code)]

use genplanner_core::context::{EncoderDims, GraphEncoder};
use genplanner_core::dataset::{generate_dataset, training_examples, ConditionEncoder, DatasetSpec, SyntheticDataset, TrainingExample};
use genplanner_core::nn::Parameters;
use genplanner_core::plan::PlanShape;

/// Largest relative error between an analytic gradient and central
/// differences of `loss`, over every parameter.
pub fn max_relative_error<P: Parameters<f64>>(params: &P, grad: &P, loss: impl Fn(&P) -> f64) -> f64 {
    const EPS: f64 = 1e-6;
    const FLOOR: f64 = 1e-5;
    let analytic: Vec<f64> = grad.slices().concat();
    let mut worst: f64 = 0.0;
    let mut work = params.clone();
    for (idx, &a) in analytic.iter().enumerate() {
        let original = get(&work, idx);
        set(&mut work, idx, original + EPS);
        let up = loss(&work);
        set(&mut work, idx, original - EPS);
        let down = loss(&work);
        set(&mut work, idx, original);
        let numeric = (up - down) / (2.0 * EPS);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(err);
    }
    worst
}

fn get<P: Parameters<f64>>(p: &P, mut idx: usize) -> f64 {
    for s in p.slices() {
        if idx < s.len() {
            return s[idx];
        }
        idx -= s.len();
    }
    panic!("index out of range")
}

fn set<P: Parameters<f64>>(p: &mut P, mut idx: usize, value: f64) {
    for s in p.slices_mut() {
        if idx < s.len() {
            s[idx] = value;
            return;
        }
        idx -= s.len();
    }
    panic!("index out of range")
}

pub struct Fixture {
    pub data: SyntheticDataset<f64>,
    pub encoder: ConditionEncoder<f64>,
    pub examples: Vec<TrainingExample<f64>>,
    pub shape: PlanShape,
}

pub fn fixture(spec: DatasetSpec, embedding: usize) -> Fixture {
    let data = generate_dataset::<f64>(&spec).unwrap();
    let enc = GraphEncoder::new(EncoderDims { features: spec.features, hidden: 8, embedding }, spec.seed).unwrap();
    let encoder = ConditionEncoder::new(enc, data.manifest.registry.clone());
    let examples = training_examples(&data.samples, &encoder).unwrap();
    let shape = PlanShape::new(data.manifest.grid.clone(), data.manifest.profile.category_names.clone(), data.manifest.mapping.clone()).unwrap();
    Fixture { data, encoder, examples, shape }
}

pub fn toy_fixture() -> Fixture {
    fixture(DatasetSpec { n: 2, zones: 2, categories: 2, features: 2, cities: 4, levels: 2, ..DatasetSpec::default() }, 2)
}
