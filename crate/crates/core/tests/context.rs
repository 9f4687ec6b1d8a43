mod common;

use common::max_relative_error;
use genplanner_core::context::{
    assemble_condition, build_context_graph, embed_context, encode_instruction, shuffled_vertex_order, train_graph_autoencoder, EncoderDims,
    GraphEncoder,
};
use genplanner_core::dataset::{generate_dataset, DatasetSpec};
use genplanner_core::spatial::{AdjacencyRule, AttributeRegistry};
use genplanner_core::{Attribute, Instruction};
use proptest::prelude::*;

#[test]
fn autoencoder_halves_its_loss_on_synthetic_graphs() {
    let data = generate_dataset::<f64>(&DatasetSpec { cities: 64, ..DatasetSpec::default() }).unwrap();
    let graphs: Vec<_> = data.samples.iter().map(|s| s.context.to_graph::<f64>().unwrap()).collect();
    let enc = train_graph_autoencoder(&graphs, 16, 16, 200, 1e-2, 13).unwrap();
    assert_eq!(enc.loss_curve.len(), 200);
    assert!(enc.loss_curve.iter().all(|l| l.is_finite()));
    assert!(enc.loss_curve[199] < 0.5 * enc.loss_curve[0]);
    for g in graphs.iter().take(8) {
        let shuffled = shuffled_vertex_order(g, 5);
        assert_eq!(embed_context(g, &enc).unwrap(), embed_context(&shuffled, &enc).unwrap());
    }
}

#[test]
fn repeated_graph_reconstruction_keeps_falling() {
    let data = generate_dataset::<f64>(&DatasetSpec { cities: 1, ..DatasetSpec::default() }).unwrap();
    let graphs = vec![data.samples[0].context.to_graph::<f64>().unwrap(); 4];
    let enc = train_graph_autoencoder(&graphs, 8, 16, 300, 1e-2, 2).unwrap();
    let smoothed: Vec<f64> = enc.loss_curve.chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
    assert!(smoothed.windows(2).all(|w| w[1] <= w[0]));
    assert!(smoothed.last().unwrap() < &(0.2 * smoothed[0]));
}

#[test]
fn autoencoder_gradient_on_three_vertices() {
    let target = vec![0.3, -1.2];
    let ctx = vec![vec![1.0, 0.4], vec![-0.7, 0.9]];
    let graph = build_context_graph::<f64>(&target, &ctx, AdjacencyRule::Star { contexts: 2 }).unwrap();
    let enc = GraphEncoder::<f64>::new(EncoderDims { features: 2, hidden: 3, embedding: 2 }, 4).unwrap();
    let graphs = [graph];
    let (_, grad) = enc.loss_and_gradient(&graphs).unwrap();
    let err = max_relative_error(&enc, &grad, |e| e.loss_and_gradient(&graphs).unwrap().0.total());
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn zero_epochs_is_rejected() {
    let graph = build_context_graph::<f64>(&[0.0], &[vec![0.0]], AdjacencyRule::Star { contexts: 1 }).unwrap();
    assert!(train_graph_autoencoder(&[graph], 2, 2, 0, 1e-2, 1).is_err());
}

proptest! {
    #[test]
    fn augmented_conditions_keep_one_hot_blocks(seed in 0u64..500, sigma in 0.0f64..2.0, level in 0usize..5, commercial in prop::option::of(0usize..5)) {
        let registry = AttributeRegistry::default();
        let mut ins = Instruction::single(Attribute::GreenRate, level, 5).unwrap();
        if let Some(c) = commercial {
            ins = ins.merged(&Instruction::single(Attribute::CommercialDensity, c, 5).unwrap());
        }
        let blocks: Vec<f64> = encode_instruction(&ins, &registry).unwrap();
        let cond = assemble_condition(&[0.5, -0.25, 1.0], &blocks, 5, sigma, seed).unwrap();
        prop_assert!(cond.blocks_well_formed());
        prop_assert_eq!(cond.decode_instruction(&registry), Some(ins));
    }
}
