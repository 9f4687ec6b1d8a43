//! Generation conditions: context graphs, a mean-aggregation graph
//! autoencoder, instruction one-hots, and conditioning augmentation.

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sample_normal, sigmoid, softplus, Adam, AdamConfig, Dense, Parameters};
use crate::scalar::{order_free_sum, Scalar};
use crate::spatial::{AdjacencyRule, AttributeRegistry, Instruction, SpatialAttributedGraph};

/// Raw socioeconomic features of the target and its surrounding regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextFeatures {
    pub target: Vec<f64>,
    pub neighbors: Vec<Vec<f64>>,
}

impl ContextFeatures {
    pub fn feature_dim(&self) -> usize {
        self.target.len()
    }

    pub fn to_graph<T: Scalar>(&self) -> Result<SpatialAttributedGraph<T>> {
        let rule = if self.neighbors.len() == 8 {
            AdjacencyRule::KingMove
        } else {
            AdjacencyRule::Star { contexts: self.neighbors.len() }
        };
        build_context_graph(&self.target, &self.neighbors, rule)
    }
}

const RING: [(&str, (i32, i32)); 8] = [
    ("nw", (0, 0)),
    ("n", (0, 1)),
    ("ne", (0, 2)),
    ("e", (1, 2)),
    ("se", (2, 2)),
    ("s", (2, 1)),
    ("sw", (2, 0)),
    ("w", (1, 0)),
];

/// Vertex 0 is the target; context vertices follow in input order.
pub fn build_context_graph<T: Scalar>(
    target: &[f64],
    contexts: &[Vec<f64>],
    rule: AdjacencyRule,
) -> Result<SpatialAttributedGraph<T>> {
    let f = target.len();
    if f == 0 {
        return Err(Error::dim("target features", 1, 0));
    }
    if let Some(bad) = contexts.iter().find(|c| c.len() != f) {
        return Err(Error::dim("context features", f, bad.len()));
    }
    let (vertices, edges) = match rule {
        AdjacencyRule::KingMove => {
            if contexts.len() != 8 {
                return Err(Error::dim("context regions", 8, contexts.len()));
            }
            let mut pos = vec![(1i32, 1i32)];
            pos.extend(RING.iter().map(|(_, p)| *p));
            let mut edges = Vec::new();
            for a in 0..9 {
                for b in a + 1..9 {
                    let (da, db) = ((pos[a].0 - pos[b].0).abs(), (pos[a].1 - pos[b].1).abs());
                    if da.max(db) == 1 {
                        edges.push((a, b));
                    }
                }
            }
            let mut names = vec!["target".to_string()];
            names.extend(RING.iter().map(|(n, _)| n.to_string()));
            (names, edges)
        }
        AdjacencyRule::Star { contexts: k } => {
            if contexts.len() != k || k == 0 {
                return Err(Error::dim("context regions", k, contexts.len()));
            }
            let mut names = vec!["target".to_string()];
            names.extend((0..k).map(|i| format!("context_{i}")));
            (names, (1..=k).map(|i| (0, i)).collect())
        }
    };
    let mut features = Array2::zeros((contexts.len() + 1, f));
    for (row, src) in std::iter::once(target).chain(contexts.iter().map(Vec::as_slice)).enumerate() {
        for (k, &v) in src.iter().enumerate() {
            features[[row, k]] = T::of(v);
        }
    }
    let graph = SpatialAttributedGraph { vertices, features, edges, rule, target: 0 };
    graph.validate()?;
    Ok(graph)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub features: usize,
    pub hidden: usize,
    pub embedding: usize,
}

/// Two rounds of aggregation, each feeding a vertex its own row next to the
/// mean over its closed neighbourhood (`2F -> h` with tanh, then
/// `2h -> d_g`), decoded back to vertex features by a linear head and to
/// adjacency by inner products.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GraphEncoder<T = f64> {
    pub dims: EncoderDims,
    pub layer1: Dense<T>,
    pub layer2: Dense<T>,
    pub feature_head: Dense<T>,
    pub loss_curve: Vec<f64>,
    pub seed: u64,
}

impl<T: Scalar> Parameters<T> for GraphEncoder<T> {
    fn slices(&self) -> Vec<&[T]> {
        [&self.layer1, &self.layer2, &self.feature_head].into_iter().flat_map(|l| l.slices()).collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        [&mut self.layer1, &mut self.layer2, &mut self.feature_head]
            .into_iter()
            .flat_map(|l| l.slices_mut())
            .collect()
    }
}

/// Closed-neighbourhood mean with order-free sums, so the result does not
/// depend on how vertices are numbered.
fn aggregate<T: Scalar>(x: &Array2<T>, closed: &[Vec<usize>]) -> Array2<T> {
    let mut out = Array2::zeros(x.dim());
    let mut buf = Vec::new();
    for (i, nb) in closed.iter().enumerate() {
        let deg = T::of(nb.len() as f64);
        for f in 0..x.ncols() {
            buf.clear();
            buf.extend(nb.iter().map(|&u| x[[u, f]]));
            out[[i, f]] = order_free_sum(&mut buf) / deg;
        }
    }
    out
}

/// `[x | aggregate(x)]`: each vertex keeps its own row next to the
/// neighbourhood mean.
fn self_and_mean<T: Scalar>(x: &Array2<T>, closed: &[Vec<usize>]) -> Array2<T> {
    ndarray::concatenate![Axis(1), x.view(), aggregate(x, closed).view()]
}

/// Transpose of `aggregate`: spreads each row back over its neighbourhood.
fn aggregate_transpose<T: Scalar>(dy: &Array2<T>, closed: &[Vec<usize>]) -> Array2<T> {
    let mut out = Array2::zeros(dy.dim());
    for (i, nb) in closed.iter().enumerate() {
        let inv = T::one() / T::of(nb.len() as f64);
        for &u in nb {
            for f in 0..dy.ncols() {
                out[[u, f]] += dy[[i, f]] * inv;
            }
        }
    }
    out
}

fn closed_neighborhoods<T: Scalar>(graph: &SpatialAttributedGraph<T>) -> Vec<Vec<usize>> {
    let mut nb = graph.neighbors();
    for (i, list) in nb.iter_mut().enumerate() {
        list.push(i);
    }
    nb
}

struct EncoderPass<T> {
    closed: Vec<Vec<usize>>,
    agg1: Array2<T>,
    hidden: Array2<T>,
    agg2: Array2<T>,
    embedding: Array2<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AutoencoderLoss {
    pub features: f64,
    pub adjacency: f64,
}

impl AutoencoderLoss {
    pub fn total(&self) -> f64 {
        self.features + self.adjacency
    }
}

impl<T: Scalar> GraphEncoder<T> {
    pub fn new(dims: EncoderDims, seed: u64) -> Result<Self> {
        if dims.embedding < 2 || dims.hidden == 0 || dims.features == 0 {
            return Err(Error::InvalidArgument("encoder needs F >= 1, h >= 1, d_g >= 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            dims,
            layer1: Dense::new(2 * dims.features, dims.hidden, &mut rng),
            layer2: Dense::new(2 * dims.hidden, dims.embedding, &mut rng),
            feature_head: Dense::new(dims.embedding, dims.features, &mut rng),
            loss_curve: Vec::new(),
            seed,
        })
    }

    fn encode(&self, graph: &SpatialAttributedGraph<T>) -> Result<EncoderPass<T>> {
        if graph.feature_dim() != self.dims.features {
            return Err(Error::dim("graph feature dimension", self.dims.features, graph.feature_dim()));
        }
        let closed = closed_neighborhoods(graph);
        let agg1 = self_and_mean(&graph.features, &closed);
        let hidden = self.layer1.forward(&agg1).mapv(|v| v.tanh());
        let agg2 = self_and_mean(&hidden, &closed);
        let embedding = self.layer2.forward(&agg2);
        Ok(EncoderPass { closed, agg1, hidden, agg2, embedding })
    }

    /// Per-vertex embeddings, `V x d_g`.
    pub fn vertex_embeddings(&self, graph: &SpatialAttributedGraph<T>) -> Result<Array2<T>> {
        Ok(self.encode(graph)?.embedding)
    }

    /// Mean reconstruction loss over `graphs` and its parameter gradient.
    pub fn loss_and_gradient(&self, graphs: &[SpatialAttributedGraph<T>]) -> Result<(AutoencoderLoss, Self)> {
        let mut grad = self.zeroed();
        let mut loss = AutoencoderLoss { features: 0.0, adjacency: 0.0 };
        let scale = T::one() / T::of(graphs.len() as f64);
        for graph in graphs {
            let pass = self.encode(graph)?;
            let v = graph.vertex_count();
            let recon = self.feature_head.forward(&pass.embedding);
            let diff = &recon - &graph.features;
            let cells = T::of((v * self.dims.features) as f64);
            loss.features += (diff.iter().map(|&d| d * d).sum::<T>() / cells).to_f64_lossy() / graphs.len() as f64;
            let d_recon = diff.mapv(|d| T::of(2.0) * d / cells * scale);
            let mut d_emb = self
                .feature_head
                .backward(&pass.embedding, &d_recon, &mut grad.feature_head, true)
                .expect("requested");

            let mut adjacency = Array2::<T>::zeros((v, v));
            for &(a, b) in &graph.edges {
                adjacency[[a, b]] = T::one();
                adjacency[[b, a]] = T::one();
            }
            let pairs = T::of((v * (v - 1) / 2).max(1) as f64);
            let mut bce = T::zero();
            for a in 0..v {
                for b in a + 1..v {
                    let za = pass.embedding.row(a);
                    let zb = pass.embedding.row(b);
                    let logit = za.dot(&zb);
                    let target = adjacency[[a, b]];
                    bce += softplus(logit) - target * logit;
                    let g = (sigmoid(logit) - target) / pairs * scale;
                    let (za, zb) = (za.to_owned(), zb.to_owned());
                    d_emb.row_mut(a).scaled_add(g, &zb);
                    d_emb.row_mut(b).scaled_add(g, &za);
                }
            }
            loss.adjacency += (bce / pairs).to_f64_lossy() / graphs.len() as f64;

            let d_agg2 = self.layer2.backward(&pass.agg2, &d_emb, &mut grad.layer2, true).expect("requested");
            let h = self.dims.hidden;
            let d_hidden = &d_agg2.slice(s![.., ..h]) + &aggregate_transpose(&d_agg2.slice(s![.., h..]).to_owned(), &pass.closed);
            let d_pre = &d_hidden * &pass.hidden.mapv(|h| T::one() - h * h);
            self.layer1.backward(&pass.agg1, &d_pre, &mut grad.layer1, false);
        }
        Ok((loss, grad))
    }
}

/// Full-batch Adam on feature-reconstruction MSE plus adjacency
/// cross-entropy. The loss before each update is recorded.
pub fn train_graph_autoencoder<T: Scalar>(
    graphs: &[SpatialAttributedGraph<T>],
    embedding: usize,
    hidden: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<GraphEncoder<T>> {
    let first = graphs.first().ok_or(Error::EmptyDataset)?;
    if epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be >= 1".into()));
    }
    let dims = EncoderDims { features: first.feature_dim(), hidden, embedding };
    let mut encoder = GraphEncoder::new(dims, seed)?;
    let mut opt = Adam::new(AdamConfig::with_lr(lr));
    for epoch in 0..epochs {
        let (loss, grad) = encoder.loss_and_gradient(graphs)?;
        if !loss.total().is_finite() || !grad.all_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                detail: format!("feature loss {}, adjacency loss {}", loss.features, loss.adjacency),
            });
        }
        encoder.loss_curve.push(loss.total());
        opt.step(&mut encoder, &grad);
    }
    Ok(encoder)
}

/// Target-vertex embedding after message passing.
pub fn embed_context<T: Scalar>(graph: &SpatialAttributedGraph<T>, encoder: &GraphEncoder<T>) -> Result<Vec<T>> {
    let emb = encoder.vertex_embeddings(graph)?;
    Ok(emb.row(graph.target).to_vec())
}

/// Per-attribute one-hot blocks in registry order; unset attributes encode
/// as an all-zero block.
pub fn encode_instruction<T: Scalar>(instruction: &Instruction, registry: &AttributeRegistry) -> Result<Vec<T>> {
    if let Some(a) = instruction.slots.keys().find(|a| !registry.attributes.contains(a)) {
        return Err(Error::UnknownAttribute(a.key().to_string()));
    }
    let l = registry.levels;
    let mut out = vec![T::zero(); registry.encoded_len()];
    for (k, attr) in registry.attributes.iter().enumerate() {
        if let Some(level) = instruction.level(*attr) {
            if level >= l {
                return Err(Error::LevelOutOfRange { level, levels: l });
            }
            out[k * l + level] = T::one();
        }
    }
    Ok(out)
}

/// Context embedding followed by instruction one-hot blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ConditionEmbedding<T = f64> {
    pub values: Vec<T>,
    pub context_dim: usize,
    pub levels: usize,
    pub graph_id: Option<String>,
    pub instruction: Option<Instruction>,
}

impl<T: Scalar> ConditionEmbedding<T> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn context(&self) -> &[T] {
        &self.values[..self.context_dim]
    }

    pub fn instruction_blocks(&self) -> &[T] {
        &self.values[self.context_dim..]
    }

    pub fn with_provenance(mut self, graph_id: Option<String>, instruction: Option<Instruction>) -> Self {
        self.graph_id = graph_id;
        self.instruction = instruction;
        self
    }

    /// Every instruction block is all-zero or an exact one-hot.
    pub fn blocks_well_formed(&self) -> bool {
        self.levels > 0
            && self.instruction_blocks().len() % self.levels == 0
            && self.instruction_blocks().chunks(self.levels).all(|b| {
                let ones = b.iter().filter(|&&v| v == T::one()).count();
                let zeros = b.iter().filter(|&&v| v == T::zero()).count();
                zeros == b.len() || (ones == 1 && zeros == b.len() - 1)
            })
    }

    /// Read the instruction back out of the one-hot blocks.
    pub fn decode_instruction(&self, registry: &AttributeRegistry) -> Option<Instruction> {
        let blocks = self.instruction_blocks();
        if blocks.len() != registry.encoded_len() {
            return None;
        }
        let slots = registry
            .attributes
            .iter()
            .zip(blocks.chunks(registry.levels))
            .filter_map(|(&a, b)| b.iter().position(|&v| v == T::one()).map(|l| (a, l)))
            .collect();
        Instruction::new(slots, registry.levels).ok()
    }

    pub fn as_array(&self) -> Array1<T> {
        Array1::from(self.values.clone())
    }
}

/// Concatenate context and instruction vectors. With `sigma > 0` the context
/// block receives zero-mean Gaussian noise; instruction blocks never change.
pub fn assemble_condition<T: Scalar>(
    context: &[T],
    instruction: &[T],
    levels: usize,
    sigma: f64,
    seed: u64,
) -> Result<ConditionEmbedding<T>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise scale {sigma} must be finite and >= 0")));
    }
    let mut values: Vec<T> = context.to_vec();
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in values.iter_mut() {
            *v += sample_normal::<T, _>(&mut rng) * T::of(sigma);
        }
    }
    values.extend_from_slice(instruction);
    Ok(ConditionEmbedding { values, context_dim: context.len(), levels, graph_id: None, instruction: None })
}

/// Relabel context vertices by a random permutation that keeps the graph
/// isomorphic (edges are remapped with the vertices).
pub fn shuffled_vertex_order<T: Scalar>(graph: &SpatialAttributedGraph<T>, seed: u64) -> SpatialAttributedGraph<T> {
    let v = graph.vertex_count();
    let mut order: Vec<usize> = (0..v).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // order[new] = old
    let mut new_of_old = vec![0; v];
    for (new, &old) in order.iter().enumerate() {
        new_of_old[old] = new;
    }
    let mut features = Array2::zeros(graph.features.dim());
    for (new, &old) in order.iter().enumerate() {
        features.row_mut(new).assign(&graph.features.row(old));
    }
    SpatialAttributedGraph {
        vertices: order.iter().map(|&o| graph.vertices[o].clone()).collect(),
        features,
        edges: graph.edges.iter().map(|&(a, b)| (new_of_old[a], new_of_old[b])).collect(),
        rule: graph.rule,
        target: new_of_old[graph.target],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::Attribute;
    use std::collections::BTreeMap;

    fn ring_features(seed: u64, f: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || (0..f).map(|_| sample_normal::<f64, _>(&mut rng)).collect::<Vec<_>>();
        let target = draw();
        let ctx = (0..8).map(|_| draw()).collect();
        (target, ctx)
    }

    #[test]
    fn king_move_graph_has_twenty_edges() {
        let (t, c) = ring_features(1, 4);
        let g = build_context_graph::<f64>(&t, &c, AdjacencyRule::KingMove).unwrap();
        assert_eq!(g.vertex_count(), 9);
        // Brute force over the 3x3 block.
        let mut expected = 0;
        for a in 0..9 {
            for b in a + 1..9 {
                let (ra, ca, rb, cb) = (a / 3, a % 3, b / 3, b % 3);
                if (ra as i32 - rb as i32).abs().max((ca as i32 - cb as i32).abs()) == 1 {
                    expected += 1;
                }
            }
        }
        assert_eq!(g.edges.len(), expected);
        assert_eq!(expected, 20);
        assert_eq!(g.neighbors()[0].len(), 8);
    }

    #[test]
    fn seven_contexts_are_rejected() {
        let (t, mut c) = ring_features(1, 4);
        c.pop();
        assert!(matches!(
            build_context_graph::<f64>(&t, &c, AdjacencyRule::KingMove),
            Err(Error::DimensionMismatch { expected: 8, found: 7, .. })
        ));
    }

    #[test]
    fn zero_features_embed_to_finite_vector() {
        let g = build_context_graph::<f64>(&[0.0; 4], &vec![vec![0.0; 4]; 8], AdjacencyRule::KingMove).unwrap();
        let enc = GraphEncoder::<f64>::new(EncoderDims { features: 4, hidden: 6, embedding: 3 }, 2).unwrap();
        assert!(embed_context(&g, &enc).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn embedding_ignores_vertex_numbering() {
        let (t, c) = ring_features(5, 6);
        let g = build_context_graph::<f64>(&t, &c, AdjacencyRule::KingMove).unwrap();
        let enc = GraphEncoder::<f64>::new(EncoderDims { features: 6, hidden: 8, embedding: 4 }, 3).unwrap();
        let base = embed_context(&g, &enc).unwrap();
        for seed in 0..10 {
            let shuffled = shuffled_vertex_order(&g, seed);
            shuffled.validate().unwrap();
            let e = embed_context(&shuffled, &enc).unwrap();
            assert_eq!(base, e);
        }
    }

    #[test]
    fn instruction_blocks() {
        let reg = AttributeRegistry::default();
        let low = Instruction::single(Attribute::GreenRate, 0, 5).unwrap();
        let v: Vec<f64> = encode_instruction(&low, &reg).unwrap();
        assert_eq!(&v[..5], &[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(v[5..].iter().all(|&x| x == 0.0));
        let high = Instruction::single(Attribute::GreenRate, 4, 5).unwrap();
        let v: Vec<f64> = encode_instruction(&high, &reg).unwrap();
        assert_eq!(&v[..5], &[0.0, 0.0, 0.0, 0.0, 1.0]);
        let bad = Instruction { slots: BTreeMap::from([(Attribute::GreenRate, 5)]), levels: 5 };
        assert!(matches!(encode_instruction::<f64>(&bad, &reg), Err(Error::LevelOutOfRange { level: 5, levels: 5 })));
        let narrow = AttributeRegistry { attributes: vec![Attribute::GreenRate], levels: 5 };
        let commercial = Instruction::single(Attribute::CommercialDensity, 1, 5).unwrap();
        assert!(matches!(encode_instruction::<f64>(&commercial, &narrow), Err(Error::UnknownAttribute(_))));
    }

    #[test]
    fn zero_sigma_is_plain_concatenation() {
        let cond = assemble_condition(&[0.5f64, -1.0], &[0.0, 1.0, 0.0], 3, 0.0, 4).unwrap();
        assert_eq!(cond.values, vec![0.5, -1.0, 0.0, 1.0, 0.0]);
        assert!(cond.blocks_well_formed());
        let noisy = assemble_condition(&[0.5f64, -1.0], &[0.0, 1.0, 0.0], 3, 0.1, 4).unwrap();
        assert_eq!(noisy, assemble_condition(&[0.5f64, -1.0], &[0.0, 1.0, 0.0], 3, 0.1, 4).unwrap());
        assert_eq!(&noisy.values[2..], &[0.0, 1.0, 0.0]);
        assert_ne!(&noisy.values[..2], &[0.5, -1.0]);
    }

    #[test]
    fn noise_is_centred_on_the_clean_context() {
        let context = [0.3f64, -0.7, 1.2];
        let draws = 10_000;
        let mut sums = [0.0; 3];
        for seed in 0..draws {
            let c = assemble_condition(&context, &[1.0], 1, 0.1, seed).unwrap();
            for k in 0..3 {
                sums[k] += c.values[k];
            }
        }
        for k in 0..3 {
            let mean = sums[k] / draws as f64;
            assert!((mean - context[k]).abs() < 3.0 * 0.1 / (draws as f64).sqrt(), "coordinate {k}: {mean}");
        }
    }

    #[test]
    fn instruction_round_trips_through_condition() {
        let reg = AttributeRegistry::default();
        let instr = Instruction::new(BTreeMap::from([(Attribute::GreenRate, 3), (Attribute::ResidentialDensity, 1)]), 5).unwrap();
        let blocks: Vec<f64> = encode_instruction(&instr, &reg).unwrap();
        let cond = assemble_condition(&[0.0; 4], &blocks, 5, 0.2, 1).unwrap();
        assert_eq!(cond.decode_instruction(&reg), Some(instr));
    }
}
