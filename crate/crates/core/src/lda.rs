//! Urban functional zones from mobility traces via Latent Dirichlet
//! Allocation with collapsed Gibbs sampling. Cells are words, trajectories
//! are documents.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::ZoneMap;
use crate::synth::TrajectoryCorpus;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdaConfig {
    pub topics: usize,
    pub iters: usize,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

impl LdaConfig {
    pub fn new(topics: usize, seed: u64) -> Self {
        Self { topics, iters: 200, alpha: 0.5, beta: 0.1, seed }
    }
}

/// Count tables of a collapsed Gibbs sampler.
#[derive(Clone, Debug)]
pub struct GibbsState {
    pub assignments: Vec<Vec<usize>>,
    /// `D x K`
    pub doc_topic: Vec<Vec<u32>>,
    /// `W x K`
    pub word_topic: Vec<Vec<u32>>,
    pub topic_total: Vec<u32>,
}

impl GibbsState {
    /// Tables agree with the assignment vector and with each other.
    pub fn is_consistent(&self, docs: &[Vec<usize>]) -> bool {
        let tokens: usize = docs.iter().map(Vec::len).sum();
        let k = self.topic_total.len();
        let mut dt = vec![vec![0u32; k]; docs.len()];
        let mut wt = vec![vec![0u32; k]; self.word_topic.len()];
        for (d, doc) in docs.iter().enumerate() {
            for (&w, &z) in doc.iter().zip(&self.assignments[d]) {
                dt[d][z] += 1;
                wt[w][z] += 1;
            }
        }
        let doc_sum: u64 = self.doc_topic.iter().flatten().map(|&c| c as u64).sum();
        let word_sum: u64 = self.word_topic.iter().flatten().map(|&c| c as u64).sum();
        let totals: Vec<u32> = (0..k).map(|t| wt.iter().map(|r| r[t]).sum()).collect();
        dt == self.doc_topic
            && wt == self.word_topic
            && totals == self.topic_total
            && doc_sum == tokens as u64
            && word_sum == tokens as u64
    }
}

/// Run the sampler for `config.iters` sweeps, calling `after_sweep` after each.
pub fn gibbs_lda<F: FnMut(usize, &GibbsState)>(
    docs: &[Vec<usize>],
    vocab: usize,
    config: &LdaConfig,
    mut after_sweep: F,
) -> Result<GibbsState> {
    if docs.iter().all(Vec::is_empty) {
        return Err(Error::EmptyCorpus);
    }
    if config.topics == 0 || config.iters == 0 {
        return Err(Error::InvalidArgument("LDA needs >= 1 topic and >= 1 iteration".into()));
    }
    if !(config.alpha > 0.0 && config.beta > 0.0) {
        return Err(Error::InvalidArgument("Dirichlet priors must be positive".into()));
    }
    if let Some(&w) = docs.iter().flatten().find(|&&w| w >= vocab) {
        return Err(Error::InvalidArgument(format!("word {w} outside vocabulary of {vocab}")));
    }
    let k = config.topics;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = GibbsState {
        assignments: Vec::with_capacity(docs.len()),
        doc_topic: vec![vec![0; k]; docs.len()],
        word_topic: vec![vec![0; k]; vocab],
        topic_total: vec![0; k],
    };
    for (d, doc) in docs.iter().enumerate() {
        let zs: Vec<usize> = doc.iter().map(|_| rng.random_range(0..k)).collect();
        for (&w, &z) in doc.iter().zip(&zs) {
            state.doc_topic[d][z] += 1;
            state.word_topic[w][z] += 1;
            state.topic_total[z] += 1;
        }
        state.assignments.push(zs);
    }
    let w_beta = vocab as f64 * config.beta;
    let mut weights = vec![0.0; k];
    for sweep in 0..config.iters {
        for (d, doc) in docs.iter().enumerate() {
            for (pos, &w) in doc.iter().enumerate() {
                let old = state.assignments[d][pos];
                state.doc_topic[d][old] -= 1;
                state.word_topic[w][old] -= 1;
                state.topic_total[old] -= 1;
                let mut cum = 0.0;
                for t in 0..k {
                    cum += (state.doc_topic[d][t] as f64 + config.alpha) * (state.word_topic[w][t] as f64 + config.beta)
                        / (state.topic_total[t] as f64 + w_beta);
                    weights[t] = cum;
                }
                let u = rng.random::<f64>() * cum;
                let new = weights.iter().position(|&c| u < c).unwrap_or(k - 1);
                state.assignments[d][pos] = new;
                state.doc_topic[d][new] += 1;
                state.word_topic[w][new] += 1;
                state.topic_total[new] += 1;
            }
        }
        after_sweep(sweep, &state);
    }
    Ok(state)
}

/// Label every cell with its most frequent topic. Cells never visited take
/// the label of the nearest visited cell (squared Euclidean distance in
/// cell units, ties to the lowest label).
pub fn extract_functional_zones(
    corpus: &TrajectoryCorpus,
    zones: usize,
    iters: usize,
    alpha: f64,
    beta: f64,
    seed: u64,
) -> Result<ZoneMap> {
    if corpus.token_count() == 0 {
        return Err(Error::EmptyCorpus);
    }
    if zones == 0 {
        return Err(Error::InvalidArgument("need at least one zone".into()));
    }
    let n = corpus.grid.n;
    let docs: Vec<Vec<usize>> = corpus
        .trajectories
        .iter()
        .map(|t| t.iter().map(|&(i, j)| i * n + j).collect())
        .collect();
    let config = LdaConfig { topics: zones, iters, alpha, beta, seed };
    let state = gibbs_lda(&docs, n * n, &config, |_, _| {})?;
    labels_from_state(&state, corpus, zones)
}

fn labels_from_state(state: &GibbsState, corpus: &TrajectoryCorpus, zones: usize) -> Result<ZoneMap> {
    let n = corpus.grid.n;
    let mut label: Vec<Option<usize>> = vec![None; n * n];
    for (w, row) in state.word_topic.iter().enumerate() {
        if row.iter().any(|&c| c > 0) {
            let mut best = 0;
            for t in 1..zones {
                if row[t] > row[best] {
                    best = t;
                }
            }
            label[w] = Some(best);
        }
    }
    let visited: Vec<(usize, usize, usize)> = label
        .iter()
        .enumerate()
        .filter_map(|(w, l)| l.map(|l| (w / n, w % n, l)))
        .collect();
    let labels = Array2::from_shape_fn((n, n), |(i, j)| {
        label[i * n + j].unwrap_or_else(|| {
            let dist = |&(a, b, _): &(usize, usize, usize)| {
                let (di, dj) = (a as i64 - i as i64, b as i64 - j as i64);
                di * di + dj * dj
            };
            let nearest = visited.iter().map(dist).min().expect("corpus has tokens");
            visited.iter().filter(|v| dist(v) == nearest).map(|v| v.2).min().expect("non-empty")
        })
    });
    ZoneMap::new(corpus.grid.clone(), labels, zones)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::GridSpec;
    use crate::synth::{banded_zone_map, simulate_trajectories};

    #[test]
    fn count_tables_stay_consistent_every_sweep() {
        let map = banded_zone_map(&GridSpec::square(6).unwrap(), 2).unwrap();
        let corpus = simulate_trajectories(&map, 80, 10, 0.9, 4).unwrap();
        let docs: Vec<Vec<usize>> = corpus.trajectories.iter().map(|t| t.iter().map(|&(i, j)| i * 6 + j).collect()).collect();
        let mut sweeps = 0;
        gibbs_lda(&docs, 36, &LdaConfig { iters: 15, ..LdaConfig::new(3, 9) }, |_, s| {
            assert!(s.is_consistent(&docs));
            sweeps += 1;
        })
        .unwrap();
        assert_eq!(sweeps, 15);
    }

    #[test]
    fn single_zone_city_yields_one_label() {
        let grid = GridSpec::square(6).unwrap();
        let map = crate::spatial::ZoneMap::uniform(grid, 1, 0).unwrap();
        let corpus = simulate_trajectories(&map, 200, 10, 0.9, 2).unwrap();
        let zones = extract_functional_zones(&corpus, 1, 20, 0.5, 0.1, 3).unwrap();
        assert!(zones.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn unvisited_cells_take_nearest_label() {
        let grid = GridSpec::square(3).unwrap();
        let corpus = TrajectoryCorpus { trajectories: vec![vec![(0, 0), (0, 0)], vec![(2, 2)]], grid };
        let zones = extract_functional_zones(&corpus, 2, 30, 0.5, 0.1, 1).unwrap();
        let (a, b) = (zones.labels[[0, 0]], zones.labels[[2, 2]]);
        assert_eq!(zones.labels[[0, 1]], a);
        assert_eq!(zones.labels[[2, 1]], b);
        // (1,1) is equidistant from both visited cells.
        assert_eq!(zones.labels[[1, 1]], a.min(b));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let corpus = TrajectoryCorpus { trajectories: vec![], grid: GridSpec::square(3).unwrap() };
        assert!(matches!(extract_functional_zones(&corpus, 2, 5, 0.5, 0.1, 1), Err(Error::EmptyCorpus)));
    }
}
