//! Synthetic cities with planted zone structure, POI ingestion, and
//! zone-biased mobility traces.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::context::ContextFeatures;
use crate::error::{Error, Result};
use crate::nn::sample_normal;
use crate::scalar::Scalar;
use crate::spatial::{
    bucket_level, green_rate, Attribute, CategoryZoneMapping, GridSpec, Instruction, LandUseConfiguration, ZoneMap,
};

/// Generator parameters for one synthetic city.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityProfile {
    pub zone_count: usize,
    /// `Z x C` Poisson intensities: expected POIs per cell per category in each zone.
    pub rates: Array2<f64>,
    pub category_names: Vec<String>,
    /// Per-feature mean of the context-region feature generator.
    pub feature_mean: Vec<f64>,
    /// Per-feature standard deviation of the context-region feature generator.
    pub feature_scale: Vec<f64>,
}

impl CityProfile {
    pub fn new(rates: Array2<f64>, category_names: Vec<String>, feature_mean: Vec<f64>, feature_scale: Vec<f64>) -> Result<Self> {
        let (z, c) = rates.dim();
        if z == 0 || c < 2 {
            return Err(Error::InvalidArgument("profile needs Z >= 1 and C >= 2".into()));
        }
        if category_names.len() != c {
            return Err(Error::dim("category names", c, category_names.len()));
        }
        if rates.iter().any(|&r| !(r >= 0.0 && r.is_finite())) {
            return Err(Error::InvalidArgument("Poisson intensities must be finite and >= 0".into()));
        }
        if feature_mean.len() != feature_scale.len() || feature_mean.is_empty() {
            return Err(Error::dim("feature scale", feature_mean.len(), feature_scale.len()));
        }
        if feature_scale.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("feature scales must be finite and >= 0".into()));
        }
        Ok(Self { zone_count: z, rates, category_names, feature_mean, feature_scale })
    }

    /// Default planted profile over a banded category mapping: the first
    /// category of each zone gets intensity 3.0, the zone's other categories
    /// 1.5, every other category 0.15.
    pub fn planted(zones: usize, categories: usize, features: usize) -> Result<Self> {
        if categories < zones {
            return Err(Error::InvalidArgument("planted profile needs C >= Z".into()));
        }
        let mapping = CategoryZoneMapping::banded(categories, zones)?;
        let mut rates = Array2::from_elem((zones, categories), 0.15);
        for z in 0..zones {
            let own: Vec<usize> = (0..categories).filter(|&c| mapping.category_to_zone[c] == z).collect();
            for (k, &c) in own.iter().enumerate() {
                rates[[z, c]] = if k == 0 { 3.0 } else { 1.5 };
            }
        }
        Self::new(rates, default_category_names(categories), vec![0.0; features], vec![1.0; features])
    }

    pub fn categories(&self) -> usize {
        self.rates.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_mean.len()
    }

    /// Every zone has a unique most-intense category.
    pub fn is_identifiable(&self) -> bool {
        self.rates.outer_iter().all(|row| {
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            row.iter().filter(|&&r| r == max).count() == 1
        })
    }
}

pub fn default_category_names(categories: usize) -> Vec<String> {
    const NAMES: [&str; 10] = [
        "housing",
        "apartments",
        "retail",
        "offices",
        "parks",
        "sports_fields",
        "factories",
        "warehouses",
        "schools",
        "clinics",
    ];
    (0..categories)
        .map(|c| NAMES.get(c).map_or_else(|| format!("category_{c}"), |s| s.to_string()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SyntheticCity<T = f64> {
    pub zone_map: ZoneMap,
    pub config: LandUseConfiguration<T>,
    pub context: ContextFeatures,
    pub instruction: Instruction,
}

/// Row band of zone labels: row `i` belongs to zone `i * Z / n`.
pub fn banded_zone_map(grid: &GridSpec, zones: usize) -> Result<ZoneMap> {
    if zones > grid.n {
        return Err(Error::InfeasiblePartition { zones, n: grid.n });
    }
    let labels = Array2::from_shape_fn((grid.n, grid.n), |(i, _)| i * zones / grid.n);
    ZoneMap::new(grid.clone(), labels, zones)
}

/// Horizontal bands in label order whose row counts follow `shares`
/// (largest-remainder rounding; a zone may get no rows).
pub fn zone_bands(grid: &GridSpec, shares: &[f64]) -> Result<ZoneMap> {
    let total: f64 = shares.iter().sum();
    if shares.is_empty() || shares.iter().any(|s| !(*s >= 0.0)) || !(total > 0.0) {
        return Err(Error::InvalidArgument("zone shares must be non-negative with a positive sum".into()));
    }
    let exact: Vec<f64> = shares.iter().map(|s| s / total * grid.n as f64).collect();
    let mut rows: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let missing = grid.n - rows.iter().sum::<usize>();
    for &z in order.iter().take(missing) {
        rows[z] += 1;
    }
    let mut row_label = Vec::with_capacity(grid.n);
    for (z, &r) in rows.iter().enumerate() {
        row_label.extend(std::iter::repeat_n(z, r));
    }
    let labels = Array2::from_shape_fn((grid.n, grid.n), |(i, _)| row_label[i]);
    ZoneMap::new(grid.clone(), labels, shares.len())
}

pub(crate) fn poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    Poisson::new(lambda).expect("positive finite intensity").sample(rng)
}

/// Draw one city: banded zones, Poisson counts per cell, context features for
/// the target and its eight neighbours, and the green-rate level realized by
/// the counts (level 0 for an empty city).
pub fn generate_city<T: Scalar>(
    profile: &CityProfile,
    grid: &GridSpec,
    mapping: &CategoryZoneMapping,
    levels: usize,
    seed: u64,
) -> Result<SyntheticCity<T>> {
    let zone_map = banded_zone_map(grid, profile.zone_count)?;
    generate_city_on(profile, zone_map, mapping, levels, seed)
}

/// As [`generate_city`] with a given zone layout.
pub fn generate_city_on<T: Scalar>(
    profile: &CityProfile,
    zone_map: ZoneMap,
    mapping: &CategoryZoneMapping,
    levels: usize,
    seed: u64,
) -> Result<SyntheticCity<T>> {
    if mapping.categories() != profile.categories() {
        return Err(Error::dim("mapping categories", profile.categories(), mapping.categories()));
    }
    if zone_map.zone_count != profile.zone_count {
        return Err(Error::dim("zone count", profile.zone_count, zone_map.zone_count));
    }
    let grid = &zone_map.grid.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = profile.categories();
    let mut counts = Array3::zeros((grid.n, grid.n, c));
    for i in 0..grid.n {
        for j in 0..grid.n {
            let z = zone_map.labels[[i, j]];
            for k in 0..c {
                counts[[i, j, k]] = T::of(poisson(profile.rates[[z, k]], &mut rng));
            }
        }
    }
    let config = LandUseConfiguration::new(grid.clone(), counts, profile.category_names.clone())?;
    let mut region = || -> Vec<f64> {
        profile
            .feature_mean
            .iter()
            .zip(&profile.feature_scale)
            .map(|(&m, &s)| m + s * sample_normal::<f64, _>(&mut rng))
            .collect()
    };
    let target = region();
    let neighbors = (0..8).map(|_| region()).collect();
    let level = match green_rate(&config, mapping) {
        Ok(g) => bucket_level(g.to_f64_lossy(), levels),
        Err(Error::EmptyConfiguration) => 0,
        Err(e) => return Err(e),
    };
    let instruction = Instruction::single(Attribute::GreenRate, level, levels)?;
    Ok(SyntheticCity { zone_map, config, context: ContextFeatures { target, neighbors }, instruction })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub x_m: f64,
    pub y_m: f64,
    pub category: usize,
}

#[derive(Clone, Debug)]
pub struct PoiCount<T> {
    pub config: LandUseConfiguration<T>,
    /// Points that fell outside the target square.
    pub dropped: usize,
}

/// Stack per-category POI counts into an `n x n x C` tensor.
pub fn count_pois<T: Scalar>(points: &[Poi], grid: &GridSpec, category_names: Vec<String>) -> Result<PoiCount<T>> {
    let c = category_names.len();
    if let Some(p) = points.iter().find(|p| p.category >= c) {
        return Err(Error::InvalidCategory { category: p.category, count: c });
    }
    let mut config = LandUseConfiguration::zeros(grid.clone(), category_names);
    let mut dropped = 0;
    for p in points {
        match grid.cell_of(p.x_m, p.y_m) {
            Some((i, j)) => config.counts[[i, j, p.category]] += T::one(),
            None => dropped += 1,
        }
    }
    Ok(PoiCount { config, dropped })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryCorpus {
    pub trajectories: Vec<Vec<(usize, usize)>>,
    pub grid: GridSpec,
}

impl TrajectoryCorpus {
    pub fn token_count(&self) -> usize {
        self.trajectories.iter().map(Vec::len).sum()
    }
}

/// Zone-biased random walk. At each step, with probability `stay_prob` jump
/// to a uniformly random cell of the current zone, otherwise to a uniformly
/// random 4-neighbour.
pub fn simulate_trajectories(
    zone_map: &ZoneMap,
    n_traj: usize,
    length: usize,
    stay_prob: f64,
    seed: u64,
) -> Result<TrajectoryCorpus> {
    if n_traj == 0 || length == 0 {
        return Err(Error::InvalidArgument("need at least one trajectory of length >= 1".into()));
    }
    if !(0.0..=1.0).contains(&stay_prob) {
        return Err(Error::InvalidArgument(format!("stay probability {stay_prob} outside [0, 1]")));
    }
    let n = zone_map.grid.n;
    let mut members = vec![Vec::new(); zone_map.zone_count];
    for ((i, j), &z) in zone_map.labels.indexed_iter() {
        members[z].push((i, j));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let mut cell = (rng.random_range(0..n), rng.random_range(0..n));
        let mut path = Vec::with_capacity(length);
        path.push(cell);
        for _ in 1..length {
            cell = if rng.random::<f64>() < stay_prob {
                let zone = &members[zone_map.labels[[cell.0, cell.1]]];
                zone[rng.random_range(0..zone.len())]
            } else {
                let (i, j) = cell;
                let mut options = Vec::with_capacity(4);
                if i > 0 {
                    options.push((i - 1, j));
                }
                if i + 1 < n {
                    options.push((i + 1, j));
                }
                if j > 0 {
                    options.push((i, j - 1));
                }
                if j + 1 < n {
                    options.push((i, j + 1));
                }
                options[rng.random_range(0..options.len())]
            };
            path.push(cell);
        }
        trajectories.push(path);
    }
    Ok(TrajectoryCorpus { trajectories, grid: zone_map.grid.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_intensity_channels_stay_empty() {
        let rates = Array2::from_shape_vec((1, 3), vec![2.0, 0.0, 0.0]).unwrap();
        let profile = CityProfile::new(rates, default_category_names(3), vec![0.0; 4], vec![1.0; 4]).unwrap();
        let mapping = CategoryZoneMapping::banded(3, 1).unwrap();
        let city = generate_city::<f64>(&profile, &GridSpec::square(4).unwrap(), &mapping, 5, 7).unwrap();
        assert!(city.zone_map.labels.iter().all(|&l| l == 0));
        for ((_, _, c), &v) in city.config.counts.indexed_iter() {
            if c > 0 {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn all_zero_intensity_gives_empty_city() {
        let profile = CityProfile::new(Array2::zeros((2, 4)), default_category_names(4), vec![0.0; 2], vec![1.0; 2]).unwrap();
        let mapping = CategoryZoneMapping::banded(4, 2).unwrap();
        let city = generate_city::<f64>(&profile, &GridSpec::square(4).unwrap(), &mapping, 5, 1).unwrap();
        assert_eq!(city.config.total(), 0.0);
        assert!(matches!(green_rate(&city.config, &mapping), Err(Error::EmptyConfiguration)));
    }

    #[test]
    fn too_many_zones_is_infeasible() {
        let profile = CityProfile::planted(5, 10, 4).unwrap();
        let mapping = CategoryZoneMapping::banded(10, 5).unwrap();
        let err = generate_city::<f64>(&profile, &GridSpec::square(4).unwrap(), &mapping, 5, 1).unwrap_err();
        assert!(matches!(err, Error::InfeasiblePartition { zones: 5, n: 4 }));
    }

    #[test]
    fn generation_is_reproducible() {
        let profile = CityProfile::planted(5, 10, 8).unwrap();
        let mapping = CategoryZoneMapping::banded(10, 5).unwrap();
        let grid = GridSpec::square(16).unwrap();
        let a = generate_city::<f64>(&profile, &grid, &mapping, 5, 99).unwrap();
        let b = generate_city::<f64>(&profile, &grid, &mapping, 5, 99).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(profile.is_identifiable());
    }

    #[test]
    fn counting_examples() {
        let grid = GridSpec::square(4).unwrap();
        let empty = count_pois::<f64>(&[], &grid, default_category_names(3)).unwrap();
        assert_eq!(empty.config.total(), 0.0);

        let inside = [Poi { x_m: 800.0, y_m: 600.0, category: 1 }];
        let one = count_pois::<f64>(&inside, &grid, default_category_names(3)).unwrap();
        assert_eq!(one.config.counts[[2, 3, 1]], 1.0);
        assert_eq!(one.config.total(), 1.0);

        let boundary = [Poi { x_m: 250.0, y_m: 100.0, category: 0 }];
        let b = count_pois::<f64>(&boundary, &grid, default_category_names(3)).unwrap();
        assert_eq!(b.config.counts[[0, 1, 0]], 1.0);

        let outside = [Poi { x_m: 1000.0, y_m: 5.0, category: 0 }];
        assert_eq!(count_pois::<f64>(&outside, &grid, default_category_names(3)).unwrap().dropped, 1);

        let bad = [Poi { x_m: 1.0, y_m: 1.0, category: 3 }];
        assert!(matches!(
            count_pois::<f64>(&bad, &grid, default_category_names(3)),
            Err(Error::InvalidCategory { category: 3, count: 3 })
        ));
    }

    #[test]
    fn unit_length_trajectories_are_single_cells() {
        let map = banded_zone_map(&GridSpec::square(6).unwrap(), 2).unwrap();
        let corpus = simulate_trajectories(&map, 50, 1, 0.5, 3).unwrap();
        assert!(corpus.trajectories.iter().all(|t| t.len() == 1));
    }

    #[test]
    fn full_stay_never_leaves_the_zone() {
        let map = banded_zone_map(&GridSpec::square(8).unwrap(), 2).unwrap();
        let corpus = simulate_trajectories(&map, 500, 12, 1.0, 5).unwrap();
        for t in &corpus.trajectories {
            let z = map.labels[[t[0].0, t[0].1]];
            assert!(t.iter().all(|&(i, j)| map.labels[[i, j]] == z));
        }
    }

    #[test]
    fn full_stay_single_zone_visits_uniformly() {
        let grid = GridSpec::square(5).unwrap();
        let map = ZoneMap::uniform(grid, 1, 0).unwrap();
        let corpus = simulate_trajectories(&map, 1000, 100, 1.0, 17).unwrap();
        let mut visits = [0f64; 25];
        for t in &corpus.trajectories {
            for &(i, j) in t {
                visits[i * 5 + j] += 1.0;
            }
        }
        let total: f64 = visits.iter().sum();
        let expected = total / 25.0;
        let chi2: f64 = visits.iter().map(|v| (v - expected).powi(2) / expected).sum();
        // 24 degrees of freedom; 0.999 quantile is about 51.2.
        assert!(chi2 < 51.2, "chi2 = {chi2}");
    }
}
