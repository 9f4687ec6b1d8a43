//! Quantified plan representation: grids, POI count tensors, zone maps,
//! context graphs, instructions, and the elementary quantities derived
//! from them.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_SIDE_M: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub cell_size_m: f64,
    pub origin: (f64, f64),
}

impl GridSpec {
    pub fn new(n: usize, cell_size_m: f64, origin: (f64, f64)) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!("grid needs n >= 2, got {n}")));
        }
        if !(cell_size_m > 0.0 && cell_size_m.is_finite()) {
            return Err(Error::InvalidArgument(format!("cell size must be positive, got {cell_size_m}")));
        }
        if !(origin.0.is_finite() && origin.1.is_finite()) {
            return Err(Error::InvalidArgument("grid origin must be finite".into()));
        }
        Ok(Self { n, cell_size_m, origin })
    }

    /// An `n x n` partition of the default one-kilometre target square at the origin.
    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, DEFAULT_SIDE_M / n as f64, (0.0, 0.0))
    }

    pub fn side_m(&self) -> f64 {
        self.n as f64 * self.cell_size_m
    }

    pub fn cells(&self) -> usize {
        self.n * self.n
    }

    fn edge(&self, origin: f64, k: usize) -> f64 {
        origin + k as f64 * self.cell_size_m
    }

    /// Cell `(row, col)` containing a point under half-open intervals
    /// `[min, max)` on both axes. Rows run along y, columns along x.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let col = self.axis_index(x, self.origin.0)?;
        let row = self.axis_index(y, self.origin.1)?;
        Some((row, col))
    }

    fn axis_index(&self, v: f64, origin: f64) -> Option<usize> {
        if !v.is_finite() || v < origin || v >= self.edge(origin, self.n) {
            return None;
        }
        let mut k = (((v - origin) / self.cell_size_m).floor() as usize).min(self.n - 1);
        // Snap the floating-point estimate onto the exact interval edges.
        while k > 0 && v < self.edge(origin, k) {
            k -= 1;
        }
        while k + 1 < self.n && v >= self.edge(origin, k + 1) {
            k += 1;
        }
        Some(k)
    }
}

/// POI counts per cell and category. Shape `n x n x C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "ConfigRepr<T>", into = "ConfigRepr<T>")]
pub struct LandUseConfiguration<T = f64> {
    pub grid: GridSpec,
    pub counts: Array3<T>,
    pub category_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct ConfigRepr<T> {
    grid: GridSpec,
    counts: Vec<Vec<Vec<T>>>,
    category_names: Vec<String>,
}

impl<T: Scalar> From<LandUseConfiguration<T>> for ConfigRepr<T> {
    fn from(c: LandUseConfiguration<T>) -> Self {
        ConfigRepr { counts: nested3(&c.counts), grid: c.grid, category_names: c.category_names }
    }
}

impl<T: Scalar> TryFrom<ConfigRepr<T>> for LandUseConfiguration<T> {
    type Error = Error;

    fn try_from(r: ConfigRepr<T>) -> Result<Self> {
        let counts = from_nested3(&r.counts)?;
        LandUseConfiguration::new(r.grid, counts, r.category_names)
    }
}

pub(crate) fn nested3<T: Scalar>(a: &Array3<T>) -> Vec<Vec<Vec<T>>> {
    a.outer_iter()
        .map(|plane| plane.outer_iter().map(|row| row.to_vec()).collect())
        .collect()
}

pub(crate) fn from_nested3<T: Scalar>(v: &[Vec<Vec<T>>]) -> Result<Array3<T>> {
    let d0 = v.len();
    let d1 = v.first().map_or(0, |p| p.len());
    let d2 = v.first().and_then(|p| p.first()).map_or(0, |r| r.len());
    let mut flat = Vec::with_capacity(d0 * d1 * d2);
    for plane in v {
        if plane.len() != d1 {
            return Err(Error::ShapeMismatch("ragged count tensor".into()));
        }
        for row in plane {
            if row.len() != d2 {
                return Err(Error::ShapeMismatch("ragged count tensor".into()));
            }
            flat.extend_from_slice(row);
        }
    }
    Array3::from_shape_vec((d0, d1, d2), flat).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

pub(crate) fn nested2<T: Copy>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.outer_iter().map(|row| row.to_vec()).collect()
}

pub(crate) fn from_nested2<T: Copy>(v: &[Vec<T>]) -> Result<Array2<T>> {
    let cols = v.first().map_or(0, |r| r.len());
    if v.iter().any(|r| r.len() != cols) {
        return Err(Error::ShapeMismatch("ragged matrix".into()));
    }
    let flat: Vec<T> = v.iter().flatten().copied().collect();
    Array2::from_shape_vec((v.len(), cols), flat).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NegativeEntry { row: usize, col: usize, category: usize, value: f64 },
    NonFiniteEntry { row: usize, col: usize, category: usize },
    ShapeMismatch { expected: (usize, usize, usize), found: (usize, usize, usize) },
    TooFewCategories(usize),
    CategoryNamesMismatch { names: usize, channels: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NegativeEntry { row, col, category, value } => {
                write!(f, "negative count {value} at ({row},{col},{category})")
            }
            Violation::NonFiniteEntry { row, col, category } => write!(f, "non-finite count at ({row},{col},{category})"),
            Violation::ShapeMismatch { expected, found } => write!(f, "shape {found:?} does not match {expected:?}"),
            Violation::TooFewCategories(c) => write!(f, "need at least 2 categories, found {c}"),
            Violation::CategoryNamesMismatch { names, channels } => {
                write!(f, "{names} category names for {channels} channels")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidityReport {
    pub violations: Vec<Violation>,
}

impl ValidityReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_configuration<T: Scalar>(config: &LandUseConfiguration<T>) -> ValidityReport {
    let mut violations = Vec::new();
    let (a, b, c) = config.counts.dim();
    let n = config.grid.n;
    if (a, b) != (n, n) {
        violations.push(Violation::ShapeMismatch { expected: (n, n, c), found: (a, b, c) });
    }
    if c < 2 {
        violations.push(Violation::TooFewCategories(c));
    }
    if config.category_names.len() != c {
        violations.push(Violation::CategoryNamesMismatch { names: config.category_names.len(), channels: c });
    }
    for ((row, col, category), &v) in config.counts.indexed_iter() {
        if !v.is_finite() {
            violations.push(Violation::NonFiniteEntry { row, col, category });
        } else if v < T::zero() {
            violations.push(Violation::NegativeEntry { row, col, category, value: v.to_f64_lossy() });
        }
    }
    ValidityReport { violations }
}

impl<T: Scalar> LandUseConfiguration<T> {
    pub fn new(grid: GridSpec, counts: Array3<T>, category_names: Vec<String>) -> Result<Self> {
        let config = Self { grid, counts, category_names };
        let report = validate_configuration(&config);
        match report.violations.first() {
            None => Ok(config),
            Some(v) => Err(Error::ShapeMismatch(v.to_string())),
        }
    }

    pub fn zeros(grid: GridSpec, category_names: Vec<String>) -> Self {
        let counts = Array3::zeros((grid.n, grid.n, category_names.len()));
        Self { grid, counts, category_names }
    }

    pub fn categories(&self) -> usize {
        self.counts.dim().2
    }

    pub fn total(&self) -> T {
        self.counts.iter().copied().sum()
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self { counts: self.counts.mapv(|v| v * factor), ..self.clone() }
    }

    /// Per-category `n x n` count matrices.
    pub fn category_layers(&self) -> Vec<Array2<T>> {
        (0..self.categories())
            .map(|c| self.counts.index_axis(ndarray::Axis(2), c).to_owned())
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> LandUseConfiguration<U> {
        LandUseConfiguration {
            grid: self.grid.clone(),
            counts: self.counts.mapv(|v| U::of(v.to_f64_lossy())),
            category_names: self.category_names.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ZoneRepr", into = "ZoneRepr")]
pub struct ZoneMap {
    pub grid: GridSpec,
    pub labels: Array2<usize>,
    pub zone_count: usize,
}

#[derive(Serialize, Deserialize)]
struct ZoneRepr {
    grid: GridSpec,
    labels: Vec<Vec<usize>>,
    zone_count: usize,
}

impl From<ZoneMap> for ZoneRepr {
    fn from(z: ZoneMap) -> Self {
        ZoneRepr { labels: nested2(&z.labels), grid: z.grid, zone_count: z.zone_count }
    }
}

impl TryFrom<ZoneRepr> for ZoneMap {
    type Error = Error;

    fn try_from(r: ZoneRepr) -> Result<Self> {
        ZoneMap::new(r.grid, from_nested2(&r.labels)?, r.zone_count)
    }
}

impl ZoneMap {
    pub fn new(grid: GridSpec, labels: Array2<usize>, zone_count: usize) -> Result<Self> {
        if zone_count == 0 {
            return Err(Error::InvalidArgument("zone count must be >= 1".into()));
        }
        if labels.dim() != (grid.n, grid.n) {
            return Err(Error::ShapeMismatch(format!("zone labels {:?} on an n={} grid", labels.dim(), grid.n)));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= zone_count) {
            return Err(Error::InvalidArgument(format!("zone label {bad} outside [0, {zone_count})")));
        }
        Ok(Self { grid, labels, zone_count })
    }

    pub fn uniform(grid: GridSpec, zone_count: usize, label: usize) -> Result<Self> {
        let labels = Array2::from_elem((grid.n, grid.n), label);
        Self::new(grid, labels, zone_count)
    }

    pub fn present_zones(&self) -> Vec<bool> {
        let mut present = vec![false; self.zone_count];
        self.labels.iter().for_each(|&l| present[l] = true);
        present
    }
}

/// How context regions are wired to each other and to the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum AdjacencyRule {
    /// The target sits at the centre of a 3x3 block; regions sharing an edge
    /// or a corner are connected.
    KingMove,
    /// `contexts` regions, each connected only to the target.
    Star { contexts: usize },
}

/// Target region plus surrounding context regions as an attributed graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SpatialAttributedGraph<T = f64> {
    pub vertices: Vec<String>,
    /// `V x F`, row `v` holds the features of `vertices[v]`.
    pub features: Array2<T>,
    pub edges: Vec<(usize, usize)>,
    pub rule: AdjacencyRule,
    /// Index of the target region among `vertices`.
    pub target: usize,
}

impl<T: Scalar> SpatialAttributedGraph<T> {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vertices.len();
        if self.features.nrows() != v {
            return Err(Error::dim("graph feature rows", v, self.features.nrows()));
        }
        if self.target >= v {
            return Err(Error::InvalidArgument("target vertex out of range".into()));
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &self.edges {
            if a == b {
                return Err(Error::InvalidArgument(format!("self-loop on vertex {a}")));
            }
            if a >= v || b >= v {
                return Err(Error::InvalidArgument(format!("edge ({a},{b}) references a missing vertex")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::InvalidArgument(format!("duplicate edge ({a},{b})")));
            }
        }
        if self.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite vertex feature".into()));
        }
        let adj = self.neighbors();
        let mut visited = vec![false; v];
        let mut queue = VecDeque::from([0usize]);
        visited[0] = v > 0;
        while let Some(u) = queue.pop_front() {
            for &w in &adj[u] {
                if !visited[w] {
                    visited[w] = true;
                    queue.push_back(w);
                }
            }
        }
        if visited.iter().any(|x| !x) {
            return Err(Error::InvalidArgument("graph is not connected".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    GreenRate,
    CommercialDensity,
    ResidentialDensity,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::GreenRate, Attribute::CommercialDensity, Attribute::ResidentialDensity];

    pub fn key(self) -> &'static str {
        match self {
            Attribute::GreenRate => "green_rate",
            Attribute::CommercialDensity => "commercial_density",
            Attribute::ResidentialDensity => "residential_density",
        }
    }

    pub fn from_key(key: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.key() == key)
            .ok_or_else(|| Error::UnknownAttribute(key.to_string()))
    }
}

/// The ordered set of instruction attributes and the number of levels each takes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeRegistry {
    pub attributes: Vec<Attribute>,
    pub levels: usize,
}

impl Default for AttributeRegistry {
    fn default() -> Self {
        Self { attributes: Attribute::ALL.to_vec(), levels: 5 }
    }
}

impl AttributeRegistry {
    pub fn encoded_len(&self) -> usize {
        self.attributes.len() * self.levels
    }
}

/// Discretized planning request: attribute -> level index in `[0, levels)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub slots: BTreeMap<Attribute, usize>,
    pub levels: usize,
}

impl Instruction {
    pub fn new(slots: BTreeMap<Attribute, usize>, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::InvalidArgument("instruction needs at least one level".into()));
        }
        if slots.is_empty() {
            return Err(Error::InvalidArgument("instruction needs at least one slot".into()));
        }
        if let Some((_, &level)) = slots.iter().find(|(_, &l)| l >= levels) {
            return Err(Error::LevelOutOfRange { level, levels });
        }
        Ok(Self { slots, levels })
    }

    pub fn single(attribute: Attribute, level: usize, levels: usize) -> Result<Self> {
        Self::new(BTreeMap::from([(attribute, level)]), levels)
    }

    pub fn level(&self, attribute: Attribute) -> Option<usize> {
        self.slots.get(&attribute).copied()
    }

    /// Slot-wise override: attributes set in `update` replace those here.
    pub fn merged(&self, update: &Instruction) -> Instruction {
        let mut slots = self.slots.clone();
        slots.extend(update.slots.iter().map(|(&a, &l)| (a, l)));
        Instruction { slots, levels: self.levels }
    }
}

/// Bridges grid-level POI categories to zone-level functions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryZoneMapping {
    pub category_to_zone: Vec<usize>,
    pub zone_count: usize,
    pub green_categories: BTreeSet<usize>,
    pub commercial_categories: BTreeSet<usize>,
    pub residential_categories: BTreeSet<usize>,
}

impl CategoryZoneMapping {
    pub fn new(
        category_to_zone: Vec<usize>,
        zone_count: usize,
        green: BTreeSet<usize>,
        commercial: BTreeSet<usize>,
        residential: BTreeSet<usize>,
    ) -> Result<Self> {
        let c = category_to_zone.len();
        if zone_count == 0 || category_to_zone.iter().any(|&z| z >= zone_count) {
            return Err(Error::InvalidArgument("category mapped outside the zone range".into()));
        }
        if green.is_empty() {
            return Err(Error::InvalidArgument("at least one green category is required".into()));
        }
        for set in [&green, &commercial, &residential] {
            if let Some(&bad) = set.iter().find(|&&k| k >= c) {
                return Err(Error::InvalidCategory { category: bad, count: c });
            }
        }
        Ok(Self {
            category_to_zone,
            zone_count,
            green_categories: green,
            commercial_categories: commercial,
            residential_categories: residential,
        })
    }

    /// Categories split into `zones` contiguous groups (`c * Z / C`). Zone 0
    /// is residential, zone 1 commercial and zone 2 green; with fewer zones
    /// the roles fold onto the last available zone.
    pub fn banded(categories: usize, zones: usize) -> Result<Self> {
        if categories < 2 || zones == 0 {
            return Err(Error::InvalidArgument("banded mapping needs C >= 2 and Z >= 1".into()));
        }
        let to_zone: Vec<usize> = (0..categories).map(|c| c * zones / categories).collect();
        let of_zone = |z: usize| -> BTreeSet<usize> { (0..categories).filter(|&c| to_zone[c] == z).collect() };
        let green = of_zone(2.min(zones - 1));
        let commercial = of_zone(1.min(zones - 1));
        let residential = of_zone(0);
        Self::new(to_zone.clone(), zones, green, commercial, residential)
    }

    pub fn categories(&self) -> usize {
        self.category_to_zone.len()
    }

    pub fn attribute_categories(&self, attribute: Attribute) -> &BTreeSet<usize> {
        match attribute {
            Attribute::GreenRate => &self.green_categories,
            Attribute::CommercialDensity => &self.commercial_categories,
            Attribute::ResidentialDensity => &self.residential_categories,
        }
    }
}

/// Equal-width bucket of a share in `[0, 1]`: boundaries at `i / levels`,
/// right-open except the last bucket, which is closed.
pub fn bucket_level(value: f64, levels: usize) -> usize {
    let raw = (value * levels as f64).floor();
    if raw <= 0.0 {
        0
    } else {
        (raw as usize).min(levels - 1)
    }
}

/// Count share of the given categories.
pub fn category_share<T: Scalar>(config: &LandUseConfiguration<T>, categories: &BTreeSet<usize>) -> Result<T> {
    let total = config.total();
    if total <= T::zero() {
        return Err(Error::EmptyConfiguration);
    }
    let selected: T = config
        .counts
        .indexed_iter()
        .filter(|((_, _, c), _)| categories.contains(c))
        .map(|(_, &v)| v)
        .sum();
    Ok((selected / total).min(T::one()))
}

pub fn green_rate<T: Scalar>(config: &LandUseConfiguration<T>, mapping: &CategoryZoneMapping) -> Result<T> {
    category_share(config, &mapping.green_categories)
}

pub fn attribute_value<T: Scalar>(
    config: &LandUseConfiguration<T>,
    mapping: &CategoryZoneMapping,
    attribute: Attribute,
) -> Result<T> {
    category_share(config, mapping.attribute_categories(attribute))
}

pub fn poi_distribution<T: Scalar>(config: &LandUseConfiguration<T>) -> Result<Vec<T>> {
    let total = config.total();
    if total <= T::zero() {
        return Err(Error::EmptyConfiguration);
    }
    let per_channel = config.counts.sum_axis(ndarray::Axis(0)).sum_axis(ndarray::Axis(0));
    Ok(per_channel.iter().map(|&v| v / total).collect())
}

/// Zone whose mapped categories hold the largest summed count in cell
/// `(i, j)`; ties go to the lowest zone index, so an empty cell is zone 0.
pub(crate) fn dominant_zone_of_cell<T: Scalar>(
    config: &LandUseConfiguration<T>,
    mapping: &CategoryZoneMapping,
    i: usize,
    j: usize,
) -> usize {
    let mut mass = vec![T::zero(); mapping.zone_count];
    for (c, &z) in mapping.category_to_zone.iter().enumerate() {
        mass[z] += config.counts[[i, j, c]];
    }
    let mut best = 0;
    for z in 1..mass.len() {
        if mass[z] > mass[best] {
            best = z;
        }
    }
    best
}

pub fn dominant_zone_map<T: Scalar>(config: &LandUseConfiguration<T>, mapping: &CategoryZoneMapping) -> Result<ZoneMap> {
    if config.categories() != mapping.categories() {
        return Err(Error::dim("mapping categories", config.categories(), mapping.categories()));
    }
    let n = config.grid.n;
    let labels = Array2::from_shape_fn((n, n), |(i, j)| dominant_zone_of_cell(config, mapping, i, j));
    ZoneMap::new(config.grid.clone(), labels, mapping.zone_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(c: usize) -> Vec<String> {
        (0..c).map(|k| format!("cat{k}")).collect()
    }

    fn random_config(seed: u64, n: usize, c: usize) -> LandUseConfiguration<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts = Array3::from_shape_simple_fn((n, n, c), || rng.random_range(0..6) as f64);
        LandUseConfiguration::new(GridSpec::square(n).unwrap(), counts, names(c)).unwrap()
    }

    #[test]
    fn zero_tensor_is_valid() {
        let cfg = LandUseConfiguration::<f64>::zeros(GridSpec::square(4).unwrap(), names(3));
        assert!(validate_configuration(&cfg).is_ok());
    }

    #[test]
    fn negative_entry_is_reported_with_index() {
        let mut cfg = LandUseConfiguration::<f64>::zeros(GridSpec::square(4).unwrap(), names(3));
        cfg.counts[[1, 1, 0]] = -1.0;
        let report = validate_configuration(&cfg);
        assert_eq!(
            report.violations,
            vec![Violation::NegativeEntry { row: 1, col: 1, category: 0, value: -1.0 }]
        );
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let cfg = LandUseConfiguration {
            grid: GridSpec::square(4).unwrap(),
            counts: Array3::<f64>::zeros((4, 5, 3)),
            category_names: names(3),
        };
        let report = validate_configuration(&cfg);
        assert!(matches!(report.violations[..], [Violation::ShapeMismatch { .. }]));
    }

    #[test]
    fn green_rate_examples() {
        let mapping = CategoryZoneMapping::banded(10, 5).unwrap();
        let grid = GridSpec::square(4).unwrap();
        let mut all_green = LandUseConfiguration::<f64>::zeros(grid.clone(), names(10));
        all_green.counts[[0, 0, 4]] = 3.0;
        all_green.counts[[2, 1, 5]] = 1.0;
        assert_eq!(green_rate(&all_green, &mapping).unwrap(), 1.0);

        let one_green = CategoryZoneMapping::new(
            (0..10).map(|c| c / 2).collect(),
            5,
            BTreeSet::from([7]),
            BTreeSet::new(),
            BTreeSet::new(),
        )
        .unwrap();
        let equal = LandUseConfiguration::new(grid.clone(), Array3::from_elem((4, 4, 10), 2.0f64), names(10)).unwrap();
        assert!((green_rate(&equal, &one_green).unwrap() - 0.1).abs() < 1e-15);

        let empty = LandUseConfiguration::<f64>::zeros(grid, names(10));
        assert!(matches!(green_rate(&empty, &mapping), Err(Error::EmptyConfiguration)));
    }

    #[test]
    fn green_rate_matches_double_loop() {
        let cfg = random_config(11, 4, 5);
        let mapping = CategoryZoneMapping::new(vec![0, 0, 1, 1, 1], 2, BTreeSet::from([0, 2]), BTreeSet::new(), BTreeSet::new()).unwrap();
        let (mut green, mut total) = (0.0, 0.0);
        for i in 0..4 {
            for j in 0..4 {
                for c in 0..5 {
                    total += cfg.counts[[i, j, c]];
                    if c == 0 || c == 2 {
                        green += cfg.counts[[i, j, c]];
                    }
                }
            }
        }
        assert!((green_rate(&cfg, &mapping).unwrap() - green / total).abs() < 1e-15);
    }

    #[test]
    fn poi_distribution_examples() {
        let grid = GridSpec::square(4).unwrap();
        let mut point = LandUseConfiguration::<f64>::zeros(grid.clone(), names(4));
        point.counts[[3, 0, 2]] = 1.0;
        assert_eq!(poi_distribution(&point).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);

        let equal = LandUseConfiguration::new(grid, Array3::from_elem((4, 4, 5), 3.0f64), names(5)).unwrap();
        for p in poi_distribution(&equal).unwrap() {
            assert!((p - 0.2).abs() < 1e-15);
        }

        let cfg = random_config(5, 4, 6);
        let total: f64 = cfg.counts.iter().sum();
        let dist = poi_distribution(&cfg).unwrap();
        for c in 0..6 {
            let mut s = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    s += cfg.counts[[i, j, c]];
                }
            }
            assert!((dist[c] - s / total).abs() < 1e-15);
        }
    }

    #[test]
    fn dominant_zone_examples() {
        let mapping = CategoryZoneMapping::banded(10, 5).unwrap();
        let mut cfg = LandUseConfiguration::<f64>::zeros(GridSpec::square(4).unwrap(), names(10));
        cfg.counts[[0, 0, 2]] = 4.0;
        cfg.counts[[0, 0, 3]] = 1.0;
        cfg.counts[[0, 0, 9]] = 3.0;
        let map = dominant_zone_map(&cfg, &mapping).unwrap();
        assert_eq!(map.labels[[0, 0]], 1);
        assert_eq!(map.labels[[1, 1]], 0);
    }

    #[test]
    fn dominant_zone_matches_exhaustive_argmax() {
        let mapping = CategoryZoneMapping::banded(10, 5).unwrap();
        let cfg = random_config(21, 6, 10);
        let map = dominant_zone_map(&cfg, &mapping).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let masses: Vec<f64> = (0..5)
                    .map(|z| (0..10).filter(|c| c / 2 == z).map(|c| cfg.counts[[i, j, c]]).sum())
                    .collect();
                let best = masses.iter().cloned().fold(f64::MIN, f64::max);
                let expected = masses.iter().position(|&m| m == best).unwrap();
                assert_eq!(map.labels[[i, j]], expected);
            }
        }
    }

    #[test]
    fn half_open_cells() {
        let grid = GridSpec::square(4).unwrap();
        assert_eq!(grid.cell_of(250.0, 0.0), Some((0, 1)));
        assert_eq!(grid.cell_of(249.999, 0.0), Some((0, 0)));
        assert_eq!(grid.cell_of(1000.0, 10.0), None);
        assert_eq!(grid.cell_of(-0.001, 10.0), None);
    }

    #[test]
    fn instruction_merge_overrides_slots() {
        let base = Instruction::single(Attribute::GreenRate, 1, 5).unwrap();
        let update = Instruction::new(
            BTreeMap::from([(Attribute::GreenRate, 4), (Attribute::CommercialDensity, 0)]),
            5,
        )
        .unwrap();
        let merged = base.merged(&update);
        assert_eq!(merged.level(Attribute::GreenRate), Some(4));
        assert_eq!(merged.level(Attribute::CommercialDensity), Some(0));
        assert!(matches!(
            Instruction::single(Attribute::GreenRate, 5, 5),
            Err(Error::LevelOutOfRange { level: 5, levels: 5 })
        ));
    }

    #[test]
    fn configuration_json_uses_nested_arrays() {
        let cfg = random_config(2, 2, 3);
        let json = serde_json::to_value(&cfg).unwrap();
        assert_eq!(json["counts"].as_array().unwrap().len(), 2);
        assert_eq!(json["counts"][0][0].as_array().unwrap().len(), 3);
        let back: LandUseConfiguration<f64> = serde_json::from_value(json).unwrap();
        assert_eq!(back, cfg);
    }

    proptest! {
        #[test]
        fn shares_are_scale_invariant(seed in 0u64..1000, factor in 1u32..50) {
            let cfg = random_config(seed, 3, 10);
            prop_assume!(cfg.total() > 0.0);
            let mapping = CategoryZoneMapping::banded(10, 5).unwrap();
            let scaled = cfg.scaled(factor as f64);
            let g = green_rate(&cfg, &mapping).unwrap();
            prop_assert!((0.0..=1.0).contains(&g));
            prop_assert!((g - green_rate(&scaled, &mapping).unwrap()).abs() < 1e-12);
            let p = poi_distribution(&cfg).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (a, b) in p.iter().zip(poi_distribution(&scaled).unwrap()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn dominant_zone_is_permutation_equivariant(seed in 0u64..1000, perm_seed in 0u64..100) {
            let cfg = random_config(seed, 4, 10);
            let mapping = CategoryZoneMapping::banded(10, 5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            let mut perm: Vec<usize> = (0..5).collect();
            rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
            let mut permuted = mapping.clone();
            permuted.category_to_zone = mapping.category_to_zone.iter().map(|&z| perm[z]).collect();
            let base = dominant_zone_map(&cfg, &mapping).unwrap();
            let moved = dominant_zone_map(&cfg, &permuted).unwrap();
            for ((i, j), &l) in base.labels.indexed_iter() {
                // Ties can reorder under relabeling; compare only strict winners.
                let masses: Vec<f64> = (0..5)
                    .map(|z| (0..10).filter(|&c| mapping.category_to_zone[c] == z).map(|c| cfg.counts[[i, j, c]]).sum())
                    .collect();
                let strict = masses.iter().filter(|&&m| m == masses[l]).count() == 1;
                if strict {
                    prop_assert_eq!(moved.labels[[i, j]], perm[l]);
                }
            }
        }
    }
}
