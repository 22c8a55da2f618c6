//! Site orderings, neighborhood stencils and conditioning sets.
//!
//! A *label* is a position in the ordering; `perm[label] = site` and
//! `inv[site] = label`. Conditioning sets live in label space: `sets[j]` lists
//! the earlier labels the `j`-th map component may read.
//!
//! Exact dependency sets come from symbolic elimination of the nearest-neighbor
//! graph in reverse label order: removing the highest label first connects its
//! remaining neighbors pairwise, which is the fill-in caused by marginalizing
//! the variables that come after `j`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::LatticeGeometry;

/// A bijection between sites and labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ordering {
    perm: Vec<usize>,
    inv: Vec<usize>,
}

impl Ordering {
    /// Builds an ordering from `perm[label] = site`.
    pub fn from_perm(perm: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        let mut inv = vec![usize::MAX; n];
        for (label, &site) in perm.iter().enumerate() {
            if site >= n || inv[site] != usize::MAX {
                return Err(Error::InvalidGeometry(format!(
                    "ordering is not a permutation (site {site} at label {label})"
                )));
            }
            inv[site] = label;
        }
        Ok(Self { perm, inv })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
            inv: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Site carrying `label`.
    pub fn site(&self, label: usize) -> usize {
        self.perm[label]
    }

    /// Label of `site`.
    pub fn label(&self, site: usize) -> usize {
        self.inv[site]
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inv(&self) -> &[usize] {
        &self.inv
    }

    /// Reorders a site-indexed slice into label order.
    pub fn to_labels<T: Copy>(&self, by_site: &[T], out: &mut [T]) {
        for (o, &s) in out.iter_mut().zip(&self.perm) {
            *o = by_site[s];
        }
    }

    /// Reorders a label-indexed slice into site order.
    pub fn to_sites<T: Copy>(&self, by_label: &[T], out: &mut [T]) {
        for (&v, &s) in by_label.iter().zip(&self.perm) {
            out[s] = v;
        }
    }
}

/// Named ordering strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderingKind {
    Lexicographic,
    Checkerboard,
    Maxmin,
}

impl OrderingKind {
    pub const ALL: [OrderingKind; 3] = [
        OrderingKind::Lexicographic,
        OrderingKind::Checkerboard,
        OrderingKind::Maxmin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OrderingKind::Lexicographic => "lexicographic",
            OrderingKind::Checkerboard => "checkerboard",
            OrderingKind::Maxmin => "maxmin",
        }
    }

    /// Builds the ordering; max-min starts from site 0.
    pub fn build(self, geom: &LatticeGeometry) -> Result<Ordering> {
        match self {
            OrderingKind::Lexicographic => Ok(lexicographic_ordering(geom)),
            OrderingKind::Checkerboard => checkerboard_ordering(geom),
            OrderingKind::Maxmin => maxmin_ordering(geom, 0),
        }
    }
}

impl fmt::Display for OrderingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OrderingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lexicographic" | "lex" => Ok(OrderingKind::Lexicographic),
            "checkerboard" | "cb" => Ok(OrderingKind::Checkerboard),
            "maxmin" | "max-min" => Ok(OrderingKind::Maxmin),
            _ => Err(Error::UnknownName {
                kind: "ordering",
                name: s.to_string(),
            }),
        }
    }
}

/// Row-by-row ordering: label `k` is site `k`.
pub fn lexicographic_ordering(geom: &LatticeGeometry) -> Ordering {
    Ordering::identity(geom.n_sites())
}

/// Even-parity sites first, then odd-parity sites, each in row-major order.
pub fn checkerboard_ordering(geom: &LatticeGeometry) -> Result<Ordering> {
    if !geom.extent().is_multiple_of(2) {
        return Err(Error::OddExtent(geom.extent()));
    }
    let parity = |s: usize| geom.coords(s).iter().sum::<usize>() % 2;
    let n = geom.n_sites();
    let perm = (0..n)
        .filter(|&s| parity(s) == 0)
        .chain((0..n).filter(|&s| parity(s) == 1))
        .collect();
    Ordering::from_perm(perm)
}

/// Greedy max-min distance ordering under the periodic squared Euclidean metric.
///
/// Ties go to the smallest site index.
pub fn maxmin_ordering(geom: &LatticeGeometry, start_site: usize) -> Result<Ordering> {
    let n = geom.n_sites();
    if start_site >= n {
        return Err(Error::InvalidGeometry(format!(
            "start site {start_site} outside lattice of {n} sites"
        )));
    }
    let coords: Vec<Vec<usize>> = (0..n).map(|s| geom.coords(s)).collect();
    let l = geom.extent();
    let dist = |a: usize, b: usize| -> usize {
        coords[a]
            .iter()
            .zip(&coords[b])
            .map(|(&x, &y)| {
                let d = x.abs_diff(y);
                let d = d.min(l - d);
                d * d
            })
            .sum()
    };
    let mut chosen = vec![false; n];
    let mut min_dist = vec![usize::MAX; n];
    let mut perm = Vec::with_capacity(n);
    let mut current = start_site;
    loop {
        chosen[current] = true;
        perm.push(current);
        if perm.len() == n {
            break;
        }
        let mut best: Option<(usize, usize)> = None;
        for s in 0..n {
            if chosen[s] {
                continue;
            }
            min_dist[s] = min_dist[s].min(dist(s, current));
            if best.is_none_or(|(_, d)| min_dist[s] > d) {
                best = Some((s, min_dist[s]));
            }
        }
        current = best.expect("unchosen site remains").0;
    }
    Ordering::from_perm(perm)
}

/// Cumulative neighborhood stencil: 1 = nearest neighbors, 2 = adds
/// diagonals, 3 = adds knight moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct NeighborhoodSpec(u8);

impl NeighborhoodSpec {
    pub const NEAREST: NeighborhoodSpec = NeighborhoodSpec(1);

    pub fn new(order: u8) -> Result<Self> {
        if (1..=3).contains(&order) {
            Ok(Self(order))
        } else {
            Err(Error::InvalidGeometry(format!(
                "neighborhood order must be 1, 2 or 3, got {order}"
            )))
        }
    }

    pub fn order(self) -> u8 {
        self.0
    }

    /// Stencil offsets in `dim` dimensions.
    pub fn offsets(self, dim: usize) -> Vec<Vec<isize>> {
        let mut out = Vec::new();
        for mu in 0..dim {
            for s in [1, -1] {
                let mut o = vec![0; dim];
                o[mu] = s;
                out.push(o);
            }
        }
        if self.0 >= 2 {
            for a in 0..dim {
                for b in a + 1..dim {
                    for (sa, sb) in [(1, 1), (1, -1), (-1, 1), (-1, -1)] {
                        let mut o = vec![0; dim];
                        o[a] = sa;
                        o[b] = sb;
                        out.push(o);
                    }
                }
            }
        }
        if self.0 >= 3 {
            for a in 0..dim {
                for b in a + 1..dim {
                    for (ma, mb) in [(1, 2), (2, 1)] {
                        for (sa, sb) in [(1, 1), (1, -1), (-1, 1), (-1, -1)] {
                            let mut o = vec![0; dim];
                            o[a] = sa * ma;
                            o[b] = sb * mb;
                            out.push(o);
                        }
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u8> for NeighborhoodSpec {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<NeighborhoodSpec> for u8 {
    fn from(v: NeighborhoodSpec) -> u8 {
        v.0
    }
}

/// Stencil neighbors of `site`, sorted, without duplicates or `site` itself.
pub fn neighborhood(site: usize, spec: NeighborhoodSpec, geom: &LatticeGeometry) -> Vec<usize> {
    let mut out: Vec<usize> = spec
        .offsets(geom.dim())
        .iter()
        .map(|o| geom.shifted(site, o))
        .filter(|&s| s != site)
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Per-label lists of earlier labels a component conditions on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditioningSets {
    sets: Vec<Vec<usize>>,
}

impl ConditioningSets {
    pub fn new(sets: Vec<Vec<usize>>) -> Result<Self> {
        for (j, set) in sets.iter().enumerate() {
            if set.iter().any(|&k| k >= j) || set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidGeometry(format!(
                    "conditioning set of label {j} must be strictly increasing and below {j}"
                )));
            }
        }
        Ok(Self { sets })
    }

    /// `C(j) = {0, …, j−1}` for every label.
    pub fn dense(n: usize) -> Self {
        Self {
            sets: (0..n).map(|j| (0..j).collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn get(&self, label: usize) -> &[usize] {
        &self.sets[label]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.sets.iter().map(Vec::as_slice)
    }

    pub fn total_size(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    pub fn average_size(&self) -> f64 {
        self.total_size() as f64 / self.sets.len() as f64
    }

    /// Groups labels into waves: every label's conditioning set lies in earlier waves.
    pub fn waves(&self) -> Vec<Vec<usize>> {
        let mut depth = vec![0usize; self.sets.len()];
        let mut waves: Vec<Vec<usize>> = Vec::new();
        for (j, set) in self.sets.iter().enumerate() {
            let d = set.iter().map(|&k| depth[k] + 1).max().unwrap_or(0);
            depth[j] = d;
            if waves.len() <= d {
                waves.resize_with(d + 1, Vec::new);
            }
            waves[d].push(j);
        }
        waves
    }
}

/// Past stencil neighbors of each label: `C(j) = N(j) ∩ {0, …, j−1}`.
pub fn conditioning_sets(ordering: &Ordering, spec: NeighborhoodSpec, geom: &LatticeGeometry) -> ConditioningSets {
    let sets = (0..ordering.len())
        .map(|j| {
            let mut past: Vec<usize> = neighborhood(ordering.site(j), spec, geom)
                .into_iter()
                .map(|s| ordering.label(s))
                .filter(|&k| k < j)
                .collect();
            past.sort_unstable();
            past
        })
        .collect();
    ConditioningSets { sets }
}

/// Exact dependency sets of the lattice's nearest-neighbor graph under `ordering`.
pub fn exact_dependency_sets(ordering: &Ordering, geom: &LatticeGeometry) -> ConditioningSets {
    let n = geom.n_sites();
    let mut edges = Vec::with_capacity(geom.dim() * n);
    for s in 0..n {
        for mu in 0..geom.dim() {
            let t = geom.forward(s, mu);
            if t != s {
                edges.push((ordering.label(s), ordering.label(t)));
            }
        }
    }
    eliminate(n, &edges)
}

/// Symbolic elimination on an undirected graph whose vertices are already labels.
///
/// Vertices are removed from the highest label down; each removal makes its
/// remaining lower-labeled neighbors a clique. The returned set of `j` is its
/// neighborhood among lower labels at the moment it is removed.
pub fn eliminate(n: usize, edges: &[(usize, usize)]) -> ConditioningSets {
    let words = n.div_ceil(64);
    let mut adj = vec![0u64; n * words];
    let set = |adj: &mut [u64], a: usize, b: usize| adj[a * words + b / 64] |= 1 << (b % 64);
    for &(a, b) in edges {
        if a != b {
            set(&mut adj, a, b);
            set(&mut adj, b, a);
        }
    }
    let mut sets = vec![Vec::new(); n];
    for j in (0..n).rev() {
        let lower: Vec<usize> = (0..j)
            .filter(|&k| adj[j * words + k / 64] >> (k % 64) & 1 == 1)
            .collect();
        for &a in &lower {
            for &b in &lower {
                if a != b {
                    set(&mut adj, a, b);
                }
            }
        }
        sets[j] = lower;
    }
    ConditioningSets { sets }
}

/// One row of a fill-in table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FillInRow {
    pub ordering: String,
    #[serde(rename = "L")]
    pub extent: usize,
    pub avg_sparse: f64,
    pub avg_exact: f64,
    pub fill_ratio: f64,
}

pub const FILL_IN_CSV_HEADER: &str = "ordering,L,avg_sparse,avg_exact,fill_ratio";

impl FillInRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.ordering, self.extent, self.avg_sparse, self.avg_exact, self.fill_ratio
        )
    }
}

/// Sparse (order-1) versus exact conditioning sizes for each ordering and extent.
pub fn fill_in_stats(orderings: &[OrderingKind], sizes: &[usize]) -> Result<Vec<FillInRow>> {
    let mut rows = Vec::with_capacity(orderings.len() * sizes.len());
    for &kind in orderings {
        for &l in sizes {
            if l < 3 {
                return Err(Error::InvalidGeometry(format!(
                    "fill-in analysis needs L >= 3, got {l}"
                )));
            }
            let geom = LatticeGeometry::square(l)?;
            let ordering = kind.build(&geom)?;
            let sparse = conditioning_sets(&ordering, NeighborhoodSpec::NEAREST, &geom);
            let exact = exact_dependency_sets(&ordering, &geom);
            let n = geom.n_sites() as f64;
            rows.push(FillInRow {
                ordering: kind.name().to_string(),
                extent: l,
                avg_sparse: sparse.average_size(),
                avg_exact: exact.average_size(),
                fill_ratio: (exact.total_size() as f64 - sparse.total_size() as f64) / (n * n),
            });
        }
    }
    Ok(rows)
}

/// Renders rows as CSV with a header line.
pub fn fill_in_csv(rows: &[FillInRow]) -> String {
    let mut out = String::from(FILL_IN_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}
