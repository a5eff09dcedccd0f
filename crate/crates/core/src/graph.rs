//! Areal units, adjacency structure, border-crossing distances and spatial
//! mixing weights.
//!
//! Distances count the number of borders crossed along the shortest adjacency
//! path. Regions without any neighbor are permitted and behave as independent
//! epidemics (their close set is just themselves); beyond that, every region
//! that has at least one edge must belong to a single connected component.

use std::collections::{HashMap, VecDeque};

use crate::error::{Error, Result};

/// A region to register in the graph.
#[derive(Debug, Clone)]
pub struct RegionSpec {
    pub id: String,
    /// Base population at time zero, persons. Must be positive.
    pub population: f64,
    /// New adult entrants, persons per year. Must be nonnegative.
    pub entrants_per_year: f64,
}

/// Immutable areal adjacency graph. Regions are ordered by id; all indexed
/// accessors use that ordering.
#[derive(Debug, Clone)]
pub struct RegionGraph {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    neighbors: Vec<Vec<usize>>,
    population: Vec<f64>,
    entrants_per_year: Vec<f64>,
}

impl RegionGraph {
    /// Build a graph from region specs and undirected edges.
    ///
    /// Rejects duplicate region ids, self edges, edges naming unregistered
    /// regions, nonpositive populations and graphs whose edged part is not a
    /// single connected component.
    pub fn build(regions: &[RegionSpec], edges: &[(String, String)]) -> Result<Self> {
        let mut sorted: Vec<&RegionSpec> = regions.iter().collect();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        for w in sorted.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::DuplicateRegion(w[0].id.clone()));
            }
        }

        let ids: Vec<String> = sorted.iter().map(|r| r.id.clone()).collect();
        let index: HashMap<String, usize> =
            ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();

        let mut population = Vec::with_capacity(ids.len());
        let mut entrants = Vec::with_capacity(ids.len());
        for r in &sorted {
            if !(r.population > 0.0) {
                return Err(Error::NonPositivePopulation(r.id.clone(), r.population));
            }
            if !(r.entrants_per_year >= 0.0) {
                return Err(Error::NegativeEntrants(r.id.clone(), r.entrants_per_year));
            }
            population.push(r.population);
            entrants.push(r.entrants_per_year);
        }

        let mut adj = vec![std::collections::BTreeSet::new(); ids.len()];
        for (a, b) in edges {
            let ia = *index.get(a).ok_or_else(|| Error::UnknownRegion(a.clone()))?;
            let ib = *index.get(b).ok_or_else(|| Error::UnknownRegion(b.clone()))?;
            if ia == ib {
                return Err(Error::SelfEdge(a.clone()));
            }
            adj[ia].insert(ib);
            adj[ib].insert(ia);
        }
        let neighbors: Vec<Vec<usize>> = adj.into_iter().map(|s| s.into_iter().collect()).collect();

        let graph = RegionGraph {
            ids,
            index,
            neighbors,
            population,
            entrants_per_year: entrants,
        };
        graph.check_connected()?;
        Ok(graph)
    }

    /// Regions with at least one edge must form one connected component.
    fn check_connected(&self) -> Result<()> {
        let edged: Vec<usize> = (0..self.len())
            .filter(|&r| !self.neighbors[r].is_empty())
            .collect();
        let Some(&start) = edged.first() else {
            return Ok(());
        };
        let mut seen = vec![false; self.len()];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(r) = queue.pop_front() {
            for &j in &self.neighbors[r] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        for &r in &edged {
            if !seen[r] {
                return Err(Error::Disconnected(
                    self.ids[start].clone(),
                    self.ids[r].clone(),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, r: usize) -> &str {
        &self.ids[r]
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownRegion(id.to_string()))
    }

    pub fn neighbors(&self, r: usize) -> &[usize] {
        &self.neighbors[r]
    }

    pub fn population(&self, r: usize) -> f64 {
        self.population[r]
    }

    pub fn entrants_per_year(&self, r: usize) -> f64 {
        self.entrants_per_year[r]
    }

    /// Breadth-first distances from `r`; `None` where unreachable.
    fn bfs(&self, r: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.len()];
        dist[r] = Some(0);
        let mut queue = VecDeque::from([r]);
        while let Some(v) = queue.pop_front() {
            let dv = dist[v].unwrap();
            for &j in &self.neighbors[v] {
                if dist[j].is_none() {
                    dist[j] = Some(dv + 1);
                    queue.push_back(j);
                }
            }
        }
        dist
    }

    /// Number of borders crossed on the shortest path from `r` to `j`.
    /// Zero iff `r == j`.
    pub fn crossing_distance(&self, r: usize, j: usize) -> Result<usize> {
        if r == j {
            return Ok(0);
        }
        self.bfs(r)[j].ok_or_else(|| Error::NoPath(self.ids[r].clone(), self.ids[j].clone()))
    }

    pub fn crossing_distance_by_id(&self, a: &str, b: &str) -> Result<usize> {
        self.crossing_distance(self.index_of(a)?, self.index_of(b)?)
    }

    /// All regions within `degree` border crossings of `r`, always containing
    /// `r` itself. Sorted by region index.
    pub fn close_set(&self, r: usize, degree: usize) -> Vec<usize> {
        self.bfs(r)
            .iter()
            .enumerate()
            .filter_map(|(j, d)| match d {
                Some(d) if *d <= degree => Some(j),
                _ => None,
            })
            .collect()
    }

    pub fn close_set_by_id(&self, id: &str, degree: usize) -> Result<Vec<usize>> {
        Ok(self.close_set(self.index_of(id)?, degree))
    }

    /// Close set of `r` paired with crossing distances, sorted by region
    /// index. The pair `(r, 0)` is always present.
    pub fn close_set_with_distances(&self, r: usize, degree: usize) -> Vec<(usize, usize)> {
        self.bfs(r)
            .iter()
            .enumerate()
            .filter_map(|(j, d)| match d {
                Some(d) if *d <= degree => Some((j, *d)),
                _ => None,
            })
            .collect()
    }

    /// Largest finite crossing distance in the graph.
    pub fn diameter(&self) -> usize {
        (0..self.len())
            .flat_map(|r| self.bfs(r).into_iter().flatten())
            .max()
            .unwrap_or(0)
    }
}

/// Fixed spatial mixing weights over each region and its direct neighbors.
///
/// The self weight is `w0`; the remaining `1 - w0` is split across direct
/// neighbors proportionally to their share of base population among those
/// neighbors, so each row sums to one. A region without neighbors carries
/// weight one on itself.
#[derive(Debug, Clone)]
pub struct NeighborhoodWeights {
    rows: Vec<Vec<(usize, f64)>>,
}

impl NeighborhoodWeights {
    /// `(region index, weight)` pairs for region `r`; the self weight comes
    /// first.
    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.rows[r]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn mixing_weights(g: &RegionGraph, w0: f64) -> Result<NeighborhoodWeights> {
    if !(0.0..=1.0).contains(&w0) {
        return Err(Error::InvalidMixingWeight(w0));
    }
    let mut rows = Vec::with_capacity(g.len());
    for r in 0..g.len() {
        let nbrs = g.neighbors(r);
        if nbrs.is_empty() {
            rows.push(vec![(r, 1.0)]);
            continue;
        }
        let total: f64 = nbrs.iter().map(|&j| g.population(j)).sum();
        let mut row = Vec::with_capacity(nbrs.len() + 1);
        row.push((r, w0));
        for &j in nbrs {
            row.push((j, (1.0 - w0) * g.population(j) / total));
        }
        rows.push(row);
    }
    Ok(NeighborhoodWeights { rows })
}
