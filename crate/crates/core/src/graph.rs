//! Undirected graphs and exact-distance neighborhood operators.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

use bincode::Options;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, io_err, Error, Result};
use crate::sparse::CsrMatrix;

/// Undirected simple graph with node features and (possibly partial) labels.
///
/// Edges are stored once per unordered pair as `(u, v)` with `u < v`, sorted.
/// A node whose label is `None` carries no class in the source distribution;
/// it takes part in propagation but is never sampled into a split.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: CsrMatrix,
    labels: Vec<Option<usize>>,
    n_classes: usize,
}

impl Graph {
    /// `edges` may contain both orientations of a pair and repeats; they are
    /// folded into unordered pairs. Self-loops are rejected.
    pub fn new(
        n_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: CsrMatrix,
        labels: Vec<Option<usize>>,
        n_classes: usize,
    ) -> Result<Self> {
        let mut pairs = Vec::new();
        for (u, v) in edges {
            if u >= n_nodes || v >= n_nodes {
                return Err(contract(format!("edge ({u}, {v}) outside {n_nodes} nodes")));
            }
            if u == v {
                return Err(contract(format!("self-loop at node {u}")));
            }
            pairs.push((u.min(v), u.max(v)));
        }
        pairs.sort_unstable();
        pairs.dedup();
        if features.n_rows() != n_nodes {
            return Err(contract(format!(
                "feature matrix has {} rows for {n_nodes} nodes",
                features.n_rows()
            )));
        }
        if labels.len() != n_nodes {
            return Err(contract(format!("{} labels for {n_nodes} nodes", labels.len())));
        }
        if let Some((v, c)) = labels
            .iter()
            .enumerate()
            .find_map(|(v, l)| l.filter(|&c| c >= n_classes).map(|c| (v, c)))
        {
            return Err(contract(format!("node {v} has label {c} >= {n_classes}")));
        }
        Ok(Graph {
            n_nodes,
            edges: pairs,
            features,
            labels,
            n_classes,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Unordered pairs `(u, v)`, `u < v`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn features(&self) -> &CsrMatrix {
        &self.features
    }

    pub fn n_features(&self) -> usize {
        self.features.n_cols()
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn with_features(self, features: CsrMatrix) -> Result<Self> {
        if features.n_rows() != self.n_nodes {
            return Err(contract("feature row count changed"));
        }
        Ok(Graph { features, ..self })
    }

    /// Binary symmetric adjacency without self-loops.
    pub fn adjacency(&self) -> CsrMatrix {
        let mut rows = vec![Vec::new(); self.n_nodes];
        for &(u, v) in &self.edges {
            rows[u].push(v);
            rows[v].push(u);
        }
        rows.iter_mut().for_each(|r| r.sort_unstable());
        CsrMatrix::from_sorted_rows(self.n_nodes, &rows, 1.0)
    }

    /// Relabel nodes: node `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.n_nodes;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(contract("not a permutation of the node set"));
        }
        let mut trip = Vec::with_capacity(self.features.nnz());
        for (r, &to) in perm.iter().enumerate() {
            let (cols, vals) = self.features.row(r);
            trip.extend(cols.iter().zip(vals).map(|(&c, &v)| (to, c, v)));
        }
        let features = CsrMatrix::from_triplets(n, self.features.n_cols(), trip)?;
        let mut labels = vec![None; n];
        for (v, &l) in self.labels.iter().enumerate() {
            labels[perm[v]] = l;
        }
        Graph::new(
            n,
            self.edges.iter().map(|&(u, v)| (perm[u], perm[v])),
            features,
            labels,
            self.n_classes,
        )
    }
}

/// Row-normalize a nonnegative feature matrix (bag-of-words counts become
/// frequencies). Empty rows stay empty.
pub fn normalize_features(x: &CsrMatrix) -> Result<CsrMatrix> {
    x.row_normalize()
}

/// Exact-distance operators `[Ā_0, Ā_1, …, Ā_n]`.
///
/// `Ā_0` is the identity. For `i ≥ 1`, `Ā_i` stores `(a, b)` iff the
/// shortest-path distance between `a` and `b` is exactly `i`, with each
/// nonempty row normalized to sum 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopStack {
    mats: Vec<CsrMatrix>,
}

impl HopStack {
    pub fn order(&self) -> usize {
        self.mats.len() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.mats[0].n_rows()
    }

    pub fn mats(&self) -> &[CsrMatrix] {
        &self.mats
    }

    pub fn hop(&self, i: usize) -> &CsrMatrix {
        &self.mats[i]
    }

    /// Total stored entries over all hops.
    pub fn nnz(&self) -> usize {
        self.mats.iter().map(CsrMatrix::nnz).sum()
    }

    /// The first `order + 1` operators; a lower-order stack of the same graph.
    pub fn truncated(&self, order: usize) -> Result<HopStack> {
        if order == 0 || order > self.order() {
            return Err(contract(format!("cannot truncate order {} to {order}", self.order())));
        }
        Ok(HopStack {
            mats: self.mats[..=order].to_vec(),
        })
    }
}

/// Breadth-first rings around `source` up to `depth`; `rings[i-1]` holds the
/// nodes at distance exactly `i`, sorted.
fn bfs_rings(
    adj: &CsrMatrix,
    source: usize,
    depth: usize,
    mark: &mut [u32],
    stamp: u32,
) -> Vec<Vec<usize>> {
    mark[source] = stamp;
    let mut rings: Vec<Vec<usize>> = Vec::with_capacity(depth);
    let mut frontier = vec![source];
    for _ in 0..depth {
        let mut next = Vec::new();
        for &u in &frontier {
            for &w in adj.row(u).0 {
                if mark[w] != stamp {
                    mark[w] = stamp;
                    next.push(w);
                }
            }
        }
        next.sort_unstable();
        frontier = next.clone();
        rings.push(next);
        if frontier.is_empty() {
            rings.resize(depth, Vec::new());
            break;
        }
    }
    rings
}

/// Build `[Ā_0 … Ā_n]` by depth-limited BFS from every node.
pub fn khop_stack(g: &Graph, order: usize) -> Result<HopStack> {
    if order == 0 {
        return Err(contract("hop order must be at least 1"));
    }
    let n = g.n_nodes();
    let adj = g.adjacency();
    const CHUNK: usize = 256;
    // rows[source][i-1] = sorted nodes at distance i
    let rows: Vec<Vec<Vec<usize>>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .flat_map_iter(|sources| {
            let mut mark = vec![0u32; n];
            sources
                .iter()
                .enumerate()
                .map(|(k, &s)| bfs_rings(&adj, s, order, &mut mark, k as u32 + 1))
                .collect::<Vec<_>>()
        })
        .collect();
    let mut mats = Vec::with_capacity(order + 1);
    mats.push(CsrMatrix::identity(n));
    for hop in 0..order {
        let pattern: Vec<Vec<usize>> = rows.iter().map(|r| r[hop].clone()).collect();
        mats.push(CsrMatrix::from_sorted_rows(n, &pattern, 1.0).row_normalize()?);
    }
    Ok(HopStack { mats })
}

const CACHE_MAGIC: &str = "hopconv-hopstack-v1";

#[derive(Serialize, Deserialize)]
struct CacheFile {
    magic: String,
    dataset: String,
    order: usize,
    stack: HopStack,
}

/// On-disk cache of hop stacks keyed by `(dataset, order)`.
#[derive(Debug, Clone)]
pub struct HopCache {
    dir: PathBuf,
}

impl HopCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        HopCache { dir: dir.into() }
    }

    pub fn path_for(&self, dataset: &str, order: usize) -> PathBuf {
        self.dir.join(format!("{dataset}.hops{order}.bin"))
    }

    pub fn store(&self, dataset: &str, stack: &HopStack) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        let path = self.path_for(dataset, stack.order());
        let file = File::create(&path).map_err(io_err(&path))?;
        let record = CacheFile {
            magic: CACHE_MAGIC.to_string(),
            dataset: dataset.to_string(),
            order: stack.order(),
            stack: stack.clone(),
        };
        bincode::serialize_into(BufWriter::new(file), &record)
            .map_err(|e| Error::Cache(format!("{}: {e}", path.display())))
    }

    /// `Ok(None)` when nothing is cached for the key.
    pub fn load(&self, dataset: &str, order: usize) -> Result<Option<HopStack>> {
        let path = self.path_for(dataset, order);
        if !path.exists() {
            return Ok(None);
        }
        let file = File::open(&path).map_err(io_err(&path))?;
        let len = file.metadata().map_err(io_err(&path))?.len();
        // Bounding reads by the file size stops a corrupt length prefix from
        // requesting an absurd allocation.
        let record: CacheFile = bincode::DefaultOptions::new()
            .with_fixint_encoding()
            .allow_trailing_bytes()
            .with_limit(len)
            .deserialize_from(BufReader::new(file))
            .map_err(|e| Error::Cache(format!("{}: {e}", path.display())))?;
        let n = record.stack.mats.first().map_or(0, CsrMatrix::n_rows);
        let square = record.stack.mats.iter().all(|m| m.n_rows() == n && m.n_cols() == n);
        if record.magic != CACHE_MAGIC
            || record.dataset != dataset
            || record.order != order
            || record.stack.mats.len() != order + 1
            || !square
        {
            return Err(Error::Cache(format!("{}: key mismatch", path.display())));
        }
        Ok(Some(record.stack))
    }

    /// Load the cached stack, or build and store it.
    pub fn get_or_build(&self, dataset: &str, g: &Graph, order: usize) -> Result<HopStack> {
        if let Some(stack) = self.load(dataset, order)? {
            if stack.n_nodes() == g.n_nodes() {
                return Ok(stack);
            }
            log::warn!("stale hop cache for {dataset}, rebuilding");
        }
        let stack = khop_stack(g, order)?;
        self.store(dataset, &stack)?;
        Ok(stack)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::DenseMatrix;

    pub(crate) fn bare_graph(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::new(
            n,
            edges.iter().copied(),
            CsrMatrix::identity(n),
            vec![Some(0); n],
            1,
        )
        .unwrap()
    }

    #[test]
    fn path_second_hop() {
        let g = bare_graph(3, &[(0, 1), (1, 2)]);
        let s = khop_stack(&g, 2).unwrap();
        let a2 = s.hop(2);
        assert_eq!(a2.nnz(), 2);
        assert_eq!(a2.get(0, 2), 1.0);
        assert_eq!(a2.get(2, 0), 1.0);
        assert_eq!(s.hop(1).get(1, 0), 0.5);
    }

    #[test]
    fn triangle_has_no_second_hop() {
        let g = bare_graph(3, &[(0, 1), (1, 2), (0, 2)]);
        let s = khop_stack(&g, 2).unwrap();
        assert_eq!(s.hop(2).nnz(), 0);
        assert_eq!(s.hop(0), &CsrMatrix::identity(3));
    }

    #[test]
    fn first_hop_matches_adjacency_pattern() {
        let g = bare_graph(5, &[(0, 1), (1, 2), (3, 4), (0, 4)]);
        let s = khop_stack(&g, 1).unwrap();
        assert!(s.hop(1).same_pattern(&g.adjacency()));
    }

    #[test]
    fn disconnected_nodes_have_empty_rows() {
        let g = bare_graph(4, &[(0, 1)]);
        let s = khop_stack(&g, 3).unwrap();
        for i in 1..=3 {
            assert_eq!(s.hop(i).row(2).0.len(), 0);
            assert_eq!(s.hop(i).row(3).0.len(), 0);
        }
    }

    #[test]
    fn order_zero_rejected() {
        let g = bare_graph(2, &[(0, 1)]);
        assert!(khop_stack(&g, 0).is_err());
    }

    #[test]
    fn graph_folds_directions_and_rejects_loops() {
        let g = bare_graph(3, &[(1, 0), (0, 1), (2, 1)]);
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        let bad = Graph::new(2, [(1, 1)], CsrMatrix::identity(2), vec![Some(0); 2], 1);
        assert!(bad.is_err());
        let bad_label = Graph::new(2, [(0, 1)], CsrMatrix::identity(2), vec![Some(0), Some(3)], 2);
        assert!(bad_label.is_err());
    }

    #[test]
    fn normalize_features_cases() {
        let x = CsrMatrix::from_dense(&DenseMatrix::from_rows(&[vec![1.0, 1.0, 2.0], vec![0.0; 3]]));
        let n = normalize_features(&x).unwrap().to_dense();
        assert_eq!(n, DenseMatrix::from_rows(&[vec![0.25, 0.25, 0.5], vec![0.0; 3]]));
        let neg = CsrMatrix::from_triplets(1, 1, vec![(0, 0, -1.0)]).unwrap();
        assert!(normalize_features(&neg).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = HopCache::new(dir.path());
        let g = bare_graph(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)]);
        assert!(cache.load("ring", 3).unwrap().is_none());
        let built = cache.get_or_build("ring", &g, 3).unwrap();
        let loaded = cache.load("ring", 3).unwrap().unwrap();
        assert_eq!(built, loaded);
        assert!(cache.load("ring", 2).unwrap().is_none());
    }
}
