//! Dataset files, stratified splits and random benchmark graphs.
//!
//! A dataset lives in its own directory with four header-less, tab-separated
//! UTF-8 files using zero-based node ids:
//!
//! | file           | line format              |
//! |----------------|--------------------------|
//! | `meta.tsv`     | `key<TAB>value` (`nodes`, `features`, `classes`) |
//! | `edges.tsv`    | `u<TAB>v`                |
//! | `features.tsv` | `node<TAB>feature<TAB>value` |
//! | `labels.tsv`   | `node<TAB>class`         |
//!
//! Edge direction is ignored; repeated pairs are folded and self-loops
//! dropped. Nodes missing from `labels.tsv` are unlabeled.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{contract, io_err, Error, Result};
use crate::graph::Graph;
use crate::rng::Prng;
use crate::sparse::CsrMatrix;

/// Environment variable naming the dataset root directory.
pub const DATA_ENV: &str = "HOPCONV_DATA";

/// `$HOPCONV_DATA`, or `data` under the current directory.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Summary counts of a loaded dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetStats {
    pub nodes: usize,
    /// Distinct unordered node pairs after symmetrization.
    pub edges: usize,
    /// Lines in `edges.tsv`, as distributed.
    pub raw_edge_lines: usize,
    pub self_loops_dropped: usize,
    pub classes: usize,
    pub features: usize,
    pub labeled_nodes: usize,
}

struct LineReader<'a> {
    path: &'a Path,
}

impl LineReader<'_> {
    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    /// Tab-split fields of each nonempty line, with 1-based line numbers.
    fn records(&self) -> Result<Vec<(usize, Vec<String>)>> {
        let text = fs::read_to_string(self.path).map_err(io_err(self.path))?;
        Ok(text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (i + 1, l.split('\t').map(|f| f.trim().to_string()).collect()))
            .collect())
    }

    fn fields<'f>(&self, line: usize, rec: &'f [String], n: usize) -> Result<&'f [String]> {
        if rec.len() != n {
            return Err(self.err(line, format!("expected {n} fields, found {}", rec.len())));
        }
        Ok(rec)
    }

    fn index(&self, line: usize, field: &str, what: &str, bound: usize) -> Result<usize> {
        let v: usize = field
            .parse()
            .map_err(|_| self.err(line, format!("bad {what} '{field}'")))?;
        if v >= bound {
            return Err(self.err(line, format!("{what} {v} out of range (< {bound})")));
        }
        Ok(v)
    }
}

/// Load `root/name/`.
pub fn load_dataset(name: &str, root: &Path) -> Result<(Graph, DatasetStats)> {
    let dir = root.join(name);

    let meta_path = dir.join("meta.tsv");
    let meta_reader = LineReader { path: &meta_path };
    let mut meta = HashMap::new();
    for (line, rec) in meta_reader.records()? {
        let rec = meta_reader.fields(line, &rec, 2)?;
        let value: usize = rec[1]
            .parse()
            .map_err(|_| meta_reader.err(line, format!("bad count '{}'", rec[1])))?;
        meta.insert(rec[0].clone(), value);
    }
    let need = |key: &str| {
        meta.get(key)
            .copied()
            .ok_or_else(|| meta_reader.err(0, format!("missing key '{key}'")))
    };
    let (n_nodes, n_features, n_classes) = (need("nodes")?, need("features")?, need("classes")?);

    let edges_path = dir.join("edges.tsv");
    let er = LineReader { path: &edges_path };
    let records = er.records()?;
    let raw_edge_lines = records.len();
    let mut edges = Vec::with_capacity(raw_edge_lines);
    let mut self_loops = 0;
    for (line, rec) in records {
        let rec = er.fields(line, &rec, 2)?;
        let u = er.index(line, &rec[0], "node id", n_nodes)?;
        let v = er.index(line, &rec[1], "node id", n_nodes)?;
        if u == v {
            self_loops += 1;
        } else {
            edges.push((u, v));
        }
    }

    let feat_path = dir.join("features.tsv");
    let fr = LineReader { path: &feat_path };
    let mut triplets = Vec::new();
    for (line, rec) in fr.records()? {
        let rec = fr.fields(line, &rec, 3)?;
        let r = fr.index(line, &rec[0], "node id", n_nodes)?;
        let c = fr.index(line, &rec[1], "feature index", n_features)?;
        let v: f64 = rec[2]
            .parse()
            .map_err(|_| fr.err(line, format!("bad value '{}'", rec[2])))?;
        if !v.is_finite() {
            return Err(fr.err(line, "non-finite feature value"));
        }
        triplets.push((r, c, v, line));
    }
    triplets.sort_by_key(|&(r, c, _, line)| (r, c, line));
    if let Some(w) = triplets.windows(2).find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
        return Err(fr.err(w[1].3, format!("duplicate feature ({}, {})", w[1].0, w[1].1)));
    }
    let features = CsrMatrix::from_triplets(
        n_nodes,
        n_features,
        triplets.into_iter().map(|(r, c, v, _)| (r, c, v)).collect(),
    )?;

    let label_path = dir.join("labels.tsv");
    let lr = LineReader { path: &label_path };
    let mut labels = vec![None; n_nodes];
    for (line, rec) in lr.records()? {
        let rec = lr.fields(line, &rec, 2)?;
        let v = lr.index(line, &rec[0], "node id", n_nodes)?;
        let c = lr.index(line, &rec[1], "class", n_classes)?;
        if labels[v].replace(c).is_some() {
            return Err(lr.err(line, format!("node {v} labeled twice")));
        }
    }
    let labeled_nodes = labels.iter().flatten().count();

    let graph = Graph::new(n_nodes, edges, features, labels, n_classes)?;
    let stats = DatasetStats {
        nodes: n_nodes,
        edges: graph.n_edges(),
        raw_edge_lines,
        self_loops_dropped: self_loops,
        classes: n_classes,
        features: n_features,
        labeled_nodes,
    };
    Ok((graph, stats))
}

/// Write a graph in the dataset format. `raw_edges` is written verbatim so
/// that the distributed edge list survives conversion.
pub fn write_dataset(
    dir: &Path,
    n_nodes: usize,
    raw_edges: &[(usize, usize)],
    features: &CsrMatrix,
    labels: &[Option<usize>],
    n_classes: usize,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |file: &str, body: String| {
        let path = dir.join(file);
        fs::write(&path, body).map_err(io_err(path))
    };
    write(
        "meta.tsv",
        format!(
            "nodes\t{n_nodes}\nfeatures\t{}\nclasses\t{n_classes}\n",
            features.n_cols()
        ),
    )?;
    let mut body = String::new();
    for (u, v) in raw_edges {
        writeln!(body, "{u}\t{v}").unwrap();
    }
    write("edges.tsv", body)?;
    let mut body = String::new();
    for r in 0..features.n_rows() {
        let (cols, vals) = features.row(r);
        for (c, v) in cols.iter().zip(vals) {
            writeln!(body, "{r}\t{c}\t{v}").unwrap();
        }
    }
    write("features.tsv", body)?;
    let mut body = String::new();
    for (v, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            writeln!(body, "{v}\t{c}").unwrap();
        }
    }
    write("labels.tsv", body)
}

/// Outcome of converting a LINQS-style `.content`/`.cites` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvertReport {
    pub nodes: usize,
    pub features: usize,
    pub classes: Vec<String>,
    pub edges_written: usize,
    /// Citation lines naming a paper absent from the content file.
    pub edges_skipped: usize,
}

/// Convert the LINQS citation format (`<id> <0/1 word flags…> <class>` per
/// content line, `<cited> <citing>` per cites line) into the dataset format.
/// Nodes are numbered in content-file order; classes in sorted name order.
pub fn convert_linqs(content: &Path, cites: &Path, out_dir: &Path) -> Result<ConvertReport> {
    let text = fs::read_to_string(content).map_err(io_err(content))?;
    let parse_err = |path: &Path, line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut ids = HashMap::new();
    let mut rows = Vec::new();
    let mut n_features = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(parse_err(content, i + 1, "too few fields".into()));
        }
        let width = fields.len() - 2;
        if *n_features.get_or_insert(width) != width {
            return Err(parse_err(content, i + 1, format!("expected {} features", n_features.unwrap())));
        }
        let mut feats = Vec::new();
        for (c, f) in fields[1..fields.len() - 1].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(content, i + 1, format!("bad feature '{f}'")))?;
            if v != 0.0 {
                feats.push((c, v));
            }
        }
        if ids.insert(fields[0].to_string(), rows.len()).is_some() {
            return Err(parse_err(content, i + 1, format!("duplicate paper id {}", fields[0])));
        }
        rows.push((feats, fields[fields.len() - 1].to_string()));
    }
    let n_nodes = rows.len();
    let n_features = n_features.unwrap_or(0);
    let classes: Vec<String> = rows
        .iter()
        .map(|(_, c)| c.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let class_index: BTreeMap<&str, usize> =
        classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();

    let mut triplets = Vec::new();
    let mut labels = Vec::with_capacity(n_nodes);
    for (r, (feats, class)) in rows.iter().enumerate() {
        triplets.extend(feats.iter().map(|&(c, v)| (r, c, v)));
        labels.push(Some(class_index[class.as_str()]));
    }
    let features = CsrMatrix::from_triplets(n_nodes, n_features, triplets)?;

    let text = fs::read_to_string(cites).map_err(io_err(cites))?;
    let mut edges = Vec::new();
    let mut skipped = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(parse_err(cites, i + 1, "expected two paper ids".into()));
        }
        match (ids.get(fields[0]), ids.get(fields[1])) {
            (Some(&u), Some(&v)) => edges.push((u, v)),
            _ => skipped += 1,
        }
    }
    write_dataset(out_dir, n_nodes, &edges, &features, &labels, classes.len())?;
    Ok(ConvertReport {
        nodes: n_nodes,
        features: n_features,
        classes,
        edges_written: edges.len(),
        edges_skipped: skipped,
    })
}

/// How the validation set is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validation {
    /// A fixed number of nodes from every class.
    PerClass(usize),
    /// A fixed total, drawn uniformly from all non-training labeled nodes.
    Total(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub n_per_class: usize,
    pub validation: Validation,
}

impl SplitSpec {
    pub fn new(n_per_class: usize) -> Self {
        SplitSpec {
            n_per_class,
            validation: Validation::PerClass(30),
        }
    }
}

/// Disjoint train / validation / test node sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// True when no node appears in two parts.
    pub fn is_disjoint(&self) -> bool {
        let mut all: Vec<usize> = self
            .train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .copied()
            .collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        all.len() == n
    }
}

/// Stratified random split. Training takes `n_per_class` nodes of every
/// class; the test set takes the same number `k` from every class, where `k`
/// is the smallest per-class count left after training and validation.
pub fn sample_split(g: &Graph, spec: SplitSpec, rng: &mut Prng) -> Result<Split> {
    if spec.n_per_class == 0 {
        return Err(contract("n_per_class must be at least 1"));
    }
    let mut by_class = vec![Vec::new(); g.n_classes()];
    for (v, l) in g.labels().iter().enumerate() {
        if let Some(c) = l {
            by_class[*c].push(v);
        }
    }
    let val_per_class = match spec.validation {
        Validation::PerClass(k) => k,
        Validation::Total(_) => 0,
    };
    let need = spec.n_per_class + val_per_class + 1;
    for (c, nodes) in by_class.iter().enumerate() {
        if nodes.len() < need {
            return Err(Error::Precondition(format!(
                "class {c} has {} labeled nodes, split needs at least {need}",
                nodes.len()
            )));
        }
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut rest: Vec<Vec<usize>> = Vec::with_capacity(by_class.len());
    for nodes in &mut by_class {
        nodes.shuffle(rng);
        train.extend_from_slice(&nodes[..spec.n_per_class]);
        val.extend_from_slice(&nodes[spec.n_per_class..spec.n_per_class + val_per_class]);
        rest.push(nodes[spec.n_per_class + val_per_class..].to_vec());
    }
    if let Validation::Total(total) = spec.validation {
        let mut pool: Vec<usize> = rest.iter().flatten().copied().collect();
        if pool.len() <= total {
            return Err(Error::Precondition(format!(
                "{} nodes left after training, validation needs {total}",
                pool.len()
            )));
        }
        pool.shuffle(rng);
        val.extend_from_slice(&pool[..total]);
        let chosen: std::collections::HashSet<usize> = pool[..total].iter().copied().collect();
        for r in &mut rest {
            r.retain(|v| !chosen.contains(v));
        }
        if let Some(c) = rest.iter().position(Vec::is_empty) {
            return Err(Error::Precondition(format!("class {c} has no nodes left for testing")));
        }
    }
    let k = rest.iter().map(Vec::len).min().unwrap_or(0);
    let mut test: Vec<usize> = rest.iter().flat_map(|r| r[..k].iter().copied()).collect();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test })
}

/// Feature width of benchmark graphs.
pub const BENCH_FEATURES: usize = 100;
/// Class count of benchmark graphs.
pub const BENCH_CLASSES: usize = 5;

/// Pair `(u, v)`, `u < v`, with colexicographic rank `k = v(v-1)/2 + u`.
fn unrank_pair(k: u64) -> (usize, usize) {
    let mut v = ((1.0 + (1.0 + 8.0 * k as f64).sqrt()) / 2.0) as u64;
    while v * (v - 1) / 2 > k {
        v -= 1;
    }
    while (v + 1) * v / 2 <= k {
        v += 1;
    }
    let u = k - v * (v - 1) / 2;
    (u as usize, v as usize)
}

/// Uniform `G(N, 2N)` graph: exactly `2N` distinct node pairs without
/// self-loops. Node `v` gets a one-hot feature at column `v mod 100` and a
/// uniformly random label among 5 classes.
pub fn random_graph(n: usize, rng: &mut Prng) -> Result<Graph> {
    let pairs = (n as u64) * (n as u64).saturating_sub(1) / 2;
    let m = 2 * n as u64;
    if n == 0 || m > pairs {
        return Err(Error::Precondition(format!(
            "G({n}, {m}) impossible: only {pairs} node pairs"
        )));
    }
    let picks = rand::seq::index::sample(rng, pairs as usize, m as usize);
    let mut edges: Vec<(usize, usize)> = picks.into_iter().map(|k| unrank_pair(k as u64)).collect();
    edges.sort_unstable();
    let features = CsrMatrix::from_triplets(
        n,
        BENCH_FEATURES,
        (0..n).map(|v| (v, v % BENCH_FEATURES, 1.0)).collect(),
    )?;
    let labels = (0..n).map(|_| Some(rng.below(BENCH_CLASSES))).collect();
    Graph::new(n, edges, features, labels, BENCH_CLASSES)
}
