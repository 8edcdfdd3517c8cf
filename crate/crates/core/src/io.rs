//! On-disk formats: edge lists, feature/outcome CSVs, the dataset directory,
//! and atomic file writes.
//!
//! Reals are written with 17 significant digits (`{:.16e}`), which
//! round-trips every finite `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::matrix::FeatureMatrix;
use crate::sim::{Dataset, GraphSpec, Truth};

pub const GRAPH_FILE: &str = "graph.txt";
pub const FEATURES_FILE: &str = "X.csv";
pub const OUTCOMES_FILE: &str = "Y.csv";
pub const CONFOUNDER_FILE: &str = "U.csv";
pub const TRUTH_FILE: &str = "truth.json";

pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::param(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn edge_list_text(g: &SparseGraph) -> String {
    let mut s = format!("# nodes {} edges {}\n", g.n(), g.edge_count());
    for (a, b) in g.edges() {
        let _ = writeln!(s, "{a} {b}");
    }
    s
}

/// `node,<prefix>0,<prefix>1,...` with one row per node.
pub fn matrix_csv(m: &FeatureMatrix, prefix: &str) -> String {
    let mut s = String::from("node");
    for c in 0..m.cols() {
        let _ = write!(s, ",{prefix}{c}");
    }
    s.push('\n');
    for r in 0..m.rows() {
        let _ = write!(s, "{r}");
        for &v in m.row(r) {
            let _ = write!(s, ",{}", format_real(v));
        }
        s.push('\n');
    }
    s
}

pub fn vector_csv(v: &[f64], name: &str) -> String {
    let mut s = format!("node,{name}\n");
    for (i, x) in v.iter().enumerate() {
        let _ = writeln!(s, "{i},{}", format_real(*x));
    }
    s
}

/// Read a CSV whose first column is a node id and the rest are reals. Rows
/// may come in any order but ids must cover `0..n` exactly once.
pub fn read_node_csv(path: &Path) -> Result<FeatureMatrix> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let width = rdr.headers()?.len();
    if width < 2 {
        return Err(Error::parse(path, "expected a node column and at least one value column"));
    }
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let at = |m: String| Error::parse(path, format!("row {}: {m}", line + 2));
        if rec.len() != width {
            return Err(at(format!("{} fields, header has {width}", rec.len())));
        }
        let id: usize = rec[0]
            .trim()
            .parse()
            .map_err(|e| at(format!("bad node id {:?}: {e}", &rec[0])))?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| at(format!("bad number {f:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((id, vals));
    }
    let n = rows.len();
    let mut ordered: Vec<Option<Vec<f64>>> = vec![None; n];
    for (id, vals) in rows {
        let slot = ordered
            .get_mut(id)
            .ok_or_else(|| Error::parse(path, format!("node id {id} out of range 0..{n}")))?;
        if slot.replace(vals).is_some() {
            return Err(Error::parse(path, format!("node id {id} repeated")));
        }
    }
    let rows: Vec<Vec<f64>> = ordered.into_iter().map(|r| r.expect("ids cover 0..n")).collect();
    FeatureMatrix::from_rows(&rows).map_err(|e| Error::parse(path, e.to_string()))
}

/// Contents of `truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFile {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub graph: Option<GraphSpec>,
    pub params: crate::sim::SemParams,
}

/// Write `graph.txt`, `X.csv`, `Y.csv`, and when simulated `U.csv` and
/// `truth.json`.
pub fn write_dataset(ds: &Dataset, dir: &Path, graph_spec: Option<&GraphSpec>) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join(GRAPH_FILE), edge_list_text(&ds.graph).as_bytes())?;
    write_atomic(&dir.join(FEATURES_FILE), matrix_csv(&ds.x, "x").as_bytes())?;
    write_atomic(&dir.join(OUTCOMES_FILE), vector_csv(&ds.y, "y").as_bytes())?;
    if let Some(u) = &ds.u {
        write_atomic(&dir.join(CONFOUNDER_FILE), vector_csv(u, "u").as_bytes())?;
    }
    if let Some(t) = &ds.truth {
        let tf = TruthFile {
            n: ds.n(),
            d: ds.dim(),
            seed: t.seed,
            graph: graph_spec.cloned(),
            params: t.params.clone(),
        };
        let mut json = serde_json::to_string_pretty(&tf)?;
        json.push('\n');
        write_atomic(&dir.join(TRUTH_FILE), json.as_bytes())?;
    }
    Ok(())
}

/// Load a dataset directory. `truth.json` and `U.csv` are optional, so
/// real-world data needs only the edge list and the two CSVs.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let x = read_node_csv(&dir.join(FEATURES_FILE))?;
    let y_path = dir.join(OUTCOMES_FILE);
    let y = read_node_csv(&y_path)?;
    if y.cols() != 1 {
        return Err(Error::parse(&y_path, "outcome file must have exactly one value column"));
    }
    let n = x.rows();
    let graph = SparseGraph::read_edge_list(&dir.join(GRAPH_FILE), Some(n))?;
    let u_path = dir.join(CONFOUNDER_FILE);
    let u = if u_path.exists() {
        Some(read_node_csv(&u_path)?.col(0))
    } else {
        None
    };
    let t_path = dir.join(TRUTH_FILE);
    let truth = if t_path.exists() {
        let tf: TruthFile = serde_json::from_str(&fs::read_to_string(&t_path)?)
            .map_err(|e| Error::parse(&t_path, e.to_string()))?;
        if tf.n != n || tf.d != x.cols() {
            return Err(Error::parse(&t_path, "n/d disagree with X.csv"));
        }
        Some(Truth {
            params: tf.params,
            seed: tf.seed,
        })
    } else {
        None
    };
    Dataset::new(graph, x, y.col(0), u, truth)
}
