//! Line-delimited JSON dataset files (`*.graphs.jsonl`).
//!
//! The first line is a header with the dataset schema, split tag and record
//! count. Each following line holds one graph: the active node count `n`,
//! the `n × a` feature rows, the upper-triangle edge list
//! `[i, j, [channels...]]`, the label (or `null`) and a string metadata map.
//! Floats are rounded to 9 significant digits, which makes the round trip
//! exact for every value representable as `f32` (in particular all 0/1
//! graphs produced by the generators).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DenseGraph, GraphDataset, Schema, SplitTag};

pub const DATASET_EXTENSION: &str = "graphs.jsonl";
const FORMAT_TAG: &str = "ooda-graphs";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    n_max: usize,
    a: usize,
    b: usize,
    num_classes: usize,
    feature_blocks: Vec<usize>,
    split: SplitTag,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    n: usize,
    x: Vec<Vec<f64>>,
    edges: Vec<(usize, usize, Vec<f64>)>,
    label: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
}

/// Values read back from a file are narrowed to the nearest `f32`; 9
/// significant digits identify every `f32` uniquely.
#[inline]
fn decode(v: f64) -> f64 {
    v as f32 as f64
}

/// Round to 9 significant digits.
pub fn round_sig9(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.8e}").parse().unwrap_or(v)
}

fn to_record(g: &DenseGraph) -> Result<Record> {
    if !g.mask_is_prefix() {
        return Err(Error::Shape(
            "only graphs whose active nodes form a prefix can be serialized".into(),
        ));
    }
    let n = g.num_active();
    let x = (0..n)
        .map(|i| g.node_features().row(i).iter().map(|&v| round_sig9(v)).collect())
        .collect();
    let n_max = g.n_max();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let ch = g.adjacency().row(i * n_max + j);
            if ch.iter().any(|&v| v != 0.0) {
                edges.push((i, j, ch.iter().map(|&v| round_sig9(v)).collect()));
            }
        }
    }
    Ok(Record {
        n,
        x,
        edges,
        label: g.label,
        meta: g.meta.clone(),
    })
}

fn from_record(rec: Record, schema: &Schema, line: usize) -> Result<DenseGraph> {
    let shape_err = |msg: String| Error::Shape(format!("line {line}: {msg}"));
    if rec.n > schema.n_max {
        return Err(shape_err(format!(
            "n = {} exceeds header n_max = {}",
            rec.n, schema.n_max
        )));
    }
    if rec.x.len() != rec.n {
        return Err(shape_err(format!("x has {} rows, n = {}", rec.x.len(), rec.n)));
    }
    let mut g = DenseGraph::empty(schema.n_max, rec.n, schema.node_dim, schema.edge_dim)?;
    for (i, row) in rec.x.iter().enumerate() {
        if row.len() != schema.node_dim {
            return Err(shape_err(format!(
                "x row {i} has {} entries, header a = {}",
                row.len(),
                schema.node_dim
            )));
        }
        for (dst, &v) in g.node_features_mut().row_mut(i).iter_mut().zip(row) {
            *dst = decode(v);
        }
    }
    for (i, j, ch) in &rec.edges {
        if *i >= rec.n || *j >= rec.n || i == j {
            return Err(shape_err(format!("edge ({i},{j}) invalid for n = {}", rec.n)));
        }
        if ch.len() != schema.edge_dim {
            return Err(shape_err(format!(
                "edge ({i},{j}) has {} channels, header b = {}",
                ch.len(),
                schema.edge_dim
            )));
        }
        for (c, &v) in ch.iter().enumerate() {
            g.set_edge(*i, *j, c, decode(v));
        }
    }
    if let Some(y) = rec.label {
        if y >= schema.num_classes {
            return Err(shape_err(format!(
                "label {y} out of range for {} classes",
                schema.num_classes
            )));
        }
    }
    g.label = rec.label;
    g.meta = rec.meta;
    Ok(g)
}

/// Serialize a dataset into the line-delimited format.
pub fn write_dataset_to<W: Write>(ds: &GraphDataset, mut w: W) -> Result<()> {
    let header = Header {
        format: FORMAT_TAG.to_string(),
        version: FORMAT_VERSION,
        n_max: ds.schema.n_max,
        a: ds.schema.node_dim,
        b: ds.schema.edge_dim,
        num_classes: ds.schema.num_classes,
        feature_blocks: ds.schema.feature_blocks.clone(),
        split: ds.split,
        count: ds.graphs.len(),
    };
    let io_err = |e: std::io::Error| Error::io("<writer>", e);
    let json_err = |e: serde_json::Error| Error::Data(e.to_string());
    serde_json::to_writer(&mut w, &header).map_err(json_err)?;
    w.write_all(b"\n").map_err(io_err)?;
    for g in &ds.graphs {
        ds.check_graph(g)?;
        serde_json::to_writer(&mut w, &to_record(g)?).map_err(json_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn write_dataset(ds: &GraphDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset_to(ds, BufWriter::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_dataset_from<R: BufRead>(r: R) -> Result<GraphDataset> {
    let mut lines = r.lines();
    let mut read_line = |lineno: usize| -> Result<Option<String>> {
        match lines.next() {
            None => Ok(None),
            Some(Ok(s)) => Ok(Some(s)),
            Some(Err(e)) => Err(Error::Parse {
                line: lineno,
                msg: e.to_string(),
            }),
        }
    };

    let header_line = read_line(1)?.ok_or(Error::Parse {
        line: 1,
        msg: "empty file, missing header".into(),
    })?;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "unsupported format {}/{} (expected {FORMAT_TAG}/{FORMAT_VERSION})",
                header.format, header.version
            ),
        });
    }
    let schema = Schema {
        n_max: header.n_max,
        node_dim: header.a,
        edge_dim: header.b,
        num_classes: header.num_classes,
        feature_blocks: header.feature_blocks,
    };
    let mut ds = GraphDataset::new(schema, header.split).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;

    for k in 0..header.count {
        let lineno = k + 2;
        let last_complete = lineno - 1;
        let Some(text) = read_line(lineno)? else {
            return Err(Error::Parse {
                line: lineno,
                msg: format!(
                    "file truncated: expected {} records, last complete line is {last_complete}",
                    header.count
                ),
            });
        };
        let rec: Record = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: lineno,
            msg: if e.is_eof() {
                format!("truncated record; last complete line is {last_complete}")
            } else {
                format!("malformed record: {e}")
            },
        })?;
        let g = from_record(rec, &ds.schema, lineno)?;
        ds.graphs.push(g);
    }
    if let Some(extra) = read_line(header.count + 2)? {
        if !extra.trim().is_empty() {
            return Err(Error::Parse {
                line: header.count + 2,
                msg: format!("unexpected record beyond header count {}", header.count),
            });
        }
    }
    Ok(ds)
}

pub fn read_dataset(path: &Path) -> Result<GraphDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset_from(BufReader::new(file))
}
