//! JSON-lines dataset files: a header record followed by one graph per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Dataset, Edge, Graph, Provenance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u64,
    n_classes: usize,
    feature_dim: usize,
}

#[derive(Serialize)]
struct Record<'a> {
    n: usize,
    edges: Vec<(usize, usize, f64)>,
    features: Vec<&'a [f64]>,
    label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask_edges: Option<&'a [Edge]>,
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(ds, &mut w).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_dataset(ds: &Dataset, w: &mut impl Write) -> Result<()> {
    let io_err = |e: std::io::Error| Error::io("<writer>", e);
    let header = Header {
        format_version: FORMAT_VERSION,
        n_classes: ds.n_classes,
        feature_dim: ds.feature_dim,
    };
    serde_json::to_writer(&mut *w, &header).map_err(|e| io_err(e.into()))?;
    w.write_all(b"\n").map_err(io_err)?;
    for g in &ds.graphs {
        let n = g.num_nodes();
        let record = Record {
            n,
            edges: g
                .edges()
                .into_iter()
                .map(|(i, j)| (i, j, g.adjacency.get(i, j)))
                .collect(),
            features: (0..n).map(|i| g.features.row(i)).collect(),
            label: g.label,
            mask_edges: g.mask.as_deref(),
        };
        serde_json::to_writer(&mut *w, &record).map_err(|e| io_err(e.into()))?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ds = read_dataset(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    ds.provenance = Provenance::File(path.display().to_string());
    Ok(ds)
}

/// Parses and validates a dataset. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn read_dataset(r: impl BufRead) -> Result<Dataset> {
    let mut lines = r
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));

    let (hline, htext) = lines
        .next()
        .ok_or_else(|| parse_err(1, "header", "empty file"))?;
    let htext = htext.map_err(|e| Error::io("<reader>", e))?;
    let hval = parse_line(hline, &htext)?;
    let version = field_usize(hline, &hval, "format_version")? as u64;
    if version != FORMAT_VERSION {
        return Err(parse_err(
            hline,
            "format_version",
            format!("unsupported version {version}"),
        ));
    }
    let n_classes = field_usize(hline, &hval, "n_classes")?;
    let feature_dim = field_usize(hline, &hval, "feature_dim")?;

    let mut graphs = Vec::new();
    for (line, text) in lines {
        let text = text.map_err(|e| Error::io("<reader>", e))?;
        let g = parse_graph(line, &parse_line(line, &text)?, feature_dim)?;
        g.validate(n_classes, feature_dim)
            .map_err(|e| Error::Validation(format!("line {line}: {e}")))?;
        graphs.push(g);
    }
    let ds = Dataset {
        graphs,
        n_classes,
        feature_dim,
        provenance: Provenance::Manual,
    };
    ds.validate()?;
    Ok(ds)
}

fn parse_err(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn parse_line(line: usize, text: &str) -> Result<Value> {
    let v: Value = serde_json::from_str(text).map_err(|e| parse_err(line, "<record>", e.to_string()))?;
    if !v.is_object() {
        return Err(parse_err(line, "<record>", "expected a JSON object"));
    }
    Ok(v)
}

fn field<'a>(line: usize, v: &'a Value, name: &str) -> Result<&'a Value> {
    v.get(name).ok_or_else(|| parse_err(line, name, "missing"))
}

fn as_usize(line: usize, v: &Value, name: &str) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| parse_err(line, name, format!("expected a nonnegative integer, got {v}")))
}

fn as_f64(line: usize, v: &Value, name: &str) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| parse_err(line, name, format!("expected a number, got {v}")))
}

fn as_array<'a>(line: usize, v: &'a Value, name: &str) -> Result<&'a Vec<Value>> {
    v.as_array()
        .ok_or_else(|| parse_err(line, name, "expected an array"))
}

fn field_usize(line: usize, v: &Value, name: &str) -> Result<usize> {
    as_usize(line, field(line, v, name)?, name)
}

fn parse_graph(line: usize, v: &Value, feature_dim: usize) -> Result<Graph> {
    let n = field_usize(line, v, "n")?;
    let label = field_usize(line, v, "label")?;

    let rows = as_array(line, field(line, v, "features")?, "features")?;
    if rows.len() != n {
        return Err(Error::Validation(format!(
            "line {line}: {} feature rows for {n} nodes",
            rows.len()
        )));
    }
    let mut features = Tensor::zeros(n, feature_dim);
    for (i, row) in rows.iter().enumerate() {
        let row = as_array(line, row, "features")?;
        if row.len() != feature_dim {
            return Err(Error::Validation(format!(
                "line {line}: node {i} has {} features, header declares {feature_dim}",
                row.len()
            )));
        }
        for (j, x) in row.iter().enumerate() {
            features.set(i, j, as_f64(line, x, "features")?);
        }
    }

    // Each listed entry sets (i, j); its mirror is filled only when not
    // listed explicitly, so contradictory pairs surface as asymmetry.
    let mut adjacency = Tensor::zeros(n, n);
    let mut listed = vec![false; n * n];
    for e in as_array(line, field(line, v, "edges")?, "edges")? {
        let e = as_array(line, e, "edges")?;
        if e.len() != 3 {
            return Err(parse_err(line, "edges", "each edge is [i, j, weight]"));
        }
        let i = as_usize(line, &e[0], "edges")?;
        let j = as_usize(line, &e[1], "edges")?;
        let w = as_f64(line, &e[2], "edges")?;
        if i >= n || j >= n {
            return Err(Error::Validation(format!(
                "line {line}: edge ({i}, {j}) out of range for {n} nodes"
            )));
        }
        if listed[i * n + j] {
            return Err(Error::Validation(format!("line {line}: duplicate edge ({i}, {j})")));
        }
        listed[i * n + j] = true;
        adjacency.set(i, j, w);
        if !listed[j * n + i] {
            adjacency.set(j, i, w);
        }
    }

    let mask = match v.get("mask_edges") {
        None | Some(Value::Null) => None,
        Some(m) => {
            let mut out = Vec::new();
            for e in as_array(line, m, "mask_edges")? {
                let e = as_array(line, e, "mask_edges")?;
                if e.len() != 2 {
                    return Err(parse_err(line, "mask_edges", "each entry is [i, j]"));
                }
                let (i, j) = (
                    as_usize(line, &e[0], "mask_edges")?,
                    as_usize(line, &e[1], "mask_edges")?,
                );
                out.push((i.min(j), i.max(j)));
            }
            out.sort_unstable();
            out.dedup();
            Some(out)
        }
    };

    Ok(Graph {
        adjacency,
        features,
        label,
        mask,
    })
}
