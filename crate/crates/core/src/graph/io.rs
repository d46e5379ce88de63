//! Line-oriented text format for graphs.
//!
//! ```text
//! GRAPH v1 <num_nodes> <num_edges> <label_dim> <pos_dim>
//! <one position row per node, when pos_dim > 0>
//! <src> <dst> <l1> ... <ld>
//! ```
//!
//! The bipartite variant starts with
//! `BIGRAPH v1 <num_in> <num_out> <num_edges> <label_dim> <pos_dim>` and lists
//! input positions before output positions. Floats are written with 17
//! significant digits and read back exactly.

use std::io::{BufRead, Write};

use super::{BipartiteGraph, DirectedGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_row<W: Write>(w: &mut W, row: &[f64]) -> Result<()> {
    let s: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
    writeln!(w, "{}", s.join(" "))?;
    Ok(())
}

pub fn write_graph<W: Write>(w: &mut W, g: &DirectedGraph) -> Result<()> {
    let pos_dim = g.positions().map_or(0, |p| p.cols());
    writeln!(
        w,
        "GRAPH v1 {} {} {} {}",
        g.num_nodes(),
        g.num_edges(),
        g.label_dim(),
        pos_dim
    )?;
    if let Some(p) = g.positions().filter(|_| pos_dim > 0) {
        for i in 0..p.rows() {
            write_row(w, p.row(i))?;
        }
    }
    for (s, d, l) in g.edges() {
        write_edge(w, s, d, l)?;
    }
    Ok(())
}

pub fn write_bigraph<W: Write>(w: &mut W, g: &BipartiteGraph) -> Result<()> {
    let pos_dim = match (g.in_positions(), g.out_positions()) {
        (Some(a), Some(_)) => a.cols(),
        (None, None) => 0,
        _ => {
            return Err(Error::Format(
                "bipartite graphs need positions on both sides or neither".into(),
            ))
        }
    };
    writeln!(
        w,
        "BIGRAPH v1 {} {} {} {} {}",
        g.num_in(),
        g.num_out(),
        g.num_edges(),
        g.label_dim(),
        pos_dim
    )?;
    if pos_dim > 0 {
        for p in [g.in_positions().unwrap(), g.out_positions().unwrap()] {
            for i in 0..p.rows() {
                write_row(w, p.row(i))?;
            }
        }
    }
    for (s, d, l) in g.edges() {
        write_edge(w, s, d, l)?;
    }
    Ok(())
}

fn write_edge<W: Write>(w: &mut W, s: usize, d: usize, l: &[f64]) -> Result<()> {
    write!(w, "{s} {d}")?;
    for &v in l {
        write!(w, " {}", fmt_f64(v))?;
    }
    writeln!(w)?;
    Ok(())
}

struct Lines<R> {
    inner: R,
    line_no: usize,
    buf: String,
}

impl<R: BufRead> Lines<R> {
    fn next_line(&mut self) -> Result<&str> {
        loop {
            self.buf.clear();
            if self.inner.read_line(&mut self.buf)? == 0 {
                return Err(Error::Format(format!(
                    "unexpected end of input after line {}",
                    self.line_no
                )));
            }
            self.line_no += 1;
            if !self.buf.trim().is_empty() {
                return Ok(self.buf.trim());
            }
        }
    }

    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::Format(format!("line {}: {msg}", self.line_no))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let line = self.next_line()?.to_string();
        let vals: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(str::parse).collect();
        let vals = vals.map_err(|e| self.err(e))?;
        if vals.len() != n {
            return Err(self.err(format!("expected {n} values, found {}", vals.len())));
        }
        Ok(vals)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(self.floats(cols)?);
        }
        Tensor::matrix(rows, cols, data)
    }

    fn edge(&mut self, label_dim: usize) -> Result<(usize, usize, Vec<f64>)> {
        let line = self.next_line()?.to_string();
        let mut it = line.split_whitespace();
        let mut idx = || -> Result<usize> {
            it.next()
                .ok_or_else(|| self.err("missing edge endpoint"))?
                .parse()
                .map_err(|e| self.err(e))
        };
        let (s, d) = (idx()?, idx()?);
        let label: std::result::Result<Vec<f64>, _> = it.map(str::parse).collect();
        let label = label.map_err(|e| self.err(e))?;
        if label.len() != label_dim {
            return Err(self.err(format!(
                "expected {label_dim} label values, found {}",
                label.len()
            )));
        }
        Ok((s, d, label))
    }
}

fn parse_header<R: BufRead>(lines: &mut Lines<R>, magic: &str, n: usize) -> Result<Vec<usize>> {
    let line = lines.next_line()?.to_string();
    let mut it = line.split_whitespace();
    if it.next() != Some(magic) || it.next() != Some("v1") {
        return Err(lines.err(format!("expected a `{magic} v1` header")));
    }
    let nums: std::result::Result<Vec<usize>, _> = it.map(str::parse).collect();
    let nums = nums.map_err(|e| lines.err(e))?;
    if nums.len() != n {
        return Err(lines.err(format!("header needs {n} counts")));
    }
    Ok(nums)
}

pub fn read_graph<R: BufRead>(r: R) -> Result<DirectedGraph> {
    let mut lines = Lines {
        inner: r,
        line_no: 0,
        buf: String::new(),
    };
    let h = parse_header(&mut lines, "GRAPH", 4)?;
    let (n, m, d, k) = (h[0], h[1], h[2], h[3]);
    let positions = if k > 0 {
        Some(lines.matrix(n, k)?)
    } else {
        None
    };
    let edges = (0..m).map(|_| lines.edge(d)).collect::<Result<Vec<_>>>()?;
    DirectedGraph::new(n, d, edges, positions)
}

pub fn read_bigraph<R: BufRead>(r: R) -> Result<BipartiteGraph> {
    let mut lines = Lines {
        inner: r,
        line_no: 0,
        buf: String::new(),
    };
    let h = parse_header(&mut lines, "BIGRAPH", 5)?;
    let (ni, no, m, d, k) = (h[0], h[1], h[2], h[3], h[4]);
    let (pi, po) = if k > 0 {
        (Some(lines.matrix(ni, k)?), Some(lines.matrix(no, k)?))
    } else {
        (None, None)
    };
    let edges = (0..m).map(|_| lines.edge(d)).collect::<Result<Vec<_>>>()?;
    BipartiteGraph::new_multi(ni, no, d, edges)?.with_positions(pi, po)
}
