//! Work counters for graph layers.

use std::time::Instant;

use serde::Serialize;

use crate::arch::ArchSpec;
use crate::coarsening::voxel_grid;
use crate::error::{arg_err, Error, Result};
use crate::graph::{radius_graph, DirectedGraph};
use crate::network::{build_network, Mode, Network, NetworkConfig};
use crate::tensor::{Tape, Tensor};

/// Work done by a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    /// One per edge message.
    pub kernel_evals: u64,
    /// Multiply-accumulates in affine maps and per-edge matrix products.
    pub mac_ops: u64,
    /// Output feature rows allocated by graph layers.
    pub nodes_materialized: u64,
    /// Largest number of feature scalars alive at once.
    pub peak_live_values: u64,
}

/// Runs an evaluation forward pass with counting enabled.
pub fn profile_forward(
    net: &Network,
    graph: &DirectedGraph,
    features: &Tensor,
) -> Result<OpCounts> {
    let mut tape = Tape::with_counting();
    let bind = net.params().bind(&mut tape, false);
    let x = tape.constant(features.clone());
    net.forward(&mut tape, &bind, graph, x, Mode::Eval)?;
    Ok(*tape.counters().expect("counting tape"))
}

/// Which side of the comparison a row measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Path {
    ConvPool,
    Fused,
}

impl Path {
    pub fn as_str(self) -> &'static str {
        match self {
            Path::ConvPool => "conv_pool",
            Path::Fused => "fused",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRow {
    pub size_vi: usize,
    pub size_vo: usize,
    pub path: Path,
    pub counts: OpCounts,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingReport {
    pub conv_pool: String,
    pub fused: String,
    pub rows: Vec<ScalingRow>,
}

pub const CSV_HEADER: &str =
    "size_vi,size_vo,path,kernel_evals,mac_ops,nodes_materialized,peak_live_values,wall_ms";

impl ScalingReport {
    /// Pairs of (conv+pool, fused) rows for each size.
    pub fn pairs(&self) -> impl Iterator<Item = (&ScalingRow, &ScalingRow)> {
        self.rows.chunks(2).map(|c| (&c[0], &c[1]))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let c = &r.counts;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:.3}\n",
                r.size_vi,
                r.size_vo,
                r.path.as_str(),
                c.kernel_evals,
                c.mac_ops,
                c.nodes_materialized,
                c.peak_live_values,
                r.wall_ms
            ));
        }
        out
    }

    /// Fixed-width table with the conv+pool / fused ratio of every count.
    pub fn render_table(&self) -> String {
        let mut out = format!("conv+pool: {}\nfused:     {}\n", self.conv_pool, self.fused);
        out.push_str(&format!(
            "{:>8} {:>8} {:>10} {:>12} {:>14} {:>10} {:>10} {:>10}\n",
            "|V_i|", "|V_o|", "path", "kernel_evals", "mac_ops", "nodes", "peak_live", "wall_ms"
        ));
        for (a, b) in self.pairs() {
            for r in [a, b] {
                let c = &r.counts;
                out.push_str(&format!(
                    "{:>8} {:>8} {:>10} {:>12} {:>14} {:>10} {:>10} {:>10.2}\n",
                    r.size_vi,
                    r.size_vo,
                    r.path.as_str(),
                    c.kernel_evals,
                    c.mac_ops,
                    c.nodes_materialized,
                    c.peak_live_values,
                    r.wall_ms
                ));
            }
            let ratio = |x: u64, y: u64| {
                if y == 0 {
                    f64::NAN
                } else {
                    x as f64 / y as f64
                }
            };
            let (p, q) = (&a.counts, &b.counts);
            out.push_str(&format!(
                "{:>8} {:>8} {:>10} {:>12.3} {:>14.3} {:>10.3} {:>10.3}\n",
                "",
                "",
                "ratio",
                ratio(p.kernel_evals, q.kernel_evals),
                ratio(p.mac_ops, q.mac_ops),
                ratio(p.nodes_materialized, q.nodes_materialized),
                ratio(p.peak_live_values, q.peak_live_values)
            ));
        }
        out
    }
}

fn stage_params(spec: &ArchSpec) -> Result<(f64, f64)> {
    let mut found = None;
    for l in &spec.layers {
        if let Some(pair) = l.spatial() {
            if found.replace(pair).is_some() {
                return arg_err(format!("`{spec}` has more than one coarsening stage"));
            }
        }
    }
    found.ok_or_else(|| Error::Argument(format!("`{spec}` has no coarsening stage")))
}

/// Profiles a conv+pool architecture against its fused counterpart on 1-D
/// lattices of each size. The lattice spacing is `rho / ratio`, so every
/// voxel holds `ratio` consecutive nodes; each node links to its two lattice
/// neighbours.
///
/// Fails if the two specs differ in `(r, rho)` or if the fused path does not
/// beat conv+pool on kernel evaluations and materialized nodes.
pub fn scaling_report(
    arch_pair: (&ArchSpec, &ArchSpec),
    sizes: &[usize],
    ratio: usize,
    config: &NetworkConfig,
) -> Result<ScalingReport> {
    let (conv_pool, fused) = arch_pair;
    let (r, rho) = stage_params(conv_pool)?;
    let (fr, frho) = stage_params(fused)?;
    if (r, rho) != (fr, frho) {
        return arg_err(format!(
            "spatial parameters differ: ({r},{rho}) vs ({fr},{frho})"
        ));
    }
    if ratio == 0 {
        return arg_err("coarsening ratio must be at least 1");
    }
    let spacing = rho / ratio as f64;
    let config = NetworkConfig {
        input_radius: 1.5 * spacing,
        label_dim: 1,
        ..config.clone()
    };
    let a = build_network(conv_pool, 1, 0, &config)?;
    let b = build_network(fused, 1, 0, &config)?;
    let mut rows = Vec::with_capacity(2 * sizes.len());
    for &n in sizes {
        let positions = Tensor::matrix(n, 1, (0..n).map(|i| i as f64 * spacing).collect())?;
        let graph = radius_graph(&positions, 1.5 * spacing)?;
        let size_vo = voxel_grid(&positions, rho)?.num_clusters();
        let features = Tensor::matrix(n, 1, (0..n).map(|i| (i % 7) as f64 / 7.0).collect())?;
        for (path, net) in [(Path::ConvPool, &a), (Path::Fused, &b)] {
            let t = Instant::now();
            let counts = profile_forward(net, &graph, &features)?;
            rows.push(ScalingRow {
                size_vi: n,
                size_vo,
                path,
                counts,
                wall_ms: t.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    let report = ScalingReport {
        conv_pool: conv_pool.to_string(),
        fused: fused.to_string(),
        rows,
    };
    for (p, f) in report.pairs() {
        if f.counts.kernel_evals > p.counts.kernel_evals {
            return Err(Error::Argument(format!(
                "fused path needs more kernel evaluations at |V_i| = {}",
                p.size_vi
            )));
        }
        if p.size_vo < p.size_vi && f.counts.nodes_materialized >= p.counts.nodes_materialized {
            return Err(Error::Argument(format!(
                "fused path materializes as many nodes at |V_i| = {}",
                p.size_vi
            )));
        }
    }
    Ok(report)
}
