//! Graph neural network primitives built around the bipartite graph
//! convolution: a graph convolution whose input and output node sets are
//! distinct, so that convolution, pooling, expansion and multi-graph
//! aggregation share one operator.

pub mod arch;
pub mod autoencoder;
pub mod coarsening;
pub mod conv;
pub mod data;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod network;
pub mod params;
pub mod profile;
pub mod tensor;
pub mod train;
pub mod verify;

pub use arch::{fuse_to_bgn, parse_arch, ArchSpec, LayerSpec, MNIST_ARCH, MODELNET_ARCH};
pub use autoencoder::{Autoencoder, AutoencoderSpec, Stage};
pub use coarsening::{
    build_coarsening_bigraph, build_expansion_bigraph, midpoint_expand, voxel_grid, Clustering,
    Remap,
};
pub use conv::{aggregate, bipartite_conv, global_max_pool, graph_conv, graph_pool, Reduction};
pub use error::{Error, Result};
pub use graph::{as_bipartite, radius_graph, BipartiteGraph, DirectedGraph, GraphSignal};
pub use kernels::{Kernel, KernelFamily};
pub use network::{build_network, Mode, Network, NetworkConfig};
pub use params::{Binding, ParamId, ParamStore};
pub use profile::{profile_forward, scaling_report, OpCounts, ScalingReport};
pub use tensor::{Activation, Tape, Tensor, Var};
