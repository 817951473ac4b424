//! Text proxy generator.

mod params;
mod pipeline;

pub use params::{
    Checkpoint, DashMode, GeneratorConfig, GeneratorGrads, GeneratorParams, ProjectionSet,
    PARAMS_FILE,
};
pub use pipeline::{
    assemble_proxy, compute_director, forward_pair, generate_proxy, leader_path, leader_step,
    map_pair_proxies, proxy_grid, scalar_dash, similarities, vector_dash, Dash,
    InvocationCounter, PairTrace, ProxyGrid, TracedGrid, VideoContext, MIN_DIRECTOR_NORM,
};
