pub mod embedding;
pub mod graph_views;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod stformer;
