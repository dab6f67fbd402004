//! Point-cloud network layers: sampling, neighbourhoods, equivariant and
//! scale-invariant convolutions, attention, and the composed pyramid block.

pub mod attention;
pub mod domains;
pub mod graph_conv;
pub mod group_conv;
pub mod kernel;
pub mod nn;
pub mod ort;
pub mod seed;
pub mod sgs;
