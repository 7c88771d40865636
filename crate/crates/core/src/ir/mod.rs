//! Network intermediate representation: tensors, layers, graphs, shape
//! propagation, width scaling and complexity counting.

pub mod count;
pub mod graph;
pub mod layer;
pub mod manifest;
pub mod shape;
pub mod tensor;
pub mod width;
pub mod zoo;
