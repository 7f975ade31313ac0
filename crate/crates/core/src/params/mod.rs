//! Parameter vectors, layer maps, the checkpoint file format and the
//! residency-accounted checkpoint store.

mod checkpoint;
mod layout;
mod store;
mod vector;

pub use checkpoint::{read_checkpoint, read_layout, write_checkpoint, MAGIC, VERSION};
pub use layout::{Layer, LayerMap};
pub use store::{
    mean_vector, write_manifest, CheckpointHandle, CheckpointId, CheckpointStore, ScratchVector,
    MANIFEST_NAME,
};
pub use vector::{linear_combine, ParamVector};

pub(crate) use vector::dot;
