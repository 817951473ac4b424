//! Embedding storage: the `.tvpx` tensor container, dataset directories and
//! the planted synthetic generator.

mod dataset;
mod tensor_file;

pub use dataset::{
    generate_synthetic, make_batches, EmbeddingDataset, Manifest, Pair, SynthConfig, MANIFEST_FILE,
    TEXT_FILE, VIDEO_FILE,
};
pub use tensor_file::{
    decode_header, decode_tensor, encode_tensor, read_header, read_tensor, stack_matrices,
    write_tensor, Tensor, TensorHeader, DTYPE_F64, MAGIC, VERSION,
};
