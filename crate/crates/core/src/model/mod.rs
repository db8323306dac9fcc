//! Complete models: input initializers, layer stacks, output heads,
//! encoder-decoder decoding and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod encoder;
pub mod seq2seq;

pub use checkpoint::ModelKind;
pub use config::{ModelConfig, MODEL_KEYS};
pub use embed::{graph_init, rel_row, run_stack, sequence_init, Embeddings, GraphInput, Padded};
pub use encoder::EncoderModel;
pub use seq2seq::{argmax, Decoded, EncodedSource, Seq2SeqModel, IGNORE};
