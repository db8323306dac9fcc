//! Synthetic tasks with exact oracles: relation composition over chain graphs
//! and sequence reversal.

pub mod dataset;
pub mod generate;
pub mod table;

pub use dataset::{generate, parse_split, DatasetSpec, Instances, LenRange, Split, SplitSpec, TaskKind};
pub use generate::{gen_relation_instance, gen_reverse_instance, RelationInstance, Seq2SeqInstance, MAX_RESAMPLE};
pub use table::{compose_oracle, CompositionTable, TableSpec, KINSHIP_TABLE};
