//! Checkpoints, conversion, data ingestion, evaluation and benchmarking.

mod bench;
mod checkpoint;
mod convert;
mod data;
mod eval;
mod plan;
pub mod study;

pub use bench::{parse_pairs, read_bench_csv, run_bench, write_bench_csv, BenchRow};
pub use checkpoint::{expected_blobs, Checkpoint, MAGIC, VERSION};
pub use convert::convert_pretrained;
pub use data::{
    decode_pretokenized, detokenize, encode_pretokenized, load_pretokenized, tokenize, tokenize_file,
    Source, TokenStream, BOS, BYTE_VOCAB, EOS,
};
pub use eval::{eval_perplexity, scored_nll};
pub use plan::plan_report;
