//! Orchestration: frames in, trained/quantized checkpoints and reports out.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod optim;
pub mod synth;
pub mod train;

pub use checkpoint::{Checkpoint, SizeReport, StoredTensor};
pub use config::RunConfig;
pub use dataset::{frame_times, ingest, write_frames, FrameDataset, FrameFormat};
pub use eval::{bench_table, benchmark, benchmark_stub, benchmark_with, decode_all, evaluate, mean_psnr, BenchReport};
pub use optim::{cosine_lr, Adam};
pub use synth::synthetic_video;
pub use train::{distill, qat_finetune, train, StepLog, Teacher, TrainOptions, TrainResult};
