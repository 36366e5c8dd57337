//! Synthetic denoising data, optimizer, metrics, image I/O and the toy
//! training loop.

pub mod data;
pub mod image;
pub mod optim;
pub mod train;

pub use data::{add_noise, synth_dataset, synth_image, Pair};
pub use image::{psnr, psnr_display, ImageBuffer, PSNR_CAP};
pub use optim::{cosine_lr, AdamW};
pub use train::{evaluate, loss, train_toy, train_toy_with, LogEntry, LossKind, Stage, ToyRun, TrainConfig, TrainOutcome};
