//! File formats.

pub mod checkpoint;
pub mod dyfl;
pub mod pnm;
pub mod seqdir;

pub use seqdir::{load_dataset, load_labels, load_sequence, save_labels, save_sequence};
