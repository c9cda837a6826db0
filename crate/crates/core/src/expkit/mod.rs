//! Synthetic datasets, a small trainer, and engineered checkpoint pairs.
//!
//! The out-of-distribution split of each dataset is the same generative
//! family moved by a rotation and translation, a toy analogue of a natural
//! distribution shift.

pub mod data;
pub mod regime;
pub mod train;

pub use data::{gen_blobs, gen_two_moons, with_label_noise, DatasetBundle, ShiftParams};
pub use regime::{make_regime_pair, RegimeKind, RegimePair};
pub use train::{train, Init, TrainConfig};
