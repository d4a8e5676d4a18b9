//! Synthetic two-modality data, identity splits, P x K sampling and
//! checkpoints.

mod checkpoint;
mod dataset;
mod export;
mod sampler;
mod split;
mod synth;

pub(crate) use synth::derive_seed;

pub use checkpoint::{Checkpoint, Record, VERSION as CHECKPOINT_VERSION};
pub use dataset::{Dataset, Sample};
pub use export::export_images;
pub use sampler::{epoch_batches, sample_pk_batch, ModalityBatch};
pub use split::{holdout_identities, split_identities};
pub use synth::{generate_dataset, ModalityTransform, SynthConfig};
