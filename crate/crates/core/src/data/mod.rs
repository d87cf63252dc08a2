//! Manifest-driven datasets: volume files, ROI windows, subject splits,
//! balanced shift-augmented batches and synthetic phantoms.

mod manifest;
mod phantom;
mod sampler;
mod split;
mod vvol;

pub use manifest::{load_manifest, write_manifest, Label, Manifest, Roi, SubjectRecord, Task};
pub use phantom::{generate_phantoms, PhantomConfig};
pub use sampler::{
    augment_shift, balanced_batch, center_crop, draw_shift, epoch_plan, shift_crop, Batch, BalancedSampler,
    Dataset, PaddedRoi, LoadedSubject, MARGIN, PADDED_EXTENT, ROI_EXTENT,
};
pub use split::{reshuffle_train_val, split_dataset, DatasetSplit, Subset, TEST_PER_CLASS};
pub use vvol::{decode_volume, encode_volume, read_volume, write_volume, VVOL_MAGIC};
