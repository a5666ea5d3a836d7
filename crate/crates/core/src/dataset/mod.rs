//! Manifest I/O, patient-grouped splitting, augmentation and the synthetic corpus.

mod augment;
mod manifest;
mod split;
mod synth;

pub use augment::{apply_draw, augment, sample_draw, AugmentConfig, AugmentDraw};
pub use manifest::{load_manifest, manifest_bytes, read_manifest, write_manifest, SampleRecord, Split, MANIFEST_HEADER};
pub use split::{stratified_group_split, SplitAssignment, DEFAULT_FRACTIONS};
pub use synth::{
    load_boxes, synth_generate, synth_taxonomy, write_boxes, Motif, SignBox, SynthConfig, SynthCorpus, BOXES_HEADER,
    SYNTH_LEAVES,
};
