pub mod dataset;
pub mod sequence;
pub mod synth;

pub use dataset::{
    read_dataset, sample_batch, write_dataset, BatchItem, BatchSpec, Dataset, DatasetLoader, SequencePair, TgLoader,
};
pub use sequence::{Condition, SequenceMeta, SilhouetteSequence, SkeletonSequence, FRAME_SIZE, NUM_JOINTS, PARENT};
pub use synth::{render_sequence, synth_dataset, synth_subject, SubjectParams, SynthConfig};
