//! Deterministic seven-class particle-image task with a controllable
//! source/target appearance shift.

mod dataset;
mod render;
mod spec;

pub use dataset::{
    class_counts, decode_dataset, encode_dataset, few_shot_split, generate_dataset, generate_test_set,
    read_dataset, write_dataset, Sample, DATASET_MAGIC, DATASET_VERSION,
};
pub use render::{class_particles, render_sample, Particle};
pub use spec::{make_source_target_pair, make_source_target_pair_for, max_domain_delta, DomainParams, TaskSpec, NUM_CLASSES};
