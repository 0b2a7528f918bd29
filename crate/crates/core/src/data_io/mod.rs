//! Corpora, the ETB tensor format, and checkpoint directories.

pub mod bundle;
pub mod checkpoint;
pub mod etb;
pub mod image;
pub mod synthetic;

pub use bundle::{load_generator_bundle, save_generator_bundle, GeneratorBundleConfig, ModelBundle};
pub use checkpoint::{load_checkpoint, load_into_store, save_checkpoint, Checkpoint, CheckpointManifest, Provenance};
pub use etb::{read_etb, read_etb_as, write_etb, EtbError, EtbTensor};
pub use synthetic::{augment, Corpus, SyntheticKind, SyntheticSpec};
