//! Class consolidation, sequence identity, clustered splitting and the
//! synthetic long-tail generator.

pub mod classes;
pub mod identity;
pub mod split;
pub mod synth;

pub use classes::{default_class_names, ptm_abbreviations, reduce_classes, ClassMap, NO_MODIFICATION, RARE_SITES};
pub use identity::{identity_upper_bound, seq_identity, SeqProfile};
pub use split::{cluster_split, Split, SplitManifest};
pub use synth::{default_longtail_weights, synth_longtail, SynthConfig, SynthRule};
