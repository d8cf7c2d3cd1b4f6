//! Signal plumbing: synthetic data, preprocessing, patching, Fourier
//! targets, instance normalization and the dataset file format.

pub mod filter;
pub mod io;
pub mod patch;
pub mod preprocess;
pub mod revin;
pub mod spectral;
pub mod synth;
pub mod types;

pub use filter::{anti_alias, design, fir_filter, FilterKind, FirFilter};
pub use io::{read_dataset, read_sidecar, sidecar_path, write_atomic, write_dataset, write_sidecar};
pub use patch::{patch_count, patchify, patchify_tail, PatchSequence};
pub use preprocess::{
    average_rereference, band_split, downsample, epoch_sliding, epoch_trials, multiband_mix, preprocess_recording,
    EpochConfig, PreprocessConfig,
};
pub use revin::{revin_apply, revin_denormalize, revin_normalize, RevinStats, REVIN_EPS};
pub use spectral::{fft_components, fft_components_with, num_freq_bins, SpectroTarget};
pub use synth::{default_signatures, synth_dataset, Component, GeneratorSpec, WordSignature};
pub use types::*;
