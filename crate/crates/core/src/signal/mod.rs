//! Recording container, preprocessing, synthetic data and dataset manifests.

mod manifest;
mod preprocess;
mod recording;
mod synth;

pub use manifest::{read_class_list, split_folds, write_class_list, DatasetManifest, ManifestEntry};
pub use preprocess::{
    crop_at, crop_or_pad, design_bandpass, eval_crop_starts, filtfilt, fir_bandpass, preprocess, resample_linear,
    zscore_normalize, PipelineConfig,
};
pub use recording::{load_recording, payload_path, read_recording_id, write_recording, Recording, PAYLOAD_DTYPE};
pub use synth::{synth_generate, write_dataset, ClassMorphology, SyntheticSpec, Wave, BASE_WAVES, R_WAVE, T_WAVE};
