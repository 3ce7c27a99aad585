//! Datasets and prompts.

mod manifest;
mod prompts;
pub mod synth;

pub use manifest::{
    build_dataset, load_square, val_count, validate_manifest, BuildConfig, BuildOutput, DatasetManifest, DatasetMeta, LoadedSample,
    Rule, SamplePair, Split, Violation, DATASET_META_FILE, MANIFEST_FILE, PAIRING_TOLERANCE,
};
pub use prompts::{
    bundled_prompts, expand_prompts, HttpPromptClient, PromptClient, PromptClientConfig, PromptPool, BASE_PROMPT,
    ENDPOINT_ENV, TOKEN_ENV,
};
