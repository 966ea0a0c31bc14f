//! Counterfactual bias-audit toolkit.
//!
//! Deterministic building blocks for auditing gender bias with counterfactual
//! image/caption datasets:
//!
//! * [`manifest`]: JSONL dataset manifests, fine-tuning partitions c1..c10,
//!   occupation selection and replacement-fraction dataset versions.
//! * [`embedding`]: the `EMB1` embedding codec and row utilities.
//! * [`mask`]: person/skin mask combination and 3x3 dilation.
//! * [`caption`]: keyword-lexicon caption counterfactuals.
//! * [`zeroshot`]: cosine zero-shot classification, person preference,
//!   per-class recall and retrieval recall@k.
//! * [`dist`]: FID, KID and CMMD between embedding sets.
//! * [`report`]: self-similarity, disparities, equality of opportunity and
//!   the JSON audit report.
//! * [`profile`]: the bias-profiling workflow over a manifest.

pub mod caption;
pub mod dist;
pub mod embedding;
pub mod manifest;
pub mod mask;
pub mod profile;
pub mod report;
pub mod sampling;
pub mod summation;
pub mod zeroshot;

pub use caption::{
    detect_gender, edit_caption, make_counterfactual_pair, validate_lexicon, CaptionGender, CaptionPair, GenderLexicon,
    TargetGender,
};
pub use dist::{
    cmmd, fid, fit_gaussian, frechet_distance, kid_unbiased, sqrtm_psd, CmmdParams, GaussianStats, KidParams,
};
pub use embedding::{read_embeddings, write_embeddings, EmbeddingMatrix};
pub use manifest::{
    build_partition, dataset_version, load_manifest, select_occupations, ManifestRecord, PartitionCode,
};
pub use mask::{compose_inpaint_mask, coverage, dilate_3x3, BinaryMask, CombineMode};
pub use report::{assemble_report, disparity, self_similarity, BiasReport, GroupMetric};
pub use zeroshot::{
    classify_zero_shot, cosine_similarity, per_class_recall, person_preference, recall_at_k, PromptSet,
};
