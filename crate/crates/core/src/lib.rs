//! Learning visual prompts against frozen region features.
//!
//! A *visual prompt* is a small set of learnable embedding rows standing in
//! for one object category. Everything else in the pipeline is frozen data:
//! region proposals carry fixed feature vectors and boxes, a text vocabulary
//! supplies embeddings for category names and distractor phrases, and
//! ground-truth instances carry fixed context features. Training moves only
//! the prompt rows.
//!
//! The pipeline in module order:
//!
//! * [`embedding`] — vectors, dot/cosine similarity, the Gaussian prior
//!   estimator, and the seeded generator all randomness flows through.
//! * [`data`] — categories, boxes, proposals, ground truth, datasets.
//! * [`prompt`] — prompt construction: prior sampling plus stochastic
//!   similarity fusion.
//! * [`dictionary`] — per-category similarity dictionaries mined from a
//!   vocabulary, and the per-step negative-prompt draw.
//! * [`scoring`] — region-vs-prompt similarity, Gumbel-softmax aggregation
//!   in training, plain max at inference.
//! * [`loss`] — the alignment (binary cross-entropy) objective with its
//!   analytic gradients, plus monitoring-only localization terms.
//! * [`optim`] — decoupled-weight-decay Adam.
//! * [`trainer`] — the loop that connects all of the above, plus the
//!   end-to-end finite-difference gradient check.
//! * [`eval`] — detection metrics: interpolated average precision over an
//!   IoU-threshold sweep, and combined-inference comparisons across tasks.
//! * [`testbed`] — synthetic embedding tasks with known archetypes, planted
//!   confusers and cross-task contamination, for experiments at desk scale.
//! * [`io`] — versioned JSON artifacts for every stage.

pub mod data;
pub mod dictionary;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod io;
pub mod loss;
pub mod optim;
pub mod prompt;
pub mod scoring;
pub mod testbed;
pub mod trainer;

pub use data::{Box2D, Category, CategoryId, Dataset, GtInstance, ImageId, ImageSample, Proposal};
pub use dictionary::{
    build_similarity_dictionary, sample_negatives, SimilarityDictionary, SimilarityMode,
    VocabEntry, Vocabulary,
};
pub use embedding::{cosine, dot, estimate_gaussian_prior, Embedding, GaussianPrior, SeededRng};
pub use error::{Error, Result};
pub use eval::{
    combined_inference, detect, evaluate, CombinedReport, Detection, EvalReport, IOU_THRESHOLDS,
};
pub use loss::{alignment_loss, localization_loss, AlignmentForm};
pub use optim::{AdamW, AdamWParams};
pub use prompt::{init_visual_prompt, stochastic_similarity, text_init_prompt, VisualPrompt};
pub use scoring::{detector_forward, CategorySlot, ForwardResult, ScoreMode};
pub use testbed::{generate, make_paired_tasks, split_dataset, GeneratedTask, TestbedSpec};
pub use trainer::{
    construct_prompts, end_to_end_gradient_check, train_visual_prompts, GradCheckReport,
    TrainConfig, TrainReport,
};
