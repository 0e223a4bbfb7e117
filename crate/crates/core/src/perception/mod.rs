//! Reading images back as attributes: a task-trained classifier answers a
//! fixed question per attribute, answers fill the caption template, and its
//! feature layer drives a Fréchet distance over renders.

pub mod caption;
pub mod classifier;
pub mod eval;
pub mod frechet;

pub use caption::{
    answer_attributes, attribute_agreement, caption_triplane, caption_triplanes, paired_adherence, prompt_adherence,
    render_for_classifier, view_consistency,
};
pub use classifier::{
    argmax_first, down_up, labels, train_classifier, AttributeClassifier, ClassifierConfig, ClassifierMeta, FEATURE_DIM,
    MIN_CORPUS, QUESTIONS,
};
pub use eval::{
    chance_agreement, evaluate_diffusion, evaluate_gan, make_prompts, reference_stats, EvalReport, PromptRecord, Reference,
};
pub use frechet::{frechet_distance, FeatureMoments, FrechetStats};
