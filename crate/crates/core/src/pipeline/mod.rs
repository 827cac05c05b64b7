//! Orchestration of the weakly supervised pipeline: synthetic scenes,
//! classifier training on weak labels, pseudo-label generation, segmenter
//! retraining, evaluation and the path ablation.

mod ablation;
mod batch;
mod classifier;
mod config;
mod dataset;
mod metrics;
mod optim;
mod pseudo;
pub mod scene;
mod segmenter;

pub use ablation::{ablate, ablation_rows, AblationReport, AblationRow};
pub use batch::stack_batches;
pub use classifier::{train_classifier, EpochLog};
pub use config::{DataConfig, LabelLevel, PcamConfig, PipelineConfig, ScenesConfig, SegmenterConfig, StageConfig};
pub use dataset::{build_inputs, list_clouds, load_scenes, save_scene, scene_id, stack_inputs, PreparedScene, SubcloudInput};
pub use metrics::{evaluate_labels, Metrics};
pub use optim::{OptimConfig, Sgd};
pub use pseudo::{
    generate_pseudo_labels, pseudo_labels, save_pseudo_labels, scene_maps, ClassCounts, PseudoLabelReport, SceneMaps,
    ScenePseudoLabels,
};
pub use scene::{class_names, generate_rooms, generate_scene, room_recipe, Primitive, RoomConfig, SceneRecipe, Shape, CLASSES};
pub use segmenter::{evaluate, predict_scene, train_segmenter, Segmenter};
