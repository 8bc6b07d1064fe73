//! Semi-supervised multi-phase liver segmentation: co-heterogeneous
//! consistency training, output-space adversarial adaptation and hole-based
//! pseudo-labelling, on deterministic synthetic studies.

pub mod ada;
pub mod augment;
pub mod backbone;
pub mod consistency;
pub mod error;
pub mod evaluation;
pub mod heterofusion;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod pseudolabel;
pub mod synthdata;
pub mod trainer;
pub mod volume_io;

pub use error::{Error, Result};
pub use heterofusion::ViewCombo;
pub use model::{Checkpoint, Model, ModelKind};
pub use nn::{ParamStore, Tensor};
pub use synthdata::{Datasets, LabelMask, PhaseId, Study, Volume, IGNORE};
pub use trainer::TrainConfig;
