//! Long-tailed classification on fixed feature vectors.
//!
//! A linear (or small MLP) classifier is first trained jointly under a
//! configurable sampler and loss. Its final layer is then rebalanced by one
//! of several second-stage methods: classifier retraining (cRT), nearest
//! class mean (NCM), tau-normalization, learnable weight scaling (LWS) and a
//! learned tau. Every stage is deterministic given its seed.
//!
//! ```
//! use longtail::{generate_longtail, class_profile, train_head, tau_normalize, evaluate};
//! use longtail::{SyntheticSpec, TrainConfig};
//!
//! let spec = SyntheticSpec { classes: 5, n_max: 60, n_min: 6, dim: 8, ..Default::default() };
//! let (train, _val, test) = generate_longtail(&spec).unwrap();
//! let profile = class_profile(&train, 40, 10).unwrap();
//! let cfg = TrainConfig { epochs: 5, ..Default::default() };
//! let (head, _) = train_head(&train, &cfg, None).unwrap();
//! let balanced = tau_normalize(&head, 1.0).unwrap();
//! let report = evaluate(&balanced, &test, &profile).unwrap();
//! assert!(report.top1_all > 20.0);
//! ```

pub mod balancing;
pub mod data;
pub mod error;
pub mod harness;
pub mod head;
pub mod losses;
pub mod rng;
pub mod sampling;
pub mod training;

pub use balancing::{
    cosine_predict, crt, learn_tau, lws_fit, ncm_fit, ncm_predict, select_tau, tau_normalize, CosinePredictor,
    LearnTauConfig, NcmClassifier, NcmMetric, TauObjective, TauSelection,
};
pub use data::{
    class_profile, generate_longtail, load_feature_dataset, write_feature_dataset, ClassProfile, Dataset, Decay,
    Split, SyntheticSpec, FEW_THRESHOLD, MANY_THRESHOLD,
};
pub use error::{Error, Result};
pub use harness::{evaluate, run_experiment, EvalReport, ExperimentConfig, Method, TrainFileConfig};
pub use head::{init_head, init_mlp, ClassifierHead, HeadKind, Prediction, Predictor};
pub use losses::{LossKind, LossSpec};
pub use sampling::{EpochSampler, SamplerKind, SamplingStrategy};
pub use training::{train_head, EpochStats, Freeze, TrainConfig};
