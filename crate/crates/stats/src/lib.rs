//! Statistical procedures over condition profiles and record tables.
//!
//! Every resampling routine takes an explicit seed and draws resample `i`
//! from counter substream `i`, so identical seeds give identical results.
//! Profile distances are in percentage points. Permutation and sign-flip
//! p-values are `(hits + 1) / (draws + 1)` with the observed arrangement
//! counted among the hits when it is drawn or enumerated.

pub mod bootstrap;
pub mod calibration;
pub mod contrast;
pub mod cooccur;
pub mod cosine;
pub mod depth;
pub mod describe;
pub mod error;
pub mod matching;
pub mod regress;

pub use bootstrap::{bootstrap_mean_ci, clustered_bootstrap, ClusteredBootstrapResult, ClusteredRow};
pub use calibration::{effect_size_calibration, CalibrationProfile, EffectSizeResult, LeaveOut};
pub use contrast::{
    burden_adjust, burden_adjust_profiles, paired_profile_test, paired_profile_test_diffs,
    restricted_component_permutation, ContrastConfig, PermutationResult, ProfileContrastResult,
};
pub use cooccur::{mantel_test, phi_matrix, MantelResult, PhiMatrix};
pub use cosine::{cosine_map, CosineConfig, CosineMapResult, RecordGroup};
pub use depth::{depth_topography, DepthConfig, DepthResult, DepthRow};
pub use describe::{bh_adjust, cohens_d, ks_uniform};
pub use error::{Result, StatsError};
pub use matching::{dose_match, visible_damage_match, DoseCondition, DoseMatchResult, DoseProxy, DoseScope, MatchCondition, VisibleMatchResult};
pub use regress::residualize_profiles;
