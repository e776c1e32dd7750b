//! Grouped Shapley attribution and factor sweeps.

mod groups;
mod report;
mod sensitivity;
mod shapley;

pub use groups::{group_index, mask_instance, Background, Coalition, Group, FULL_COALITION, GROUP_NAMES, N_GROUPS};
pub use report::{beeswarm_csv, global_importance, group_value, waterfall_export, Waterfall, WaterfallRow};
pub use sensitivity::{scaled_input, sensitivity_grid, SensitivityGrid};
pub use shapley::{
    shapley_exact, shapley_sample, Attribution, CoalitionModel, GroupAttribution, ModelGame, DEFAULT_N_PERMS,
    MAX_EXACT_GROUPS,
};
