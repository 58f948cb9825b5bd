//! Synthetic conditional data and the two stand-in quality measures:
//! `dist` (sliced Wasserstein distance to real samples) and `consistency`
//! (how confidently a frozen probe recognises the intended label).

mod curve;
mod dataset;
mod metrics;
mod probe;

pub use curve::{
    default_w_grid, plot_curves, read_curve_csv, write_curve_csv, CurveSettings, Evaluator, TradeoffPoint,
    REFERENCE_OFFSET,
};
pub use dataset::{to_conditions, ConditionalDataset};
pub use metrics::{
    column_stats, data_scale, distribution_distance, paired_t_test, projections, relative_distance, sliced_wasserstein_with,
    wasserstein_1d_sorted, MIN_SAMPLES, SW_PROJECTIONS, SW_SEED,
};
pub use probe::{condition_consistency, probe_accuracy, quadratic_features, Probe, ProbeTraining};
