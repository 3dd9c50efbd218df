//! State-space realization of dynamic path models: compilation, Kalman
//! filtering and smoothing, EM estimation and one-step-ahead prediction.

mod em;
mod fitio;
mod kalman;
mod predict;
mod statespace;

pub use em::{aic, aic_value, em_fit, FitConfig, FitResult};
pub use fitio::{parse_fit, serialize_fit};
pub use kalman::{kalman_filter, kalman_smooth, FilterOutput, SmootherOutput};
pub use predict::{classify_over_under, predict_one_step, PredictionRecord, Predictor, DEFAULT_THRESHOLD};
pub use statespace::{to_state_space, ModelParams, StateSeries, StateSpaceModel};

use crate::error::Result;
use crate::pathmodel::{PanelDataset, PathDiagram};

/// Lay out every participant of `panel` for the compiled `diagram`.
pub fn panel_state_series(diagram: &PathDiagram, panel: &PanelDataset) -> Result<Vec<StateSeries>> {
    let layout = statespace::Layout::new(diagram)?;
    let binding = layout.bind(&panel.variables)?;
    panel.series.iter().map(|s| layout.series_data(&binding, s)).collect()
}

/// Compile a fit into its state-space model.
pub fn fit_state_space(fit: &FitResult) -> Result<StateSpaceModel> {
    statespace::Layout::new(&fit.diagram)?.model(&fit.params())
}
