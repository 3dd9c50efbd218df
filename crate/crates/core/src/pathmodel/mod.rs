//! Dynamic path diagrams, their text format, and participant panels.

mod diagram;
mod panel;
mod text;

pub use diagram::{
    build_paper_diagram, trust_variables, validate_diagram, with_self_lags, LaggedEdge, PathDiagram, Role, Scale,
    VariableSpec, AIP, CUE, HP, OVER_UNDER, RELIANCE, TRUST,
};
pub use panel::{read_panel_csv, write_panel_csv, PanelDataset, Series, PANEL_HEADER, PANEL_VARIABLES};
pub use text::{parse_diagram, serialize_diagram};
