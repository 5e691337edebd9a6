//! Figures for feature sets: t-SNE scatter projections and channel-importance
//! topographic maps, written as SVG with machine-readable companions.

pub mod error;
pub mod scatter;
pub mod topomap;
pub mod tsne;

pub use error::{Error, Result};
pub use scatter::{pick_subjects, render_scatter, scatter_svg, write_coordinates_csv, ColorBy, LegendEntry};
pub use topomap::{electrode_position, ChannelValue, render_topomap, Interpolator, TopomapSummary, ELECTRODE_POSITIONS};
pub use tsne::{tsne_project, Embedding2D, KlPoint, TsneConfig};
