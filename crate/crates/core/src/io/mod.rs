//! File formats and rendering: the ATT1 tensor format, the ATW1 weights
//! container, flat key=value run configuration, PNG/PPM image files, and
//! heatmap overlay rendering.

pub mod imgfile;
pub mod overlay;
pub mod runcfg;
pub mod tensor;
pub mod weights;
