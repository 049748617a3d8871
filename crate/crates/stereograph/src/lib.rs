//! File formats and the command-line front end for [`stereograph_core`].
//!
//! Datasets are single JSON documents:
//!
//! ```json
//! {"name": "toy", "n": 2, "n_classes": 2,
//!  "features": [[0.0, 1.0], [1.0, 0.0]], "labels": [0, 1], "edges": [[0, 1]]}
//! ```
//!
//! `edges` may be `null` for feature-only datasets. Edge lists are
//! symmetrised when a model reads them.

pub mod cli;
pub mod io;

pub use cli::run;
