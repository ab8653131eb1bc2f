//! Outcome prediction for endoscopic sinus surgery from preoperative
//! variables: cohort schema and cleaning, six base classifiers, ensembles,
//! explanations, and the reader-study protocol.

pub mod bench;
pub mod boost;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod explain;
pub mod forest;
pub mod ingest;
pub mod linear;
pub mod mlp;
pub mod model;
pub mod naive_bayes;
pub mod pipeline;
pub mod schema;
pub mod svm;
pub mod tree;

pub use dataset::LabeledDataset;
pub use error::{Error, Result};
pub use model::{Classifier, FittedModel, ModelKind, ModelSpec};
pub use schema::Schema;
