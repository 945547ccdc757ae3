//! Post-hoc bias auditing for frozen classifiers.
//!
//! Activations of a classifier's last ReLU layer are decomposed into
//! class-conditional concept banks with NMF. A one-step gradient probe on the
//! misclassified audit samples scores every concept for spuriousness, and
//! flagged concepts can be removed from the representation at inference time.

pub mod data;
pub mod linalg;
pub mod model;
pub mod concepts;
pub mod mitigate;
pub mod probe;
pub mod pipeline;
pub mod stats;
