pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod fabric;
pub mod fptree;
pub mod harness;
pub mod knn;
pub mod oracle;
pub mod pipeline;
pub mod recovery;
