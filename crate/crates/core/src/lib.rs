//! Recurrent chunked reading for extractive question answering over long
//! documents.

pub mod answer;
pub mod checkpoint;
pub mod chunking;
pub mod data;
pub mod encoder;
pub mod episode;
pub mod model;
pub mod tensor;
pub mod trainer;
pub mod cli;
pub mod config;
pub mod metrics;
