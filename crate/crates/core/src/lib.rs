//! Corpus curation, evaluation and model-math toolkit for bilingual
//! (Thai/English) language-model data.

pub mod corpus;
pub mod datagen;
pub mod dedup;
pub mod evalkit;
pub mod hashing;
pub mod heuristics;
pub mod kd;
pub mod merge;
pub mod quality;
pub mod mixture;
pub mod pipeline;
