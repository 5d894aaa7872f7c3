//! Scene-graph-grounded retrieval for visual question answering.
//!
//! A scene graph is turned into one text chunk per object category, the
//! chunks are embedded into a per-image vector index, and the top-k chunks
//! for a question are placed into a prompt for a text-only language model.
//! An evaluation harness scores answers against the ground-truth graph.

pub mod answer;
pub mod chunks;
pub mod evaluation;
pub mod http;
pub mod prompt;
pub mod relation_model;
pub mod scene_graph;
pub mod util;
pub mod vector_store;
