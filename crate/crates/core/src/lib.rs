pub mod bench;
pub mod config;
pub mod deepsearch;
pub mod intent;
pub mod kb;
pub mod llm;
pub mod par;
pub mod pipeline;
pub mod runtime;
pub mod scenario;
pub mod sop_extract;
pub mod text;
pub mod tickets;
