pub mod classify;
pub mod cli;
pub mod compliance;
pub mod corpus;
pub mod eval;
pub mod grammar;
pub mod llm;
pub mod records;
pub mod taxonomy;
