pub mod driver;
pub mod pysource;
pub mod session;
pub mod workspace;
pub mod llm;
pub mod tools;
pub mod telemetry;
pub mod subagent;
pub mod orchestrator;
pub mod process;
pub mod fixtures;
