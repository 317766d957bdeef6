pub mod contracts;
pub mod executor;
pub mod http;
pub mod llmclient;
pub mod policy;
pub mod registry;
pub mod symstate;
pub mod toolsim;
pub mod verify;
