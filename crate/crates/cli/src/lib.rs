pub mod commands;
pub mod pipeline;
pub mod report;
pub mod selfcheck;
