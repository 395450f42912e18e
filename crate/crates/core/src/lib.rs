pub mod analysis;
pub mod cli;
pub mod corpus;
pub mod depparse;
pub mod politeness;
pub mod kmeans;
pub mod linalg;
pub mod logistic;
pub mod forecast;
pub mod prompts;
