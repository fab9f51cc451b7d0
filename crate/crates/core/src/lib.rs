pub mod annotation;
pub mod backend;
pub mod clock;
pub mod corpus;
pub mod error;
pub mod events;
pub mod metrics;
pub mod platform;
pub mod prompt;
pub mod seed;
pub mod setting;
pub mod sim;
pub mod text;
pub mod validation;
