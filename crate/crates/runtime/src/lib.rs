pub mod cli;
pub mod datagen;
pub mod plant;
pub mod server;
pub mod session;
