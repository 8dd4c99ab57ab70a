pub mod analysis;
pub mod bound;
pub mod cfg;
pub mod crs;
pub mod evm;
pub mod gas;
pub mod input;
pub mod linear;
pub mod meter;
pub mod rbr;
pub mod size;
pub mod solver;
