pub mod bench;
pub mod eval;
pub mod gradcheck;
pub mod train;
