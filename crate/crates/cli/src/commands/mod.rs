pub mod bench;
pub mod eval;
pub mod gen;
pub mod inspect;
pub mod rerank;
pub mod train;
