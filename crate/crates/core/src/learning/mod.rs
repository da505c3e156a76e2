pub mod backprop;
pub mod optim;
pub mod train;

pub use backprop::*;
pub use optim::*;
pub use train::*;
