pub mod eval;
pub mod grid;
pub mod net;
pub mod pipeline;
pub mod synth;
pub mod tensor_io;
pub mod train;
pub mod uq;
