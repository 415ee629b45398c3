pub mod autodiff;
pub mod csp;
pub mod data;
pub mod dsp;
pub mod eval;
pub mod lda;
pub mod model;
