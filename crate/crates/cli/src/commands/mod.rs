pub mod check_jacobian;
pub mod eval;
pub mod export;
pub mod register;
pub mod synth;
