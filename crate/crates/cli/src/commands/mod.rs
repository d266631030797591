pub mod bsa;
pub mod grpo;
pub mod refine;
pub mod ring;
