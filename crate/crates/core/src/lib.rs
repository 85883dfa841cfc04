pub mod cli;
pub mod codegen;
pub mod linearize;
pub mod milp;
pub mod model;
pub mod modelfile;
pub mod predicates;
pub mod quantize;
pub mod rational;
pub mod sim;
pub mod synth;
pub mod syntax;
