pub mod tape;
pub mod neurons;
pub mod quant;
pub mod netdata;
pub mod bruno;
pub mod harness;
