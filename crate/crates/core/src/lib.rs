//! Bit-line computing (BC) SRAM accelerator simulator and the software
//! toolchain that targets it.

pub mod bcarray;
pub mod fxp;
pub mod gcw;
pub mod mapper;
pub mod netmodel;
pub mod pipeline;
pub mod quantopt;
