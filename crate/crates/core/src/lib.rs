pub mod data;
pub mod deploy;
pub mod dnas;
pub mod hwcost;
pub mod pipeline;
pub mod space;
pub mod tensor;
