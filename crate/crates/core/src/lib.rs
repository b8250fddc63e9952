pub mod numerics;
pub mod navworld;
pub mod textcodec;
pub mod metrics;
pub mod crossmap;
pub mod speaker;
pub mod trainer;
