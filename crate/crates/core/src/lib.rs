pub mod aggregator;
pub mod corpus;
pub mod encoders;
pub mod eval;
pub mod fusion_lm;
pub mod nn;
pub mod params;
pub mod snapshot;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod video_io;
