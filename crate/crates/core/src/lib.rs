pub mod numerics;
pub mod model;
pub mod corpus;
pub mod seeds;
pub mod training;
pub mod discovery;
pub mod circuits;
pub mod patching;
pub mod attack;
pub mod report;
pub mod experiment;
