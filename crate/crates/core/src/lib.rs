//! Blindfolded-expert behavioral cloning: procedural gridworlds, scripted
//! demonstrators, a recurrent policy trained from scratch, evaluation
//! metrics, and exact computation of the generalization-bound terms.

pub mod blindfold;
pub mod datapipe;
pub mod env;
pub mod error;
pub mod evalsuite;
pub mod experiment;
pub mod experts;
pub mod grid;
pub mod rng;
pub mod seqpolicy;
pub mod theory;
pub mod trainer;
pub mod worldgen;

pub use blindfold::{BlindfoldSpec, Rect};
pub use datapipe::{Dataset, Manifest, Step, Trajectory};
pub use env::{EnvState, ObsLayout, Observation, StepResult};
pub use error::{Error, Result};
pub use experts::{Demonstration, ExpertKind};
pub use grid::{ActionId, Pos};
pub use rng::SplitMix64;
pub use worldgen::{CellKind, Family, GenParams, TaskSpec, TaskSplit};
