//! Topological semantic graph memory (TSGM) for image-goal navigation.
//!
//! The crate covers the whole loop on a procedurally generated gridworld:
//! incremental image/object graph construction ([`builder`]), the cross graph
//! mixer ([`mixer`]), memory attention and the recurrent policy ([`policy`]),
//! imitation and PPO training ([`training`]), and the simulator with its
//! Success/SPL evaluation ([`gridsim`]).

pub mod autodiff;
pub mod builder;
pub mod config;
pub mod encoders;
pub mod error;
pub mod graph;
pub mod gridsim;
pub mod io;
pub mod mixer;
pub mod model;
pub mod params;
pub mod policy;
pub mod tensor;
pub mod training;

pub use error::{Result, TsgmError};
