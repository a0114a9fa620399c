//! Shared-control planning between an assistive planner and a boundedly
//! rational human driver.
//!
//! The planner leads a finite-horizon feedback Stackelberg game on a small
//! driving grid; the driver follows with a logit (quantal) response at a
//! sparse set of decision stages. Driver utilities are learned from observed
//! actions: a meta utility is trained across a population of driver types and
//! then adapted to one driver from a handful of demonstrations, after which
//! the planner drives with it in a receding-horizon loop.
//!
//! The accompanying guide in `book/` walks through each piece; its code
//! listings are compiled as doc tests of this crate.

pub mod datagen;
pub mod dataset;
pub mod env;
pub mod error;
pub mod game;
pub mod learning;
pub mod planner;
pub mod simplex;
pub mod table;

pub use env::{Action, DecisionSchedule, DriverTypeParams, Scenario, TypeDistribution, VehicleState};
pub use error::{Error, Result};
pub use game::{FseOptions, FseSolution, PolicyTrajectory, SolverConfig, StateSets, ValueTable};
pub use simplex::Strategy;
pub use table::UtilityTable;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/grid-world.md")]
    mod grid_world {}
    #[doc = include_str!("../../../book/src/quantal-response.md")]
    mod quantal_response {}
    #[doc = include_str!("../../../book/src/equilibrium.md")]
    mod equilibrium {}
    #[doc = include_str!("../../../book/src/learning.md")]
    mod learning {}
    #[doc = include_str!("../../../book/src/driving.md")]
    mod driving {}
}
