//! Process exit codes. Every run termination maps to exactly one code.

use pcdyn_core::integrate::Termination;

pub const OK: u8 = 0;
pub const ERROR: u8 = 1;
pub const CONFIG: u8 = 2;
pub const COLLISION: u8 = 3;
pub const ESCAPE: u8 = 4;
pub const SOLVER_FAILURE: u8 = 5;
pub const RUNAWAY: u8 = 6;
pub const VERIFICATION: u8 = 7;

pub fn for_termination(t: Termination) -> u8 {
    match t {
        Termination::Completed => OK,
        Termination::Collision => COLLISION,
        Termination::Escape => ESCAPE,
        Termination::SolverFailure => SOLVER_FAILURE,
        Termination::RunawaySuspected => RUNAWAY,
    }
}

/// The code for a batch of runs: the highest one wins.
pub fn worst(codes: impl IntoIterator<Item = u8>) -> u8 {
    codes.into_iter().max().unwrap_or(OK)
}
