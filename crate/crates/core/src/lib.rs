//! Grid resource-management services over a simulated execution fabric:
//! steering, job monitoring, runtime/queue/transfer estimation and a
//! minimal planner, wired together by [`grid::Grid`].

pub mod fabric;
pub mod model;
pub mod history;
pub mod estimators;
pub mod trace;
pub mod monitoring;
pub mod scheduler;
pub mod steering;
pub mod scenario;
pub mod error;
pub mod grid;
pub mod experiments;
