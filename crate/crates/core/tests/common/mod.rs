#![allow(dead_code)]

pub mod checks;

#[allow(unused_imports)]
pub use checks::{bfs, random_grid, rng};
use trajattr::dynaq::{perform, QInit, QTablePolicy};
use trajattr::gridworld::Environment;
use trajattr::trajstore::Trajectory;

/// Uniform random walk from the start.
pub fn random_walk(env: &Environment, seed: u64, max_len: usize) -> Trajectory {
    let mut r = trajattr::rng::stream(seed, "walk", 0);
    let p = QTablePolicy::new(env, QInit::Zero, 0.95, 0.1, &mut r);
    perform(env, &p, max_len, 1.0, &mut r).unwrap()
}
