//! Benchmark fixtures shared by the criterion targets.

use esoseg_core::phantom::{generate_phantom, PhantomSpec};
use esoseg_core::PhantomCase;

/// A default-sized phantom with a fixed seed.
pub fn phantom(seed: u64) -> PhantomCase {
    generate_phantom(&PhantomSpec {
        seed,
        ..PhantomSpec::default()
    })
    .expect("default phantom spec is valid")
}
