//! Identifier newtypes and the virtual-time base unit shared across modules.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Vocabulary token id. Plain alias: LIP code does arithmetic on tokens
/// (`pos + step`, `t != EOS`) and a wrapper would only add noise.
pub type TokenId = u32;

/// Position of a token within a KV file's context. Unitless, starts at 0,
/// strictly increasing within a file but never required to be dense.
pub type Position = u32;

/// Virtual time and durations, in nanoseconds. Integer so that cost
/// arithmetic is exact and replay is bitwise reproducible.
pub type Nanos = u64;

pub const NANOS_PER_SEC: f64 = 1e9;

pub fn secs_to_nanos(s: f64) -> Nanos {
    (s * NANOS_PER_SEC).round() as Nanos
}

pub fn nanos_to_secs(n: Nanos) -> f64 {
    n as f64 / NANOS_PER_SEC
}

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident, $prefix:expr) => {
        $(#[$doc])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(
    /// LIP process id, assigned sequentially by the kernel.
    Pid,
    "pid"
);
id_type!(
    /// LIP thread id, unique across the kernel (not per process).
    Tid,
    "tid"
);
id_type!(
    /// Owner identity for KV file permission checks. The kernel maps each
    /// process to one principal; pre-seeded system files use a distinct one.
    Principal,
    "uid"
);

impl Principal {
    /// Identity used when the host (not a LIP) seeds or inspects files.
    pub const SYSTEM: Principal = Principal(0);
}
