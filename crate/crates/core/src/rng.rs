//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose key is
//! derived from the master seed and whose stream id packs
//! `(scheme, point, replicate)`. A replicate's draws therefore depend only on
//! its coordinates, never on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Scheme {
    Grid = 1,
    Residual = 2,
    /// Continuity-test bootstrap; the `Ĉ` estimate reuses these draws.
    Continuity = 3,
    Linearity = 4,
    Nonparametric = 5,
    Dgp = 6,
    LimitSimulation = 7,
    MonteCarlo = 8,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn key(master: u64) -> [u8; 32] {
    let mut state = master;
    let mut out = [0u8; 32];
    for chunk in out.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    out
}

/// Independent generator for `(scheme, point, replicate)` under `master`.
pub fn stream(master: u64, scheme: Scheme, point: u32, replicate: u32) -> ChaCha8Rng {
    debug_assert!(point < (1 << 24), "point index exceeds 24 bits");
    let mut rng = ChaCha8Rng::from_seed(key(master));
    let id =
        ((scheme as u64) << 56) | ((u64::from(point) & 0xFF_FFFF) << 32) | u64::from(replicate);
    rng.set_stream(id);
    rng
}

/// Child master seed for nested experiments (e.g. one per Monte Carlo replicate).
pub fn derive_seed(master: u64, scheme: Scheme, index: u64) -> u64 {
    let mut state = master ^ ((scheme as u64) << 56);
    let a = splitmix64(&mut state);
    let mut state = a ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    splitmix64(&mut state)
}
