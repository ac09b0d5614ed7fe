//! Counter-based seed derivation: one master seed fans out to independent
//! streams (design, fit starts, chains, band jobs) without shared RNG state.

pub const DESIGN: u64 = 1;
pub const FIT: u64 = 2;
pub const CHAIN: u64 = 3;
pub const PREDICTIVE: u64 = 4;
pub const BAND: u64 = 5;
pub const REFERENCE: u64 = 6;
pub const HOLDOUT: u64 = 7;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream) ^ index)
}
