//! Seeding.
//!
//! Every random stream in a pipeline derives from one 64-bit root seed.
//! A stage stream is seeded with
//!
//! ```text
//! splitmix64(root ^ fnv1a64(stage_name) ^ splitmix64(index))
//! ```
//!
//! where `stage_name` is one of the constants in [`stage`] and `index` is a
//! per-stage counter (the online seed, a worker index, ...). The generator
//! itself is ChaCha8.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SkillRng = ChaCha8Rng;

pub mod stage {
    pub const DEMOS: &str = "demos";
    pub const SKILLS: &str = "skills";
    pub const RISK_DATA: &str = "risk-data";
    pub const RISK_TRAIN: &str = "risk-train";
    pub const ONLINE: &str = "online";
    pub const DIAGNOSTICS: &str = "diagnostics";
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn derive_seed(root: u64, stage: &str, index: u64) -> u64 {
    splitmix64(root ^ fnv1a64(stage) ^ splitmix64(index))
}

pub fn stage_rng(root: u64, stage: &str, index: u64) -> SkillRng {
    SkillRng::seed_from_u64(derive_seed(root, stage, index))
}

pub fn seeded(seed: u64) -> SkillRng {
    SkillRng::seed_from_u64(seed)
}
