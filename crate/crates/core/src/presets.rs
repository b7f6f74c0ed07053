//! Built-in reference profiles for three consumer testbeds:
//! A (RTX A6000 / Xeon 8358 / PCIe 4.0 x16), B (RTX 3090 / EPYC 7742 /
//! PCIe 4.0 x16) and C (RTX 2080Ti / Xeon Gold 6230 / PCIe 3.0 x16).

use crate::perf_model::{load_profile, HardwareProfile};

pub const TESTBED_A_JSON: &str = include_str!("../fixtures/profiles/testbed_a.json");
pub const TESTBED_B_JSON: &str = include_str!("../fixtures/profiles/testbed_b.json");
pub const TESTBED_C_JSON: &str = include_str!("../fixtures/profiles/testbed_c.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Testbed {
    A,
    B,
    C,
}

impl Testbed {
    pub const ALL: [Testbed; 3] = [Testbed::A, Testbed::B, Testbed::C];

    pub fn json(self) -> &'static str {
        match self {
            Testbed::A => TESTBED_A_JSON,
            Testbed::B => TESTBED_B_JSON,
            Testbed::C => TESTBED_C_JSON,
        }
    }

    pub fn profile(self) -> HardwareProfile {
        load_profile(self.json().as_bytes()).expect("built-in profile is valid")
    }

    pub fn from_name(name: &str) -> Option<Testbed> {
        match name.to_ascii_uppercase().as_str() {
            "A" => Some(Testbed::A),
            "B" => Some(Testbed::B),
            "C" => Some(Testbed::C),
            _ => None,
        }
    }
}
