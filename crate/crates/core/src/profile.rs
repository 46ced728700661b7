//! Dataset profiles bundling the per-dataset preprocessing and training
//! defaults.

use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Profile {
    #[default]
    Vpn,
    NonVpn,
    Tor,
    NonTor,
}

impl Profile {
    pub const ALL: [Profile; 4] = [Profile::Vpn, Profile::NonVpn, Profile::Tor, Profile::NonTor];

    pub fn name(self) -> &'static str {
        match self {
            Profile::Vpn => "vpn",
            Profile::NonVpn => "nonvpn",
            Profile::Tor => "tor",
            Profile::NonTor => "nontor",
        }
    }

    /// Length of the time blocks flows are cut into, if any.
    pub fn time_block_seconds(self) -> Option<f64> {
        match self {
            Profile::Tor => Some(60.0),
            _ => None,
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Profile::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown profile {s:?} (expected vpn, nonvpn, tor or nontor)"))
    }
}
