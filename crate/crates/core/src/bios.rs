//! Manufacturer backdoor BIOS passwords, for unlocking a suspect machine's
//! firmware so it can boot the acquisition client.

/// Result of a manufacturer lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiosLookup {
    /// Canonical table row name, when the manufacturer is known.
    pub manufacturer: Option<&'static str>,
    pub passwords: &'static [&'static str],
    pub advisory: Option<&'static str>,
}

const AWARD: &[&str] = &[
    "01322222", "589589", "589721", "595595", "598598", "ALFAROME", "ALLY", "ALLy", "aLLY", "aLLy", "aPAf",
    "award", "AWARD PW", "AWARD SW", "AWARD?SW", "AWARD_PW", "AWARD_SW", "AWKWARD", "awkward", "BIOSTAR",
    "CONCAT", "CONDO", "Condo", "condo", "d8on", "djonet", "HLT", "J256", "J262", "j262", "j322", "j332", "J64",
    "KDD", "LKWPETER", "Lkwpeter", "PINT", "pint", "SER", "SKY_FOX", "SYXZ", "syxz", "TTPTHA", "ZAAAADA", "ZAAADA",
    "ZBAAACA", "ZJAAADC",
];

const AMI: &[&str] = &[
    "AMI", "AAAMMMIII", "BIOS", "PASSWORD", "HEWITT RAND", "AMI?SW", "AMI_SW", "LKWPETER", "A.M.I.", "CONDO",
];

const PHOENIX: &[&str] = &["BIOS", "CMOS", "phoenix", "PHOENIX", "Phoenix"];

pub const TABLE: &[(&str, &[&str])] = &[("AWARD", AWARD), ("AMI", AMI), ("PHOENIX", PHOENIX)];

pub const UNKNOWN_ADVISORY: &str =
    "manufacturer not in the bundled table; consult the motherboard documentation or clear CMOS via jumper";

/// Case-insensitive lookup of `manufacturer` in the bundled table.
pub fn lookup_bios_backdoor(manufacturer: &str) -> BiosLookup {
    let wanted = manufacturer.trim();
    TABLE
        .iter()
        .find(|(name, _)| name.eq_ignore_ascii_case(wanted))
        .map(|(name, passwords)| BiosLookup {
            manufacturer: Some(name),
            passwords,
            advisory: None,
        })
        .unwrap_or(BiosLookup {
            manufacturer: None,
            passwords: &[],
            advisory: Some(UNKNOWN_ADVISORY),
        })
}
