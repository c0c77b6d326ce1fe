//! Scenario files shipped inside the binary.

use anyhow::{anyhow, Context, Result};

use crate::scenario::{parse_str, Scenario};

pub const BUILTINS: &[(&str, &str)] = &[
    ("example-sec5", include_str!("../scenarios/example-sec5.json")),
    ("example-sec6", include_str!("../scenarios/example-sec6.json")),
    ("fbm-covariance", include_str!("../scenarios/fbm-covariance.json")),
    ("ito-residual", include_str!("../scenarios/ito-residual.json")),
    ("picard-contraction", include_str!("../scenarios/picard-contraction.json")),
    ("bsde-truncation", include_str!("../scenarios/bsde-truncation.json")),
    ("continuation-linear", include_str!("../scenarios/continuation-linear.json")),
    ("cross-term-roundtrip", include_str!("../scenarios/cross-term-roundtrip.json")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    BUILTINS.iter().map(|(n, _)| *n)
}

pub fn source(name: &str) -> Option<&'static str> {
    BUILTINS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn load(name: &str) -> Result<Scenario> {
    let text = source(name)
        .ok_or_else(|| anyhow!("no builtin named `{name}` (available: {})", names().collect::<Vec<_>>().join(", ")))?;
    parse_str(text).with_context(|| format!("builtin `{name}`"))
}
