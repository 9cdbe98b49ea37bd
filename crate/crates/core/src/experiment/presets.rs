//! Builtin experiment configurations.

/// `(name, TOML text)` of every builtin preset.
pub const PRESETS: &[(&str, &str)] = &[
    ("paper-fig3", include_str!("../../presets/paper-fig3.toml")),
    ("paper-fig3-full", include_str!("../../presets/paper-fig3-full.toml")),
    ("bias-1d", include_str!("../../presets/bias-1d.toml")),
    ("bias-network", include_str!("../../presets/bias-network.toml")),
    ("contraction-quadratic", include_str!("../../presets/contraction-quadratic.toml")),
    ("msd-quadratic", include_str!("../../presets/msd-quadratic.toml")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

pub fn names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::ExperimentConfig;

    #[test]
    fn every_preset_validates() {
        for (name, text) in PRESETS {
            let c = ExperimentConfig::from_toml_str(text, &[]).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(c.name, *name);
        }
    }
}
