//! Named bundles of config defaults.

pub const NAMES: &[&str] = &["paper-regime"];

/// Ten classes with heavily unbalanced label accuracy: 0.01 for class 5 and
/// 0.95 for class 7, mean 0.55. Off-diagonal mass is spread uniformly.
/// With clean labels the default trainer reaches about 97% on this mixture.
const PAPER_REGIME: &[(&str, &str)] = &[
    ("source", "synthetic"),
    ("classes", "10"),
    ("per_class", "1000"),
    ("dim", "16"),
    ("separation", "4"),
    ("std", "1"),
    ("data_seed", "100"),
    ("noise_seed", "200"),
    ("confidence", "0.9"),
    (
        "noise_accuracy",
        "0.40,0.90,0.60,0.66,0.85,0.01,0.30,0.95,0.08,0.75",
    ),
    ("variants", "c3l:ensemble,kl_only:clip,c3l:pseudo"),
    ("seeds", "0..5"),
];

pub fn lookup(name: &str) -> Option<&'static [(&'static str, &'static str)]> {
    match name {
        "paper-regime" => Some(PAPER_REGIME),
        _ => None,
    }
}
