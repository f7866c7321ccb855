use std::collections::BTreeMap;

use murmur_autodiff::StreamKey;
use rand::seq::SliceRandom;

use super::{ClassLabel, Split};

/// Seeded per-class split of patients into train/validation/test.
///
/// `fractions` are (validation, test) shares; each class contributes
/// `round(n·share)` patients to those splits and the rest to train.
/// The result depends only on `(patient ids, labels, fractions, key)`.
pub fn stratified_split(
    patients: &[(String, ClassLabel)],
    fractions: (f64, f64),
    key: StreamKey,
) -> BTreeMap<String, Split> {
    let mut out = BTreeMap::new();
    for label in ClassLabel::ALL {
        let mut ids: Vec<&String> = patients
            .iter()
            .filter(|(_, l)| *l == label)
            .map(|(p, _)| p)
            .collect();
        ids.sort();
        ids.shuffle(&mut key.derive(label.as_str()).rng());
        let n = ids.len();
        let n_val = ((n as f64 * fractions.0).round() as usize).min(n);
        let n_test = ((n as f64 * fractions.1).round() as usize).min(n - n_val);
        for (i, id) in ids.into_iter().enumerate() {
            let split = if i < n_val {
                Split::Validation
            } else if i < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
            out.insert(id.clone(), split);
        }
    }
    out
}
