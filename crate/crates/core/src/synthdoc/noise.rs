use rand::seq::index;

use super::corpus::FieldAnnotation;
use super::schema::Schema;
use crate::error::{Error, Result};
use crate::rng;

/// Outcome of annotation-noise injection.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyAnnotations {
    pub annotations: Vec<Vec<FieldAnnotation>>,
    /// `(document index, field index)` of every corrupted pair, sorted.
    pub corrupted: Vec<(usize, usize)>,
}

/// Replaces exactly `round(ratio × N)` key-value pairs, chosen uniformly without
/// replacement, by kind-consistent values that differ from the originals.
pub fn inject_annotation_noise(
    schema: &Schema,
    truth_sets: &[Vec<FieldAnnotation>],
    ratio: f64,
    seed: u64,
) -> Result<NoisyAnnotations> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::key("noise_ratio", format!("{ratio} outside [0,1]")));
    }
    let slots: Vec<(usize, usize)> = truth_sets
        .iter()
        .enumerate()
        .flat_map(|(d, set)| (0..set.len()).map(move |f| (d, f)))
        .collect();
    let n_corrupt = (ratio * slots.len() as f64).round() as usize;
    let mut pick = rng::stream(seed, "annotation-noise/select", 0);
    let mut corrupted: Vec<(usize, usize)> = index::sample(&mut pick, slots.len(), n_corrupt)
        .into_iter()
        .map(|i| slots[i])
        .collect();
    corrupted.sort_unstable();

    let mut annotations = truth_sets.to_vec();
    for &(d, f) in &corrupted {
        let a = &mut annotations[d][f];
        let field = schema
            .field(&a.key)
            .ok_or_else(|| Error::structural(format!("key `{}` not in schema", a.key)))?;
        let mut r = rng::stream(seed, "annotation-noise/value", (d * 64 + f) as u64);
        a.value = field.space.plausible_replacement(&a.value, &mut r);
    }
    Ok(NoisyAnnotations {
        annotations,
        corrupted,
    })
}
