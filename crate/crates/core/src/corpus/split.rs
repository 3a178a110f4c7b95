use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;

use super::{CorpusError, Label, LabeledDataset, Sample};
use crate::util::{derive_seed, rng};

/// Indices of `samples` in a seeded random order that depends only on the
/// sample ids and the seed, not on the input order.
fn shuffled_by_id(samples: &[&Sample], seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.sort_by(|&a, &b| samples[a].id.cmp(&samples[b].id));
    idx.shuffle(&mut rng(seed));
    idx
}

/// Labels a random ⌊n/2⌋ subset as members and the rest as non-members.
pub fn split_half(dataset: &LabeledDataset, seed: u64) -> Result<LabeledDataset, CorpusError> {
    if let Some(s) = dataset.samples().iter().find(|s| s.label.is_some()) {
        return Err(CorpusError::Precondition(format!("split_half needs unlabeled samples; {:?} is labeled", s.id)));
    }
    let refs: Vec<&Sample> = dataset.samples().iter().collect();
    let order = shuffled_by_id(&refs, seed);
    let members: HashSet<usize> = order.into_iter().take(dataset.len() / 2).collect();
    let samples = dataset
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| s.with_label(Some(if members.contains(&i) { Label::Member } else { Label::NonMember })))
        .collect();
    LabeledDataset::new(dataset.name(), samples)
}

/// Label-stratified split into (validation, test) with sizes in the ratio
/// `ratio.0 : ratio.1`.
///
/// The validation total is `round(n * r1 / (r1 + r2))`; it is distributed over
/// the classes by largest remainder so each class lands within one sample of
/// its exact share. Both outputs keep the input order.
pub fn split_val_test(
    dataset: &LabeledDataset,
    ratio: (u32, u32),
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), CorpusError> {
    let (r1, r2) = (ratio.0 as u64, ratio.1 as u64);
    if r1 == 0 || r2 == 0 {
        return Err(CorpusError::Precondition("ratio components must be positive".into()));
    }
    if dataset.is_empty() {
        return Err(CorpusError::Precondition("cannot split an empty dataset".into()));
    }
    let mut classes: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    classes.insert(Label::NonMember, Vec::new());
    classes.insert(Label::Member, Vec::new());
    for (i, s) in dataset.samples().iter().enumerate() {
        let label = s
            .label
            .ok_or_else(|| CorpusError::Stratification(format!("sample {:?} has no label", s.id)))?;
        classes.get_mut(&label).unwrap().push(i);
    }
    for (label, members) in &classes {
        if members.len() < 2 {
            return Err(CorpusError::Stratification(format!(
                "class {label} has {} sample(s); need at least 2",
                members.len()
            )));
        }
    }

    let n = dataset.len() as u64;
    let denom = r1 + r2;
    // round-half-up of n*r1/denom in integers
    let target = (2 * n * r1 + denom) / (2 * denom);
    let mut quotas: Vec<(Label, u64, u64)> = classes
        .iter()
        .map(|(label, idx)| {
            let exact = idx.len() as u64 * r1;
            (*label, exact / denom, exact % denom)
        })
        .collect();
    let assigned: u64 = quotas.iter().map(|q| q.1).sum();
    let mut extra = target.saturating_sub(assigned);
    let mut by_remainder: Vec<usize> = (0..quotas.len()).collect();
    by_remainder.sort_by(|&a, &b| quotas[b].2.cmp(&quotas[a].2).then(a.cmp(&b)));
    for &q in &by_remainder {
        if extra == 0 {
            break;
        }
        if quotas[q].2 > 0 {
            quotas[q].1 += 1;
            extra -= 1;
        }
    }

    let mut in_val = vec![false; dataset.len()];
    for (label, k, _) in &quotas {
        let members = &classes[label];
        let refs: Vec<&Sample> = members.iter().map(|&i| &dataset.samples()[i]).collect();
        let order = shuffled_by_id(&refs, derive_seed(seed, &format!("val-test-{label}")));
        for &j in order.iter().take(*k as usize) {
            in_val[members[j]] = true;
        }
    }
    let (mut val, mut test) = (Vec::new(), Vec::new());
    for (i, s) in dataset.samples().iter().enumerate() {
        if in_val[i] {
            val.push(s.clone());
        } else {
            test.push(s.clone());
        }
    }
    Ok((
        LabeledDataset::new(format!("{}-val", dataset.name()), val)?,
        LabeledDataset::new(format!("{}-test", dataset.name()), test)?,
    ))
}
