//! Balanced genuine/impostor patch-pair construction across modalities, and
//! the seeded train/test subject split.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visible,
    Polarimetric,
    ThermalS0,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Visible => "visible",
            Modality::Polarimetric => "polarimetric",
            Modality::ThermalS0 => "thermal_s0",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visible" => Ok(Modality::Visible),
            "polarimetric" => Ok(Modality::Polarimetric),
            "thermal_s0" => Ok(Modality::ThermalS0),
            other => Err(Error::Data(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Baseline,
    Expression,
}

impl Condition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Baseline => "baseline",
            Condition::Expression => "expression",
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Condition::Baseline),
            "expression" => Ok(Condition::Expression),
            other => Err(Error::Data(format!("unknown condition `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum RangeId {
    R1,
    R2,
    R3,
}

impl RangeId {
    pub fn as_str(&self) -> &'static str {
        match self {
            RangeId::R1 => "R1",
            RangeId::R2 => "R2",
            RangeId::R3 => "R3",
        }
    }

    pub fn all() -> [RangeId; 3] {
        [RangeId::R1, RangeId::R2, RangeId::R3]
    }
}

impl std::str::FromStr for RangeId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "R1" => Ok(RangeId::R1),
            "R2" => Ok(RangeId::R2),
            "R3" => Ok(RangeId::R3),
            other => Err(Error::Data(format!("unknown range `{other}`"))),
        }
    }
}

/// One preprocessed patch with its provenance.
#[derive(Debug, Clone)]
pub struct PatchRecord {
    pub subject_id: String,
    pub modality: Modality,
    pub condition: Condition,
    pub range_id: RangeId,
    pub grid_pos: (usize, usize),
    /// [C, P, P]
    pub patch: Tensor,
}

/// A training pair, referring into the record slice it was generated from.
/// `y_cont` is 0 for genuine (same subject) and 1 for impostor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchPair {
    pub vis: usize,
    pub pol: usize,
    pub y_cont: u8,
}

#[derive(Debug, Clone, Copy)]
pub struct PairOptions {
    /// impostor count = ratio x genuine count
    pub ratio: f64,
    /// restrict impostor pairs to matching range_id
    pub same_range: bool,
}

impl Default for PairOptions {
    fn default() -> Self {
        PairOptions {
            ratio: 1.0,
            same_range: false,
        }
    }
}

/// Emit every genuine pair (same subject, same grid position, cross-modality)
/// and a seeded uniform without-replacement sample of impostor pairs sized
/// `ratio x genuine`. Output order is a deterministic shuffle of the seed.
pub fn generate_pairs(
    records: &[PatchRecord],
    seed: u64,
    opts: &PairOptions,
) -> Result<Vec<PatchPair>> {
    if opts.ratio <= 0.0 {
        return Err(Error::Config("pair ratio must be positive".into()));
    }
    let subjects: BTreeSet<&str> = records.iter().map(|r| r.subject_id.as_str()).collect();
    if subjects.len() < 2 {
        return Err(Error::Data(
            "pair generation needs at least 2 subjects (no impostor pool)".into(),
        ));
    }

    // bucket by grid position: (visible indices, polarimetric-side indices)
    let mut by_pos: BTreeMap<(usize, usize), (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        let slot = by_pos.entry(rec.grid_pos).or_default();
        match rec.modality {
            Modality::Visible => slot.0.push(i),
            Modality::Polarimetric | Modality::ThermalS0 => slot.1.push(i),
        }
    }

    let mut genuine = Vec::new();
    let mut impostor_pool = Vec::new();
    for (vis_ids, pol_ids) in by_pos.values() {
        for &v in vis_ids {
            for &p in pol_ids {
                let rv = &records[v];
                let rp = &records[p];
                if rv.subject_id == rp.subject_id {
                    genuine.push(PatchPair {
                        vis: v,
                        pol: p,
                        y_cont: 0,
                    });
                } else if !opts.same_range || rv.range_id == rp.range_id {
                    impostor_pool.push(PatchPair {
                        vis: v,
                        pol: p,
                        y_cont: 1,
                    });
                }
            }
        }
    }
    if genuine.is_empty() {
        return Err(Error::Data("no co-located cross-modal genuine pairs".into()));
    }
    let target = (opts.ratio * genuine.len() as f64).round() as usize;
    if impostor_pool.len() < target {
        return Err(Error::Data(format!(
            "impostor pool {} smaller than requested {target}",
            impostor_pool.len()
        )));
    }

    // uniform sample without replacement via partial Fisher-Yates
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    let n = impostor_pool.len();
    for i in 0..target {
        let j = rng.gen_range(i..n);
        impostor_pool.swap(i, j);
    }
    impostor_pool.truncate(target);

    let mut pairs = genuine;
    pairs.extend(impostor_pool);
    let mut shuffle_rng = rng_from_seed(derive_seed(seed, 2));
    pairs.shuffle(&mut shuffle_rng);
    Ok(pairs)
}

/// Seeded disjoint exhaustive partition of subject ids into train/test.
pub fn split_subjects(
    subject_ids: &[String],
    n_train: usize,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    let mut ids: Vec<String> = subject_ids.to_vec();
    ids.sort();
    ids.dedup();
    if n_train >= ids.len() {
        return Err(Error::Config(format!(
            "n_train {} must be below subject count {}",
            n_train,
            ids.len()
        )));
    }
    let mut rng = rng_from_seed(derive_seed(seed, 3));
    ids.shuffle(&mut rng);
    let test = ids.split_off(n_train);
    Ok((ids, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(subject: &str, modality: Modality, pos: (usize, usize)) -> PatchRecord {
        PatchRecord {
            subject_id: subject.to_string(),
            modality,
            condition: Condition::Baseline,
            range_id: RangeId::R1,
            grid_pos: pos,
            patch: Tensor::zeros(&[1, 2, 2]),
        }
    }

    fn two_subject_records() -> Vec<PatchRecord> {
        vec![
            rec("a", Modality::Visible, (0, 0)),
            rec("a", Modality::Polarimetric, (0, 0)),
            rec("b", Modality::Visible, (0, 0)),
            rec("b", Modality::Polarimetric, (0, 0)),
        ]
    }

    #[test]
    fn two_subjects_exhaustive() {
        let records = two_subject_records();
        let pairs = generate_pairs(&records, 9, &PairOptions::default()).unwrap();
        let genuine: Vec<_> = pairs.iter().filter(|p| p.y_cont == 0).collect();
        let impostor: Vec<_> = pairs.iter().filter(|p| p.y_cont == 1).collect();
        assert_eq!(genuine.len(), 2);
        assert_eq!(impostor.len(), 2);
        for p in &pairs {
            let rv = &records[p.vis];
            let rp = &records[p.pol];
            assert_eq!(rv.modality, Modality::Visible);
            assert_ne!(rp.modality, Modality::Visible);
            assert_eq!(rv.grid_pos, rp.grid_pos);
            assert_eq!(p.y_cont == 0, rv.subject_id == rp.subject_id);
        }
    }

    #[test]
    fn single_subject_rejected() {
        let records = vec![
            rec("a", Modality::Visible, (0, 0)),
            rec("a", Modality::Polarimetric, (0, 0)),
        ];
        assert!(generate_pairs(&records, 0, &PairOptions::default()).is_err());
    }

    #[test]
    fn balanced_at_unit_ratio() {
        let mut records = Vec::new();
        for s in ["a", "b", "c", "d"] {
            for pos in [(0, 0), (0, 10)] {
                records.push(rec(s, Modality::Visible, pos));
                records.push(rec(s, Modality::Polarimetric, pos));
            }
        }
        let pairs = generate_pairs(&records, 11, &PairOptions::default()).unwrap();
        let g = pairs.iter().filter(|p| p.y_cont == 0).count();
        let i = pairs.iter().filter(|p| p.y_cont == 1).count();
        assert_eq!(g, i);
    }

    #[test]
    fn same_seed_identical_output() {
        let records = two_subject_records();
        let a = generate_pairs(&records, 123, &PairOptions::default()).unwrap();
        let b = generate_pairs(&records, 123, &PairOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_25_35_protocol() {
        let ids: Vec<String> = (0..60).map(|i| format!("s{i:02}")).collect();
        let (train, test) = split_subjects(&ids, 25, 77).unwrap();
        assert_eq!(train.len(), 25);
        assert_eq!(test.len(), 35);
        let mut all: Vec<String> = train.iter().chain(test.iter()).cloned().collect();
        all.sort();
        let mut expect = ids.clone();
        expect.sort();
        assert_eq!(all, expect);
    }

    #[test]
    fn split_determinism_and_seed_sensitivity() {
        let ids: Vec<String> = (0..20).map(|i| format!("s{i}")).collect();
        let a = split_subjects(&ids, 10, 1).unwrap();
        let b = split_subjects(&ids, 10, 1).unwrap();
        let c = split_subjects(&ids, 10, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn split_boundaries() {
        let ids: Vec<String> = (0..5).map(|i| format!("s{i}")).collect();
        let (train, test) = split_subjects(&ids, 0, 3).unwrap();
        assert!(train.is_empty());
        assert_eq!(test.len(), 5);
        assert!(split_subjects(&ids, 5, 3).is_err());
    }
}
