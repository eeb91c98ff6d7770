//! Gallery/probe identification by minimum Euclidean distance, CMC curves,
//! Rank-k rates, and the repeated-random-split trial protocol.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::pair_distance;
use crate::pairgen::{split_subjects, Condition, Modality, RangeId};
use crate::rng::derive_seed;

#[derive(Debug, Clone)]
pub struct EmbeddingRecord {
    pub subject_id: String,
    pub modality: Modality,
    pub image_id: String,
    pub embedding: Vec<f64>,
    /// Strata metadata for reporting; absent for external records.
    pub range_id: Option<RangeId>,
    pub condition: Option<Condition>,
}

/// Rank-indexed cumulative identification rates; `rates[k-1]` is the rank-k
/// rate, `rates[gallery_size-1] == 1.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CmcCurve {
    pub rates: Vec<f64>,
    pub gallery_size: usize,
}

impl CmcCurve {
    pub fn rank1(&self) -> f64 {
        self.rates[0]
    }

    pub fn rate_at_rank(&self, k: usize) -> f64 {
        self.rates[k - 1]
    }

    pub fn is_monotone(&self) -> bool {
        self.rates.windows(2).all(|w| w[1] >= w[0] - 1e-15)
    }
}

/// Mean of patch embeddings; the image-level aggregation.
pub fn image_embedding(patch_embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = patch_embeddings
        .first()
        .ok_or_else(|| Error::InvalidInput("no patch embeddings".into()))?;
    let dim = first.len();
    let mut mean = vec![0.0; dim];
    for e in patch_embeddings {
        if e.len() != dim {
            return Err(Error::ShapeMismatch("patch embedding dims differ".into()));
        }
        for (m, v) in mean.iter_mut().zip(e.iter()) {
            *m += v;
        }
    }
    let n = patch_embeddings.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    Ok(mean)
}

/// Gallery subjects sorted by ascending distance to the probe; ties broken
/// by ascending subject id.
pub fn identify(probe: &EmbeddingRecord, gallery: &[EmbeddingRecord]) -> Result<Vec<String>> {
    if gallery.is_empty() {
        return Err(Error::InvalidInput("empty gallery".into()));
    }
    let mut scored: Vec<(f64, &str)> = gallery
        .iter()
        .map(|g| {
            pair_distance(&probe.embedding, &g.embedding).map(|d| (d, g.subject_id.as_str()))
        })
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
    Ok(scored.into_iter().map(|(_, s)| s.to_string()).collect())
}

/// One probe's full gallery ranking plus strata metadata.
#[derive(Debug, Clone)]
pub struct RankedProbe {
    pub subject_id: String,
    pub ranking: Vec<String>,
    pub range_id: Option<RangeId>,
    pub condition: Option<Condition>,
}

/// Rank every probe against the gallery by minimum Euclidean distance.
pub fn rank_probes(probes: &[EmbeddingRecord], gallery: &[EmbeddingRecord]) -> Result<Vec<RankedProbe>> {
    probes
        .iter()
        .map(|p| {
            Ok(RankedProbe {
                subject_id: p.subject_id.clone(),
                ranking: identify(p, gallery)?,
                range_id: p.range_id,
                condition: p.condition,
            })
        })
        .collect()
}

/// Per-patch nearest-subject majority vote; subjects ranked by descending
/// vote count, then ascending best patch distance, then subject id.
pub fn rank_by_patch_vote(
    patch_embeddings: &[Vec<f64>],
    gallery: &[EmbeddingRecord],
) -> Result<Vec<String>> {
    if patch_embeddings.is_empty() {
        return Err(Error::InvalidInput("no patch embeddings".into()));
    }
    if gallery.is_empty() {
        return Err(Error::InvalidInput("empty gallery".into()));
    }
    let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
    let mut best_dist: BTreeMap<&str, f64> = BTreeMap::new();
    for g in gallery {
        votes.insert(g.subject_id.as_str(), 0);
        best_dist.insert(g.subject_id.as_str(), f64::INFINITY);
    }
    for patch in patch_embeddings {
        let mut nearest: Option<(f64, &str)> = None;
        for g in gallery {
            let d = pair_distance(patch, &g.embedding)?;
            let better = match nearest {
                None => true,
                Some((bd, bs)) => d < bd || (d == bd && g.subject_id.as_str() < bs),
            };
            if better {
                nearest = Some((d, g.subject_id.as_str()));
            }
            let e = best_dist.get_mut(g.subject_id.as_str()).expect("present");
            if d < *e {
                *e = d;
            }
        }
        *votes.get_mut(nearest.expect("nonempty gallery").1).expect("present") += 1;
    }
    let mut ranked: Vec<&str> = votes.keys().copied().collect();
    ranked.sort_by(|a, b| {
        votes[b]
            .cmp(&votes[a])
            .then(best_dist[a].partial_cmp(&best_dist[b]).unwrap())
            .then(a.cmp(b))
    });
    Ok(ranked.into_iter().map(|s| s.to_string()).collect())
}

/// CMC from precomputed rankings; every probe's subject must appear in its
/// ranking and the ranking length must equal the gallery size.
pub fn cmc_from_rankings(probes: &[RankedProbe], gallery_size: usize) -> Result<CmcCurve> {
    if probes.is_empty() {
        return Err(Error::InvalidInput("no probes".into()));
    }
    let mut hits_at_rank = vec![0usize; gallery_size];
    for p in probes {
        if p.ranking.len() != gallery_size {
            return Err(Error::Data("ranking length differs from gallery size".into()));
        }
        let pos = p
            .ranking
            .iter()
            .position(|s| *s == p.subject_id)
            .ok_or_else(|| {
                Error::Data(format!("probe subject {} missing from gallery", p.subject_id))
            })?;
        hits_at_rank[pos] += 1;
    }
    let n = probes.len() as f64;
    let mut cum = 0usize;
    let rates = hits_at_rank
        .iter()
        .map(|&h| {
            cum += h;
            cum as f64 / n
        })
        .collect();
    Ok(CmcCurve {
        rates,
        gallery_size,
    })
}

/// Cumulative matching characteristic over a probe set; each probe's true
/// subject must appear exactly once in the gallery.
pub fn cmc(probes: &[EmbeddingRecord], gallery: &[EmbeddingRecord]) -> Result<CmcCurve> {
    for p in probes {
        let count = gallery
            .iter()
            .filter(|g| g.subject_id == p.subject_id)
            .count();
        if count != 1 {
            return Err(Error::Data(format!(
                "probe subject {} appears {count} times in gallery",
                p.subject_id
            )));
        }
    }
    cmc_from_rankings(&rank_probes(probes, gallery)?, gallery.len())
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrialProtocol {
    pub n_train: usize,
    pub n_trials: usize,
    pub seed: u64,
}

/// Aggregated results of the repeated-random-split protocol.
#[derive(Debug, Clone)]
pub struct TrialsReport {
    pub mean_cmc: CmcCurve,
    pub per_trial_rank1: Vec<f64>,
    /// Mean rank-1 over trials for each (range, baseline-only) stratum.
    pub range_baseline_rank1: BTreeMap<RangeId, f64>,
    /// Mean rank-1 over trials for expression-condition probes.
    pub expression_rank1: f64,
}

impl TrialsReport {
    pub fn mean_rank1(&self) -> f64 {
        self.per_trial_rank1.iter().sum::<f64>() / self.per_trial_rank1.len() as f64
    }

    pub fn rank1_std(&self) -> f64 {
        let mean = self.mean_rank1();
        let n = self.per_trial_rank1.len() as f64;
        (self
            .per_trial_rank1
            .iter()
            .map(|r| (r - mean) * (r - mean))
            .sum::<f64>()
            / n)
            .sqrt()
    }
}

/// Per-trial probe rankings against the trial gallery, supplied by the
/// caller after training on the trial's train split. Returns the gallery
/// size and one ranked probe per probe image.
pub type TrialEmbedder<'a> = dyn FnMut(
        usize,          // trial index
        &[String],      // train subjects
        &[String],      // test subjects
        u64,            // trial seed
    ) -> Result<(usize, Vec<RankedProbe>)>
    + 'a;

/// Repeated-random-split protocol: per trial, a seeded subject split, a
/// model trained by the caller, a visible gallery and polarimetric probes,
/// and a CMC. Returns the mean curve plus per-trial rank-1 values and
/// stratified rank-1 means.
pub fn run_trials(
    subject_ids: &[String],
    protocol: &TrialProtocol,
    trial_fn: &mut TrialEmbedder,
) -> Result<TrialsReport> {
    if protocol.n_trials == 0 {
        return Err(Error::Config("n_trials must be positive".into()));
    }
    let mut mean_rates: Vec<f64> = Vec::new();
    let mut per_trial_rank1 = Vec::with_capacity(protocol.n_trials);
    let mut range_acc: BTreeMap<RangeId, (f64, usize)> = BTreeMap::new();
    let mut expr_acc = (0.0, 0usize);
    for trial in 0..protocol.n_trials {
        let trial_seed = derive_seed(protocol.seed, 0x5EED_0000 + trial as u64);
        let (train_ids, test_ids) = split_subjects(subject_ids, protocol.n_train, trial_seed)?;
        let (gallery_size, probes) = trial_fn(trial, &train_ids, &test_ids, trial_seed)?;
        let curve = cmc_from_rankings(&probes, gallery_size)?;
        if mean_rates.is_empty() {
            mean_rates = vec![0.0; curve.gallery_size];
        } else if mean_rates.len() != curve.gallery_size {
            return Err(Error::Data("gallery size varies across trials".into()));
        }
        for (m, r) in mean_rates.iter_mut().zip(curve.rates.iter()) {
            *m += r;
        }
        per_trial_rank1.push(curve.rank1());

        // stratified rank-1 for the report table
        for range in RangeId::all() {
            let subset: Vec<RankedProbe> = probes
                .iter()
                .filter(|p| p.range_id == Some(range) && p.condition == Some(Condition::Baseline))
                .cloned()
                .collect();
            if !subset.is_empty() {
                let c = cmc_from_rankings(&subset, gallery_size)?;
                let e = range_acc.entry(range).or_insert((0.0, 0));
                e.0 += c.rank1();
                e.1 += 1;
            }
        }
        let expr: Vec<RankedProbe> = probes
            .iter()
            .filter(|p| p.condition == Some(Condition::Expression))
            .cloned()
            .collect();
        if !expr.is_empty() {
            let c = cmc_from_rankings(&expr, gallery_size)?;
            expr_acc.0 += c.rank1();
            expr_acc.1 += 1;
        }
    }
    let n = protocol.n_trials as f64;
    for m in &mut mean_rates {
        *m /= n;
    }
    let gallery_size = mean_rates.len();
    Ok(TrialsReport {
        mean_cmc: CmcCurve {
            rates: mean_rates,
            gallery_size,
        },
        per_trial_rank1,
        range_baseline_rank1: range_acc
            .into_iter()
            .map(|(k, (sum, cnt))| (k, sum / cnt as f64))
            .collect(),
        expression_rank1: if expr_acc.1 > 0 {
            expr_acc.0 / expr_acc.1 as f64
        } else {
            f64::NAN
        },
    })
}

/// One row per record: subject_id, modality, image_id, then embedding
/// components at 17 significant digits.
pub fn export_embeddings(records: &[EmbeddingRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let dim = records.first().map(|r| r.embedding.len()).unwrap_or(0);
    let mut header = String::from("subject_id,modality,image_id");
    for i in 0..dim {
        header.push_str(&format!(",e{i}"));
    }
    writeln!(w, "{header}")?;
    for r in records {
        write!(w, "{},{},{}", r.subject_id, r.modality.as_str(), r.image_id)?;
        for v in &r.embedding {
            write!(w, ",{v:.16e}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a CSV produced by `export_embeddings`.
pub fn import_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let _header = lines
        .next()
        .ok_or_else(|| Error::Format("empty embeddings file".into()))?;
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::Format("short embeddings row".into()));
        }
        let embedding = fields[3..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad embedding value `{f}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(EmbeddingRecord {
            subject_id: fields[0].to_string(),
            modality: fields[1].parse()?,
            image_id: fields[2].to_string(),
            embedding,
            range_id: None,
            condition: None,
        });
    }
    Ok(out)
}
