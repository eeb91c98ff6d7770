//! End-to-end plumbing: dataset preprocessing into patch records, the
//! coupled training loop, image-level embedding, and the identification
//! trial runner used by the CLI and the test harness.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, EmbeddingRecord, TrialProtocol, TrialsReport};
use crate::image::Image;
use crate::loss::{batch_loss, contrastive_grad, pair_distance, ContrastiveConfig};
use crate::net::{sgd_step, CoupledModel, EmbeddingNet, Gradients, SgdState};
use crate::pairgen::{generate_pairs, Condition, Modality, PairOptions, PatchPair, PatchRecord, RangeId};
use crate::polarimetry::{stokes_from_intensities, StokesConvention};
use crate::preproc::{preprocess_stack, DoGConfig, Normalize, PatchGrid};
use crate::rng::derive_seed;
use crate::synth::SynthDataset;
use crate::tensor::Tensor;

/// How the polarimetric tower's three channels are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// S0, S1, S2 as the three channels.
    Polarimetric,
    /// Conventional thermal: S0 replicated into all three channels.
    ThermalS0,
}

impl std::str::FromStr for ProbeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "polarimetric" => Ok(ProbeMode::Polarimetric),
            "thermal_s0" => Ok(ProbeMode::ThermalS0),
            other => Err(Error::Config(format!("unknown probe mode `{other}`"))),
        }
    }
}

/// All patches of one source image, with its provenance.
#[derive(Debug, Clone)]
pub struct ImagePatches {
    pub subject_id: String,
    pub modality: Modality,
    pub range_id: RangeId,
    pub condition: Condition,
    pub image_id: String,
    /// (row, col, [C,P,P]) per grid cell
    pub patches: Vec<(usize, usize, Tensor)>,
}

/// Polarimetry + DoG + patching over an in-memory dataset. Visible images
/// become 1-channel patches; polarimetric images become 3-channel patches
/// per `probe_mode`.
pub fn preprocess_dataset(
    ds: &SynthDataset,
    dog: &DoGConfig,
    grid: &PatchGrid,
    normalize: Normalize,
    convention: StokesConvention,
    probe_mode: ProbeMode,
) -> Result<Vec<ImagePatches>> {
    let mut out = Vec::with_capacity(ds.records.len());
    for rec in &ds.records {
        let (modality, channels): (Modality, Vec<Image>) = match rec.modality {
            Modality::Visible => (Modality::Visible, vec![rec.channels[0].1.clone()]),
            Modality::Polarimetric | Modality::ThermalS0 => {
                let stokes = stokes_from_intensities(&rec.intensities()?, convention)?;
                match probe_mode {
                    ProbeMode::Polarimetric => (
                        Modality::Polarimetric,
                        vec![stokes.s0, stokes.s1, stokes.s2],
                    ),
                    ProbeMode::ThermalS0 => (
                        Modality::ThermalS0,
                        vec![stokes.s0.clone(), stokes.s0.clone(), stokes.s0],
                    ),
                }
            }
        };
        let stacked = preprocess_stack(&channels, dog, grid, normalize)?;
        out.push(ImagePatches {
            subject_id: rec.subject_id.clone(),
            modality,
            range_id: rec.range_id,
            condition: rec.condition,
            image_id: rec.image_id(),
            patches: stacked
                .into_iter()
                .map(|p| (p.row, p.col, p.patch))
                .collect(),
        });
    }
    Ok(out)
}

/// Flatten images into patch records, keeping only the given subjects.
pub fn patch_records(images: &[ImagePatches], subjects: &[String]) -> Vec<PatchRecord> {
    let keep: std::collections::BTreeSet<&str> = subjects.iter().map(|s| s.as_str()).collect();
    let mut records = Vec::new();
    for img in images {
        if !keep.contains(img.subject_id.as_str()) {
            continue;
        }
        for (row, col, patch) in &img.patches {
            records.push(PatchRecord {
                subject_id: img.subject_id.clone(),
                modality: img.modality,
                condition: img.condition,
                range_id: img.range_id,
                grid_pos: (*row, *col),
                patch: patch.clone(),
            });
        }
    }
    records
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub margin: f64,
    pub distance_epsilon: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub pair_ratio: f64,
    pub same_range: bool,
    pub resample_per_epoch: bool,
    pub width_groups: Vec<Vec<usize>>,
    pub freeze_except_last: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 1.0,
            distance_epsilon: 1e-12,
            lr: 0.01,
            momentum: 0.9,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            pair_ratio: 1.0,
            same_range: false,
            resample_per_epoch: false,
            width_groups: crate::net::default_width_groups(),
            freeze_except_last: None,
        }
    }
}

impl TrainConfig {
    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            margin: self.margin,
            distance_epsilon: self.distance_epsilon,
        }
    }
}

/// Per-epoch training log row.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_genuine_dist: f64,
    pub mean_impostor_dist: f64,
}

/// Train the coupled model on the given patch records. When `init` is None
/// a fresh model is seeded from the config; the polarimetric tower always
/// starts from the visible tower's weights.
pub fn train(
    records: &[PatchRecord],
    cfg: &TrainConfig,
    init: Option<CoupledModel>,
) -> Result<(CoupledModel, Vec<EpochStats>)> {
    cfg.contrastive().validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    let mut model = match init {
        Some(m) => m,
        None => CoupledModel::init(&cfg.width_groups, derive_seed(cfg.seed, 10))?,
    };
    if let Some(n) = cfg.freeze_except_last {
        model.freeze_except_last(n);
    }
    let pair_opts = PairOptions {
        ratio: cfg.pair_ratio,
        same_range: cfg.same_range,
    };
    let base_pairs = generate_pairs(records, derive_seed(cfg.seed, 20), &pair_opts)?;
    let lcfg = cfg.contrastive();
    let mut state = SgdState::new(&model);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let pairs = if cfg.resample_per_epoch && epoch > 0 {
            generate_pairs(records, derive_seed(cfg.seed, 20 + epoch as u64), &pair_opts)?
        } else {
            base_pairs.clone()
        };
        let mut loss_sum = 0.0;
        let mut gen_dist = (0.0, 0usize);
        let mut imp_dist = (0.0, 0usize);
        for batch in pairs.chunks(cfg.batch_size) {
            let (stats, losses) =
                train_batch(&mut model, &mut state, records, batch, cfg, &lcfg)?;
            loss_sum += losses;
            gen_dist.0 += stats.0 .0;
            gen_dist.1 += stats.0 .1;
            imp_dist.0 += stats.1 .0;
            imp_dist.1 += stats.1 .1;
        }
        log.push(EpochStats {
            epoch: epoch + 1,
            mean_loss: loss_sum / pairs.len() as f64,
            mean_genuine_dist: gen_dist.0 / gen_dist.1.max(1) as f64,
            mean_impostor_dist: imp_dist.0 / imp_dist.1.max(1) as f64,
        });
    }
    Ok((model, log))
}

type DistAcc = ((f64, usize), (f64, usize));

fn train_batch(
    model: &mut CoupledModel,
    state: &mut SgdState,
    records: &[PatchRecord],
    batch: &[PatchPair],
    cfg: &TrainConfig,
    lcfg: &ContrastiveConfig,
) -> Result<(DistAcc, f64)> {
    // forward each distinct record once; embedding gradients are linear, so
    // per-pair contributions are summed per record before one backward pass
    let mut vis_cache: BTreeMap<usize, (Vec<f64>, crate::net::ForwardCache, Vec<f64>)> =
        BTreeMap::new();
    let mut pol_cache: BTreeMap<usize, (Vec<f64>, crate::net::ForwardCache, Vec<f64>)> =
        BTreeMap::new();
    let dim = model.embedding_dim();
    for pair in batch {
        if !vis_cache.contains_key(&pair.vis) {
            let (emb, cache) = model.vis.forward_cached(&records[pair.vis].patch)?;
            vis_cache.insert(pair.vis, (emb, cache, vec![0.0; dim]));
        }
        if !pol_cache.contains_key(&pair.pol) {
            let (emb, cache) = model.pol.forward_cached(&records[pair.pol].patch)?;
            pol_cache.insert(pair.pol, (emb, cache, vec![0.0; dim]));
        }
    }
    let mut loss_total = 0.0;
    let mut gen = (0.0, 0usize);
    let mut imp = (0.0, 0usize);
    let scale = 1.0 / batch.len() as f64;
    for pair in batch {
        let z1 = vis_cache.get(&pair.vis).expect("cached").0.clone();
        let z2 = pol_cache.get(&pair.pol).expect("cached").0.clone();
        let d = pair_distance(&z1, &z2)?;
        if pair.y_cont == 0 {
            gen.0 += d;
            gen.1 += 1;
        } else {
            imp.0 += d;
            imp.1 += 1;
        }
        loss_total += batch_loss(&[(z1.clone(), z2.clone(), pair.y_cont)], lcfg)?;
        let (g1, g2) = contrastive_grad(&z1, &z2, pair.y_cont, lcfg)?;
        let vslot = vis_cache.get_mut(&pair.vis).expect("cached");
        for (acc, g) in vslot.2.iter_mut().zip(g1.iter()) {
            *acc += scale * g;
        }
        let pslot = pol_cache.get_mut(&pair.pol).expect("cached");
        for (acc, g) in pslot.2.iter_mut().zip(g2.iter()) {
            *acc += scale * g;
        }
    }
    let mut vis_grads: Option<Gradients> = None;
    for (_, (_, cache, grad_out)) in vis_cache.iter() {
        let g = model.vis.backward(cache, grad_out)?;
        match &mut vis_grads {
            Some(acc) => acc.accumulate(&g),
            None => vis_grads = Some(g),
        }
    }
    let mut pol_grads: Option<Gradients> = None;
    for (_, (_, cache, grad_out)) in pol_cache.iter() {
        let g = model.pol.backward(cache, grad_out)?;
        match &mut pol_grads {
            Some(acc) => acc.accumulate(&g),
            None => pol_grads = Some(g),
        }
    }
    let (vg, pg) = (vis_grads.expect("nonempty batch"), pol_grads.expect("nonempty batch"));
    sgd_step(model, state, &vg, &pg, cfg.lr, cfg.momentum)?;
    Ok(((gen, imp), loss_total))
}

fn tower_for<'a>(model: &'a CoupledModel, modality: Modality) -> &'a EmbeddingNet {
    match modality {
        Modality::Visible => &model.vis,
        Modality::Polarimetric | Modality::ThermalS0 => &model.pol,
    }
}

/// Image-level embeddings: mean of patch embeddings through the matching
/// tower.
pub fn embed_images(model: &CoupledModel, images: &[ImagePatches]) -> Result<Vec<EmbeddingRecord>> {
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let net = tower_for(model, img.modality);
        let patch_embeddings: Vec<Vec<f64>> = img
            .patches
            .iter()
            .map(|(_, _, p)| net.forward(p))
            .collect::<Result<_>>()?;
        out.push(EmbeddingRecord {
            subject_id: img.subject_id.clone(),
            modality: img.modality,
            image_id: img.image_id.clone(),
            embedding: eval::image_embedding(&patch_embeddings)?,
            range_id: Some(img.range_id),
            condition: Some(img.condition),
        });
    }
    Ok(out)
}

/// One gallery entry per subject: the mean of that subject's baseline
/// visible image embeddings. Enrollment uses only the closest range
/// present (the gallery is captured under the best conditions); records
/// without range metadata all qualify.
pub fn build_gallery(embeddings: &[EmbeddingRecord]) -> Result<Vec<EmbeddingRecord>> {
    let enroll_range = embeddings
        .iter()
        .filter(|e| e.modality == Modality::Visible && e.condition == Some(Condition::Baseline))
        .filter_map(|e| e.range_id)
        .min();
    let mut by_subject: BTreeMap<&str, Vec<&EmbeddingRecord>> = BTreeMap::new();
    for e in embeddings {
        if e.modality == Modality::Visible
            && e.condition == Some(Condition::Baseline)
            && e.range_id == enroll_range
        {
            by_subject.entry(e.subject_id.as_str()).or_default().push(e);
        }
    }
    if by_subject.is_empty() {
        return Err(Error::Data("no baseline visible embeddings for gallery".into()));
    }
    let mut gallery = Vec::with_capacity(by_subject.len());
    for (subject, recs) in by_subject {
        let vecs: Vec<Vec<f64>> = recs.iter().map(|r| r.embedding.clone()).collect();
        gallery.push(EmbeddingRecord {
            subject_id: subject.to_string(),
            modality: Modality::Visible,
            image_id: format!("{subject}/gallery"),
            embedding: eval::image_embedding(&vecs)?,
            range_id: None,
            condition: None,
        });
    }
    Ok(gallery)
}

/// How a probe image is ranked against the gallery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of patch embeddings, then nearest-neighbour ranking.
    MeanEmbedding,
    /// Per-patch nearest-subject majority vote.
    PatchVote,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_embedding" => Ok(Aggregation::MeanEmbedding),
            "patch_vote" => Ok(Aggregation::PatchVote),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }
}

/// Full repeated-split identification protocol over a preprocessed dataset.
/// When `trained` is false each trial evaluates an untrained seeded model,
/// giving the chance-level baseline.
pub fn run_identification_trials(
    images: &[ImagePatches],
    protocol: &TrialProtocol,
    train_cfg: &TrainConfig,
    init: Option<&CoupledModel>,
    trained: bool,
    aggregation: Aggregation,
) -> Result<TrialsReport> {
    let mut subjects: Vec<String> = images.iter().map(|i| i.subject_id.clone()).collect();
    subjects.sort();
    subjects.dedup();
    let mut trial_fn = |_trial: usize,
                        train_ids: &[String],
                        test_ids: &[String],
                        trial_seed: u64|
     -> Result<(usize, Vec<eval::RankedProbe>)> {
        let model = if trained {
            let train_records = patch_records(images, train_ids);
            let mut cfg = train_cfg.clone();
            cfg.seed = trial_seed;
            let (model, _) = train(&train_records, &cfg, init.cloned())?;
            model
        } else {
            match init {
                Some(m) => m.clone(),
                None => CoupledModel::init_independent(
                    &train_cfg.width_groups,
                    derive_seed(trial_seed, 99),
                )?,
            }
        };
        let test_images: Vec<ImagePatches> = images
            .iter()
            .filter(|i| test_ids.contains(&i.subject_id))
            .cloned()
            .collect();
        let embeddings = embed_images(&model, &test_images)?;
        let gallery = build_gallery(&embeddings)?;
        let ranked = match aggregation {
            Aggregation::MeanEmbedding => {
                let probes: Vec<EmbeddingRecord> = embeddings
                    .into_iter()
                    .filter(|e| e.modality != Modality::Visible)
                    .collect();
                eval::rank_probes(&probes, &gallery)?
            }
            Aggregation::PatchVote => {
                let mut ranked = Vec::new();
                for img in test_images
                    .iter()
                    .filter(|i| i.modality != Modality::Visible)
                {
                    let net = tower_for(&model, img.modality);
                    let patch_embeddings: Vec<Vec<f64>> = img
                        .patches
                        .iter()
                        .map(|(_, _, p)| net.forward(p))
                        .collect::<Result<_>>()?;
                    ranked.push(eval::RankedProbe {
                        subject_id: img.subject_id.clone(),
                        ranking: eval::rank_by_patch_vote(&patch_embeddings, &gallery)?,
                        range_id: Some(img.range_id),
                        condition: Some(img.condition),
                    });
                }
                ranked
            }
        };
        Ok((gallery.len(), ranked))
    };
    eval::run_trials(&subjects, protocol, &mut trial_fn)
}

/// Plain-text table of rank-1 rates per scenario stratum.
pub fn report_table(report: &TrialsReport, probe_label: &str) -> String {
    let mut s = String::new();
    s.push_str("Scenario             Probe   Rank-1\n");
    s.push_str(&format!(
        "Overall              {:7} {:.4}\n",
        probe_label,
        report.mean_rank1()
    ));
    if report.expression_rank1.is_finite() {
        s.push_str(&format!(
            "Expressions          {:7} {:.4}\n",
            probe_label, report.expression_rank1
        ));
    }
    for range in RangeId::all() {
        if let Some(rate) = report.range_baseline_rank1.get(&range) {
            s.push_str(&format!(
                "Range {} Baseline     {:7} {:.4}\n",
                match range {
                    RangeId::R1 => "1",
                    RangeId::R2 => "2",
                    RangeId::R3 => "3",
                },
                probe_label,
                rate
            ));
        }
    }
    s
}
