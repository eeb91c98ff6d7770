//! Synthetic paired-modality datasets with ground-truth identity.
//!
//! Each subject gets a seeded band-limited random texture with a
//! subject-specific spectral and orientation signature. The visible image
//! renders the texture directly; the polarimetric side renders S0/S1/S2
//! through a fixed channel mixing of the same texture and is emitted as
//! physically consistent polarizer intensities (so the Stokes pipeline is
//! exercised end to end). Expression images apply seeded smooth warps;
//! range variants add increasing blur and noise.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{write_pgm, Image};
use crate::pairgen::{Condition, Modality, RangeId};
use crate::polarimetry::IntensityMeasurements;
use crate::preproc::{convolve_reflect, gaussian_kernel};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossModalMap {
    /// S0 equals the visible image, no polarization signal. For tests.
    Identity,
    /// Fixed affine channel mixing of the shared texture.
    LinearMix,
    /// Linear mixing preceded by a fixed smooth spatial warp of the
    /// polarimetric-side texture.
    NonlinearWarp,
}

impl std::str::FromStr for CrossModalMap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(CrossModalMap::Identity),
            "linear_mix" => Ok(CrossModalMap::LinearMix),
            "nonlinear_warp" => Ok(CrossModalMap::NonlinearWarp),
            other => Err(Error::Config(format!("unknown cross_modal_map `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_subjects: usize,
    /// Images per (range, condition) per modality.
    pub images_per_condition: usize,
    pub image_size: usize,
    pub ranges: Vec<RangeId>,
    /// Gaussian blur sigma per range, strictly increasing R1 -> R3.
    pub blur_per_range: Vec<f64>,
    pub noise_std: f64,
    /// Noise multiplier per range; defaults to 1, 2, 3, ... (SNR drops with
    /// distance). Must be nondecreasing when given.
    #[serde(default)]
    pub noise_scale_per_range: Option<Vec<f64>>,
    pub cross_modal_map: CrossModalMap,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 60,
            images_per_condition: 1,
            image_size: 40,
            ranges: RangeId::all().to_vec(),
            blur_per_range: vec![0.0, 0.8, 1.6],
            noise_std: 0.01,
            noise_scale_per_range: None,
            cross_modal_map: CrossModalMap::LinearMix,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::Config("n_subjects must be positive".into()));
        }
        if self.images_per_condition == 0 {
            return Err(Error::Config("images_per_condition must be positive".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if self.ranges.is_empty() || self.ranges.len() != self.blur_per_range.len() {
            return Err(Error::Config(
                "ranges and blur_per_range must be nonempty and equal length".into(),
            ));
        }
        for w in self.blur_per_range.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config(
                    "blur_per_range must strictly increase across ranges".into(),
                ));
            }
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        if let Some(scales) = &self.noise_scale_per_range {
            if scales.len() != self.ranges.len() {
                return Err(Error::Config(
                    "noise_scale_per_range must match ranges length".into(),
                ));
            }
            if scales.iter().any(|&s| s < 0.0) || scales.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::Config(
                    "noise_scale_per_range must be nonnegative and nondecreasing".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Role of one stored channel file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelRole {
    Vis,
    I0,
    I90,
    I45,
    INeg45,
}

impl ChannelRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChannelRole::Vis => "vis",
            ChannelRole::I0 => "i0",
            ChannelRole::I90 => "i90",
            ChannelRole::I45 => "i45",
            ChannelRole::INeg45 => "i_neg45",
        }
    }
}

impl std::str::FromStr for ChannelRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vis" => Ok(ChannelRole::Vis),
            "i0" => Ok(ChannelRole::I0),
            "i90" => Ok(ChannelRole::I90),
            "i45" => Ok(ChannelRole::I45),
            "i_neg45" => Ok(ChannelRole::INeg45),
            other => Err(Error::Data(format!("unknown channel role `{other}`"))),
        }
    }
}

/// One generated image: a visible record carries a single `Vis` channel,
/// a polarimetric record carries the four linear polarizer intensities.
#[derive(Debug, Clone)]
pub struct SynthRecord {
    pub subject_id: String,
    pub modality: Modality,
    pub range_id: RangeId,
    pub condition: Condition,
    pub index: usize,
    pub channels: Vec<(ChannelRole, Image)>,
}

impl SynthRecord {
    pub fn image_id(&self) -> String {
        format!(
            "{}/{}/{}/{}_{}",
            self.subject_id,
            self.modality.as_str(),
            self.range_id.as_str(),
            self.condition.as_str(),
            self.index
        )
    }

    /// Reassemble the polarimetric intensities (polarimetric records only).
    pub fn intensities(&self) -> Result<IntensityMeasurements> {
        let get = |role: ChannelRole| -> Result<Image> {
            self.channels
                .iter()
                .find(|(r, _)| *r == role)
                .map(|(_, img)| img.clone())
                .ok_or_else(|| Error::Data(format!("missing channel {}", role.as_str())))
        };
        Ok(IntensityMeasurements {
            i0: get(ChannelRole::I0)?,
            i90: get(ChannelRole::I90)?,
            i45: get(ChannelRole::I45)?,
            i_neg45: get(ChannelRole::INeg45)?,
            i_right: None,
            i_left: None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub records: Vec<SynthRecord>,
}

impl SynthDataset {
    pub fn subject_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.records.iter().map(|r| r.subject_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

/// Constant-valued polarizer intensities realizing the requested total
/// intensity and degree of linear polarization at the given angle of
/// polarization. Inverse of the difference-convention Stokes computation.
pub fn generate_polarized_intensities(
    dolp_target: f64,
    aop: f64,
    s0: f64,
    shape: (usize, usize),
) -> Result<IntensityMeasurements> {
    if !(0.0..=1.0).contains(&dolp_target) {
        return Err(Error::InvalidInput(format!(
            "dolp_target {dolp_target} outside [0,1]"
        )));
    }
    if s0 <= 0.0 {
        return Err(Error::InvalidInput("s0 must be positive".into()));
    }
    let (h, w) = shape;
    let s1 = dolp_target * s0 * (2.0 * aop).cos();
    let s2 = dolp_target * s0 * (2.0 * aop).sin();
    Ok(IntensityMeasurements {
        i0: Image::constant(h, w, (s0 + s1) / 2.0),
        i90: Image::constant(h, w, (s0 - s1) / 2.0),
        i45: Image::constant(h, w, (s0 + s2) / 2.0),
        i_neg45: Image::constant(h, w, (s0 - s2) / 2.0),
        i_right: None,
        i_left: None,
    })
}

fn white_noise(rng: &mut ChaCha20Rng, size: usize) -> Image {
    let normal = Normal::new(0.0, 1.0).unwrap();
    Image {
        height: size,
        width: size,
        data: (0..size * size).map(|_| normal.sample(rng)).collect(),
    }
}

fn normalize_field(img: &Image) -> Image {
    let mean = img.mean();
    let var = img.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / img.data.len() as f64;
    let std = var.sqrt().max(1e-9);
    img.map(|v| (v - mean) / std)
}

/// Anisotropic Gaussian kernel: per-subject orientation and elongation give
/// each identity a distinctive spectral signature.
fn aniso_kernel(sigma_major: f64, sigma_minor: f64, angle: f64, radius: usize) -> Image {
    let side = 2 * radius + 1;
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut k = Image::zeros(side, side);
    let mut sum = 0.0;
    for r in 0..side {
        for c in 0..side {
            let y = r as f64 - radius as f64;
            let x = c as f64 - radius as f64;
            let u = ca * x + sa * y;
            let v = -sa * x + ca * y;
            let e = (-(u * u) / (2.0 * sigma_major * sigma_major)
                - (v * v) / (2.0 * sigma_minor * sigma_minor))
                .exp();
            *k.at_mut(r, c) = e;
            sum += e;
        }
    }
    for v in &mut k.data {
        *v /= sum;
    }
    k
}

/// Per-subject identity texture: oriented band-limited field plus
/// fine-scale detail, with subject-specific mixing weights.
fn identity_texture(rng: &mut ChaCha20Rng, size: usize) -> Image {
    let sigma_major: f64 = rng.gen_range(1.6..3.2);
    let sigma_minor: f64 = rng.gen_range(0.5..1.1);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let detail_weight = rng.gen_range(0.3..0.9);
    let noise = white_noise(rng, size);
    let radius = (3.0 * sigma_major).ceil() as usize;
    let oriented = convolve_reflect(&noise, &aniso_kernel(sigma_major, sigma_minor, angle, radius))
        .expect("nonempty");
    let detail_noise = white_noise(rng, size);
    let detail = convolve_reflect(&detail_noise, &gaussian_kernel(0.8, 3).expect("valid"))
        .expect("nonempty");
    let combined = normalize_field(&oriented)
        .zip(&normalize_field(&detail), |a, b| a + detail_weight * b)
        .expect("same shape");
    normalize_field(&combined)
}

/// Smooth random warp: bilinear resampling along two blurred-noise
/// displacement fields of the given amplitude (pixels).
fn smooth_warp(img: &Image, rng: &mut ChaCha20Rng, amplitude: f64) -> Image {
    if amplitude == 0.0 {
        return img.clone();
    }
    let size = img.height;
    let blur = gaussian_kernel(5.0, 15).expect("valid");
    let dx = normalize_field(&convolve_reflect(&white_noise(rng, size), &blur).expect("ok"));
    let dy = normalize_field(&convolve_reflect(&white_noise(rng, size), &blur).expect("ok"));
    Image::from_fn(img.height, img.width, |r, c| {
        let sr = r as f64 + amplitude * dy.at(r, c);
        let sc = c as f64 + amplitude * dx.at(r, c);
        bilinear(img, sr, sc)
    })
}

fn bilinear(img: &Image, r: f64, c: f64) -> f64 {
    let r = r.clamp(0.0, (img.height - 1) as f64);
    let c = c.clamp(0.0, (img.width - 1) as f64);
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(img.height - 1), (c0 + 1).min(img.width - 1));
    let (fr, fc) = (r - r0 as f64, c - c0 as f64);
    img.at(r0, c0) * (1.0 - fr) * (1.0 - fc)
        + img.at(r0, c1) * (1.0 - fr) * fc
        + img.at(r1, c0) * fr * (1.0 - fc)
        + img.at(r1, c1) * fr * fc
}

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    convolve_reflect(img, &gaussian_kernel(sigma, radius).expect("valid")).expect("ok")
}

fn add_noise(img: &mut Image, rng: &mut ChaCha20Rng, std: f64) {
    if std == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).unwrap();
    for v in &mut img.data {
        *v = (*v + normal.sample(rng)).max(0.0);
    }
}

const AOP: f64 = std::f64::consts::FRAC_PI_8;

/// Texture as seen by the visible sensor. For the mixing maps the fine
/// detail is attenuated toward the same low-pass content that dominates S0,
/// so cross-modal matchability decreases monotonically with further blur.
fn vis_field(texture: &Image, map: CrossModalMap) -> Image {
    match map {
        CrossModalMap::Identity => texture.clone(),
        CrossModalMap::LinearMix | CrossModalMap::NonlinearWarp => {
            let lowpass = gaussian_blur(texture, 1.5);
            texture
                .zip(&lowpass, |t, l| l + 0.5 * (t - l))
                .expect("same shape")
        }
    }
}

/// Render S0 and the DoLP field for one polarimetric capture, then invert
/// to the four linear polarizer intensities.
fn render_pol_channels(
    texture: &Image,
    map: CrossModalMap,
    rng: &mut ChaCha20Rng,
) -> Vec<(ChannelRole, Image)> {
    let texture = match map {
        CrossModalMap::NonlinearWarp => smooth_warp(texture, rng, 1.8),
        _ => texture.clone(),
    };
    let (s0, dolp): (Image, Image) = match map {
        CrossModalMap::Identity => (
            texture.map(|t| (0.5 + 0.18 * t).clamp(0.02, 1.0)),
            Image::zeros(texture.height, texture.width),
        ),
        CrossModalMap::LinearMix | CrossModalMap::NonlinearWarp => {
            // S0: low-passed view of the texture (thermal loses fine detail);
            // DoLP: the complementary band-pass detail, the "missing texture"
            // that polarization restores
            let lowpass = gaussian_blur(&texture, 1.5);
            let band = normalize_field(&texture.zip(&lowpass, |t, l| t - l).expect("same shape"));
            let s0 = lowpass.map(|t| (0.55 + 0.14 * t).clamp(0.05, 1.0));
            let dolp = band.map(|b| (0.45 + 0.28 * b).clamp(0.02, 0.92));
            (s0, dolp)
        }
    };
    let s1 = s0.zip(&dolp, |s, d| s * d * (2.0 * AOP).cos()).expect("same shape");
    let s2 = s0.zip(&dolp, |s, d| s * d * (2.0 * AOP).sin()).expect("same shape");
    vec![
        (ChannelRole::I0, s0.zip(&s1, |a, b| (a + b) / 2.0).expect("ok")),
        (ChannelRole::I90, s0.zip(&s1, |a, b| (a - b) / 2.0).expect("ok")),
        (ChannelRole::I45, s0.zip(&s2, |a, b| (a + b) / 2.0).expect("ok")),
        (
            ChannelRole::INeg45,
            s0.zip(&s2, |a, b| (a - b) / 2.0).expect("ok"),
        ),
    ]
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut records = Vec::new();
    for s in 0..cfg.n_subjects {
        let subject_id = format!("s{s:03}");
        let mut subject_rng = rng_from_seed(derive_seed(cfg.seed, 1000 + s as u64));
        let texture = identity_texture(&mut subject_rng, cfg.image_size);
        for (ri, &range_id) in cfg.ranges.iter().enumerate() {
            let blur = cfg.blur_per_range[ri];
            // range degrades SNR as well as focus
            let noise_std = cfg.noise_std
                * cfg
                    .noise_scale_per_range
                    .as_ref()
                    .map(|s| s[ri])
                    .unwrap_or(1.0 + ri as f64);
            for condition in [Condition::Baseline, Condition::Expression] {
                for index in 0..cfg.images_per_condition {
                    for modality in [Modality::Visible, Modality::Polarimetric] {
                        let stream = (ri as u64) << 24
                            | (condition as u64) << 16
                            | (index as u64) << 8
                            | (modality as u64);
                        let mut img_rng =
                            rng_from_seed(derive_seed(derive_seed(cfg.seed, 1000 + s as u64), stream));
                        let warp_amp = match condition {
                            Condition::Baseline => 0.0,
                            Condition::Expression => 0.55,
                        };
                        let t_img = smooth_warp(&texture, &mut img_rng, warp_amp);
                        let channels = match modality {
                            Modality::Visible => {
                                let mut vis = vis_field(&t_img, cfg.cross_modal_map)
                                    .map(|t| (0.5 + 0.18 * t).clamp(0.02, 1.0));
                                vis = gaussian_blur(&vis, blur);
                                add_noise(&mut vis, &mut img_rng, noise_std);
                                vec![(ChannelRole::Vis, vis)]
                            }
                            Modality::Polarimetric => {
                                let mut chans =
                                    render_pol_channels(&t_img, cfg.cross_modal_map, &mut img_rng);
                                for (_, img) in &mut chans {
                                    *img = gaussian_blur(img, blur);
                                    add_noise(img, &mut img_rng, noise_std);
                                }
                                chans
                            }
                            Modality::ThermalS0 => unreachable!(),
                        };
                        records.push(SynthRecord {
                            subject_id: subject_id.clone(),
                            modality,
                            range_id,
                            condition,
                            index,
                            channels,
                        });
                    }
                }
            }
        }
    }
    Ok(SynthDataset {
        config: cfg.clone(),
        records,
    })
}

/// Write the dataset as PGM files plus `manifest.csv` binding channel roles.
/// Layout: `<root>/<subject>/<modality>/<range>/<condition>_<idx>[_<role>].pgm`.
pub fn write_dataset(ds: &SynthDataset, root: &Path) -> Result<()> {
    std::fs::create_dir_all(root)?;
    let mut manifest = String::from("subject_id,modality,range,condition,index,role,path\n");
    for rec in &ds.records {
        let dir = root
            .join(&rec.subject_id)
            .join(rec.modality.as_str())
            .join(rec.range_id.as_str());
        std::fs::create_dir_all(&dir)?;
        for (role, img) in &rec.channels {
            let filename = if rec.channels.len() == 1 {
                format!("{}_{}.pgm", rec.condition.as_str(), rec.index)
            } else {
                format!(
                    "{}_{}_{}.pgm",
                    rec.condition.as_str(),
                    rec.index,
                    role.as_str()
                )
            };
            let path = dir.join(&filename);
            write_pgm(img, &path)?;
            let rel = path
                .strip_prefix(root)
                .expect("under root")
                .to_string_lossy()
                .replace('\\', "/");
            manifest.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                rec.subject_id,
                rec.modality.as_str(),
                rec.range_id.as_str(),
                rec.condition.as_str(),
                rec.index,
                role.as_str(),
                rel
            ));
        }
    }
    std::fs::write(root.join("manifest.csv"), manifest)?;
    Ok(())
}

/// Load a dataset back from its manifest.
pub fn load_dataset(root: &Path) -> Result<SynthDataset> {
    let manifest_path = root.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest_path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty manifest".into()))?;
    if header != "subject_id,modality,range,condition,index,role,path" {
        return Err(Error::Format(format!("unexpected manifest header `{header}`")));
    }
    let mut records: Vec<SynthRecord> = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Format(format!(
                "manifest line {}: expected 7 fields",
                ln + 2
            )));
        }
        let subject_id = fields[0].to_string();
        let modality: Modality = fields[1].parse()?;
        let range_id: RangeId = fields[2].parse()?;
        let condition: Condition = fields[3].parse()?;
        let index: usize = fields[4]
            .parse()
            .map_err(|_| Error::Format(format!("manifest line {}: bad index", ln + 2)))?;
        let role: ChannelRole = fields[5].parse()?;
        let img = crate::image::read_pgm(&root.join(fields[6]))?;
        // append to the matching record or start a new one
        let found = records.iter_mut().find(|r| {
            r.subject_id == subject_id
                && r.modality == modality
                && r.range_id == range_id
                && r.condition == condition
                && r.index == index
        });
        match found {
            Some(rec) => rec.channels.push((role, img)),
            None => records.push(SynthRecord {
                subject_id,
                modality,
                range_id,
                condition,
                index,
                channels: vec![(role, img)],
            }),
        }
    }
    Ok(SynthDataset {
        config: SynthConfig::default(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polarimetry::{dolp, stokes_from_intensities, StokesConvention, DEFAULT_DOLP_EPSILON};

    #[test]
    fn unpolarized_intensities_equal() {
        let m = generate_polarized_intensities(0.0, 0.3, 2.0, (2, 2)).unwrap();
        for img in [&m.i0, &m.i90, &m.i45, &m.i_neg45] {
            for &v in &img.data {
                assert!((v - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fully_polarized_at_zero_aop() {
        let m = generate_polarized_intensities(1.0, 0.0, 3.0, (1, 1)).unwrap();
        assert!((m.i0.at(0, 0) - 3.0).abs() < 1e-12);
        assert!(m.i90.at(0, 0).abs() < 1e-12);
    }

    #[test]
    fn round_trip_random_dolp() {
        let mut rng = rng_from_seed(55);
        for _ in 0..100 {
            let d = rng.gen_range(0.0..1.0);
            let aop = rng.gen_range(0.0..std::f64::consts::PI);
            let s0 = rng.gen_range(0.1..5.0);
            let m = generate_polarized_intensities(d, aop, s0, (1, 1)).unwrap();
            let s = stokes_from_intensities(&m, StokesConvention::Difference).unwrap();
            let got = dolp(&s, DEFAULT_DOLP_EPSILON).unwrap().at(0, 0);
            assert!((got - d).abs() < 1e-10, "dolp {got} vs {d}");
            assert!((s.s0.at(0, 0) - s0).abs() < 1e-10);
        }
    }

    #[test]
    fn out_of_range_dolp_rejected() {
        assert!(generate_polarized_intensities(1.5, 0.0, 1.0, (1, 1)).is_err());
        assert!(generate_polarized_intensities(-0.1, 0.0, 1.0, (1, 1)).is_err());
        assert!(generate_polarized_intensities(0.5, 0.0, 0.0, (1, 1)).is_err());
    }

    #[test]
    fn dataset_deterministic_per_seed() {
        let cfg = SynthConfig {
            n_subjects: 2,
            images_per_condition: 1,
            image_size: 24,
            ranges: vec![RangeId::R1],
            blur_per_range: vec![0.0],
            noise_std: 0.01,
            noise_scale_per_range: None,
            cross_modal_map: CrossModalMap::LinearMix,
            seed: 42,
        };
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(b.records.iter()) {
            assert_eq!(ra.image_id(), rb.image_id());
            for ((_, ia), (_, ib)) in ra.channels.iter().zip(rb.channels.iter()) {
                assert_eq!(ia.data, ib.data);
            }
        }
    }

    #[test]
    fn dataset_counts_match_protocol() {
        // the per-condition knob is symmetric across baseline and
        // expression, so check the generic count formula
        let cfg = SynthConfig {
            n_subjects: 3,
            images_per_condition: 2,
            image_size: 16,
            ..SynthConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        // subjects x modalities x ranges x conditions x images
        assert_eq!(ds.records.len(), 3 * 2 * 3 * 2 * 2);
        assert_eq!(ds.subject_ids().len(), 3);
    }

    #[test]
    fn identity_map_makes_s0_equal_visible() {
        let cfg = SynthConfig {
            n_subjects: 1,
            images_per_condition: 1,
            image_size: 16,
            ranges: vec![RangeId::R1],
            blur_per_range: vec![0.0],
            noise_std: 0.0,
            noise_scale_per_range: None,
            cross_modal_map: CrossModalMap::Identity,
            seed: 5,
        };
        let ds = generate_dataset(&cfg).unwrap();
        let vis = ds
            .records
            .iter()
            .find(|r| r.modality == Modality::Visible && r.condition == Condition::Baseline)
            .unwrap();
        let pol = ds
            .records
            .iter()
            .find(|r| r.modality == Modality::Polarimetric && r.condition == Condition::Baseline)
            .unwrap();
        let s = stokes_from_intensities(&pol.intensities().unwrap(), StokesConvention::Difference)
            .unwrap();
        let vis_img = &vis.channels[0].1;
        for (a, b) in vis_img.data.iter().zip(s.s0.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn physical_dolp_within_unit_interval() {
        // without sensor noise DoLP stays a degree in [0,1], including under
        // per-range blur (blur averages Stokes vectors, which cannot raise
        // the polarized fraction)
        let cfg = SynthConfig {
            n_subjects: 2,
            images_per_condition: 1,
            image_size: 20,
            ranges: vec![RangeId::R1, RangeId::R2],
            blur_per_range: vec![0.0, 0.8],
            noise_std: 0.0,
            noise_scale_per_range: None,
            cross_modal_map: CrossModalMap::LinearMix,
            seed: 9,
        };
        let ds = generate_dataset(&cfg).unwrap();
        for rec in ds.records.iter().filter(|r| r.modality == Modality::Polarimetric) {
            let s = stokes_from_intensities(&rec.intensities().unwrap(), StokesConvention::Difference)
                .unwrap();
            let d = dolp(&s, DEFAULT_DOLP_EPSILON).unwrap();
            for &v in &d.data {
                assert!((0.0..=1.0 + 1e-9).contains(&v), "dolp {v}");
            }
        }
    }

    #[test]
    fn noisy_dolp_excursion_is_small() {
        // independent channel noise can push the estimated DoLP slightly
        // past 1, as on a real sensor; the excursion stays bounded
        let cfg = SynthConfig {
            n_subjects: 2,
            images_per_condition: 1,
            image_size: 20,
            ranges: vec![RangeId::R1],
            blur_per_range: vec![0.0],
            noise_std: 0.02,
            noise_scale_per_range: None,
            cross_modal_map: CrossModalMap::LinearMix,
            seed: 9,
        };
        let ds = generate_dataset(&cfg).unwrap();
        for rec in ds.records.iter().filter(|r| r.modality == Modality::Polarimetric) {
            let s = stokes_from_intensities(&rec.intensities().unwrap(), StokesConvention::Difference)
                .unwrap();
            let d = dolp(&s, DEFAULT_DOLP_EPSILON).unwrap();
            for &v in &d.data {
                assert!((0.0..=1.3).contains(&v), "dolp {v}");
            }
        }
    }

    #[test]
    fn raw_pixel_probe_beats_chance() {
        // sanity precondition: with linear_mix and low noise a correlation
        // probe on raw images already identifies well above chance
        let cfg = SynthConfig {
            n_subjects: 8,
            images_per_condition: 1,
            image_size: 24,
            ranges: vec![RangeId::R1],
            blur_per_range: vec![0.0],
            noise_std: 0.005,
            noise_scale_per_range: None,
            cross_modal_map: CrossModalMap::LinearMix,
            seed: 13,
        };
        let ds = generate_dataset(&cfg).unwrap();
        let gallery: Vec<(&str, &Image)> = ds
            .records
            .iter()
            .filter(|r| r.modality == Modality::Visible && r.condition == Condition::Baseline)
            .map(|r| (r.subject_id.as_str(), &r.channels[0].1))
            .collect();
        let mut hits = 0;
        let mut total = 0;
        for rec in ds.records.iter().filter(|r| r.modality == Modality::Polarimetric) {
            let s = stokes_from_intensities(&rec.intensities().unwrap(), StokesConvention::Difference)
                .unwrap();
            let probe = &s.s0;
            let best = gallery
                .iter()
                .max_by(|(_, a), (_, b)| {
                    correlation(probe, a)
                        .partial_cmp(&correlation(probe, b))
                        .unwrap()
                })
                .unwrap();
            if best.0 == rec.subject_id {
                hits += 1;
            }
            total += 1;
        }
        let acc = hits as f64 / total as f64;
        assert!(acc > 0.5, "raw probe accuracy {acc} not above chance 1/8");
    }

    fn correlation(a: &Image, b: &Image) -> f64 {
        let ma = a.mean();
        let mb = b.mean();
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            num += (x - ma) * (y - mb);
            da += (x - ma) * (x - ma);
            db += (y - mb) * (y - mb);
        }
        num / (da.sqrt() * db.sqrt()).max(1e-12)
    }

    #[test]
    fn write_and_load_round_trip() {
        let cfg = SynthConfig {
            n_subjects: 2,
            images_per_condition: 1,
            image_size: 16,
            ranges: vec![RangeId::R1],
            blur_per_range: vec![0.0],
            noise_std: 0.0,
            noise_scale_per_range: None,
            cross_modal_map: CrossModalMap::LinearMix,
            seed: 3,
        };
        let ds = generate_dataset(&cfg).unwrap();
        let dir = std::env::temp_dir().join("xspec_synth_rt");
        let _ = std::fs::remove_dir_all(&dir);
        write_dataset(&ds, &dir).unwrap();
        let back = load_dataset(&dir).unwrap();
        assert_eq!(back.records.len(), ds.records.len());
        let orig: Vec<String> = ds.records.iter().map(|r| r.image_id()).collect();
        let loaded: Vec<String> = back.records.iter().map(|r| r.image_id()).collect();
        assert_eq!(orig, loaded);
        for (ra, rb) in ds.records.iter().zip(back.records.iter()) {
            assert_eq!(ra.channels.len(), rb.channels.len());
            for ((role_a, ia), (role_b, ib)) in ra.channels.iter().zip(rb.channels.iter()) {
                assert_eq!(role_a, role_b);
                for (x, y) in ia.data.iter().zip(ib.data.iter()) {
                    assert!((x - y).abs() < 1.0 / 65535.0);
                }
            }
        }
    }
}
