//! Difference-of-Gaussians band-pass filtering and fixed-geometry patch
//! extraction, applied identically to both modalities.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// DoG filter configuration. Both kernels share one support radius and are
/// sum-normalized before subtraction, so the composite kernel has zero DC.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DoGConfig {
    pub sigma0: f64,
    pub sigma1: f64,
    pub radius: usize,
}

impl Default for DoGConfig {
    fn default() -> Self {
        DoGConfig {
            sigma0: 1.0,
            sigma1: 2.0,
            radius: 6,
        }
    }
}

impl DoGConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0 && self.sigma1 > 0.0) {
            return Err(Error::Config("DoG sigmas must be positive".into()));
        }
        if self.sigma0 >= self.sigma1 {
            return Err(Error::Config(format!(
                "DoG requires sigma0 < sigma1, got {} >= {}",
                self.sigma0, self.sigma1
            )));
        }
        if (self.radius as f64) < (3.0 * self.sigma1).ceil() {
            return Err(Error::Config(format!(
                "DoG radius {} too small for sigma1 {} (need >= {})",
                self.radius,
                self.sigma1,
                (3.0 * self.sigma1).ceil()
            )));
        }
        Ok(())
    }
}

/// Square sliding-window geometry.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub stride: usize,
}

impl Default for PatchGrid {
    fn default() -> Self {
        // 40x40 patches with stride 10
        PatchGrid {
            patch_size: 40,
            stride: 10,
        }
    }
}

impl PatchGrid {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.stride == 0 {
            return Err(Error::Config("patch_size and stride must be positive".into()));
        }
        Ok(())
    }
}

/// Per-patch per-channel standardization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    None,
    ZeroMeanUnitVar,
}

impl std::str::FromStr for Normalize {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Normalize::None),
            "zero_mean_unit_var" => Ok(Normalize::ZeroMeanUnitVar),
            other => Err(Error::Config(format!("unknown normalize mode `{other}`"))),
        }
    }
}

/// Discrete Gaussian kernel of side 2*radius+1, renormalized to unit sum.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<Image> {
    if sigma <= 0.0 {
        return Err(Error::InvalidInput("sigma must be positive".into()));
    }
    if radius == 0 {
        return Err(Error::InvalidInput("radius must be >= 1".into()));
    }
    let side = 2 * radius + 1;
    let mut k = Image::zeros(side, side);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut sum = 0.0;
    for r in 0..side {
        for c in 0..side {
            let y = r as f64 - radius as f64;
            let x = c as f64 - radius as f64;
            let v = (-(x * x + y * y) * inv).exp();
            *k.at_mut(r, c) = v;
            sum += v;
        }
    }
    for v in &mut k.data {
        *v /= sum;
    }
    Ok(k)
}

#[inline]
fn reflect(idx: i64, n: i64) -> usize {
    // reflect-101 mirroring; clamps for degenerate 1-pixel extents
    let mut i = idx;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

/// Full 2-D convolution with reflect border padding; output shape == input.
pub fn convolve_reflect(img: &Image, kernel: &Image) -> Result<Image> {
    if img.height == 0 || img.width == 0 {
        return Err(Error::InvalidInput("empty image".into()));
    }
    let kr = (kernel.height / 2) as i64;
    let kc = (kernel.width / 2) as i64;
    let (h, w) = (img.height as i64, img.width as i64);
    let mut out = Image::zeros(img.height, img.width);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for dr in -kr..=kr {
                let src_r = reflect(r + dr, h);
                let krow = (dr + kr) as usize;
                for dc in -kc..=kc {
                    let src_c = reflect(c + dc, w);
                    acc += kernel.at(krow, (dc + kc) as usize) * img.at(src_r, src_c);
                }
            }
            *out.at_mut(r as usize, c as usize) = acc;
        }
    }
    Ok(out)
}

/// Band-pass filter: (G_sigma0 - G_sigma1) * img with reflect padding.
pub fn dog_filter(img: &Image, cfg: &DoGConfig) -> Result<Image> {
    cfg.validate()?;
    if !img.is_finite() {
        return Err(Error::InvalidInput("image contains non-finite values".into()));
    }
    let g0 = gaussian_kernel(cfg.sigma0, cfg.radius)?;
    let g1 = gaussian_kernel(cfg.sigma1, cfg.radius)?;
    let diff = g0.zip(&g1, |a, b| a - b)?;
    convolve_reflect(img, &diff)
}

/// The composite DoG kernel itself (for impulse-response checks and docs).
pub fn dog_kernel(cfg: &DoGConfig) -> Result<Image> {
    cfg.validate()?;
    let g0 = gaussian_kernel(cfg.sigma0, cfg.radius)?;
    let g1 = gaussian_kernel(cfg.sigma1, cfg.radius)?;
    g0.zip(&g1, |a, b| a - b)
}

/// Number of patch offsets along an extent of `n` pixels.
pub fn grid_steps(n: usize, patch: usize, stride: usize) -> usize {
    (n - patch) / stride + 1
}

/// Extract patches at offsets (r*stride, c*stride), row-major. Patch contents
/// are exact sub-window copies; trailing rows/columns not reachable by the
/// stride are dropped.
pub fn extract_patches(img: &Image, grid: &PatchGrid) -> Result<Vec<(usize, usize, Image)>> {
    grid.validate()?;
    let p = grid.patch_size;
    if p > img.height || p > img.width {
        return Err(Error::InvalidInput(format!(
            "patch {p} exceeds image {}x{}",
            img.height, img.width
        )));
    }
    let rows = grid_steps(img.height, p, grid.stride);
    let cols = grid_steps(img.width, p, grid.stride);
    let mut out = Vec::with_capacity(rows * cols);
    for gr in 0..rows {
        for gc in 0..cols {
            let r0 = gr * grid.stride;
            let c0 = gc * grid.stride;
            let mut patch = Image::zeros(p, p);
            for r in 0..p {
                let src = &img.data[(r0 + r) * img.width + c0..(r0 + r) * img.width + c0 + p];
                patch.data[r * p..(r + 1) * p].copy_from_slice(src);
            }
            out.push((r0, c0, patch));
        }
    }
    Ok(out)
}

/// A multi-channel patch and its pixel offset on the shared grid.
#[derive(Debug, Clone)]
pub struct StackedPatch {
    pub row: usize,
    pub col: usize,
    /// [C, P, P]
    pub patch: Tensor,
}

/// DoG-filter each channel, patch on the shared grid, and stack co-located
/// channels. Optional per-patch per-channel standardization.
pub fn preprocess_stack(
    channels: &[Image],
    cfg: &DoGConfig,
    grid: &PatchGrid,
    normalize: Normalize,
) -> Result<Vec<StackedPatch>> {
    let first = channels
        .first()
        .ok_or_else(|| Error::InvalidInput("no channels".into()))?;
    for ch in channels {
        if !ch.same_shape(first) {
            return Err(Error::ShapeMismatch("channel shapes differ".into()));
        }
    }
    let per_channel: Vec<Vec<(usize, usize, Image)>> = channels
        .iter()
        .map(|ch| extract_patches(&dog_filter(ch, cfg)?, grid))
        .collect::<Result<_>>()?;
    let n_patches = per_channel[0].len();
    let mut out = Vec::with_capacity(n_patches);
    for i in 0..n_patches {
        let (row, col, _) = per_channel[0][i];
        let imgs: Vec<Image> = per_channel
            .iter()
            .map(|pc| {
                let img = &pc[i].2;
                match normalize {
                    Normalize::None => img.clone(),
                    Normalize::ZeroMeanUnitVar => standardize(img),
                }
            })
            .collect();
        out.push(StackedPatch {
            row,
            col,
            patch: Tensor::stack_channels(&imgs)?,
        });
    }
    Ok(out)
}

fn standardize(img: &Image) -> Image {
    let mean = img.mean();
    let var = img.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / img.data.len() as f64;
    let std = var.sqrt().max(1e-12);
    img.map(|v| (v - mean) / std)
}
