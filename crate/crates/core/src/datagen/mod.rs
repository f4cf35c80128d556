//! Seeded synthetic crowd scenes, the on-disk dataset format and a
//! converter for annotated grayscale images.
//!
//! A scene is a zero canvas with one bright Gaussian blob per head plus
//! signal-dependent noise `s + noise_std * sqrt(s) * n`, clamped to `[0, 1]`,
//! so empty regions stay exactly zero. The ground-truth density is built
//! directly at a quarter of the input resolution: one unit-mass Gaussian
//! per head, truncated at four standard deviations.

mod convert;
mod io;
mod kernel;

pub use convert::convert_annotated;
pub use io::{load_dataset, save_dataset, MANIFEST_FILE, MANIFEST_VERSION};
pub use kernel::TRUNCATION_SIGMAS;

use crate::error::{BtnError, Result};
use crate::numerics::Tensor;
use crate::rng::{CounterRng, Stream};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Ratio between input and density-map resolution (two 2x2 pools).
pub const DENSITY_SCALE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// `[height, width]`, both divisible by 4.
    pub canvas: [usize; 2],
    /// Inclusive `[min, max]` head count.
    pub count_range: [usize; 2],
    /// Blob standard deviation in image pixels.
    pub head_sigma_px: f64,
    /// Peak blob intensity before noise.
    pub head_intensity: f64,
    /// Density kernel standard deviation in quarter-resolution pixels.
    pub gt_sigma_px: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            canvas: [64, 64],
            count_range: [5, 40],
            head_sigma_px: 1.5,
            head_intensity: 0.8,
            gt_sigma_px: 1.5,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.canvas;
        if h == 0 || w == 0 || h % DENSITY_SCALE != 0 || w % DENSITY_SCALE != 0 {
            return Err(BtnError::config(
                "data.scene.canvas",
                format!("{h}x{w} must be non-empty and divisible by {DENSITY_SCALE}"),
            ));
        }
        if self.count_range[0] > self.count_range[1] {
            return Err(BtnError::config("data.scene.count_range", "min exceeds max"));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.head_sigma_px) {
            return Err(BtnError::config("data.scene.head_sigma_px", "must be positive"));
        }
        if !positive(self.gt_sigma_px) {
            return Err(BtnError::config("data.scene.gt_sigma_px", "must be positive"));
        }
        if !(self.head_intensity.is_finite() && (0.0..=1.0).contains(&self.head_intensity)) {
            return Err(BtnError::config("data.scene.head_intensity", "must lie in [0, 1]"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(BtnError::config("data.scene.noise_std", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    /// `[1, H, W]` in `[0, 1]`.
    pub image: Tensor<T>,
    /// `[1, H/4, W/4]`.
    pub gt_density: Tensor<T>,
    pub true_count: usize,
    /// Head centres `(row, col)` in image pixel units.
    pub head_positions: Vec<(f64, f64)>,
}

impl<T: Scalar> Sample<T> {
    pub fn gt_count(&self) -> T {
        self.gt_density.sum()
    }

    pub fn cast<U: Scalar>(&self) -> Sample<U> {
        Sample {
            image: self.image.cast(),
            gt_density: self.gt_density.cast(),
            true_count: self.true_count,
            head_positions: self.head_positions.clone(),
        }
    }
}

/// A list of samples plus the scene configuration that produced them
/// (absent for converted real images).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scene: Option<SceneConfig>,
    pub samples: Vec<Sample<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream_id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

/// Density map for heads at full-resolution pixel positions on an
/// `h x w` canvas.
pub fn density_from_heads(h: usize, w: usize, heads: &[(f64, f64)], gt_sigma: f64) -> Tensor<f64> {
    let (rows, cols) = (h / DENSITY_SCALE, w / DENSITY_SCALE);
    let mut map = vec![0.0; rows * cols];
    for &(r, c) in heads {
        kernel::splat(&mut map, rows, cols, r, c, DENSITY_SCALE as f64, gt_sigma);
    }
    Tensor::new(vec![1, rows, cols], map).expect("shape and data agree")
}

fn render(cfg: &SceneConfig, heads: &[(f64, f64)], rng: &mut CounterRng) -> Tensor<f64> {
    let [h, w] = cfg.canvas;
    let sigma = cfg.head_sigma_px;
    let reach = (4.0 * sigma).ceil() as i64;
    let mut img = vec![0.0; h * w];
    for &(r, c) in heads {
        let (ri, ci) = (r.floor() as i64, c.floor() as i64);
        for i in (ri - reach).max(0)..=(ri + reach).min(h as i64 - 1) {
            for j in (ci - reach).max(0)..=(ci + reach).min(w as i64 - 1) {
                let dr = i as f64 + 0.5 - r;
                let dc = j as f64 + 0.5 - c;
                img[i as usize * w + j as usize] +=
                    cfg.head_intensity * (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    for v in img.iter_mut() {
        // One normal draw per pixel keeps the stream layout independent of content.
        let n: f64 = rng.normal();
        let s = v.min(1.0);
        *v = (s + cfg.noise_std * s.sqrt() * n).clamp(0.0, 1.0);
    }
    Tensor::new(vec![1, h, w], img).expect("shape and data agree")
}

fn generate_one(cfg: &SceneConfig, mut rng: CounterRng) -> Sample<f64> {
    let [h, w] = cfg.canvas;
    let [lo, hi] = cfg.count_range;
    let count = lo + rng.below((hi - lo + 1) as u64) as usize;
    let heads: Vec<(f64, f64)> = (0..count)
        .map(|_| (rng.uniform(0.0, h as f64), rng.uniform(0.0, w as f64)))
        .collect();
    let image = render(cfg, &heads, &mut rng);
    Sample {
        image,
        gt_density: density_from_heads(h, w, &heads, cfg.gt_sigma_px),
        true_count: count,
        head_positions: heads,
    }
}

/// `n` scenes of one split. Sample `i` draws from its own substream, so a
/// prefix of a larger split is identical to a smaller split.
pub fn generate_split(cfg: &SceneConfig, n: usize, split: Split) -> Result<Dataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(BtnError::Empty("dataset request (n = 0)"));
    }
    let base = CounterRng::new(cfg.seed, Stream::Data).substream(split.stream_id());
    let samples = (0..n).map(|i| generate_one(cfg, base.substream(i as u64))).collect();
    Ok(Dataset {
        scene: Some(cfg.clone()),
        samples,
    })
}

pub fn generate(cfg: &SceneConfig, n: usize) -> Result<Dataset> {
    generate_split(cfg, n, Split::Train)
}
