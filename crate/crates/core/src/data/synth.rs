use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, RunManifest, Sample, DEFAULT_CLASSES};

/// Parameters of the region-blob dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub n_per_class: usize,
    pub classes: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise as a fraction of `[0, 1]`.
    pub noise_sigma: f64,
    pub size: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            n_per_class: 100,
            classes: 7,
            seed: 42,
            noise_sigma: 0.15,
            size: 48,
        }
    }
}

impl SynthOptions {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes < 2 || self.classes > 9 {
            return Err(DataError::Contract(format!(
                "synthetic data supports 2..=9 classes (one region each), got {}",
                self.classes
            )));
        }
        if self.n_per_class == 0 {
            return Err(DataError::Contract("n_per_class must be positive".into()));
        }
        if self.size < 9 || self.size % 3 != 0 {
            return Err(DataError::Contract(format!(
                "image size must be a multiple of 3 and at least 9, got {}",
                self.size
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(DataError::Contract("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn synthetic_class_names(k: usize) -> Vec<String> {
    (0..k)
        .map(|i| {
            DEFAULT_CLASSES
                .get(i)
                .map_or_else(|| format!("class{i}"), |s| s.to_string())
        })
        .collect()
}

/// Renders one 8-bit image of `class`: a Gaussian bump inside grid cell
/// `class` over a jittered background, plus pixel noise.
pub fn synth_image(class: usize, opts: &SynthOptions, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let size = opts.size;
    let cell = size as f64 / 3.0;
    let background: f64 = rng.random_range(0.2..0.4);
    let amplitude: f64 = rng.random_range(0.35..0.5);
    let jitter = cell / 8.0;
    let cy = (class / 3) as f64 * cell + cell / 2.0 + rng.random_range(-jitter..jitter);
    let cx = (class % 3) as f64 * cell + cell / 2.0 + rng.random_range(-jitter..jitter);
    let spread = cell / 4.0;
    let noise = (opts.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, opts.noise_sigma).expect("finite sigma"));
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let bump = amplitude * (-(dx * dx + dy * dy) / (2.0 * spread * spread)).exp();
            let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
            let v = (background + bump + n).clamp(0.0, 1.0);
            pixels.push((v * 255.0).round() as u8);
        }
    }
    pixels
}

/// Writes `n_per_class × classes` PNG images plus `manifest.csv` into `out_dir`.
pub fn generate_synthetic(opts: &SynthOptions, out_dir: &Path) -> Result<RunManifest, DataError> {
    opts.validate()?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(io(&image_dir))?;
    let class_names = synthetic_class_names(opts.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut samples = Vec::with_capacity(opts.classes * opts.n_per_class);
    for (class, name) in class_names.iter().enumerate() {
        for i in 0..opts.n_per_class {
            let pixels = synth_image(class, opts, &mut rng);
            let rel = PathBuf::from("images").join(format!("{name}_{i:04}.png"));
            let path = out_dir.join(&rel);
            GrayImage::from_fn(opts.size as u32, opts.size as u32, |x, y| {
                Luma([pixels[y as usize * opts.size + x as usize]])
            })
            .save(&path)
            .map_err(|e| DataError::Decode {
                path: path.clone(),
                msg: e.to_string(),
            })?;
            samples.push(Sample { path: rel, label: class });
        }
    }
    let manifest = RunManifest {
        class_names,
        samples,
        root: out_dir.to_path_buf(),
    };
    let manifest_path = out_dir.join("manifest.csv");
    fs::write(&manifest_path, manifest.to_csv()).map_err(io(&manifest_path))?;
    Ok(manifest)
}

/// Mean intensity of each cell of the 3×3 grid.
pub fn region_means(pixels: &[u8], size: usize) -> [f64; 9] {
    let cell = size / 3;
    let mut sums = [0.0; 9];
    for y in 0..cell * 3 {
        for x in 0..cell * 3 {
            sums[(y / cell) * 3 + x / cell] += pixels[y * size + x] as f64;
        }
    }
    sums.map(|s| s / (cell * cell) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_blob_region_is_brightest() {
        let opts = SynthOptions {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for class in 0..9 {
            for _ in 0..20 {
                let img = synth_image(class, &opts, &mut rng);
                let means = region_means(&img, opts.size);
                for (r, m) in means.iter().enumerate() {
                    if r != class {
                        assert!(means[class] > *m, "class {class} region {r}: {means:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_too_many_classes() {
        let opts = SynthOptions {
            classes: 10,
            ..Default::default()
        };
        assert!(matches!(opts.validate(), Err(DataError::Contract(_))));
    }

    #[test]
    fn class_names_extend_past_defaults() {
        let names = synthetic_class_names(9);
        assert_eq!(names[0], "anger");
        assert_eq!(names[6], "neutral");
        assert_eq!(names[8], "class8");
    }
}
