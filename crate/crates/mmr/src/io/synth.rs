//! Synthetic feature-bundle generator.
//!
//! Each class gets prototype vectors per channel. A sample mixes its class
//! prototype into the channel at the configured strength on top of Gaussian
//! noise:
//!   - the global map and the region features carry the visual signal
//!     (independent prototypes, so they are complementary),
//!   - the text embeddings carry the textual signal,
//!   - the positional channel encodes the class in the text bboxes: their
//!     size grows with the class index, and each sits on a class-specific
//!     distance ring around the first region's bbox (random direction, so
//!     the displacement itself averages to zero over samples).
//!
//! Everything is a pure function of the seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{Dataset, Dims, FeatureBundle, Region, TextInstance};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    #[serde(default = "Dims::desk")]
    pub dims: Dims,
    /// class signal strength of the global map and region features, in [0,1]
    pub visual_strength: f64,
    /// class signal strength of the text embeddings, in [0,1]
    pub textual_strength: f64,
    /// class signal strength of the text bbox geometry, in [0,1]
    pub positional_strength: f64,
    pub fraction_with_text: f64,
    /// Gaussian noise scale added to every channel
    pub noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config("synth: num_classes must be >= 2".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("synth: samples_per_class must be >= 1".into()));
        }
        for (name, v) in [
            ("visual_strength", self.visual_strength),
            ("textual_strength", self.textual_strength),
            ("positional_strength", self.positional_strength),
            ("fraction_with_text", self.fraction_with_text),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("synth: {name} {v} outside [0,1]")));
            }
        }
        if self.noise < 0.0 {
            return Err(Error::Config("synth: noise must be >= 0".into()));
        }
        if self.textual_strength > 0.0 && self.dims.d_t < self.num_classes {
            return Err(Error::Config(format!(
                "synth: D_t {} too small to embed {} class prototypes",
                self.dims.d_t, self.num_classes
            )));
        }
        Ok(())
    }
}

/// Per-class channel prototypes, exposed so tests can run the
/// nearest-prototype oracle against the generated bundles.
#[derive(Debug, Clone)]
pub struct Prototypes {
    pub global: Vec<Vec<f64>>,
    pub region: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
    /// region-to-text displacement distance per class, before strength
    pub ring: Vec<f64>,
}

fn unit_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

pub fn draw_prototypes(config: &SynthConfig, rng: &mut Rng) -> Prototypes {
    let c = config.num_classes;
    let d = &config.dims;
    let global = (0..c).map(|_| unit_vector(d.d_g, rng)).collect();
    let region = (0..c).map(|_| unit_vector(d.d_r, rng)).collect();
    let text = (0..c).map(|_| unit_vector(d.d_t, rng)).collect();
    // rings from 0.04 to 0.25 keep shifted boxes inside the image
    let ring = (0..c).map(|i| 0.04 + 0.21 * i as f64 / (c - 1).max(1) as f64).collect();
    Prototypes { global, region, text, ring }
}

pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    let (ds, _) = generate_with_prototypes(config)?;
    Ok(ds)
}

pub fn generate_with_prototypes(config: &SynthConfig) -> Result<(Dataset, Prototypes)> {
    config.validate()?;
    let d = config.dims;
    let mut rng = Rng::new(config.seed);
    let protos = draw_prototypes(config, &mut rng);

    let mut bundles = Vec::new();
    let mut index = 0usize;
    for class in 0..config.num_classes {
        for s in 0..config.samples_per_class {
            let mut r = rng.fork(index as u64 + 1);
            let has_text = r.next_f64() < config.fraction_with_text;

            let mut gm = Vec::with_capacity(d.h * d.w * d.d_g);
            for _ in 0..d.h * d.w {
                for j in 0..d.d_g {
                    gm.push(config.visual_strength * protos.global[class][j] + config.noise * r.normal());
                }
            }
            let global_map = Tensor::new(vec![d.h, d.w, d.d_g], gm)?;

            // every region carries the visual signal so average pooling
            // over nodes keeps it; region 0's bbox anchors the positional
            // offset, the others are random boxes
            let num_regions = 1 + (s % d.n);
            let cx = r.uniform(0.35, 0.65);
            let cy = r.uniform(0.35, 0.65);
            let anchor_bbox = [cx - 0.1, cy - 0.1, cx + 0.1, cy + 0.1];
            // region features are lower-dimensional than the pooled global
            // map, so they get a 2x gain to put both visual channels at a
            // comparable signal-to-noise ratio
            let region_mix = (2.0 * config.visual_strength).min(1.0);
            let mut regions = Vec::with_capacity(num_regions);
            for ri in 0..num_regions {
                let feature: Vec<f64> = (0..d.d_r)
                    .map(|j| region_mix * protos.region[class][j] + config.noise * r.normal())
                    .collect();
                let bbox = if ri == 0 { anchor_bbox } else { random_bbox(&mut r) };
                regions.push(Region { feature, bbox, confidence: None });
            }

            let mut texts = Vec::new();
            if has_text {
                let num_texts = 1 + (s % d.m);
                for ti in 0..num_texts {
                    let embedding: Vec<f64> = (0..d.d_t)
                        .map(|j| config.textual_strength * protos.text[class][j] + config.noise * r.normal())
                        .collect();
                    // every text box carries the class in its size; the
                    // class-radius displacement is in a random direction
                    // and so is zero-mean on its own
                    let dist = config.positional_strength * protos.ring[class];
                    let theta = r.uniform(0.0, std::f64::consts::TAU);
                    let (dx, dy) = (dist * theta.cos(), dist * theta.sin());
                    let hs = 0.05 + 0.5 * dist;
                    let tx = (cx + dx).clamp(0.3, 0.7);
                    let ty = (cy + dy).clamp(0.3, 0.7);
                    let jx = config.noise * 0.05 * r.normal();
                    let jy = config.noise * 0.05 * r.normal();
                    let bbox = clamp_bbox([tx - hs + jx, ty - hs + jy, tx + hs + jx, ty + hs + jy]);
                    texts.push(TextInstance { embedding, bbox, confidence: 0.95 - 0.05 * ti as f64 });
                }
            }

            bundles.push(FeatureBundle {
                id: format!("c{class:02}s{s:04}"),
                label: class,
                fold: (index % 3) as u8,
                global_map,
                regions,
                has_text: !texts.is_empty(),
                texts,
            });
            index += 1;
        }
    }

    let ds = Dataset { dims: d, num_classes: config.num_classes, bundles };
    ds.validate()?;
    Ok((ds, protos))
}

fn random_bbox(rng: &mut Rng) -> [f64; 4] {
    let x1 = rng.uniform(0.0, 0.8);
    let y1 = rng.uniform(0.0, 0.8);
    let x2 = x1 + rng.uniform(0.05, 0.2);
    let y2 = y1 + rng.uniform(0.05, 0.2);
    [x1, y1, x2.min(1.0), y2.min(1.0)]
}

fn clamp_bbox(b: [f64; 4]) -> [f64; 4] {
    b.map(|x| x.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> SynthConfig {
        SynthConfig {
            num_classes: 3,
            samples_per_class: 8,
            dims: Dims::desk(),
            visual_strength: 0.5,
            textual_strength: 0.5,
            positional_strength: 0.5,
            fraction_with_text: 0.7,
            noise: 0.1,
            seed: 7,
        }
    }

    #[test]
    fn same_seed_identical_datasets() {
        let a = generate(&config()).unwrap();
        let b = generate(&config()).unwrap();
        assert_eq!(a.bundles, b.bundles);
    }

    #[test]
    fn no_text_fraction_zero() {
        let mut c = config();
        c.fraction_with_text = 0.0;
        let ds = generate(&c).unwrap();
        assert!(ds.bundles.iter().all(|b| !b.has_text && b.texts.is_empty()));
    }

    #[test]
    fn labels_balanced_and_folds_cover() {
        let ds = generate(&config()).unwrap();
        for class in 0..3 {
            assert_eq!(ds.bundles.iter().filter(|b| b.label == class).count(), 8);
        }
        for f in 0..3u8 {
            assert!(ds.bundles.iter().any(|b| b.fold == f));
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // index loops keep the oracle explicit
    fn nearest_prototype_on_clean_text_is_perfect() {
        let mut c = config();
        c.textual_strength = 1.0;
        c.noise = 0.0;
        c.fraction_with_text = 1.0;
        let (ds, protos) = generate_with_prototypes(&c).unwrap();
        for b in &ds.bundles {
            // mean embedding over present texts
            let d_t = c.dims.d_t;
            let mut mean = vec![0.0; d_t];
            for t in &b.texts {
                for j in 0..d_t {
                    mean[j] += t.embedding[j] / b.texts.len() as f64;
                }
            }
            let best = (0..c.num_classes)
                .min_by(|&i, &j| {
                    let di: f64 = protos.text[i].iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
                    let dj: f64 = protos.text[j].iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
                    di.partial_cmp(&dj).unwrap()
                })
                .unwrap();
            assert_eq!(best, b.label, "bundle {}", b.id);
        }
    }

    #[test]
    fn small_configs_rejected() {
        let mut c = config();
        c.num_classes = 1;
        assert!(generate(&c).is_err());
        let mut c = config();
        c.dims.d_t = 2;
        assert!(generate(&c).is_err());
    }
}
