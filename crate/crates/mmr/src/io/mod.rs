//! Feature-bundle datasets: the MMRT tensor file format, NDJSON manifests,
//! bounding-box normalization and padding, fold handling and the synthetic
//! generator.

pub mod manifest;
pub mod mmrt;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Model and bundle dimensions. `d_node = d_p + b` is the node width
/// consumed by the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// global feature map spatial extents
    pub h: usize,
    pub w: usize,
    /// global feature channels
    pub d_g: usize,
    /// region feature width
    pub d_r: usize,
    /// text embedding width
    pub d_t: usize,
    /// modal projection width
    pub d_p: usize,
    /// positional code width
    pub b: usize,
    /// global branch output width
    pub d_out: usize,
    /// max regions per image
    pub n: usize,
    /// max text instances per image
    pub m: usize,
    /// GCN layer count
    pub l: usize,
}

impl Dims {
    /// Paper-faithful profile.
    pub fn paper() -> Dims {
        Dims { h: 7, w: 7, d_g: 2048, d_r: 2048, d_t: 300, d_p: 1920, b: 128, d_out: 2048, n: 36, m: 15, l: 8 }
    }

    /// Small profile sized so full gradient checks and the ablation grid
    /// run in seconds on one core while exercising every code path.
    pub fn desk() -> Dims {
        Dims { h: 3, w: 3, d_g: 32, d_r: 16, d_t: 12, d_p: 24, b: 8, d_out: 32, n: 6, m: 4, l: 2 }
    }

    pub fn d_node(&self) -> usize {
        self.d_p + self.b
    }

    pub fn k(&self) -> usize {
        self.n + self.m
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("h", self.h),
            ("w", self.w),
            ("d_g", self.d_g),
            ("d_r", self.d_r),
            ("d_t", self.d_t),
            ("d_p", self.d_p),
            ("b", self.b),
            ("d_out", self.d_out),
            ("n", self.n),
            ("m", self.m),
            ("l", self.l),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("dims.{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// One detected salient region.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub feature: Vec<f64>,
    pub bbox: [f64; 4],
    /// detector score when supplied; used only for top-n truncation
    pub confidence: Option<f64>,
}

/// One OCR'd text instance with its precomputed embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextInstance {
    pub embedding: Vec<f64>,
    pub bbox: [f64; 4],
    pub confidence: f64,
}

/// One image's precomputed inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub id: String,
    pub label: usize,
    pub fold: u8,
    /// H x W x D_g
    pub global_map: Tensor,
    pub regions: Vec<Region>,
    pub texts: Vec<TextInstance>,
    pub has_text: bool,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dims: Dims,
    pub num_classes: usize,
    pub bundles: Vec<FeatureBundle>,
}

/// Fixed-size model inputs derived from one bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBundle {
    /// n x D_r
    pub regions: Tensor,
    /// n x 4
    pub region_bboxes: Tensor,
    /// m x D_t
    pub texts: Tensor,
    /// m x 4
    pub text_bboxes: Tensor,
}

pub(crate) fn normalize_bbox(bbox: [f64; 4], img: Option<(f64, f64)>) -> Result<[f64; 4]> {
    let [x1, y1, x2, y2] = match img {
        Some((w, h)) => [bbox[0] / w, bbox[1] / h, bbox[2] / w, bbox[3] / h],
        None => bbox,
    };
    if x2 < x1 || y2 < y1 {
        return Err(Error::Dataset(format!("degenerate bbox ({x1}, {y1}, {x2}, {y2})")));
    }
    for v in [x1, y1, x2, y2] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Dataset(format!("bbox coordinate {v} outside [0,1] after normalization")));
        }
    }
    Ok([x1, y1, x2, y2])
}

/// Normalizes bboxes to [0,1], keeps the n / m most confident records
/// (ties broken by original index, via stable sort) and zero-pads to
/// exactly n regions and m texts. Idempotent on already-normalized,
/// already-padded input.
pub fn normalize_and_pad(
    bundle: &FeatureBundle,
    dims: &Dims,
    img: Option<(f64, f64)>,
) -> Result<PaddedBundle> {
    let mut regions: Vec<&Region> = bundle.regions.iter().collect();
    // stable: equal confidences keep original order
    regions.sort_by(|a, b| {
        b.confidence
            .unwrap_or(0.0)
            .partial_cmp(&a.confidence.unwrap_or(0.0))
            .expect("finite confidence")
    });
    regions.truncate(dims.n);
    if bundle.regions.iter().all(|r| r.confidence.is_none()) {
        // no scores: keep manifest order
        regions = bundle.regions.iter().take(dims.n).collect();
    }

    let mut texts: Vec<&TextInstance> = bundle.texts.iter().collect();
    texts.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).expect("finite confidence"));
    texts.truncate(dims.m);

    let mut region_feats = vec![0.0; dims.n * dims.d_r];
    let mut region_bboxes = vec![0.0; dims.n * 4];
    for (i, r) in regions.iter().enumerate() {
        if r.feature.len() != dims.d_r {
            return Err(Error::Dataset(format!(
                "bundle {}: region feature width {} != D_r {}",
                bundle.id,
                r.feature.len(),
                dims.d_r
            )));
        }
        region_feats[i * dims.d_r..(i + 1) * dims.d_r].copy_from_slice(&r.feature);
        region_bboxes[i * 4..(i + 1) * 4].copy_from_slice(&normalize_bbox(r.bbox, img)?);
    }

    let mut text_embeds = vec![0.0; dims.m * dims.d_t];
    let mut text_bboxes = vec![0.0; dims.m * 4];
    for (i, t) in texts.iter().enumerate() {
        if t.embedding.len() != dims.d_t {
            return Err(Error::Dataset(format!(
                "bundle {}: text embedding width {} != D_t {}",
                bundle.id,
                t.embedding.len(),
                dims.d_t
            )));
        }
        text_embeds[i * dims.d_t..(i + 1) * dims.d_t].copy_from_slice(&t.embedding);
        text_bboxes[i * 4..(i + 1) * 4].copy_from_slice(&normalize_bbox(t.bbox, img)?);
    }

    Ok(PaddedBundle {
        regions: Tensor::matrix(dims.n, dims.d_r, region_feats)?,
        region_bboxes: Tensor::matrix(dims.n, 4, region_bboxes)?,
        texts: Tensor::matrix(dims.m, dims.d_t, text_embeds)?,
        text_bboxes: Tensor::matrix(dims.m, 4, text_bboxes)?,
    })
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        for b in &self.bundles {
            if b.label >= self.num_classes {
                return Err(Error::Dataset(format!(
                    "bundle {}: label {} >= num_classes {}",
                    b.id, b.label, self.num_classes
                )));
            }
            if b.fold > 2 {
                return Err(Error::Dataset(format!("bundle {}: fold {} not in {{0,1,2}}", b.id, b.fold)));
            }
            if b.has_text != !b.texts.is_empty() {
                return Err(Error::Dataset(format!("bundle {}: has_text flag inconsistent", b.id)));
            }
            let gm = b.global_map.shape();
            if gm != [self.dims.h, self.dims.w, self.dims.d_g] {
                return Err(Error::Dataset(format!(
                    "bundle {}: global map shape {:?} != [{}, {}, {}]",
                    b.id, gm, self.dims.h, self.dims.w, self.dims.d_g
                )));
            }
        }
        Ok(())
    }

    /// Test fold vs the rest, by bundle index. Deterministic.
    pub fn fold_split(&self, test_fold: u8) -> Result<(Vec<usize>, Vec<usize>)> {
        if test_fold > 2 {
            return Err(Error::InvalidArgument(format!("test_fold {test_fold} not in {{0,1,2}}")));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, b) in self.bundles.iter().enumerate() {
            if b.fold == test_fold {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle_with(regions: Vec<Region>, texts: Vec<TextInstance>) -> FeatureBundle {
        let has_text = !texts.is_empty();
        FeatureBundle {
            id: "t".into(),
            label: 0,
            fold: 0,
            global_map: Tensor::zeros(vec![3, 3, 32]),
            regions,
            texts,
            has_text,
        }
    }

    fn dims() -> Dims {
        Dims::desk()
    }

    #[test]
    fn bbox_normalization_divides_by_image_size() {
        let d = dims();
        let b = bundle_with(
            vec![Region { feature: vec![0.0; d.d_r], bbox: [10.0, 20.0, 50.0, 100.0], confidence: None }],
            vec![],
        );
        let p = normalize_and_pad(&b, &d, Some((100.0, 200.0))).unwrap();
        assert_eq!(p.region_bboxes.row(0), [0.1, 0.1, 0.5, 0.5]);
    }

    #[test]
    fn padding_appends_zero_rows() {
        let d = dims();
        let mk = |v: f64| Region { feature: vec![v; d.d_r], bbox: [0.1, 0.1, 0.2, 0.2], confidence: None };
        let b = bundle_with(vec![mk(1.0), mk(2.0)], vec![]);
        let p = normalize_and_pad(&b, &d, None).unwrap();
        for i in 2..d.n {
            assert!(p.regions.row(i).iter().all(|&x| x == 0.0));
            assert!(p.region_bboxes.row(i).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn truncation_keeps_most_confident_texts() {
        let d = dims();
        let texts: Vec<TextInstance> = (0..20)
            .map(|i| TextInstance {
                embedding: vec![i as f64; d.d_t],
                bbox: [0.0, 0.0, 0.1, 0.1],
                confidence: i as f64 / 20.0,
            })
            .collect();
        let b = bundle_with(vec![], texts);
        let p = normalize_and_pad(&b, &d, None).unwrap();
        // the m highest confidences are 19, 18, 17, 16
        for i in 0..d.m {
            assert_eq!(p.texts.at(i, 0), (19 - i) as f64);
        }
    }

    #[test]
    fn degenerate_bbox_rejected() {
        let d = dims();
        let b = bundle_with(
            vec![Region { feature: vec![0.0; d.d_r], bbox: [0.5, 0.1, 0.2, 0.2], confidence: None }],
            vec![],
        );
        assert!(normalize_and_pad(&b, &d, None).is_err());
    }

    #[test]
    fn normalize_and_pad_is_idempotent() {
        let d = dims();
        let b = bundle_with(
            vec![Region { feature: vec![1.5; d.d_r], bbox: [0.1, 0.2, 0.3, 0.4], confidence: Some(0.9) }],
            vec![TextInstance { embedding: vec![2.0; d.d_t], bbox: [0.0, 0.0, 0.5, 0.5], confidence: 0.8 }],
        );
        let once = normalize_and_pad(&b, &d, None).unwrap();
        // rebuild a bundle from the padded arrays and pad again
        let regions = (0..d.n)
            .map(|i| Region {
                feature: once.regions.row(i).to_vec(),
                bbox: [
                    once.region_bboxes.at(i, 0),
                    once.region_bboxes.at(i, 1),
                    once.region_bboxes.at(i, 2),
                    once.region_bboxes.at(i, 3),
                ],
                confidence: None,
            })
            .collect();
        let texts = (0..d.m)
            .map(|i| TextInstance {
                embedding: once.texts.row(i).to_vec(),
                bbox: [
                    once.text_bboxes.at(i, 0),
                    once.text_bboxes.at(i, 1),
                    once.text_bboxes.at(i, 2),
                    once.text_bboxes.at(i, 3),
                ],
                confidence: 1.0 - i as f64 * 0.1,
            })
            .collect();
        let b2 = bundle_with(regions, texts);
        let twice = normalize_and_pad(&b2, &d, None).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn fold_split_partitions() {
        let d = dims();
        let mut bundles = Vec::new();
        for i in 0..7 {
            let mut b = bundle_with(vec![], vec![]);
            b.id = format!("b{i}");
            b.fold = (i % 3) as u8;
            bundles.push(b);
        }
        let ds = Dataset { dims: d, num_classes: 2, bundles };
        let mut seen = [false; 7];
        for f in 0..3u8 {
            let (train, test) = ds.fold_split(f).unwrap();
            assert_eq!(train.len() + test.len(), 7);
            for i in test {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&x| x));
        assert!(ds.fold_split(3).is_err());
    }
}
