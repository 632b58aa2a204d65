//! Newline-delimited JSON dataset manifests.
//!
//! Line 1 is a header object declaring the dims record and class count;
//! every following line is one bundle record with relative paths to its
//! MMRT tensor files. NDJSON keeps loading streamable and lets errors
//! carry exact line numbers.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::mmrt::{self, Dtype};
use super::{Dataset, Dims, FeatureBundle, Region, TextInstance};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    dims: Dims,
    num_classes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    label: usize,
    fold: u8,
    has_text: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_h: Option<f64>,
    global_map: String,
    region_feats: String,
    region_bboxes: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    region_confs: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_embeds: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_bboxes: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_confs: Option<String>,
}

const SCHEMA: &str = "mmr-manifest-v1";

/// Writes `dataset` as `<dir>/manifest.ndjson` plus one MMRT file per
/// tensor under `<dir>/tensors/`. Returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    dataset.validate()?;
    let tensor_dir = dir.join("tensors");
    std::fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(tensor_dir.display().to_string(), e))?;
    let manifest_path = dir.join("manifest.ndjson");
    let file = File::create(&manifest_path).map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);

    let header = Header {
        schema: SCHEMA.to_string(),
        dims: dataset.dims,
        num_classes: dataset.num_classes,
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;

    for b in &dataset.bundles {
        let save = |name: &str, t: &Tensor| -> Result<String> {
            let rel = format!("tensors/{}_{}.mmrt", b.id, name);
            mmrt::write_tensor(&dir.join(&rel), t, Dtype::F64)?;
            Ok(rel)
        };
        let d = &dataset.dims;
        let nr = b.regions.len();
        let mut region_feats = Vec::with_capacity(nr * d.d_r);
        let mut region_bboxes = Vec::with_capacity(nr * 4);
        for r in &b.regions {
            region_feats.extend_from_slice(&r.feature);
            region_bboxes.extend_from_slice(&r.bbox);
        }
        let nt = b.texts.len();
        let mut text_embeds = Vec::with_capacity(nt * d.d_t);
        let mut text_bboxes = Vec::with_capacity(nt * 4);
        let mut text_confs = Vec::with_capacity(nt);
        for t in &b.texts {
            text_embeds.extend_from_slice(&t.embedding);
            text_bboxes.extend_from_slice(&t.bbox);
            text_confs.push(t.confidence);
        }

        let rec = Record {
            id: b.id.clone(),
            label: b.label,
            fold: b.fold,
            has_text: b.has_text,
            image_w: None,
            image_h: None,
            global_map: save("global", &b.global_map)?,
            region_feats: save("rfeat", &Tensor::matrix(nr, d.d_r, region_feats)?)?,
            region_bboxes: save("rbbox", &Tensor::matrix(nr, 4, region_bboxes)?)?,
            region_confs: None,
            text_embeds: if nt > 0 {
                Some(save("tembed", &Tensor::matrix(nt, d.d_t, text_embeds)?)?)
            } else {
                None
            },
            text_bboxes: if nt > 0 {
                Some(save("tbbox", &Tensor::matrix(nt, 4, text_bboxes)?)?)
            } else {
                None
            },
            text_confs: if nt > 0 { Some(save("tconf", &Tensor::from_vec(text_confs))?) } else { None },
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(manifest_path)
}

/// Loads and validates a dataset from its manifest. Text lists are
/// re-sorted by descending confidence; bbox pixel coordinates are
/// normalized when image_w/image_h are present.
pub fn read_dataset(manifest_path: &Path) -> Result<Dataset> {
    let file = File::open(manifest_path).map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Manifest { line: 1, detail: "empty manifest".into() })?;
    let first = first.map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let header: Header = serde_json::from_str(&first)
        .map_err(|e| Error::Manifest { line: 1, detail: format!("bad header: {e}") })?;
    if header.schema != SCHEMA {
        return Err(Error::Manifest { line: 1, detail: format!("unknown schema {}", header.schema) });
    }
    header.dims.validate()?;
    let d = header.dims;

    let mut bundles = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Manifest { line: lineno, detail: format!("malformed JSON: {e}") })?;
        if rec.label >= header.num_classes {
            return Err(Error::Manifest {
                line: lineno,
                detail: format!("bundle {}: label {} >= num_classes {}", rec.id, rec.label, header.num_classes),
            });
        }

        let img = match (rec.image_w, rec.image_h) {
            (Some(w), Some(h)) => Some((w, h)),
            (None, None) => None,
            _ => {
                return Err(Error::Manifest {
                    line: lineno,
                    detail: format!("bundle {}: image_w and image_h must both be set", rec.id),
                })
            }
        };

        let global_map = mmrt::read_tensor(&base.join(&rec.global_map))?;
        if global_map.shape() != [d.h, d.w, d.d_g] {
            return Err(Error::Manifest {
                line: lineno,
                detail: format!(
                    "bundle {}: global map shape {:?} != [{}, {}, {}]",
                    rec.id,
                    global_map.shape(),
                    d.h,
                    d.w,
                    d.d_g
                ),
            });
        }

        let rfeat = mmrt::read_tensor(&base.join(&rec.region_feats))?;
        let rbbox = mmrt::read_tensor(&base.join(&rec.region_bboxes))?;
        if rfeat.rank() != 2 || rfeat.cols() != d.d_r {
            return Err(Error::Manifest {
                line: lineno,
                detail: format!("bundle {}: region features {:?}, expected [*, {}]", rec.id, rfeat.shape(), d.d_r),
            });
        }
        if rbbox.shape() != [rfeat.rows(), 4] {
            return Err(Error::Manifest {
                line: lineno,
                detail: format!("bundle {}: region bbox shape {:?}", rec.id, rbbox.shape()),
            });
        }
        let rconf = match &rec.region_confs {
            Some(p) => Some(mmrt::read_tensor(&base.join(p))?),
            None => None,
        };
        let regions: Vec<Region> = (0..rfeat.rows())
            .map(|i| -> Result<Region> {
                Ok(Region {
                    feature: rfeat.row(i).to_vec(),
                    bbox: normalized_bbox_row(&rbbox, i, img)?,
                    confidence: rconf.as_ref().map(|c| c.data()[i]),
                })
            })
            .collect::<Result<_>>()
            .map_err(|e| Error::Manifest { line: lineno, detail: format!("bundle {}: {e}", rec.id) })?;

        let mut texts: Vec<TextInstance> = Vec::new();
        if let (Some(ep), Some(bp), Some(cp)) = (&rec.text_embeds, &rec.text_bboxes, &rec.text_confs) {
            let temb = mmrt::read_tensor(&base.join(ep))?;
            let tbbox = mmrt::read_tensor(&base.join(bp))?;
            let tconf = mmrt::read_tensor(&base.join(cp))?;
            if temb.rank() != 2 || temb.cols() != d.d_t {
                return Err(Error::Manifest {
                    line: lineno,
                    detail: format!("bundle {}: text embeddings {:?}, expected [*, {}]", rec.id, temb.shape(), d.d_t),
                });
            }
            if tbbox.shape() != [temb.rows(), 4] || tconf.shape() != [temb.rows()] {
                return Err(Error::Manifest {
                    line: lineno,
                    detail: format!("bundle {}: inconsistent text tensor shapes", rec.id),
                });
            }
            for i in 0..temb.rows() {
                texts.push(TextInstance {
                    embedding: temb.row(i).to_vec(),
                    bbox: normalized_bbox_row(&tbbox, i, img)
                        .map_err(|e| Error::Manifest { line: lineno, detail: format!("bundle {}: {e}", rec.id) })?,
                    confidence: tconf.data()[i],
                });
            }
            texts.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).expect("finite confidence"));
        }
        let has_text = !texts.is_empty();
        if has_text != rec.has_text {
            return Err(Error::Manifest {
                line: lineno,
                detail: format!("bundle {}: has_text flag does not match text tensors", rec.id),
            });
        }

        bundles.push(FeatureBundle {
            id: rec.id,
            label: rec.label,
            fold: rec.fold,
            global_map,
            regions,
            texts,
            has_text,
        });
    }

    let ds = Dataset { dims: d, num_classes: header.num_classes, bundles };
    ds.validate()?;
    Ok(ds)
}

fn normalized_bbox_row(t: &Tensor, i: usize, img: Option<(f64, f64)>) -> Result<[f64; 4]> {
    let r = t.row(i);
    let raw = [r[0], r[1], r[2], r[3]];
    super::normalize_bbox(raw, img)
}
