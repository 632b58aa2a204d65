//! Component ablation grid: trains a ladder of variants under identical
//! seeds, folds and schedules, then reports classification and retrieval
//! mAP for each.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, Subset};
use crate::io::Dataset;
use crate::model::{prepare_input, GlobalBranch, Model, VariantSpec};
use crate::optim::{self, TrainConfig};

/// The standard ladder, each rung adding one component. The last two rungs
/// differ only in graph reasoning, which isolates its contribution.
pub fn standard_grid() -> Vec<(String, VariantSpec)> {
    let base = VariantSpec {
        global: GlobalBranch::Attended,
        use_local: false,
        use_text: false,
        use_bboxes: false,
        use_mmr: false,
        ..VariantSpec::default()
    };
    vec![
        ("global".to_string(), base),
        ("global+local".to_string(), VariantSpec { use_local: true, ..base }),
        ("global+local+text".to_string(), VariantSpec { use_local: true, use_text: true, ..base }),
        (
            "global+local+text+pos".to_string(),
            VariantSpec { use_local: true, use_text: true, use_bboxes: true, ..base },
        ),
        ("full".to_string(), VariantSpec::default()),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GridEntry {
    #[serde(default)]
    name: Option<String>,
    #[serde(flatten)]
    variant: VariantSpec,
}

/// Reads a custom grid: a JSON array of variant records, each optionally
/// named (unnamed entries become "variant-<index>"). Unset fields fall
/// back to the full model's defaults.
pub fn load_grid(path: &Path) -> Result<Vec<(String, VariantSpec)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let entries: Vec<GridEntry> =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("grid {}: {e}", path.display())))?;
    if entries.is_empty() {
        return Err(Error::Config(format!("grid {}: empty variant list", path.display())));
    }
    entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            e.variant.validate()?;
            Ok((e.name.unwrap_or_else(|| format!("variant-{i}")), e.variant))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub name: String,
    pub variant: VariantSpec,
    pub test_map: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_map_with_text: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_map_without_text: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval_map: Option<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridReport {
    pub fold: usize,
    pub seed: u64,
    pub rows: Vec<GridRow>,
}

/// Trains every variant on the same fold split with the same seed and
/// schedule, so rows differ only in architecture.
pub fn run_grid(
    dataset: &Dataset,
    fold: usize,
    train_cfg: &TrainConfig,
    seed: u64,
    variants: &[(String, VariantSpec)],
) -> Result<GridReport> {
    if variants.is_empty() {
        return Err(Error::InvalidArgument("ablation: empty variant list".into()));
    }
    let test_fold = u8::try_from(fold).map_err(|_| Error::InvalidArgument(format!("fold {fold} not in {{0,1,2}}")))?;
    let (train_idx, test_idx) = dataset.fold_split(test_fold)?;
    let train_inputs = train_idx
        .iter()
        .map(|&i| prepare_input(&dataset.bundles[i], &dataset.dims))
        .collect::<Result<Vec<_>>>()?;
    let test_inputs = test_idx
        .iter()
        .map(|&i| prepare_input(&dataset.bundles[i], &dataset.dims))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(variants.len());
    for (name, variant) in variants {
        let started = Instant::now();
        let mut model = Model::new(*variant, dataset.dims, dataset.num_classes, seed)?;
        let report = optim::train(&mut model, &train_inputs, &test_inputs, train_cfg)?;

        let all = eval::evaluate_classification(&model, &test_inputs, Subset::All)?;
        let with_text = eval::evaluate_classification(&model, &test_inputs, Subset::WithText).ok();
        let without_text = eval::evaluate_classification(&model, &test_inputs, Subset::WithoutText).ok();
        let retrieval = eval::evaluate_retrieval(&model, &test_inputs).ok();

        rows.push(GridRow {
            name: name.clone(),
            variant: *variant,
            test_map: all.map.ok_or_else(|| Error::Eval(format!("{name}: test mAP undefined")))?,
            test_map_with_text: with_text.and_then(|r| r.map),
            test_map_without_text: without_text.and_then(|r| r.map),
            retrieval_map: retrieval.and_then(|r| r.map),
            best_epoch: report.best_epoch,
            epochs_run: report.epochs_run,
            runtime_secs: started.elapsed().as_secs_f64(),
        });
    }
    Ok(GridReport { fold, seed, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synth::{self, SynthConfig};
    use crate::io::Dims;

    #[test]
    fn grid_variants_are_valid_and_strictly_widen() {
        let grid = standard_grid();
        assert_eq!(grid.len(), 5);
        let dims = Dims::desk();
        let mut prev_width = 0;
        for (name, v) in &grid {
            v.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            let width = v.fused_width(&dims);
            assert!(width >= prev_width, "{name} narrowed the fused vector");
            prev_width = width;
        }
        // last two rungs differ only in graph reasoning
        let penultimate = grid[3].1;
        let last = grid[4].1;
        assert_eq!(VariantSpec { use_mmr: true, ..penultimate }, last);
    }

    #[test]
    fn grid_file_parses_names_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.json");
        std::fs::write(
            &path,
            r#"[
                {"name": "lean", "use_mmr": false, "dropout": 0.0},
                {"use_text": false}
            ]"#,
        )
        .unwrap();
        let grid = load_grid(&path).unwrap();
        assert_eq!(grid.len(), 2);
        assert_eq!(grid[0].0, "lean");
        assert!(!grid[0].1.use_mmr);
        assert_eq!(grid[0].1.dropout, 0.0);
        assert_eq!(grid[1].0, "variant-1");
        assert!(!grid[1].1.use_text);
        // unset fields keep the full-model defaults
        assert!(grid[1].1.use_local);

        std::fs::write(&path, "[]").unwrap();
        assert!(load_grid(&path).is_err());
    }

    // when the class is encoded only in the text bbox geometry, the
    // bbox-consuming variant must beat the bbox-free one by a wide margin
    #[test]
    fn positional_only_signal_needs_bboxes() {
        let cfg = SynthConfig {
            num_classes: 4,
            samples_per_class: 80,
            dims: Dims::desk(),
            visual_strength: 0.0,
            textual_strength: 0.0,
            positional_strength: 1.0,
            fraction_with_text: 1.0,
            noise: 0.1,
            seed: 330,
        };
        let ds = synth::generate(&cfg).unwrap();
        let variants = vec![
            ("with-bboxes".to_string(), VariantSpec::default()),
            ("without-bboxes".to_string(), VariantSpec { use_bboxes: false, ..VariantSpec::default() }),
        ];
        let train_cfg = TrainConfig {
            epochs: 80,
            batch_size: 8,
            patience: 80,
            seed: 331,
            milestones: vec![48, 64],
            optim: crate::optim::OptimConfig { lr: 0.01, weight_decay: 0.005, ..Default::default() },
            ..TrainConfig::default()
        };
        let report = run_grid(&ds, 0, &train_cfg, 331, &variants).unwrap();
        let with = report.rows[0].test_map;
        let without = report.rows[1].test_map;
        assert!(
            with - without >= 0.10,
            "bboxes worth only {:.1} points ({:.1} vs {:.1})",
            100.0 * (with - without),
            100.0 * with,
            100.0 * without
        );
    }

    #[test]
    fn grid_runs_end_to_end_on_a_tiny_dataset() {
        let cfg = SynthConfig {
            num_classes: 3,
            samples_per_class: 6,
            dims: Dims::desk(),
            visual_strength: 0.8,
            textual_strength: 0.8,
            positional_strength: 0.6,
            fraction_with_text: 1.0,
            noise: 0.05,
            seed: 42,
        };
        let ds = synth::generate(&cfg).unwrap();
        let train_cfg = TrainConfig { epochs: 2, batch_size: 4, seed: 1, ..TrainConfig::default() };
        let variants = vec![
            ("global".to_string(), standard_grid()[0].1),
            ("full".to_string(), VariantSpec::default()),
        ];
        let report = run_grid(&ds, 0, &train_cfg, 9, &variants).unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            assert!((0.0..=1.0).contains(&row.test_map), "{}: mAP {}", row.name, row.test_map);
            assert!(row.runtime_secs >= 0.0);
        }
    }
}
