//! Dataset directories: a JSON manifest plus one field file per array.
//! Pair datasets store train/val splits with optional per-sample masks and
//! gate fields; series datasets store each snapshot series as one stacked
//! array; closure datasets also carry a matched OOD pair.

use crate::datagen::{self, DataConfig, GenOutput, OodPair};
use crate::error::{Error, Result};
use crate::io;
use crate::spectral::{Field, GridSpec};
use crate::training::PairSample;
use ndarray::{ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// "pairs", "series", or "ood".
    pub flavor: String,
    pub grid: GridSpec,
    pub train: usize,
    pub val: usize,
    /// Snapshots per series (series flavor).
    pub series_len: usize,
    pub has_masks: bool,
    pub has_gates: bool,
    pub has_eval_mask: bool,
    pub has_ood: bool,
    /// Full echo of the generating configuration.
    pub config: DataConfig,
}

fn sample_stem(split: &str, index: usize) -> String {
    format!("{split}{index:04}")
}

fn write_pairs(dir: &Path, split: &str, samples: &[PairSample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let stem = sample_stem(split, i);
        io::write_field(&dir.join(format!("{stem}.in.pouf")), &s.input)?;
        io::write_field(&dir.join(format!("{stem}.out.pouf")), &s.target)?;
        if let Some(m) = &s.mask {
            io::write_array(&dir.join(format!("{stem}.mask.pouf")), m)?;
        }
        if let Some(g) = &s.gates {
            io::write_array(&dir.join(format!("{stem}.gates.pouf")), g)?;
        }
    }
    Ok(())
}

/// Stack a snapshot series into one array [T, n.., channels].
fn stack_series(series: &[Field]) -> ArrayD<f64> {
    let mut shape = vec![series.len()];
    shape.extend_from_slice(series[0].values.shape());
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for (t, f) in series.iter().enumerate() {
        out.index_axis_mut(Axis(0), t).assign(&f.values);
    }
    out
}

fn unstack_series(a: ArrayD<f64>, grid: &GridSpec) -> Result<Vec<Field>> {
    if a.ndim() != grid.dims() + 2 {
        return Err(Error::format(format!(
            "series array rank {} does not fit the grid",
            a.ndim()
        )));
    }
    let t = a.shape()[0];
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let v = a.index_axis(Axis(0), i).to_owned();
        out.push(Field::new(grid.clone(), v)?);
    }
    Ok(out)
}

/// Generate the configured dataset and write it under `dir` (which is
/// created). Series datasets derive one seed per series (seed + index) and
/// keep the coarse series; the fine and filtered parents are written only
/// for `keep_fine`. A closure dataset also gets one OOD pair.
pub fn save_dataset(dir: &Path, cfg: &DataConfig, keep_fine: bool) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let manifest = match cfg.kind.as_str() {
        "burgers-closure" => {
            let mut grid = None;
            let mut series_len = 0;
            for split in ["train", "val"] {
                let (count, base) = if split == "train" {
                    (cfg.count, 0)
                } else {
                    (cfg.val_count, cfg.count)
                };
                for i in 0..count {
                    let sub = DataConfig {
                        seed: cfg.seed.wrapping_add((base + i) as u64),
                        ..cfg.clone()
                    };
                    let (fine, filtered, coarse) = datagen::gen_burgers_closure(&sub)?;
                    let stem = sample_stem(split, i);
                    io::write_array(&dir.join(format!("{stem}.coarse.pouf")), &stack_series(&coarse))?;
                    if keep_fine {
                        io::write_array(&dir.join(format!("{stem}.fine.pouf")), &stack_series(&fine))?;
                        io::write_array(
                            &dir.join(format!("{stem}.filtered.pouf")),
                            &stack_series(&filtered),
                        )?;
                    }
                    series_len = coarse.len();
                    grid = Some(coarse[0].grid.clone());
                }
            }
            let ood_cfg = DataConfig {
                kind: "ood-ic".into(),
                seed: cfg.seed.wrapping_add((cfg.count + cfg.val_count) as u64),
                ..cfg.clone()
            };
            let ood = datagen::gen_ood_pair(&ood_cfg)?;
            write_ood(dir, &ood)?;
            DatasetManifest {
                flavor: "series".into(),
                grid: grid.ok_or_else(|| Error::invalid("no series generated"))?,
                train: cfg.count,
                val: cfg.val_count,
                series_len,
                has_masks: false,
                has_gates: false,
                has_eval_mask: false,
                has_ood: true,
                config: cfg.clone(),
            }
        }
        "ood-ic" => {
            let ood = datagen::gen_ood_pair(cfg)?;
            write_ood(dir, &ood)?;
            DatasetManifest {
                flavor: "ood".into(),
                grid: ood.in_dist.grid.clone(),
                train: 0,
                val: 0,
                series_len: 0,
                has_masks: false,
                has_gates: false,
                has_eval_mask: false,
                has_ood: true,
                config: cfg.clone(),
            }
        }
        _ => {
            let out = datagen::generate(cfg)?;
            let (train, val, eval_mask) = match out {
                GenOutput::Pairs {
                    train,
                    val,
                    eval_mask,
                } => (train, val, eval_mask),
                _ => unreachable!("pair kinds produce pairs"),
            };
            write_pairs(dir, "train", &train)?;
            write_pairs(dir, "val", &val)?;
            if let Some(m) = &eval_mask {
                io::write_array(&dir.join("eval_mask.pouf"), m)?;
            }
            let first = train
                .first()
                .or(val.first())
                .ok_or_else(|| Error::invalid("empty dataset"))?;
            DatasetManifest {
                flavor: "pairs".into(),
                grid: first.input.grid.clone(),
                train: train.len(),
                val: val.len(),
                series_len: 0,
                has_masks: first.mask.is_some(),
                has_gates: first.gates.is_some(),
                has_eval_mask: eval_mask.is_some(),
                has_ood: false,
                config: cfg.clone(),
            }
        }
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(format!("manifest: {e}")))?;
    fs::write(dir.join(MANIFEST_NAME), json)?;
    Ok(manifest)
}

fn write_ood(dir: &Path, ood: &OodPair) -> Result<()> {
    io::write_field(&dir.join("ood.in_dist.pouf"), &ood.in_dist)?;
    io::write_field(&dir.join("ood.ood.pouf"), &ood.ood)?;
    io::write_field(&dir.join("ood.fine.pouf"), &ood.fine)?;
    io::write_field(&dir.join("ood.filtered_fine.pouf"), &ood.filtered_fine)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("manifest: {e}")))
}

fn split_count(manifest: &DatasetManifest, split: &str) -> Result<usize> {
    match split {
        "train" => Ok(manifest.train),
        "val" => Ok(manifest.val),
        _ => Err(Error::invalid(format!("unknown split '{split}'"))),
    }
}

pub fn load_pairs(dir: &Path, manifest: &DatasetManifest, split: &str) -> Result<Vec<PairSample>> {
    if manifest.flavor != "pairs" {
        return Err(Error::invalid("dataset does not hold pair samples"));
    }
    let count = split_count(manifest, split)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let stem = sample_stem(split, i);
        let input = io::read_field(&dir.join(format!("{stem}.in.pouf")), &manifest.grid)?;
        let target = io::read_field(&dir.join(format!("{stem}.out.pouf")), &manifest.grid)?;
        let mask = if manifest.has_masks {
            Some(io::read_array(&dir.join(format!("{stem}.mask.pouf")))?)
        } else {
            None
        };
        let gates = if manifest.has_gates {
            Some(io::read_array(&dir.join(format!("{stem}.gates.pouf")))?)
        } else {
            None
        };
        out.push(PairSample {
            input,
            target,
            mask,
            gates,
        });
    }
    Ok(out)
}

pub fn load_eval_mask(dir: &Path, manifest: &DatasetManifest) -> Result<Option<ArrayD<f64>>> {
    if !manifest.has_eval_mask {
        return Ok(None);
    }
    Ok(Some(io::read_array(&dir.join("eval_mask.pouf"))?))
}

/// One coarse snapshot series.
pub fn load_series(
    dir: &Path,
    manifest: &DatasetManifest,
    split: &str,
    index: usize,
) -> Result<Vec<Field>> {
    if manifest.flavor != "series" {
        return Err(Error::invalid("dataset does not hold snapshot series"));
    }
    let count = split_count(manifest, split)?;
    if index >= count {
        return Err(Error::invalid(format!(
            "series index {index} out of range for split '{split}' ({count})"
        )));
    }
    let stem = sample_stem(split, index);
    let a = io::read_array(&dir.join(format!("{stem}.coarse.pouf")))?;
    unstack_series(a, &manifest.grid)
}

pub fn load_ood(dir: &Path, manifest: &DatasetManifest) -> Result<OodPair> {
    if !manifest.has_ood {
        return Err(Error::invalid("dataset has no OOD pair"));
    }
    let coarse = &manifest.grid;
    let fine_n = manifest.config.nf;
    let fine_grid = GridSpec::new(&[fine_n], &[coarse.len[0]])?;
    Ok(OodPair {
        in_dist: io::read_field(&dir.join("ood.in_dist.pouf"), coarse)?,
        ood: io::read_field(&dir.join("ood.ood.pouf"), coarse)?,
        fine: io::read_field(&dir.join("ood.fine.pouf"), &fine_grid)?,
        filtered_fine: io::read_field(&dir.join("ood.filtered_fine.pouf"), &fine_grid)?,
    })
}
