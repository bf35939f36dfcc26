//! Artifacts passed between pipeline commands through the output directory.
//!
//! ```text
//! scenario/manifest.json     dims, seed, file lists, eval tags
//! scenario/weights/*.masq    one D_in x D_out tensor per linear layer
//! scenario/calib/<m>.masq    stacked first-layer calibration tokens
//! scenario/eval/seq<i>.masq  mixed-modality evaluation sequences
//! calibration/manifest.json  per-layer input files and batch sizes
//! calibration/layer<k>_<m>.masq
//! quantized/model.json       the quantized model with integer codes
//! quantized/manifest.json    method and profile used
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use masq_core::io::{read_tensor, write_tensor};
use masq_core::mas::{CalibrationSet, ModalityId};
use masq_core::runtime::{DenseModel, Method, ModalSequence, Scenario, ToyModel};
use masq_core::Matrix;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

pub const SCENARIO_DIR: &str = "scenario";
pub const CALIBRATION_DIR: &str = "calibration";
pub const QUANTIZED_DIR: &str = "quantized";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub d_model: usize,
    pub depth: usize,
    pub seed: u64,
    pub weights: Vec<String>,
    /// Calibration file and tokens per batch, per modality.
    pub calib: BTreeMap<ModalityId, (String, usize)>,
    pub eval: Vec<EvalEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub file: String,
    pub tags: Vec<ModalityId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationManifest {
    pub layers: Vec<BTreeMap<ModalityId, (String, usize)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedManifest {
    pub method: Method,
    pub profile: String,
    pub model: String,
}

pub struct LoadedScenario {
    pub dense: DenseModel,
    pub calib: CalibrationSet,
    pub eval: Vec<ModalSequence>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| {
        format!("reading {} (run the earlier pipeline command first)", path.display())
    })?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn make_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Splits stacked rows back into batches of `per_batch` tokens.
fn split_batches(stacked: &Matrix, per_batch: usize) -> Result<Vec<Matrix>> {
    if per_batch == 0 || !stacked.rows().is_multiple_of(per_batch) {
        bail!("{} rows do not split into batches of {per_batch}", stacked.rows());
    }
    Ok((0..stacked.rows() / per_batch)
        .map(|b| stacked.select_rows(&(b * per_batch..(b + 1) * per_batch).collect::<Vec<_>>()))
        .collect())
}

fn stack_batches(batches: &[Matrix]) -> Result<Matrix> {
    Ok(Matrix::vstack(&batches.iter().collect::<Vec<_>>())?)
}

/// Writes the scenario and returns the files written, relative to `out`.
pub fn save_scenario(out: &Path, sc: &Scenario) -> Result<Vec<String>> {
    let root = out.join(SCENARIO_DIR);
    for sub in ["weights", "calib", "eval"] {
        make_dir(&root.join(sub))?;
    }
    let mut files = Vec::new();
    let mut weights = Vec::new();
    for (k, w) in sc.dense.weights().enumerate() {
        let rel = format!("weights/layer{k}.masq");
        write_tensor(&root.join(&rel), w)?;
        weights.push(rel);
    }
    let mut calib = BTreeMap::new();
    for m in sc.calib.modalities() {
        let batches = sc.calib.batches(m)?;
        let rel = format!("calib/{m}.masq");
        write_tensor(&root.join(&rel), &stack_batches(batches)?)?;
        calib.insert(m.clone(), (rel, batches[0].rows()));
    }
    let mut eval = Vec::new();
    for (i, seq) in sc.eval.iter().enumerate() {
        let rel = format!("eval/seq{i}.masq");
        write_tensor(&root.join(&rel), seq.tokens())?;
        eval.push(EvalEntry {
            file: rel,
            tags: seq.tags().to_vec(),
        });
    }
    files.extend(weights.iter().cloned());
    files.extend(calib.values().map(|(f, _)| f.clone()));
    files.extend(eval.iter().map(|e| e.file.clone()));
    let manifest = ScenarioManifest {
        d_model: sc.dense.d_model,
        depth: sc.dense.depth(),
        seed: sc.dense.seed,
        weights,
        calib,
        eval,
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    files.push("manifest.json".to_string());
    Ok(files.into_iter().map(|f| format!("{SCENARIO_DIR}/{f}")).collect())
}

pub fn load_scenario(out: &Path) -> Result<LoadedScenario> {
    let root = out.join(SCENARIO_DIR);
    let manifest: ScenarioManifest = read_json(&root.join("manifest.json"))?;
    if manifest.weights.len() != 2 * manifest.depth {
        bail!("scenario manifest lists {} weights for depth {}", manifest.weights.len(), manifest.depth);
    }
    let ws = manifest
        .weights
        .iter()
        .map(|f| Ok(read_tensor(&root.join(f))?))
        .collect::<Result<Vec<_>>>()?;
    let mut it = ws.into_iter();
    let mut blocks = Vec::new();
    while let (Some(up), Some(down)) = (it.next(), it.next()) {
        blocks.push((up, down));
    }
    let dense = DenseModel {
        d_model: manifest.d_model,
        seed: manifest.seed,
        blocks,
    };
    let mut batches = BTreeMap::new();
    for (m, (f, per)) in &manifest.calib {
        batches.insert(m.clone(), split_batches(&read_tensor(&root.join(f))?, *per)?);
    }
    let calib = CalibrationSet::from_batches(manifest.d_model, batches)?;
    let eval = manifest
        .eval
        .iter()
        .map(|e| Ok(ModalSequence::new(read_tensor(&root.join(&e.file))?, e.tags.clone())?))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedScenario { dense, calib, eval })
}

pub fn save_calibration(out: &Path, layers: &[CalibrationSet]) -> Result<Vec<String>> {
    let root = out.join(CALIBRATION_DIR);
    make_dir(&root)?;
    let mut manifest = CalibrationManifest { layers: Vec::new() };
    let mut files = Vec::new();
    for (k, set) in layers.iter().enumerate() {
        let mut entry = BTreeMap::new();
        for m in set.modalities() {
            let batches = set.batches(m)?;
            let rel = format!("layer{k}_{m}.masq");
            write_tensor(&root.join(&rel), &stack_batches(batches)?)?;
            files.push(format!("{CALIBRATION_DIR}/{rel}"));
            entry.insert(m.clone(), (rel, batches[0].rows()));
        }
        manifest.layers.push(entry);
    }
    write_json(&root.join("manifest.json"), &manifest)?;
    files.push(format!("{CALIBRATION_DIR}/manifest.json"));
    Ok(files)
}

pub fn load_calibration(out: &Path, dense: &DenseModel) -> Result<Vec<CalibrationSet>> {
    let root = out.join(CALIBRATION_DIR);
    let manifest: CalibrationManifest = read_json(&root.join("manifest.json"))?;
    let widths: Vec<usize> = dense.weights().map(Matrix::rows).collect();
    if manifest.layers.len() != widths.len() {
        bail!("calibration covers {} layers, model has {}", manifest.layers.len(), widths.len());
    }
    manifest
        .layers
        .iter()
        .zip(widths)
        .map(|(entry, d)| {
            let mut batches = BTreeMap::new();
            for (m, (f, per)) in entry {
                batches.insert(m.clone(), split_batches(&read_tensor(&root.join(f))?, *per)?);
            }
            Ok(CalibrationSet::from_batches(d, batches)?)
        })
        .collect()
}

pub fn save_model(out: &Path, model: &ToyModel, method: Method, profile: &str) -> Result<PathBuf> {
    let root = out.join(QUANTIZED_DIR);
    make_dir(&root)?;
    write_json(&root.join("model.json"), model)?;
    write_json(
        &root.join("manifest.json"),
        &QuantizedManifest {
            method,
            profile: profile.to_string(),
            model: "model.json".to_string(),
        },
    )?;
    Ok(PathBuf::from(QUANTIZED_DIR).join("model.json"))
}

pub fn load_model(out: &Path) -> Result<(ToyModel, QuantizedManifest)> {
    let root = out.join(QUANTIZED_DIR);
    let manifest: QuantizedManifest = read_json(&root.join("manifest.json"))?;
    let model: ToyModel = read_json(&root.join(&manifest.model))?;
    model.validate()?;
    Ok((model, manifest))
}
