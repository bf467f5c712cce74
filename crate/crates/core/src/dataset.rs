//! Phantom cohorts on disk: one directory per case plus a manifest.
//!
//! ```text
//! <root>/manifest.json
//! <root>/case_000/{observed,truth,ct,labels}.{json,raw}
//! <root>/case_000/case.json
//! <root>/case_000/iy.{json,raw}        (optional cached iY label)
//! ```

use crate::error::{PvcError, Result};
use crate::io::{read_labels, read_volume, write_labels, write_volume};
use crate::phantom::{generate, PhantomCase, PhantomSpec};
use crate::pvc::{iy_correct, IyOptions};
use crate::train::Sample;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseInfo {
    pub id: String,
    pub seed: u64,
    pub true_imbv: f64,
    /// Spec after per-case perturbation.
    pub spec: PhantomSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub base_spec: PhantomSpec,
    pub cases: Vec<String>,
}

pub fn case_id(i: usize) -> String {
    format!("case_{i:03}")
}

pub fn write_case(dir: &Path, id: &str, case: &PhantomCase) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_volume(&dir.join("observed"), &case.observed)?;
    write_volume(&dir.join("truth"), &case.truth)?;
    write_volume(&dir.join("ct"), &case.ct)?;
    write_labels(&dir.join("labels"), &case.templates, case.truth.spacing)?;
    let info = CaseInfo {
        id: id.to_string(),
        seed: case.spec.seed,
        true_imbv: case.true_imbv,
        spec: case.spec.clone(),
    };
    std::fs::write(dir.join("case.json"), serde_json::to_vec_pretty(&info)?)?;
    Ok(())
}

/// Generates `n` cases with seeds `spec.seed + i` under `root`.
pub fn generate_dataset(root: &Path, spec: &PhantomSpec, n: usize) -> Result<Manifest> {
    if n == 0 {
        return Err(PvcError::Config("number of cases must be >= 1".into()));
    }
    std::fs::create_dir_all(root)?;
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let case = generate(&PhantomSpec {
            seed: spec.seed.wrapping_add(i as u64),
            ..spec.clone()
        })?;
        let id = case_id(i);
        write_case(&root.join(&id), &id, &case)?;
        ids.push(id);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        base_spec: spec.clone(),
        cases: ids,
    };
    std::fs::write(root.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| PvcError::MissingData(format!("{}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_slice(&bytes)?;
    if m.version != MANIFEST_VERSION {
        return Err(PvcError::Format(format!("unsupported manifest version {}", m.version)));
    }
    Ok(m)
}

pub fn read_case_info(dir: &Path) -> Result<CaseInfo> {
    Ok(serde_json::from_slice(&std::fs::read(dir.join("case.json"))?)?)
}

fn has_volume(stem: &Path) -> bool {
    stem.with_extension("json").exists() && stem.with_extension("raw").exists()
}

/// Loads one case as a training/evaluation sample. The iY label is read
/// from `iy.*` when cached, computed otherwise.
pub fn load_sample(dir: &Path, use_ct: bool, iy: &IyOptions) -> Result<Sample> {
    let info = read_case_info(dir)?;
    let observed = read_volume(&dir.join("observed"))?;
    let templates = read_labels(&dir.join("labels"))?;
    templates.check_matches(&observed)?;
    let truth = if has_volume(&dir.join("truth")) {
        Some(read_volume(&dir.join("truth"))?)
    } else {
        None
    };
    let label = if has_volume(&dir.join("iy")) {
        read_volume(&dir.join("iy"))?
    } else {
        iy_correct(&observed, &templates, &info.spec.psf, iy)?.corrected
    };
    let mut inputs = vec![observed];
    if use_ct {
        inputs.push(read_volume(&dir.join("ct"))?);
    }
    Ok(Sample {
        id: info.id,
        inputs,
        label,
        templates,
        truth,
    })
}

pub fn case_dirs(root: &Path, manifest: &Manifest) -> Vec<PathBuf> {
    manifest.cases.iter().map(|c| root.join(c)).collect()
}
