//! Parameter checkpoints: a flat binary of little-endian f64 arrays plus a
//! plain-text manifest with one `name<TAB>shape<TAB>byte-offset` line per
//! array. Ensemble checkpoints store both members under `pre.`/`meta.` name
//! prefixes.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use omni_autodiff::Tensor;

use crate::error::{CoreError, Result};
use crate::net::{NetConfig, OmniNet};
use crate::rng::{domain, stream};
use crate::train::{Mode, TaskFamily, TrainedModel};

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "params.manifest";
pub const MODEL_META_FILE: &str = "model_meta.json";

pub fn save_named_params(dir: &Path, named: &[(String, Tensor)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut bin = BufWriter::new(File::create(dir.join(PARAMS_FILE))?);
    let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    let mut offset = 0usize;
    for (name, tensor) in named {
        let shape: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        writeln!(manifest, "{name}\t{}\t{offset}", shape.join("x"))?;
        for v in tensor.data() {
            bin.write_all(&v.to_le_bytes())?;
        }
        offset += tensor.numel() * 8;
    }
    bin.flush()?;
    manifest.flush()?;
    Ok(())
}

pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn load_named_params(dir: &Path) -> Result<Vec<NamedArray>> {
    let manifest = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut bin = Vec::new();
    File::open(dir.join(PARAMS_FILE))?.read_to_end(&mut bin)?;
    let mut out = Vec::new();
    for line in manifest.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (name, shape_s, offset_s) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(CoreError::Checkpoint(format!(
                    "malformed manifest line: {line}"
                )))
            }
        };
        let shape: Vec<usize> = if shape_s.is_empty() {
            vec![]
        } else {
            shape_s
                .split('x')
                .map(|d| {
                    d.parse::<usize>().map_err(|_| {
                        CoreError::Checkpoint(format!("bad shape '{shape_s}' for {name}"))
                    })
                })
                .collect::<Result<_>>()?
        };
        let offset: usize = offset_s
            .parse()
            .map_err(|_| CoreError::Checkpoint(format!("bad offset for {name}")))?;
        let numel: usize = shape.iter().product();
        let end = offset + numel * 8;
        if end > bin.len() {
            return Err(CoreError::Checkpoint(format!(
                "{name}: data range {offset}..{end} exceeds file size {}",
                bin.len()
            )));
        }
        let data: Vec<f64> = bin[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push(NamedArray {
            name: name.to_string(),
            shape,
            data,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub mode: Mode,
    pub family: TaskFamily,
    pub primary: NetConfig,
    pub secondary: Option<NetConfig>,
}

fn prefixed_names(net: &OmniNet, prefix: &str) -> Vec<(String, Tensor)> {
    net.named_params()
        .map(|(name, t)| (format!("{prefix}{name}"), t.clone()))
        .collect()
}

/// Save a trained model: parameters plus a JSON description of the network
/// layout. Ensemble members are stored under `pre.`/`meta.` prefixes.
pub fn save_model(dir: &Path, model: &TrainedModel) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut named = Vec::new();
    match &model.secondary {
        None => named.extend(prefixed_names(&model.primary, "")),
        Some(secondary) => {
            named.extend(prefixed_names(&model.primary, "pre."));
            named.extend(prefixed_names(secondary, "meta."));
        }
    }
    save_named_params(dir, &named)?;
    let meta = ModelMeta {
        mode: model.mode,
        family: model.family,
        primary: model.primary.config().clone(),
        secondary: model.secondary.as_ref().map(|n| n.config().clone()),
    };
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| CoreError::Checkpoint(format!("meta serialization: {e}")))?;
    std::fs::write(dir.join(MODEL_META_FILE), text + "\n")?;
    Ok(())
}

fn rebuild(cfg: &NetConfig, arrays: &[NamedArray], prefix: &str) -> Result<OmniNet> {
    // Fresh structure, then overwrite every parameter from the checkpoint.
    let mut rng = stream(0, domain::INIT, 0);
    let mut net = OmniNet::new(cfg.clone(), &mut rng)?;
    let mut params = Vec::with_capacity(net.specs().len());
    for spec in net.specs() {
        let want = format!("{prefix}{}", spec.name);
        let arr = arrays.iter().find(|a| a.name == want).ok_or_else(|| {
            CoreError::Checkpoint(format!("checkpoint is missing parameter {want}"))
        })?;
        if arr.shape != spec.shape {
            return Err(CoreError::Checkpoint(format!(
                "parameter {want} has shape {:?}, layout expects {:?}",
                arr.shape, spec.shape
            )));
        }
        params.push(Tensor::leaf(arr.data.clone(), arr.shape.clone())?);
    }
    net.set_params(params)?;
    Ok(net)
}

pub fn load_model(dir: &Path) -> Result<TrainedModel> {
    let meta_text = std::fs::read_to_string(dir.join(MODEL_META_FILE))?;
    let meta: ModelMeta = serde_json::from_str(&meta_text)
        .map_err(|e| CoreError::Checkpoint(format!("meta parse: {e}")))?;
    let arrays = load_named_params(dir)?;
    let (primary, secondary) = match &meta.secondary {
        None => (rebuild(&meta.primary, &arrays, "")?, None),
        Some(s) => (
            rebuild(&meta.primary, &arrays, "pre.")?,
            Some(rebuild(s, &arrays, "meta.")?),
        ),
    };
    Ok(TrainedModel {
        mode: meta.mode,
        family: meta.family,
        primary,
        secondary,
    })
}
