use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FusionStrategy, IntermediateHead, SevitModel};
use crate::backbone::Backbone;
use crate::error::{Result, SevitError};

/// File name of the manifest inside a bundle directory.
pub const BUNDLE_MANIFEST: &str = "ensemble.json";
const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEntry {
    pub block_index: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    /// Backbone checkpoint, relative to the bundle directory.
    pub backbone: String,
    pub heads: Vec<HeadEntry>,
    pub fusion: FusionStrategy,
}

/// Writes the backbone, every head and a manifest into `dir`.
pub fn save_bundle(model: &SevitModel, dir: &Path) -> Result<BundleManifest> {
    fs::create_dir_all(dir)?;
    let backbone = "backbone.ckpt".to_string();
    model.backbone().save_checkpoint(&dir.join(&backbone))?;
    let mut heads = Vec::with_capacity(model.num_heads());
    for head in model.heads() {
        let file = format!("head_block{:02}.ckpt", head.block_index());
        head.save_checkpoint(&dir.join(&file))?;
        heads.push(HeadEntry {
            block_index: head.block_index(),
            file,
        });
    }
    let manifest = BundleManifest {
        format_version: BUNDLE_VERSION,
        backbone,
        heads,
        fusion: model.fusion(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| SevitError::InvalidArgument(e.to_string()))?;
    let tmp = dir.join(format!("{BUNDLE_MANIFEST}.tmp"));
    fs::write(&tmp, json)?;
    fs::rename(tmp, dir.join(BUNDLE_MANIFEST))?;
    Ok(manifest)
}

pub fn load_bundle(dir: &Path) -> Result<SevitModel> {
    let path = dir.join(BUNDLE_MANIFEST);
    let bad = |reason: String| SevitError::Checkpoint {
        path: path.clone(),
        reason,
    };
    let text = fs::read_to_string(&path)?;
    let manifest: BundleManifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if manifest.format_version != BUNDLE_VERSION {
        return Err(bad(format!("unsupported bundle version {}", manifest.format_version)));
    }
    let backbone = Backbone::load_checkpoint(&dir.join(&manifest.backbone))?;
    let mut heads = Vec::with_capacity(manifest.heads.len());
    for entry in &manifest.heads {
        let head = IntermediateHead::load_checkpoint(&dir.join(&entry.file))?;
        if head.block_index() != entry.block_index {
            return Err(bad(format!(
                "{} holds a head for block {}, manifest says {}",
                entry.file,
                head.block_index(),
                entry.block_index
            )));
        }
        heads.push(head);
    }
    SevitModel::allowing_degenerate(backbone, heads, manifest.fusion)
}
