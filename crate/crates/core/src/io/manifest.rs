use std::collections::BTreeSet;
use std::path::Path;

use serde::Deserialize;

use super::{json_str, read_lines};
use crate::error::{Error, Result};
use crate::metrics::{FoilSample, RetrievalDataset, WinogroundSample};
use crate::similarity::ItemId;

fn manifest_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.display().to_string(),
        line,
        detail: detail.into(),
    }
}

fn load_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    read_lines(path)?
        .into_iter()
        .map(|(line, body)| {
            serde_json::from_str(&body)
                .map(|v| (line, v))
                .map_err(|e| manifest_err(path, line, e.to_string()))
        })
        .collect()
}

/// Loads a retrieval manifest (a single JSON document) and checks that gold
/// ids are known candidates and ids are unique.
pub fn load_retrieval_manifest(path: impl AsRef<Path>) -> Result<RetrievalDataset> {
    let path = path.as_ref();
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ds: RetrievalDataset =
        serde_json::from_str(&body).map_err(|e| manifest_err(path, 1, e.to_string()))?;
    ds.validate().map_err(|e| manifest_err(path, 1, e.to_string()))?;
    Ok(ds)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WinogroundRecord {
    #[serde(default)]
    id: Option<String>,
    i0: ItemId,
    i1: ItemId,
    c0: ItemId,
    c1: ItemId,
    #[serde(default)]
    tags: BTreeSet<String>,
}

pub fn load_winoground_manifest(path: impl AsRef<Path>) -> Result<Vec<WinogroundSample>> {
    let path = path.as_ref();
    load_lines::<WinogroundRecord>(path)?
        .into_iter()
        .map(|(line, r)| {
            WinogroundSample::new(r.id, r.i0, r.i1, r.c0, r.c1, r.tags)
                .map_err(|e| manifest_err(path, line, e.to_string()))
        })
        .collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FoilRecord {
    image: ItemId,
    caption_true: ItemId,
    caption_foil: ItemId,
    #[serde(default)]
    category: String,
}

pub fn load_foil_manifest(path: impl AsRef<Path>) -> Result<Vec<FoilSample>> {
    let path = path.as_ref();
    load_lines::<FoilRecord>(path)?
        .into_iter()
        .map(|(line, r)| {
            FoilSample::new(r.image, r.caption_true, r.caption_foil, r.category)
                .map_err(|e| manifest_err(path, line, e.to_string()))
        })
        .collect()
}

pub fn render_foil_manifest(foils: &[FoilSample]) -> String {
    foils
        .iter()
        .map(|f| {
            format!(
                "{{\"image\":{},\"caption_true\":{},\"caption_foil\":{},\"category\":{}}}\n",
                json_str(f.image.as_str()),
                json_str(f.caption_true.as_str()),
                json_str(f.caption_foil.as_str()),
                json_str(&f.category)
            )
        })
        .collect()
}

/// One line of a color-bias manifest; scores are attached at evaluation time.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorManifestEntry {
    pub image: ItemId,
    pub fruit_type: String,
    pub caption_true: ItemId,
    pub caption_adv: ItemId,
}

pub fn load_color_manifest(path: impl AsRef<Path>) -> Result<Vec<ColorManifestEntry>> {
    Ok(load_lines::<ColorManifestEntry>(path.as_ref())?
        .into_iter()
        .map(|(_, e)| e)
        .collect())
}
