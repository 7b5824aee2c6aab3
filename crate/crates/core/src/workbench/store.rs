//! On-disk collections: a JSON manifest plus one checkpoint per model.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::{io_err, write_atomic, WorkbenchError};
use crate::ensemble::{AcaRecord, CollectionEntry, CollectionRecipe, ModelCollection, PlainMember};

pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    arch_id: String,
    sigma: f64,
    aca: f64,
    unsmoothable: bool,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct PlainRecord {
    arch_id: String,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    recipe: CollectionRecipe,
    quantity_options: Vec<usize>,
    entries: Vec<EntryRecord>,
    plain: Vec<PlainRecord>,
    aca_table: Vec<AcaRecord>,
}

/// Everything [`load_collection`] returns.
#[derive(Clone, Debug)]
pub struct StoredCollection {
    pub collection: ModelCollection,
    pub aca_table: Vec<AcaRecord>,
    pub recipe: CollectionRecipe,
}

pub fn save_collection(
    dir: &Path,
    collection: &ModelCollection,
    aca_table: &[AcaRecord],
    recipe: &CollectionRecipe,
) -> Result<(), WorkbenchError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::new();
    for e in collection.entries() {
        let file = format!("entry-{:03}.ckpt", e.entry_id);
        save_checkpoint(&e.model, &dir.join(&file))?;
        entries.push(EntryRecord {
            arch_id: e.arch_id.clone(),
            sigma: e.sigma,
            aca: e.aca,
            unsmoothable: e.unsmoothable,
            file,
        });
    }
    let mut plain = Vec::new();
    for (i, p) in collection.plain().iter().enumerate() {
        let file = format!("plain-{i:03}.ckpt");
        save_checkpoint(&p.model, &dir.join(&file))?;
        plain.push(PlainRecord {
            arch_id: p.arch_id.clone(),
            file,
        });
    }
    let manifest = Manifest {
        recipe: recipe.clone(),
        quantity_options: collection.quantity_options().to_vec(),
        entries,
        plain,
        aca_table: aca_table.to_vec(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    // the manifest goes last so a partial save is never mistaken for a collection
    write_atomic(&dir.join(MANIFEST), &json)
}

pub fn load_collection(dir: &Path) -> Result<StoredCollection, WorkbenchError> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(WorkbenchError::MissingCollection(dir.to_path_buf()));
    }
    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| WorkbenchError::Malformed {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let entries = m
        .entries
        .into_iter()
        .map(|r| {
            Ok(CollectionEntry {
                entry_id: 0,
                model: Arc::new(load_checkpoint(&dir.join(&r.file))?),
                arch_id: r.arch_id,
                sigma: r.sigma,
                aca: r.aca,
                unsmoothable: r.unsmoothable,
            })
        })
        .collect::<Result<Vec<_>, WorkbenchError>>()?;
    let plain = m
        .plain
        .into_iter()
        .map(|r| {
            Ok(PlainMember {
                model: Arc::new(load_checkpoint(&dir.join(&r.file))?),
                arch_id: r.arch_id,
            })
        })
        .collect::<Result<Vec<_>, WorkbenchError>>()?;
    Ok(StoredCollection {
        collection: ModelCollection::new(entries, plain, m.quantity_options)?,
        aca_table: m.aca_table,
        recipe: m.recipe,
    })
}
