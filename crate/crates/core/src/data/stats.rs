//! Per-class and per-category image counts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::manifest::{DatasetManifest, Split};
use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub class: String,
    pub train: usize,
    pub val: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCount {
    pub category: String,
    pub classes: usize,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StatsReport {
    pub classes: Vec<ClassCount>,
    /// Present only when a non-empty category map was supplied.
    pub categories: Option<Vec<CategoryCount>>,
}

impl StatsReport {
    pub fn total_images(&self) -> usize {
        self.classes.iter().map(|c| c.total).sum()
    }

    /// The class with the most images; ties go to the earlier class.
    pub fn largest_class(&self) -> Option<&ClassCount> {
        self.classes
            .iter()
            .fold(None, |best: Option<&ClassCount>, c| match best {
                Some(b) if b.total >= c.total => Some(b),
                _ => Some(c),
            })
    }
}

/// Two-column `class,category` CSV. An empty file yields an empty map.
pub fn read_category_map(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    #[derive(Deserialize)]
    struct Row {
        class: String,
        category: String,
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut map = BTreeMap::new();
    for row in r.deserialize::<Row>() {
        let row = row?;
        map.insert(row.class, row.category);
    }
    Ok(map)
}

/// Counts per class, and per category when `categories` is non-empty.
/// Classes missing from a non-empty map are grouped under `uncategorized`.
pub fn dataset_stats(
    manifest: &DatasetManifest,
    categories: Option<&BTreeMap<String, String>>,
) -> StatsReport {
    let mut classes: Vec<ClassCount> = manifest
        .classes
        .iter()
        .map(|c| ClassCount {
            class: c.clone(),
            train: 0,
            val: 0,
            total: 0,
        })
        .collect();
    for e in &manifest.entries {
        let c = &mut classes[e.label];
        match e.split {
            Split::Train => c.train += 1,
            Split::Val => c.val += 1,
        }
        c.total += 1;
    }
    let categories = categories.filter(|m| !m.is_empty()).map(|map| {
        let mut agg: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for c in &classes {
            let cat = map.get(&c.class).cloned().unwrap_or_else(|| "uncategorized".into());
            let slot = agg.entry(cat).or_default();
            slot.0 += 1;
            slot.1 += c.total;
        }
        agg.into_iter()
            .map(|(category, (classes, images))| CategoryCount {
                category,
                classes,
                images,
            })
            .collect()
    });
    StatsReport {
        classes,
        categories,
    }
}

pub fn write_class_csv(report: &StatsReport, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for c in &report.classes {
        w.serialize(c)?;
    }
    w.flush().map_err(io_err(path.as_ref()))?;
    Ok(())
}

pub fn write_category_csv(report: &StatsReport, path: impl AsRef<Path>) -> Result<()> {
    let cats = report
        .categories
        .as_ref()
        .ok_or_else(|| Error::Config("no category map was supplied".into()))?;
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for c in cats {
        w.serialize(c)?;
    }
    w.flush().map_err(io_err(path.as_ref()))?;
    Ok(())
}
