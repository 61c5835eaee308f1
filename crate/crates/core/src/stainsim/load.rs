use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::{CenterDataset, StainTransform};
use crate::error::{Error, Result};
use crate::nn::TaskKind;
use crate::tensor::Tensor;

struct Row {
    line: usize,
    label: Option<usize>,
    mask: Option<String>,
}

fn read_manifest(path: &Path) -> Result<BTreeMap<String, Row>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let mut rows = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let file =
            rec.get(0).filter(|f| !f.is_empty()).ok_or_else(|| Error::Load(format!("manifest line {line}: missing filename")))?;
        let label = match rec.get(1).unwrap_or("-") {
            "-" | "" => None,
            v => Some(v.parse().map_err(|_| Error::Load(format!("manifest line {line}: bad label `{v}`")))?),
        };
        let mask = rec.get(2).filter(|m| !m.is_empty() && *m != "-").map(str::to_string);
        if label.is_none() && mask.is_none() {
            return Err(Error::Load(format!("manifest line {line} (`{file}`) has neither label nor mask")));
        }
        if rows.insert(file.to_string(), Row { line, label, mask }).is_some() {
            return Err(Error::Load(format!("manifest line {line}: duplicate entry `{file}`")));
        }
    }
    Ok(rows)
}

fn read_rgb(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?.to_rgb8())
}

/// Loads a directory of 8-bit RGB patches described by a tab-separated
/// manifest (`filename`, `label`, optional `mask` file name).
///
/// Samples are ordered by filename. Every file in the directory must be
/// either a manifest image, a manifest mask or the manifest itself.
pub fn load_image_directory(dir: &Path, manifest: &Path) -> Result<CenterDataset> {
    let listing = std::fs::read_dir(dir).map_err(|e| Error::Load(format!("{}: {e}", dir.display())))?;
    let mut files = BTreeSet::new();
    for entry in listing {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            files.insert(entry.file_name().to_string_lossy().into_owned());
        }
    }
    let manifest_name = manifest
        .canonicalize()
        .ok()
        .filter(|m| m.parent() == dir.canonicalize().ok().as_deref())
        .and_then(|m| m.file_name().map(|f| f.to_string_lossy().into_owned()));
    if let Some(m) = &manifest_name {
        files.remove(m);
    }
    if files.is_empty() {
        return Err(Error::Load(format!("{}: empty dataset directory", dir.display())));
    }
    let rows = read_manifest(manifest)?;
    for (name, row) in &rows {
        if !files.contains(name) {
            return Err(Error::Load(format!("manifest line {} names missing file `{name}`", row.line)));
        }
        if let Some(m) = &row.mask {
            if !files.contains(m) {
                return Err(Error::Load(format!("manifest line {} names missing mask `{m}`", row.line)));
            }
        }
    }
    let masks_used: BTreeSet<&str> = rows.values().filter_map(|r| r.mask.as_deref()).collect();
    if let Some(stray) = files.iter().find(|f| !rows.contains_key(*f) && !masks_used.contains(f.as_str())) {
        return Err(Error::Load(format!("unknown file `{stray}` is not in the manifest")));
    }

    let all_masked = rows.values().all(|r| r.mask.is_some());
    let all_labeled = rows.values().all(|r| r.label.is_some());
    let task = if all_labeled { TaskKind::Classification } else { TaskKind::DensePrediction };
    if !all_labeled && !all_masked {
        return Err(Error::Load("manifest mixes unlabeled rows with rows lacking masks".into()));
    }

    let mut size = None;
    let mut pixels = Vec::new();
    let mut mask_pixels = Vec::new();
    let mut check = |name: &str, w: u32, h: u32| -> Result<usize> {
        if w != h {
            return Err(Error::Load(format!("`{name}` is {w}x{h}; patches must be square")));
        }
        match size {
            None => size = Some(w),
            Some(s) if s != w => return Err(Error::Load(format!("`{name}` is {w}x{h}, expected {s}x{s}"))),
            _ => {}
        }
        Ok(w as usize)
    };
    for (name, row) in &rows {
        let img = read_rgb(&dir.join(name))?;
        let s = check(name, img.width(), img.height())?;
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    pixels.push(img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0);
                }
            }
        }
        if all_masked {
            let m = row.mask.as_deref().expect("all rows masked");
            let mi = image::open(dir.join(m)).map_err(|e| Error::Load(format!("{m}: {e}")))?.to_luma8();
            check(m, mi.width(), mi.height())?;
            mask_pixels.extend(mi.pixels().map(|p| if p[0] > 127 { 1.0f32 } else { 0.0 }));
        }
    }
    let n = rows.len();
    let s = size.expect("at least one row") as usize;
    let images = Tensor::new(vec![n, 3, s, s], pixels)?;
    let labels: Option<Vec<usize>> =
        if all_labeled { Some(rows.values().map(|r| r.label.expect("labeled")).collect()) } else { None };
    let classes = labels.as_ref().map_or(2, |l| l.iter().max().map_or(2, |&m| (m + 1).max(2)));
    let masks = if all_masked { Some(Tensor::new(vec![n, 1, s, s], mask_pixels)?) } else { None };
    CenterDataset::new(0, task, classes, images, labels, masks, 0, StainTransform::identity(), rows.keys().cloned().collect())
}
