//! On-disk center directories: one FUSB archive per split plus `manifest.tsv`.
//!
//! ```text
//! C2/
//!   train.fusb     tensors `s00000` [3,H,W], `s00000.mask` [1,H,W], ...
//!   test.fusb
//!   manifest.tsv   filename  split  label  mask  center  transform
//! ```

use std::path::Path;

use super::{CenterDataset, StainTransform};
use crate::archive::{write_atomic, Archive};
use crate::error::{Error, Result};
use crate::nn::TaskKind;
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: [&str; 6] = ["filename", "split", "label", "mask", "center", "transform"];
const MANIFEST: &str = "manifest.tsv";

fn split_archive(data: &CenterDataset, split: &str) -> Result<Archive> {
    let mut a = Archive::new();
    a.set_meta("kind", "dataset");
    a.set_meta("split", split);
    a.set_meta("center", data.center());
    a.set_meta("task", data.task());
    a.set_meta("classes", data.classes());
    a.set_meta("seed", data.seed());
    a.set_meta("transform", serde_json::to_string(data.transform())?);
    let masks = data.masks();
    for (i, name) in data.names().iter().enumerate() {
        let img = data.images().sample(i).to_vec();
        let s = data.patch_size();
        a.push(name.clone(), Tensor::new(vec![3, s, s], img)?)?;
        if let Some(m) = masks {
            a.push(format!("{name}.mask"), Tensor::new(vec![1, s, s], m.sample(i).to_vec())?)?;
        }
    }
    Ok(a)
}

/// Writes `splits` (e.g. `[("train", &a), ("test", &b)]`) into `dir`.
pub fn write_center(dir: &Path, splits: &[(&str, &CenterDataset)]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER)?;
    for (split, data) in splits {
        if split.is_empty() || split.contains(['/', '\\', '.']) {
            return Err(Error::config(format!("invalid split name `{split}`")));
        }
        split_archive(data, split)?.save(&dir.join(format!("{split}.fusb")))?;
        let transform = serde_json::to_string(data.transform())?;
        let center = data.center().to_string();
        for (i, name) in data.names().iter().enumerate() {
            let label = data.labels().map_or("-".to_string(), |l| l[i].to_string());
            let mask = if data.masks().is_some() { format!("{name}.mask") } else { "-".into() };
            w.write_record([name.as_str(), split, &label, &mask, &center, &transform])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&dir.join(MANIFEST), &bytes)
}

fn open_manifest(dir: &Path) -> Result<csv::Reader<std::fs::File>> {
    let path = dir.join(MANIFEST);
    let reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(&path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    Ok(reader)
}

fn open_split(dir: &Path, split: &str) -> Result<Archive> {
    let a = Archive::load(&dir.join(format!("{split}.fusb")))?;
    if a.meta("kind")? != "dataset" {
        return Err(Error::Format(format!("{split}.fusb is not a dataset archive")));
    }
    Ok(a)
}

fn stack(a: &Archive, names: &[String]) -> Result<Tensor> {
    let parts = names.iter().map(|n| a.get(n).cloned()).collect::<Result<Vec<_>>>()?;
    let shaped = parts
        .into_iter()
        .map(|t| {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.into_shape(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat(&shaped)
}

/// Target pixels without any annotation: what the adaptation path reads.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterImages {
    pub center: usize,
    pub names: Vec<String>,
    pub images: Tensor,
}

/// Reads only the image side of one split. The manifest's label and mask
/// columns are never parsed.
pub fn read_center_images(dir: &Path, split: &str) -> Result<CenterImages> {
    let mut names = Vec::new();
    for row in open_manifest(dir)?.records() {
        let row = row?;
        if row.get(1) == Some(split) {
            let name = row.get(0).ok_or_else(|| Error::Load("manifest row without filename".into()))?;
            names.push(name.to_string());
        }
    }
    if names.is_empty() {
        return Err(Error::Load(format!("{}: no `{split}` rows in manifest", dir.display())));
    }
    let a = open_split(dir, split)?;
    Ok(CenterImages { center: a.meta_parse("center")?, images: stack(&a, &names)?, names })
}

/// Reads one split with its annotations.
pub fn read_center(dir: &Path, split: &str) -> Result<CenterDataset> {
    let mut names = Vec::new();
    let mut labels = Vec::new();
    let mut has_masks = false;
    for (line, row) in open_manifest(dir)?.records().enumerate() {
        let row = row?;
        if row.len() != MANIFEST_HEADER.len() {
            return Err(Error::Load(format!("manifest line {} has {} fields", line + 2, row.len())));
        }
        if &row[1] != split {
            continue;
        }
        names.push(row[0].to_string());
        labels.push(match &row[2] {
            "-" => None,
            v => Some(v.parse::<usize>().map_err(|_| Error::Load(format!("manifest line {}: bad label `{v}`", line + 2)))?),
        });
        has_masks |= &row[3] != "-";
    }
    if names.is_empty() {
        return Err(Error::Load(format!("{}: no `{split}` rows in manifest", dir.display())));
    }
    let a = open_split(dir, split)?;
    let task: TaskKind = a.meta_parse("task")?;
    let transform: StainTransform = serde_json::from_str(a.meta("transform")?)?;
    let images = stack(&a, &names)?;
    let masks = if has_masks {
        let mask_names: Vec<String> = names.iter().map(|n| format!("{n}.mask")).collect();
        Some(stack(&a, &mask_names)?)
    } else {
        None
    };
    let labels = if labels.iter().all(Option::is_some) { Some(labels.into_iter().flatten().collect()) } else { None };
    CenterDataset::new(
        a.meta_parse("center")?,
        task,
        a.meta_parse("classes")?,
        images,
        labels,
        masks,
        a.meta_parse("seed")?,
        transform,
        names,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stainsim::{generate_center, ShiftMagnitude};

    #[test]
    fn round_trip_both_tasks() {
        let dir = tempfile::tempdir().unwrap();
        let s = ShiftMagnitude::new(1.0).unwrap();
        let train = generate_center(2, 6, TaskKind::Classification, s, 1, 16).unwrap();
        let test = generate_center(2, 4, TaskKind::Classification, s, 2, 16).unwrap();
        write_center(dir.path(), &[("train", &train), ("test", &test)]).unwrap();
        assert_eq!(read_center(dir.path(), "train").unwrap(), train);
        assert_eq!(read_center(dir.path(), "test").unwrap(), test);
        let imgs = read_center_images(dir.path(), "test").unwrap();
        assert_eq!(&imgs.images, test.images());
        assert_eq!(imgs.center, 2);

        let seg = generate_center(1, 3, TaskKind::DensePrediction, s, 4, 16).unwrap();
        let d2 = dir.path().join("seg");
        write_center(&d2, &[("test", &seg)]).unwrap();
        assert_eq!(read_center(&d2, "test").unwrap(), seg);
    }

    #[test]
    fn image_reader_ignores_label_columns() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_center(0, 3, TaskKind::Classification, ShiftMagnitude::new(0.0).unwrap(), 1, 16).unwrap();
        write_center(dir.path(), &[("test", &d)]).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = std::fs::read_to_string(&path).unwrap();
        // corrupt every label; the unlabeled reader must not care
        let broken: String = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                let mut f: Vec<&str> = l.split('\t').collect();
                if i > 0 {
                    f[2] = "not-a-label";
                }
                f.join("\t") + "\n"
            })
            .collect();
        std::fs::write(&path, broken).unwrap();
        assert!(read_center(dir.path(), "test").is_err());
        assert_eq!(&read_center_images(dir.path(), "test").unwrap().images, d.images());
    }

    #[test]
    fn missing_directory_is_a_load_error() {
        let err = read_center(Path::new("/nonexistent/fusion"), "train").unwrap_err();
        assert!(matches!(err, Error::Load(_)), "{err}");
    }
}
