//! Volume preprocessing, augmentation, synthetic phantoms and file formats.

mod augment;
mod mvol;
mod nifti;
mod phantom;
mod volume;

use std::path::{Path, PathBuf};

pub use augment::{augment, AugmentOps, ElasticField, Rotation};
pub use mvol::{read_mvol, write_mvol, Mvol, MvolData};
pub use nifti::{parse_nifti, read_nifti, NiftiImage};
pub use phantom::{phantom_case, phantom_generate, ContrastTable, PhantomSpec};
pub use volume::{
    crop_subvolume, label_channel, labels_to_channels, zscore, CropPolicy, LabelVolume,
    MultiModalVolume, LABEL_VALUES, MODALITIES,
};

use crate::error::{Error, Result};

pub const LABELS_FILE: &str = "labels.mvol";

pub fn labels_to_mvol(labels: &LabelVolume, spacing: [f32; 3]) -> Mvol {
    Mvol {
        extents: labels.extents.to_vec(),
        spacing,
        data: MvolData::U8(labels.labels.clone()),
    }
}

fn extents3(m: &Mvol, path: &Path) -> Result<[usize; 3]> {
    <[usize; 3]>::try_from(m.extents.as_slice()).map_err(|_| {
        Error::contract(format!(
            "{}: expected a 3D volume, got extents {:?}",
            path.display(),
            m.extents
        ))
    })
}

/// Reads an integer label volume; float payloads must hold exact label values.
pub fn read_labels(path: impl AsRef<Path>) -> Result<(LabelVolume, [f32; 3])> {
    let path = path.as_ref();
    let m = read_mvol(path)?;
    let extents = extents3(&m, path)?;
    let values = m.data.to_f32();
    let mut labels = Vec::with_capacity(values.len());
    for (i, v) in values.into_iter().enumerate() {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(Error::Data {
                index: i,
                message: format!(
                    "label value {v} in {} is not an integer label",
                    path.display()
                ),
            });
        }
        labels.push(v as u8);
    }
    Ok((LabelVolume::new(extents, labels)?, m.spacing))
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelVolume, spacing: [f32; 3]) -> Result<()> {
    write_mvol(path, &labels_to_mvol(labels, spacing))
}

/// One case directory: `<case_id>/{t1,t1c,t2,flair,labels}.mvol`.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub volume: MultiModalVolume,
    pub labels: LabelVolume,
}

pub fn save_case(root: impl AsRef<Path>, case: &Case) -> Result<PathBuf> {
    let dir = root.as_ref().join(&case.volume.id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (c, name) in MODALITIES.iter().enumerate() {
        let m = Mvol {
            extents: case.volume.extents.to_vec(),
            spacing: case.volume.spacing,
            data: MvolData::F32(case.volume.channel(c).to_vec()),
        };
        write_mvol(dir.join(format!("{name}.mvol")), &m)?;
    }
    write_labels(dir.join(LABELS_FILE), &case.labels, case.volume.spacing)?;
    Ok(dir)
}

/// Reads the four modalities of a case directory.
pub fn load_volume(dir: impl AsRef<Path>) -> Result<MultiModalVolume> {
    let dir = dir.as_ref();
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into());
    let mut data = Vec::new();
    let mut extents = None;
    let mut spacing = [1.0; 3];
    for name in MODALITIES {
        let path = dir.join(format!("{name}.mvol"));
        let m = read_mvol(&path)?;
        let e = extents3(&m, &path)?;
        match extents {
            None => {
                extents = Some(e);
                spacing = m.spacing;
            }
            Some(prev) if prev != e => return Err(Error::shape("load_volume", &prev, &e)),
            _ => {}
        }
        data.extend(m.data.to_f32());
    }
    MultiModalVolume::new(id, extents.expect("four modalities read"), spacing, data)
}

pub fn load_case(dir: impl AsRef<Path>) -> Result<Case> {
    let dir = dir.as_ref();
    let volume = load_volume(dir)?;
    let (labels, _) = read_labels(dir.join(LABELS_FILE))?;
    if labels.extents != volume.extents {
        return Err(Error::shape("load_case", &volume.extents, &labels.extents));
    }
    Ok(Case { volume, labels })
}

/// Every case directory under `root`, sorted by name.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<Case>> {
    let root = root.as_ref();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() && path.join(LABELS_FILE).exists() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::contract(format!(
            "no case directories under {}",
            root.display()
        )));
    }
    dirs.iter().map(load_case).collect()
}
