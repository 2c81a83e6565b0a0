//! In-memory multi-channel datasets and their on-disk layout:
//! `root/manifest`, `root/labels`, `root/images/<sample>/<channel>.png`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, ImageBuffer, Luma};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{parse_schema, GroupSchema};

pub const MANIFEST_FILE: &str = "manifest";
pub const LABELS_FILE: &str = "labels";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: String,
    /// Perturbation analog used for retrieval.
    pub class_id: usize,
    /// Antibody analog used for contrastive positives.
    pub group_id: usize,
    pub fov_id: usize,
    pub well_id: usize,
    pub multilabels: Vec<bool>,
}

/// Row of the label table. Multi-labels are stored as a `0`/`1` string.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRow {
    sample_id: String,
    class_id: usize,
    group_id: usize,
    fov_id: usize,
    well_id: usize,
    multilabels: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: GroupSchema,
    pub image_size: usize,
    pub samples: Vec<SampleMeta>,
    /// Per sample, `[C, h, w]` planes in stack order, values in `[0, 1]`.
    pub images: Vec<Vec<f32>>,
}

impl Dataset {
    pub fn new(schema: GroupSchema, image_size: usize, samples: Vec<SampleMeta>, images: Vec<Vec<f32>>) -> Result<Self> {
        if samples.len() != images.len() {
            return Err(Error::Dataset(format!(
                "{} label rows for {} images",
                samples.len(),
                images.len()
            )));
        }
        let plane = schema.n_channels() * image_size * image_size;
        if let Some((i, _)) = images.iter().enumerate().find(|(_, im)| im.len() != plane) {
            return Err(Error::Dataset(format!(
                "sample {} does not hold {} planes of {image_size}x{image_size}",
                samples[i].sample_id,
                schema.n_channels()
            )));
        }
        let n_labels = samples.first().map_or(0, |s| s.multilabels.len());
        if samples.iter().any(|s| s.multilabels.len() != n_labels) {
            return Err(Error::Dataset("multi-label vectors differ in length".into()));
        }
        Ok(Self {
            schema,
            image_size,
            samples,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_labels(&self) -> usize {
        self.samples.first().map_or(0, |s| s.multilabels.len())
    }

    /// `[B, C, h, w]` stack for the given sample indices.
    pub fn batch(&self, indices: &[usize], dtype: DType) -> Result<Tensor> {
        let s = self.image_size;
        let c = self.schema.n_channels();
        let mut data = Vec::with_capacity(indices.len() * c * s * s);
        for &i in indices {
            let im = self
                .images
                .get(i)
                .ok_or_else(|| Error::Dataset(format!("sample index {i} out of range")))?;
            data.extend_from_slice(im);
        }
        Ok(Tensor::from_vec(data, (indices.len(), c, s, s), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Plane of one channel (by stack position) of one sample.
    pub fn plane(&self, sample: usize, channel: usize) -> &[f32] {
        let p = self.image_size * self.image_size;
        &self.images[sample][channel * p..(channel + 1) * p]
    }

    /// Subset in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            schema: self.schema.clone(),
            image_size: self.image_size,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }

    /// Deterministic split by well: wells whose rank modulo `every` is zero
    /// go to the second part.
    pub fn split_by_well(&self, every: usize) -> (Vec<usize>, Vec<usize>) {
        let mut wells: Vec<usize> = self.samples.iter().map(|s| s.well_id).collect();
        wells.sort_unstable();
        wells.dedup();
        let rank: BTreeMap<usize, usize> = wells.iter().enumerate().map(|(r, &w)| (w, r)).collect();
        let every = every.max(2);
        (0..self.len()).partition(|&i| rank[&self.samples[i].well_id] % every != 0)
    }

    /// Batches of `groups_per_batch` groups with `per_group` samples each,
    /// drawn without replacement inside a group. Groups smaller than
    /// `per_group` are sampled with replacement.
    pub fn group_batch<R: Rng>(&self, groups_per_batch: usize, per_group: usize, rng: &mut R) -> Result<Vec<usize>> {
        let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            by_group.entry(s.group_id).or_default().push(i);
        }
        if by_group.is_empty() {
            return Err(Error::Dataset("cannot sample from an empty dataset".into()));
        }
        let groups: Vec<&Vec<usize>> = by_group.values().collect();
        let picked: Vec<&&Vec<usize>> = if groups.len() >= groups_per_batch {
            groups.choose_multiple(rng, groups_per_batch).collect()
        } else {
            (0..groups_per_batch).map(|_| groups.choose(rng).expect("non-empty")).collect()
        };
        let mut out = Vec::with_capacity(groups_per_batch * per_group);
        for members in picked {
            if members.len() >= per_group {
                out.extend(members.choose_multiple(rng, per_group).copied());
            } else {
                out.extend((0..per_group).map(|_| *members.choose(rng).expect("non-empty")));
            }
        }
        Ok(out)
    }
}

fn check_file_names(schema: &GroupSchema) -> Result<()> {
    for spec in schema.channels() {
        if spec.name.contains(['/', '\\']) || spec.name.starts_with('.') {
            return Err(Error::Dataset(format!(
                "channel name {:?} cannot be used as a file name",
                spec.name
            )));
        }
    }
    Ok(())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    check_file_names(&ds.schema)?;
    let images_dir = root.join(IMAGES_DIR);
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let manifest = root.join(MANIFEST_FILE);
    fs::write(&manifest, ds.schema.to_manifest()).map_err(|e| Error::io(&manifest, e))?;

    let labels = root.join(LABELS_FILE);
    let mut w = csv::Writer::from_path(&labels).map_err(|e| Error::Dataset(format!("{}: {e}", labels.display())))?;
    for s in &ds.samples {
        w.serialize(LabelRow {
            sample_id: s.sample_id.clone(),
            class_id: s.class_id,
            group_id: s.group_id,
            fov_id: s.fov_id,
            well_id: s.well_id,
            multilabels: s.multilabels.iter().map(|&b| if b { '1' } else { '0' }).collect(),
        })
        .map_err(|e| Error::Dataset(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&labels, e))?;

    let size = ds.image_size as u32;
    for (i, s) in ds.samples.iter().enumerate() {
        let dir = images_dir.join(&s.sample_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for spec in ds.schema.channels() {
            let plane = ds.plane(i, spec.source_index);
            let img: GrayImage = ImageBuffer::from_raw(size, size, plane.iter().map(|&v| quantize(v)).collect())
                .expect("plane length matches image size");
            let path = dir.join(format!("{}.png", spec.name));
            img.save(&path)
                .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(())
}

/// Parse the label table.
pub fn parse_labels(text: &str) -> Result<Vec<SampleMeta>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in r.deserialize::<LabelRow>() {
        let row = row.map_err(|e| Error::Dataset(format!("label table: {e}")))?;
        let multilabels = row
            .multilabels
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Dataset(format!(
                    "sample {}: invalid label character {other:?}",
                    row.sample_id
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        if row.sample_id.is_empty() || row.sample_id.contains(['/', '\\']) || row.sample_id.starts_with('.') {
            return Err(Error::Dataset(format!("invalid sample id {:?}", row.sample_id)));
        }
        out.push(SampleMeta {
            sample_id: row.sample_id,
            class_id: row.class_id,
            group_id: row.group_id,
            fov_id: row.fov_id,
            well_id: row.well_id,
            multilabels,
        });
    }
    Ok(out)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = root.join(MANIFEST_FILE);
    let schema = parse_schema(&fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?)?;
    check_file_names(&schema)?;
    let labels = root.join(LABELS_FILE);
    let samples = parse_labels(&fs::read_to_string(&labels).map_err(|e| Error::io(&labels, e))?)?;
    let mut size: Option<u32> = None;
    let mut images = Vec::with_capacity(samples.len());
    for s in &samples {
        let mut planes: Vec<Vec<f32>> = vec![Vec::new(); schema.n_channels()];
        for spec in schema.channels() {
            let path = root.join(IMAGES_DIR).join(&s.sample_id).join(format!("{}.png", spec.name));
            if !path.exists() {
                return Err(Error::Dataset(format!(
                    "sample {}: missing file for channel {:?} ({})",
                    s.sample_id,
                    spec.name,
                    path.display()
                )));
            }
            let img = image::open(&path)
                .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
                .to_luma8();
            let (w, h) = img.dimensions();
            if w != h {
                return Err(Error::Dataset(format!("{}: image is {w}x{h}, expected square", path.display())));
            }
            match size {
                None => size = Some(w),
                Some(s0) if s0 != w => {
                    return Err(Error::Dataset(format!(
                        "{}: image is {w}x{w}, others are {s0}x{s0}",
                        path.display()
                    )))
                }
                _ => {}
            }
            planes[spec.source_index] = img.pixels().map(|Luma([v])| *v as f32 / 255.0).collect();
        }
        images.push(planes.concat());
    }
    Dataset::new(schema, size.unwrap_or(0) as usize, samples, images)
}
