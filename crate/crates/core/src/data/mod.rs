//! Patch datasets: groups of patches showing the same 3D point, organized
//! into image sequences.

mod container;
mod hpatches;
mod synthetic;
mod ubc;

pub use container::{read_container, write_container, CONTAINER_MAGIC};
pub use hpatches::load_hpatches;
pub use synthetic::{generate_synthetic, SyntheticConfig, TextureSpec};
pub use ubc::load_ubc;

use serde::{Deserialize, Serialize};

use crate::patch::{Patch, Provenance};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceInfo {
    pub name: String,
    /// Free-form tag such as `viewpoint` or `illumination`.
    pub tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub sequence: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub group: usize,
    /// Variant label from the source, e.g. an HPatches difficulty file stem.
    pub tier: Option<String>,
}

/// Immutable set of square 8-bit patches with group and sequence tables.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    side: usize,
    pixels: Vec<u8>,
    records: Vec<PatchRecord>,
    groups: Vec<GroupInfo>,
    sequences: Vec<SequenceInfo>,
    members: Vec<Vec<usize>>,
    sequence_groups: Vec<Vec<usize>>,
}

impl PatchDataset {
    pub fn new(side: usize, pixels: Vec<u8>, records: Vec<PatchRecord>, groups: Vec<GroupInfo>, sequences: Vec<SequenceInfo>) -> Result<Self> {
        if side == 0 || pixels.len() != records.len() * side * side {
            return Err(Error::Shape(format!("{} pixel bytes for {} patches of side {side}", pixels.len(), records.len())));
        }
        let mut members = vec![Vec::new(); groups.len()];
        for (i, r) in records.iter().enumerate() {
            members
                .get_mut(r.group)
                .ok_or_else(|| Error::Contract(format!("patch {i} refers to missing group {}", r.group)))?
                .push(i);
        }
        if let Some(g) = members.iter().position(Vec::is_empty) {
            return Err(Error::Contract(format!("group {g} has no patches")));
        }
        let mut sequence_groups = vec![Vec::new(); sequences.len()];
        for (g, info) in groups.iter().enumerate() {
            sequence_groups
                .get_mut(info.sequence)
                .ok_or_else(|| Error::Contract(format!("group {g} refers to missing sequence {}", info.sequence)))?
                .push(g);
        }
        Ok(Self {
            side,
            pixels,
            records,
            groups,
            sequences,
            members,
            sequence_groups,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_sequences(&self) -> usize {
        self.sequences.len()
    }

    pub fn records(&self) -> &[PatchRecord] {
        &self.records
    }

    pub fn groups(&self) -> &[GroupInfo] {
        &self.groups
    }

    pub fn sequences(&self) -> &[SequenceInfo] {
        &self.sequences
    }

    pub fn group_of(&self, patch: usize) -> usize {
        self.records[patch].group
    }

    pub fn sequence_of(&self, patch: usize) -> usize {
        self.groups[self.records[patch].group].sequence
    }

    pub fn members(&self, group: usize) -> &[usize] {
        &self.members[group]
    }

    pub fn sequence_groups(&self, sequence: usize) -> &[usize] {
        &self.sequence_groups[sequence]
    }

    pub fn raw_pixels(&self, patch: usize) -> &[u8] {
        let n = self.side * self.side;
        &self.pixels[patch * n..(patch + 1) * n]
    }

    pub fn patch(&self, index: usize) -> Patch {
        let rec = &self.records[index];
        let view = self.members[rec.group].iter().position(|&p| p == index).unwrap_or(0);
        Patch::new(
            self.side,
            self.raw_pixels(index).iter().map(|&v| f64::from(v)).collect(),
            Provenance {
                sequence: self.groups[rec.group].sequence,
                group: rec.group,
                index: view,
            },
        )
    }

    /// Groups tagged with `split`, in id order.
    pub fn groups_in(&self, split: Split) -> Vec<usize> {
        (0..self.groups.len()).filter(|&g| self.groups[g].split == split).collect()
    }

    /// Patches whose group is tagged with `split`, in index order.
    pub fn patches_in(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.groups[self.records[i].group].split == split).collect()
    }

    /// Re-tags every group of `sequence`.
    pub fn set_sequence_split(&mut self, sequence: usize, split: Split) {
        for &g in &self.sequence_groups[sequence] {
            self.groups[g].split = split;
        }
    }

    /// Copy with every patch resampled to `side`.
    pub fn resized(&self, side: usize) -> PatchDataset {
        if side == self.side {
            return self.clone();
        }
        let mut pixels = Vec::with_capacity(self.len() * side * side);
        for i in 0..self.len() {
            let src: Vec<f64> = self.raw_pixels(i).iter().map(|&v| f64::from(v)).collect();
            pixels.extend(crate::patch::resize_bilinear(&src, self.side, side).into_iter().map(quantize));
        }
        PatchDataset { side, pixels, ..self.clone() }
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Incremental construction of a dataset.
#[derive(Debug, Clone, Default)]
pub struct DatasetBuilder {
    side: usize,
    pixels: Vec<u8>,
    records: Vec<PatchRecord>,
    groups: Vec<GroupInfo>,
    sequences: Vec<SequenceInfo>,
}

impl DatasetBuilder {
    pub fn new(side: usize) -> Self {
        Self { side, ..Default::default() }
    }

    pub fn add_sequence(&mut self, name: impl Into<String>, tag: Option<String>) -> usize {
        self.sequences.push(SequenceInfo { name: name.into(), tag });
        self.sequences.len() - 1
    }

    pub fn add_group(&mut self, sequence: usize, split: Split) -> usize {
        self.groups.push(GroupInfo { sequence, split });
        self.groups.len() - 1
    }

    pub fn add_patch(&mut self, group: usize, pixels: &[u8], tier: Option<String>) {
        assert_eq!(pixels.len(), self.side * self.side, "patch size");
        self.pixels.extend_from_slice(pixels);
        self.records.push(PatchRecord { group, tier });
    }

    pub fn build(self) -> Result<PatchDataset> {
        PatchDataset::new(self.side, self.pixels, self.records, self.groups, self.sequences)
    }
}
