//! HPatches style sequences: one directory per sequence, each holding image
//! files of vertically stacked 65x65 patches, one file per variant.

use std::path::{Path, PathBuf};

use super::{quantize, DatasetBuilder, PatchDataset, Split};
use crate::patch::resize_bilinear;
use crate::{Error, Result};

pub const HPATCH: usize = 65;

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("bmp"));
        if (want_dirs && path.is_dir()) || (!want_dirs && path.is_file() && is_image) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn sequence_tag(name: &str) -> Option<String> {
    if name.starts_with("v_") {
        Some("viewpoint".into())
    } else if name.starts_with("i_") {
        Some("illumination".into())
    } else {
        None
    }
}

/// Loads every sequence directory under `root`, resampling patches to
/// `side`. Sequences named in `test_sequences` are tagged [`Split::Test`],
/// the rest [`Split::Train`]. Variant file stems become patch tier tags.
pub fn load_hpatches(root: &Path, side: usize, test_sequences: &[String]) -> Result<PatchDataset> {
    let mut b = DatasetBuilder::new(side);
    let dirs = sorted_entries(root, true)?;
    if dirs.is_empty() {
        return Err(Error::format(root, None, "no sequence directories"));
    }
    for dir in dirs {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let files = sorted_entries(&dir, false)?;
        if files.is_empty() {
            return Err(Error::format(&dir, None, "sequence has no variant images"));
        }
        let mut stacks = Vec::with_capacity(files.len());
        for f in &files {
            let img = image::open(f).map_err(|e| Error::format(f, None, format!("cannot read variant: {e}")))?.to_luma8();
            if img.width() as usize != HPATCH || img.height() as usize % HPATCH != 0 {
                return Err(Error::format(f, None, format!("stack is {}x{}, expected width {HPATCH} and a multiple of {HPATCH} rows", img.width(), img.height())));
            }
            stacks.push(img);
        }
        let count = stacks[0].height() as usize / HPATCH;
        if let Some(k) = stacks.iter().position(|s| s.height() as usize / HPATCH != count) {
            return Err(Error::format(
                &files[k],
                Some(stacks[k].height().min(stacks[0].height()) as u64 * HPATCH as u64),
                format!("stack holds {} patches, {} holds {count}", stacks[k].height() as usize / HPATCH, files[0].display()),
            ));
        }
        let split = if test_sequences.contains(&name) { Split::Test } else { Split::Train };
        let seq = b.add_sequence(name.clone(), sequence_tag(&name));
        for g in 0..count {
            let group = b.add_group(seq, split);
            for (f, stack) in files.iter().zip(&stacks) {
                let tile: Vec<f64> = (0..HPATCH * HPATCH)
                    .map(|i| f64::from(stack.get_pixel((i % HPATCH) as u32, (g * HPATCH + i / HPATCH) as u32).0[0]))
                    .collect();
                let pixels: Vec<u8> = resize_bilinear(&tile, HPATCH, side).into_iter().map(quantize).collect();
                let tier = f.file_stem().map(|s| s.to_string_lossy().into_owned());
                b.add_patch(group, &pixels, tier);
            }
        }
    }
    b.build()
}
