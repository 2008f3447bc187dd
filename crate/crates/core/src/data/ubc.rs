//! Photo Tourism style patch sets: `info.txt` with one line per patch whose
//! first field is the 3D point id, and `patchesNNNN.bmp` mosaics of 16x16
//! tiles of 64x64 patches read row-major.

use std::collections::HashMap;
use std::path::Path;

use super::{quantize, DatasetBuilder, PatchDataset, Split};
use crate::patch::resize_bilinear;
use crate::{Error, Result};

pub const TILE: usize = 64;
pub const TILES_PER_ROW: usize = 16;
const PER_MOSAIC: usize = TILES_PER_ROW * TILES_PER_ROW;

fn read_index(path: &Path) -> Result<Vec<u64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::format(path, None, format!("cannot read index: {e}")))?;
    let mut ids = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let first = trimmed.split_whitespace().next().unwrap();
            let id = first
                .parse()
                .map_err(|_| Error::format(path, Some(offset), format!("line {}: bad point id {first:?}", ids.len() + 1)))?;
            ids.push(id);
        }
        offset += line.len() as u64 + 1;
    }
    if ids.is_empty() {
        return Err(Error::format(path, None, "index lists no patches"));
    }
    Ok(ids)
}

/// Loads a directory and resamples patches to `side`. The whole directory
/// becomes one sequence; every group is tagged [`Split::Train`].
pub fn load_ubc(dir: &Path, side: usize) -> Result<PatchDataset> {
    let ids = read_index(&dir.join("info.txt"))?;
    let name = dir.file_name().map_or_else(|| "ubc".to_string(), |n| n.to_string_lossy().into_owned());
    let mut b = DatasetBuilder::new(side);
    let seq = b.add_sequence(name, None);
    let mut group_of: HashMap<u64, usize> = HashMap::new();
    let mut mosaic: Option<image::GrayImage> = None;
    for (i, &id) in ids.iter().enumerate() {
        let (m, slot) = (i / PER_MOSAIC, i % PER_MOSAIC);
        if slot == 0 {
            let path = dir.join(format!("patches{m:04}.bmp"));
            let img = image::open(&path)
                .map_err(|e| Error::format(&path, None, format!("cannot read mosaic for patch {i}: {e}")))?
                .to_luma8();
            let rows_needed = (ids.len() - i).min(PER_MOSAIC).div_ceil(TILES_PER_ROW);
            if img.width() as usize != TILE * TILES_PER_ROW || (img.height() as usize) < rows_needed * TILE {
                return Err(Error::format(
                    &path,
                    Some(i as u64),
                    format!("mosaic is {}x{}, need {} columns and {} tile rows", img.width(), img.height(), TILE * TILES_PER_ROW, rows_needed),
                ));
            }
            mosaic = Some(img);
        }
        let img = mosaic.as_ref().expect("mosaic loaded");
        let (tr, tc) = (slot / TILES_PER_ROW, slot % TILES_PER_ROW);
        let mut tile = Vec::with_capacity(TILE * TILE);
        for y in 0..TILE {
            for x in 0..TILE {
                tile.push(f64::from(img.get_pixel((tc * TILE + x) as u32, (tr * TILE + y) as u32).0[0]));
            }
        }
        let pixels: Vec<u8> = resize_bilinear(&tile, TILE, side).into_iter().map(quantize).collect();
        let next = group_of.len();
        let g = *group_of.entry(id).or_insert(next);
        if g == next {
            b.add_group(seq, Split::Train);
        }
        b.add_patch(g, &pixels, None);
    }
    b.build()
}
