use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tile::{tile_rects, TileSpec};
use super::{is_image, open_image, sorted_children};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileManifestEntry {
    /// Source image, relative to the input directory.
    pub source: String,
    /// Written tile, relative to the output directory.
    pub tile: String,
    /// `[x, y]` of the tile's top-left corner in the source.
    pub offset: [u32; 2],
    /// `[width, height]` of the tile.
    pub size: [u32; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileManifest {
    pub spec: TileSpec,
    pub entries: Vec<TileManifestEntry>,
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for p in sorted_children(dir)? {
        if p.is_dir() {
            collect_images(&p, out)?;
        } else if is_image(&p) {
            out.push(p);
        }
    }
    Ok(())
}

fn rel_str(p: &Path, base: &Path) -> String {
    p.strip_prefix(base)
        .unwrap_or(p)
        .to_string_lossy()
        .replace('\\', "/")
}

/// Tiles every image under `input` into `output`, mirroring the directory
/// structure, and writes `output/manifest.json`.
///
/// Tiles are named `<stem>_y<Y>_x<X>.png`. Mask files (`<stem>_mask.*`) keep
/// their suffix last so they still pair with their tiled image; a tile that
/// clips a defect keeps the clipped mask.
pub fn preprocess_dir(input: &Path, output: &Path, spec: &TileSpec) -> Result<TileManifest> {
    spec.validate()?;
    if !input.is_dir() {
        return Err(Error::MalformedTree {
            path: input.to_path_buf(),
            reason: "input directory does not exist".into(),
        });
    }
    let mut images = Vec::new();
    collect_images(input, &mut images)?;

    let mut entries = Vec::new();
    for src in images {
        let rel = src.strip_prefix(input).unwrap_or(&src);
        let out_dir = output.join(rel.parent().unwrap_or(Path::new("")));
        fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let stem = src
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let (base, suffix) = match stem.strip_suffix("_mask") {
            Some(b) => (b.to_string(), "_mask"),
            None => (stem.clone(), ""),
        };

        let img = open_image(&src)?;
        for r in tile_rects(img.width(), img.height(), spec) {
            let tile = img.crop_imm(r.x, r.y, r.width, r.height);
            let name = format!("{base}_y{}_x{}{suffix}.png", r.y, r.x);
            let dst = out_dir.join(&name);
            tile.save(&dst).map_err(|source| Error::Decode {
                path: dst.clone(),
                source,
            })?;
            entries.push(TileManifestEntry {
                source: rel_str(&src, input),
                tile: rel_str(&dst, output),
                offset: [r.x, r.y],
                size: [r.width, r.height],
            });
        }
    }
    let manifest = TileManifest {
        spec: *spec,
        entries,
    };
    let path = output.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
