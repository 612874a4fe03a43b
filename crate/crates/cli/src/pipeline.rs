//! Image decoding, feature extraction, cache lookup and graph assembly.

use std::path::{Path, PathBuf};

use iqa_core::encoder::{decode_feature_cache, encode_patches, save_feature_cache, RawFeatures};
use iqa_core::graph::build_graph;
use iqa_core::grid::{extract_patches, offset_layout, patch_centers, select_grid, PatchLayout};
use iqa_core::image::RgbImage;
use iqa_core::trainer::{Example, GraphInput};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::ManifestRow;

pub const CACHE_EXTENSION: &str = "ugqf";
const CACHE_MAGIC: &[u8; 4] = b"UGQF";

/// A decoded input file: either pixels or precomputed features.
pub enum Source {
    Image(RgbImage),
    Cache(RawFeatures, PatchLayout),
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, CliError> {
    let img = image::load_from_memory(bytes).map_err(|e| CliError::Data(e.to_string()))?;
    let rgb = img.to_rgb8();
    Ok(RgbImage::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())?)
}

/// Reads `path` as a feature cache if it carries the cache magic, otherwise
/// as a PNG or PPM image.
pub fn read_source(path: &Path) -> Result<Source, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if bytes.starts_with(CACHE_MAGIC) {
        let (features, layout) = decode_feature_cache(&bytes).map_err(|e| CliError::context(e, path.display()))?;
        Ok(Source::Cache(features, layout))
    } else {
        let img = decode_image(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(Source::Image(img))
    }
}

pub fn canonical_layout(image: &RgbImage, cfg: &RunConfig) -> PatchLayout {
    let dims = image.dims();
    patch_centers(&select_grid(cfg.grid_n, dims, cfg.patch_size), dims)
}

pub fn encode_layout(image: &RgbImage, layout: &PatchLayout, cfg: &RunConfig) -> Result<RawFeatures, CliError> {
    let patches = extract_patches(image, layout, cfg.patch_size)?;
    Ok(encode_patches(&patches)?)
}

/// Canonical and (optionally) offset-grid graph inputs for an in-memory
/// image. `canonical` supplies precomputed canonical features.
pub fn image_inputs(
    image: &RgbImage,
    cfg: &RunConfig,
    tta: bool,
    canonical: Option<(RawFeatures, PatchLayout)>,
) -> Result<(GraphInput, Option<GraphInput>), CliError> {
    let layout = canonical_layout(image, cfg);
    let (features, stored_layout) = match canonical {
        Some(c) => c,
        None => (encode_layout(image, &layout, cfg)?, layout.clone()),
    };
    let first = graph_input(&features, &stored_layout, cfg)?;
    let offset = if tta {
        let shifted = offset_layout(&layout, cfg.patch_size, cfg.tta_fraction)?;
        Some(graph_input(&encode_layout(image, &shifted, cfg)?, &shifted, cfg)?)
    } else {
        None
    };
    Ok((first, offset))
}

/// Cache file name: a SHA-256 over the source path and every setting that
/// changes the extracted features.
pub fn cache_key(source: &Path, cfg: &RunConfig) -> String {
    let mut h = Sha256::new();
    for part in [
        source.to_string_lossy().as_ref(),
        &cfg.grid_n.to_string(),
        &cfg.patch_size.to_string(),
        cfg.encoder.name(),
    ] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

pub fn cache_path(dir: &Path, source: &Path, cfg: &RunConfig) -> PathBuf {
    dir.join(format!("{}.{CACHE_EXTENSION}", cache_key(source, cfg)))
}

/// Builds the graph for one layout. Centers are rounded to `f32` first, the
/// precision a feature cache stores, so fresh and cached inputs give the same
/// graph.
pub fn graph_input(features: &RawFeatures, layout: &PatchLayout, cfg: &RunConfig) -> Result<GraphInput, CliError> {
    let centers: Vec<[f64; 2]> = layout
        .centers_norm
        .iter()
        .map(|c| c.map(|v| v as f32 as f64))
        .collect();
    let graph = build_graph(&centers, features.matrix.view(), &cfg.graph())?;
    Ok(GraphInput {
        graph,
        raw: features.matrix.clone(),
    })
}

fn read_cache(path: &Path) -> Result<(RawFeatures, PatchLayout), CliError> {
    match read_source(path)? {
        Source::Cache(f, l) => Ok((f, l)),
        Source::Image(_) => Err(CliError::Data(format!("{}: not a feature cache", path.display()))),
    }
}

/// Graph inputs for one file. Images get an offset-grid input when `tta` is
/// set; cache inputs carry no pixels, so they only have the canonical pass.
/// With a cache directory configured, canonical features are read from it
/// when present and written to it otherwise.
pub fn prepare_input(path: &Path, cfg: &RunConfig, tta: bool) -> Result<(GraphInput, Option<GraphInput>), CliError> {
    let cached = cfg.cache_dir.as_ref().map(|dir| cache_path(dir, path, cfg));
    let hit = match cached.as_ref().filter(|p| p.exists()) {
        Some(cp) => Some(read_cache(cp)?),
        None => None,
    };
    if let (Some((f, l)), false) = (&hit, tta) {
        return Ok((graph_input(f, l, cfg)?, None));
    }
    match read_source(path)? {
        Source::Cache(f, l) => Ok((graph_input(&f, &l, cfg)?, None)),
        Source::Image(img) => {
            let canonical = match hit {
                Some(c) => c,
                None => {
                    let layout = canonical_layout(&img, cfg);
                    let f = encode_layout(&img, &layout, cfg).map_err(|e| with_path(e, path))?;
                    if let Some(cp) = &cached {
                        save_feature_cache(&f, &layout, cp)?;
                    }
                    (f, layout)
                }
            };
            image_inputs(&img, cfg, tta, Some(canonical)).map_err(|e| with_path(e, path))
        }
    }
}

fn with_path(e: CliError, path: &Path) -> CliError {
    match e {
        CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        CliError::Numerical(m) => CliError::Numerical(format!("{}: {m}", path.display())),
    }
}

/// Prepares labelled examples in manifest order.
pub fn prepare_examples(rows: &[&ManifestRow], cfg: &RunConfig, tta: bool) -> Result<Vec<Example>, CliError> {
    let examples = iqa_core::exec::map_slice(rows, |row| {
        prepare_input(&row.path, cfg, tta).map(|(canonical, offset)| Example {
            canonical,
            offset,
            mos: row.mos,
        })
    });
    examples.into_iter().collect()
}
