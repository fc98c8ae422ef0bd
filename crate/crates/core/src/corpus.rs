//! Procedural stand-in for a style dataset: stripes, checkers and blotchy
//! noise rendered with fixed palettes, three references per category.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::DEFAULT_PLACEHOLDER;
use crate::error::Result;
use crate::imaging::save_png;
use crate::manifest::StyleCategoryManifest;

pub const IMAGES_PER_CATEGORY: usize = 3;
pub const CORPUS_IMAGE_SIZE: u32 = 64;
pub const OBJECTS_PER_CATEGORY: usize = 3;

pub const OBJECT_POOL: &[&str] = &[
    "car", "apple", "house", "cat", "dog", "tree", "boat", "chair", "bird", "cup", "flower", "lamp",
    "mountain", "bicycle", "clock", "fish", "horse", "teapot", "guitar", "castle",
];

const PALETTES: &[[[u8; 3]; 3]] = &[
    [[200, 40, 30], [240, 140, 40], [120, 20, 20]],
    [[20, 40, 140], [60, 110, 220], [10, 20, 60]],
    [[30, 130, 50], [150, 210, 90], [20, 60, 30]],
    [[150, 50, 160], [240, 150, 210], [70, 20, 90]],
    [[230, 200, 60], [140, 90, 30], [250, 240, 180]],
    [[20, 150, 150], [200, 240, 230], [10, 70, 80]],
    [[40, 40, 40], [90, 90, 90], [15, 15, 15]],
    [[250, 220, 230], [220, 240, 250], [240, 250, 210]],
];

#[derive(Debug, Clone, Copy)]
enum Pattern {
    Stripes,
    Checker,
    Noise,
}

impl Pattern {
    fn name(self) -> &'static str {
        match self {
            Pattern::Stripes => "stripes",
            Pattern::Checker => "checker",
            Pattern::Noise => "noise",
        }
    }
}

fn render(pattern: Pattern, palette: &[[u8; 3]; 3], rng: &mut ChaCha8Rng) -> RgbImage {
    let size = CORPUS_IMAGE_SIZE;
    match pattern {
        Pattern::Stripes => {
            let width = rng.random_range(3..9) as i64;
            let (dx, dy) = (rng.random_range(-2i64..=2), rng.random_range(1i64..=2));
            let phase = rng.random_range(0..32) as i64;
            RgbImage::from_fn(size, size, |x, y| {
                let band = ((x as i64 * dx + y as i64 * dy + phase).rem_euclid(3 * width)) / width;
                Rgb(palette[band as usize])
            })
        }
        Pattern::Checker => {
            let cell = rng.random_range(4..12);
            let offset = rng.random_range(0..cell);
            RgbImage::from_fn(size, size, |x, y| {
                let cx = (x + offset) / cell;
                let cy = (y + offset) / cell;
                Rgb(palette[((cx + 2 * cy) % 3) as usize])
            })
        }
        Pattern::Noise => {
            // coarse random grid, nearest-upsampled, plus fine speckle
            let grid = 8u32;
            let cells: Vec<usize> = (0..grid * grid).map(|_| rng.random_range(0..3)).collect();
            let speckle: Vec<bool> = (0..size * size).map(|_| rng.random_bool(0.1)).collect();
            RgbImage::from_fn(size, size, |x, y| {
                let mut idx = cells[((y * grid / size) * grid + x * grid / size) as usize];
                if speckle[(y * size + x) as usize] {
                    idx = (idx + 1) % 3;
                }
                Rgb(palette[idx])
            })
        }
    }
}

/// Writes `num_categories` categories under `output_dir` and returns each
/// manifest path with its (path-resolved) manifest. Same seed, same bytes.
pub fn make_toy_corpus(
    output_dir: &Path,
    num_categories: usize,
    seed: u64,
) -> Result<Vec<(PathBuf, StyleCategoryManifest)>> {
    std::fs::create_dir_all(output_dir)?;
    let patterns = [Pattern::Stripes, Pattern::Checker, Pattern::Noise];
    let mut out = Vec::with_capacity(num_categories);
    for i in 0..num_categories {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let pattern = patterns[i % patterns.len()];
        let palette = &PALETTES[(i + i / patterns.len()) % PALETTES.len()];
        let category_id = format!("{}-{i:02}", pattern.name());
        let dir = output_dir.join(&category_id);
        let mut paths = Vec::with_capacity(IMAGES_PER_CATEGORY);
        for k in 0..IMAGES_PER_CATEGORY {
            let path = dir.join(format!("ref_{k}.png"));
            save_png(&render(pattern, palette, &mut rng), &path)?;
            paths.push(path);
        }
        let object_names = OBJECT_POOL
            .choose_multiple(&mut rng, OBJECTS_PER_CATEGORY)
            .map(|s| s.to_string())
            .collect();
        let manifest = StyleCategoryManifest {
            category_id,
            reference_image_paths: paths,
            object_names,
            placeholder: DEFAULT_PLACEHOLDER.to_string(),
            cached_keywords: None,
        };
        let manifest_path = dir.join("manifest.toml");
        manifest.save(&manifest_path)?;
        out.push((manifest_path, manifest));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::load_manifest;

    fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut files: Vec<_> = walk(dir);
        files.sort();
        files
            .into_iter()
            .map(|p| {
                let bytes = std::fs::read(&p).unwrap();
                (p.strip_prefix(dir).unwrap().to_path_buf(), bytes)
            })
            .collect()
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn deterministic_per_seed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        make_toy_corpus(a.path(), 2, 7).unwrap();
        make_toy_corpus(b.path(), 2, 7).unwrap();
        assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
    }

    #[test]
    fn twenty_eight_categories_load() {
        let d = tempfile::tempdir().unwrap();
        let out = make_toy_corpus(d.path(), 28, 1).unwrap();
        assert_eq!(out.len(), 28);
        for (path, _) in &out {
            let m = load_manifest(path).unwrap();
            assert_eq!(m.reference_image_paths.len(), IMAGES_PER_CATEGORY);
            assert_eq!(m.object_names.len(), OBJECTS_PER_CATEGORY);
        }
    }
}
