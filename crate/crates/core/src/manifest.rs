//! Style category manifests.
//!
//! A manifest is a TOML file:
//!
//! ```toml
//! category_id = "stripes-00"
//! reference_image_paths = ["ref_0.png", "ref_1.png", "ref_2.png"]  # relative to this file
//! object_names = ["car", "apple"]
//! placeholder = "[V*]"                                              # optional
//!
//! [cached_keywords]                                                 # optional
//! keywords = "bold stripes"
//! raw_response = "{\"style keywords\": \"bold stripes\"}"
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::embedding::DEFAULT_PLACEHOLDER;
use crate::error::{Error, Result};
use crate::imaging::load_rgb;
use crate::reasoning::{ImagePayload, StyleKeywords};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedKeywords {
    pub keywords: String,
    #[serde(default)]
    pub raw_response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleCategoryManifest {
    pub category_id: String,
    pub reference_image_paths: Vec<PathBuf>,
    pub object_names: Vec<String>,
    #[serde(default = "default_placeholder")]
    pub placeholder: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cached_keywords: Option<CachedKeywords>,
}

fn default_placeholder() -> String {
    DEFAULT_PLACEHOLDER.to_string()
}

fn validation(field: &str, message: impl Into<String>) -> Error {
    Error::Validation {
        field: field.into(),
        message: message.into(),
    }
}

impl StyleCategoryManifest {
    pub fn validate_fields(&self) -> Result<()> {
        if self.category_id.trim().is_empty()
            || self.category_id.contains(['/', '\\'])
            || self.category_id.starts_with('.')
        {
            return Err(validation("category_id", "must be a non-empty file-name-safe string"));
        }
        if self.reference_image_paths.is_empty() {
            return Err(validation("reference_image_paths", "at least one reference image is required"));
        }
        if self.object_names.is_empty() {
            return Err(validation("object_names", "at least one object is required"));
        }
        let mut seen = HashSet::new();
        for o in &self.object_names {
            if o.trim().is_empty() || o.contains(['/', '\\']) {
                return Err(validation("object_names", format!("invalid object name {o:?}")));
            }
            if !seen.insert(o) {
                return Err(validation("object_names", format!("duplicate object {o:?}")));
            }
        }
        if self.placeholder.trim().is_empty() {
            return Err(validation("placeholder", "must be non-empty"));
        }
        if let Some(k) = &self.cached_keywords {
            StyleKeywords::new(&k.keywords, &k.raw_response)
                .map_err(|e| validation("cached_keywords", e.to_string()))?;
        }
        Ok(())
    }

    pub fn cached(&self) -> Option<StyleKeywords> {
        self.cached_keywords
            .as_ref()
            .and_then(|k| StyleKeywords::new(&k.keywords, &k.raw_response).ok())
    }

    pub fn load_images(&self) -> Result<Vec<RgbImage>> {
        self.reference_image_paths.iter().map(|p| load_rgb(p)).collect()
    }

    pub fn image_payloads(&self) -> Result<Vec<ImagePayload>> {
        self.reference_image_paths
            .iter()
            .map(|p| ImagePayload::from_file(p))
            .collect()
    }

    /// Writes the manifest with image paths relative to `path`'s directory
    /// when possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut out = self.clone();
        for p in &mut out.reference_image_paths {
            if let Ok(rel) = p.strip_prefix(base) {
                *p = rel.to_path_buf();
            }
        }
        let text = toml::to_string_pretty(&out).map_err(|e| Error::invalid(e.to_string()))?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Parses, validates and probes every reference image for decodability.
/// Relative image paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<StyleCategoryManifest> {
    if !path.exists() {
        return Err(Error::NotFound(format!("manifest {}", path.display())));
    }
    let text = std::fs::read_to_string(path)?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| validation("<document>", e.to_string()))?;
    for (key, expected) in [
        ("category_id", "a string"),
        ("reference_image_paths", "an array of paths"),
        ("object_names", "an array of strings"),
    ] {
        if !table.contains_key(key) {
            return Err(validation(key, format!("missing; expected {expected}")));
        }
    }
    let mut manifest: StyleCategoryManifest = table.try_into().map_err(|e: toml::de::Error| {
        let msg = e.to_string();
        let field = ["category_id", "reference_image_paths", "object_names", "placeholder", "cached_keywords"]
            .into_iter()
            .find(|f| msg.contains(f))
            .unwrap_or("<document>");
        validation(field, msg)
    })?;
    manifest.validate_fields()?;
    let base = path.parent().unwrap_or(Path::new("."));
    for p in &mut manifest.reference_image_paths {
        if p.is_relative() {
            *p = base.join(&*p);
        }
        if !p.exists() {
            return Err(Error::Data {
                path: p.clone(),
                message: "reference image does not exist".into(),
            });
        }
        load_rgb(p)?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_img(path: &Path) {
        RgbImage::from_pixel(4, 4, image::Rgb([10, 20, 30])).save(path).unwrap();
    }

    fn setup(body: &str, images: &[&str]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        for i in images {
            write_img(&dir.path().join(i));
        }
        let path = dir.path().join("m.toml");
        std::fs::write(&path, body).unwrap();
        (dir, path)
    }

    #[test]
    fn loads_three_images() {
        let (_d, p) = setup(
            r#"category_id = "c"
reference_image_paths = ["a.png", "b.png", "c.png"]
object_names = ["car", "apple"]
"#,
            &["a.png", "b.png", "c.png"],
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.reference_image_paths.len(), 3);
        assert!(m.reference_image_paths[0].is_absolute());
        assert_eq!(m.placeholder, "[V*]");
        assert_eq!(m.load_images().unwrap().len(), 3);
    }

    #[test]
    fn zero_images_is_validation_error() {
        let (_d, p) = setup(
            "category_id = \"c\"\nreference_image_paths = []\nobject_names = [\"car\"]\n",
            &[],
        );
        match load_manifest(&p) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "reference_image_paths"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_errors_name_field() {
        let (_d, p) = setup("category_id = 3\nreference_image_paths = [\"a.png\"]\nobject_names = [\"car\"]\n", &["a.png"]);
        match load_manifest(&p) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "category_id"),
            other => panic!("{other:?}"),
        }
        let (_d, p) = setup("category_id = \"c\"\nreference_image_paths = [\"a.png\"]\n", &["a.png"]);
        assert!(matches!(load_manifest(&p), Err(Error::Validation { field, .. }) if field == "object_names"));
        let (_d, p) = setup(
            "category_id = \"c\"\nreference_image_paths = [\"a.png\"]\nobject_names = [\"car\", \"car\"]\n",
            &["a.png"],
        );
        assert!(matches!(load_manifest(&p), Err(Error::Validation { field, .. }) if field == "object_names"));
    }

    #[test]
    fn missing_and_undecodable_images() {
        let (d, p) = setup(
            "category_id = \"c\"\nreference_image_paths = [\"gone.png\"]\nobject_names = [\"car\"]\n",
            &[],
        );
        match load_manifest(&p) {
            Err(Error::Data { path, .. }) => assert_eq!(path, d.path().join("gone.png")),
            other => panic!("{other:?}"),
        }
        std::fs::write(d.path().join("gone.png"), b"not an image").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Data { .. })));
        assert!(matches!(load_manifest(&d.path().join("nope.toml")), Err(Error::NotFound(_))));
    }
}
