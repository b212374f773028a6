//! Scene files and dataset manifests (TOML).
//!
//! A scene file is one serialized [`SceneSpec`]. A manifest lists scene
//! files relative to its own directory with a split tag:
//!
//! ```toml
//! [[scenes]]
//! path = "scene_0000.toml"
//! split = "train"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SceneSpec;
use crate::error::{Error, Result};
use crate::rng::derive;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub scenes: Vec<ManifestEntry>,
}

fn read(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn save_scene(spec: &SceneSpec, path: &Path) -> Result<()> {
    let text = toml::to_string(spec).map_err(|e| Error::Scene(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<SceneSpec> {
    let spec: SceneSpec = toml::from_str(&read(path)?).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    spec.validate()?;
    Ok(spec)
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Scene(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.scenes.iter().filter(move |e| e.split == split)
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    toml::from_str(&read(path)?).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Write `count` random scenes plus `manifest.toml` into `dir`; the last
/// `val_count` scenes form the validation split.
pub fn write_dataset(dir: &Path, count: usize, val_count: usize, seed: u64) -> Result<Manifest> {
    if val_count > count {
        return Err(Error::Config(format!("validation count {val_count} exceeds scene count {count}")));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for i in 0..count {
        let spec = SceneSpec::random(derive(seed, &[0x5CE, i as u64]));
        let name = PathBuf::from(format!("scene_{i:04}.toml"));
        save_scene(&spec, &dir.join(&name))?;
        manifest.scenes.push(ManifestEntry {
            path: name,
            split: if i + val_count >= count { Split::Val } else { Split::Train },
        });
    }
    manifest.save(&dir.join("manifest.toml"))?;
    Ok(manifest)
}
