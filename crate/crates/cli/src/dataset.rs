//! Scene datasets on disk: four files per scene plus `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use pixclust_core::rng::derive_seed;
use pixclust_core::scene::{gen_lane_scene, gen_shapes_scene, Scene};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SceneMode};
use crate::error::{CliError, IoContext, Result};
use crate::formats;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub seed: u64,
    pub config_hash: String,
    pub mode: SceneMode,
    pub height: usize,
    pub width: usize,
    pub scene_seeds: Vec<u64>,
}

pub fn scene_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// The `count` scenes a config describes for a given dataset seed.
pub fn generate(cfg: &RunConfig, seed: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| {
            let s = scene_seed(seed, i);
            Ok(match cfg.mode {
                SceneMode::Shapes => gen_shapes_scene(&cfg.scene, s)?,
                SceneMode::Lanes => gen_lane_scene(&cfg.scene, s)?,
            })
        })
        .collect()
}

fn scene_files(dir: &Path, index: usize) -> [PathBuf; 4] {
    let stem = format!("scene_{index:05}");
    ["ppm", "inst.pgm", "sem.pgm", "ctr"].map(|ext| dir.join(format!("{stem}.{ext}")))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).at(path)
}

pub fn write_dataset(dir: &Path, manifest: &Manifest, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    for (i, s) in scenes.iter().enumerate() {
        let [img, inst, sem, ctr] = scene_files(dir, i);
        write(&img, &formats::encode_ppm(&s.image))?;
        write(&inst, &formats::encode_pgm16(&s.instances))?;
        write(&sem, &formats::encode_pgm8(&s.semantics))?;
        write(&ctr, &formats::encode_centers(&s.centers))?;
    }
    let mut json = serde_json::to_vec_pretty(manifest)?;
    json.push(b'\n');
    write(&dir.join(MANIFEST), &json)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(CliError::Invalid(format!("no dataset at {} (missing {MANIFEST})", dir.display())));
    }
    let m: Manifest = serde_json::from_slice(&fs::read(&path).at(&path)?)?;
    if m.scene_seeds.len() != m.count {
        return Err(CliError::format("manifest", format!("{} scene seeds for count {}", m.scene_seeds.len(), m.count)));
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<Scene>)> {
    let m = read_manifest(dir)?;
    let mut scenes = Vec::with_capacity(m.count);
    for (i, &seed) in m.scene_seeds.iter().enumerate() {
        let [img, inst, sem, ctr] = scene_files(dir, i);
        let scene = Scene {
            image: formats::decode_ppm(&fs::read(&img).at(&img)?)?,
            instances: formats::decode_pgm16(&fs::read(&inst).at(&inst)?)?,
            semantics: formats::decode_pgm8(&fs::read(&sem).at(&sem)?)?,
            centers: formats::decode_centers(&fs::read(&ctr).at(&ctr)?)?,
            seed,
        };
        let shape = (m.height, m.width);
        if [scene.image.shape(), scene.instances.shape(), scene.semantics.shape(), scene.centers.shape()]
            .iter()
            .any(|&s| s != shape)
        {
            return Err(CliError::format("dataset", format!("scene {i} does not match the manifest size {shape:?}")));
        }
        scenes.push(scene);
    }
    Ok((m, scenes))
}
