use std::path::Path;

use crate::container::{ByteReader, Container};
use crate::error::{Error, Result};
use crate::tensor::Precision;

pub const SCENE_MAGIC: &[u8; 4] = b"SCNE";
pub const SCENE_VERSION: u32 = 1;

/// Class ids used throughout.
pub const SEA: u8 = 0;
pub const ICE: u8 = 1;
pub const LAND: u8 = 2;
pub const CLASS_NAMES: [&str; 3] = ["sea", "ice", "land"];
pub const NUM_CLASSES: usize = 3;

/// A dual-polarization product with per-pixel labels. Backscatter is in dB.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub hh: Vec<f64>,
    pub hv: Vec<f64>,
    pub labels: Vec<u8>,
}

impl Scene {
    pub fn new(id: impl Into<String>, height: usize, width: usize, hh: Vec<f64>, hv: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let n = height * width;
        if n == 0 || hh.len() != n || hv.len() != n || labels.len() != n {
            return Err(Error::Format(format!(
                "raster sizes hh={} hv={} labels={} do not match {height}x{width}",
                hh.len(),
                hv.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Format(format!("unknown class id {bad} in label raster")));
        }
        Ok(Self { id: id.into(), height, width, hh, hv, labels })
    }

    /// Pixel count per class.
    pub fn class_counts(&self) -> [u64; NUM_CLASSES] {
        let mut c = [0u64; NUM_CLASSES];
        self.labels.iter().for_each(|&l| c[l as usize] += 1);
        c
    }

    pub fn class_fractions(&self) -> [f64; NUM_CLASSES] {
        let n = self.labels.len() as f64;
        self.class_counts().map(|c| c as f64 / n)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(SCENE_MAGIC, SCENE_VERSION);
        c.set("id", &self.id);
        c.set("height", self.height);
        c.set("width", self.width);
        c.set("precision", Precision::Double);
        let p = &mut c.payload;
        p.reserve(self.labels.len() * 17);
        self.hh.iter().chain(&self.hv).for_each(|v| p.extend_from_slice(&v.to_le_bytes()));
        p.extend_from_slice(&self.labels);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (h, w): (usize, usize) = (c.parse("height")?, c.parse("width")?);
        let precision: Precision = c.get("precision")?.parse().map_err(|_| Error::Format("bad precision".into()))?;
        let bytes = match precision {
            Precision::Single => 4,
            Precision::Double => 8,
        };
        let n = h.checked_mul(w).ok_or_else(|| Error::Format("scene dimensions overflow".into()))?;
        let want = n * (2 * bytes + 1);
        if c.payload.len() != want {
            return Err(Error::Format(format!(
                "header says {h}x{w} ({want} payload bytes) but the payload has {} bytes",
                c.payload.len()
            )));
        }
        let mut r = ByteReader::new(&c.payload);
        let mut raster = || -> Result<Vec<f64>> {
            let raw = r.take(n * bytes)?;
            Ok(match precision {
                Precision::Single => raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect(),
                Precision::Double => raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
            })
        };
        let hh = raster()?;
        let hv = raster()?;
        let labels = r.take(n)?.to_vec();
        Scene::new(c.get("id")?, h, w, hh, hv, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, SCENE_MAGIC, SCENE_VERSION)?)
    }

    /// Scene files (`*.scene`) in a directory, sorted by file name.
    pub fn list_dir(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        if !dir.is_dir() {
            return Err(Error::DataNotFound { what: "scene directory".into(), path: dir.to_path_buf() });
        }
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "scene"))
            .collect();
        files.sort();
        Ok(files)
    }
}
