use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::modality::Modality;
use super::pair::{gen_pair, PairMode, PairSpec, SceneGeometry, ScenePair};
use super::pgm::{read_pgm, write_pgm};
use crate::error::{Error, Result};
use crate::rng::split_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeometryKind {
    Registered,
    Homography,
    TwoView,
}

impl FromStr for GeometryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reg" | "registered" => Ok(GeometryKind::Registered),
            "h" | "homography" => Ok(GeometryKind::Homography),
            "f" | "tv" | "two-view" => Ok(GeometryKind::TwoView),
            other => Err(Error::invalid(format!("unknown geometry kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub pairs: usize,
    /// Modality pairs, cycled over the pair index.
    pub modes: Vec<(Modality, Modality)>,
    pub size: usize,
    pub geometry: GeometryKind,
    /// Corner displacement bound for homography pairs.
    pub warp: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            pairs: 8,
            modes: vec![(Modality::Opt, Modality::Opt)],
            size: 96,
            geometry: GeometryKind::Registered,
            warp: 6.0,
        }
    }
}

/// Parses `opt:opt,opt:sar` style lists.
pub fn parse_modes(s: &str) -> Result<Vec<(Modality, Modality)>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|tok| {
            let (a, b) = tok
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("modality pair `{tok}` must look like `opt:sar`")))?;
            Ok((a.parse()?, b.parse()?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub modality_a: Modality,
    pub modality_b: Modality,
    pub geom_type: String,
    pub image_a: PathBuf,
    pub image_b: PathBuf,
    pub geom_file: PathBuf,
}

/// Pair list; relative paths resolve against `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 7 {
                return Err(Error::format(format!("manifest line {}: expected 7 fields, got {}", no + 1, f.len())));
            }
            if !matches!(f[3], "REG" | "H" | "F") {
                return Err(Error::format(format!("manifest line {}: unknown geometry type `{}`", no + 1, f[3])));
            }
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                modality_a: f[1].parse().map_err(|_| Error::format(format!("bad modality `{}`", f[1])))?,
                modality_b: f[2].parse().map_err(|_| Error::format(format!("bad modality `{}`", f[2])))?,
                geom_type: f[3].to_string(),
                image_a: f[4].into(),
                image_b: f[5].into(),
                geom_file: f[6].into(),
            });
        }
        Ok(Manifest {
            root: root.into(),
            entries,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&fs::read_to_string(path)?, root)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                e.id,
                e.modality_a,
                e.modality_b,
                e.geom_type,
                e.image_a.display(),
                e.image_b.display(),
                e.geom_file.display()
            ));
        }
        out
    }

    pub fn load_pair(&self, e: &ManifestEntry) -> Result<ScenePair> {
        let geometry = SceneGeometry::parse(&fs::read_to_string(self.root.join(&e.geom_file))?)?;
        if geometry.tag() != e.geom_type {
            return Err(Error::format(format!(
                "{}: manifest says {} but geometry file holds {}",
                e.id,
                e.geom_type,
                geometry.tag()
            )));
        }
        let image_a = read_pgm(self.root.join(&e.image_a))?;
        let image_b = read_pgm(self.root.join(&e.image_b))?;
        Ok(ScenePair {
            image_a,
            image_b,
            modality_a: e.modality_a,
            modality_b: e.modality_b,
            geometry,
            seed: 0,
        })
    }
}

/// Pair `index` of a dataset drawn from `seed`.
pub fn dataset_pair(seed: u64, cfg: &DatasetConfig, index: usize) -> Result<ScenePair> {
    if cfg.modes.is_empty() {
        return Err(Error::invalid("dataset needs at least one modality pair"));
    }
    let (a, b) = cfg.modes[index % cfg.modes.len()];
    let mode = match cfg.geometry {
        GeometryKind::TwoView => PairMode::TwoView,
        _ if a == b => PairMode::SameModal,
        _ => PairMode::CrossModal,
    };
    let spec = PairSpec {
        mode,
        modality_a: a,
        modality_b: b,
        size: cfg.size,
        warp: (cfg.geometry == GeometryKind::Homography).then_some(cfg.warp),
    };
    gen_pair(split_seed(seed, 1000 + index as u64), &spec)
}

/// Generates `cfg.pairs` pairs into `out_dir` and writes `manifest.txt` there.
pub fn gen_dataset(out_dir: impl AsRef<Path>, seed: u64, cfg: &DatasetConfig) -> Result<Manifest> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(cfg.pairs);
    for i in 0..cfg.pairs {
        let pair = dataset_pair(seed, cfg, i)?;
        let id = format!("pair{i:04}");
        let e = ManifestEntry {
            id: id.clone(),
            modality_a: pair.modality_a,
            modality_b: pair.modality_b,
            geom_type: pair.geometry.tag().to_string(),
            image_a: format!("{id}_a.pgm").into(),
            image_b: format!("{id}_b.pgm").into(),
            geom_file: format!("{id}.geom").into(),
        };
        write_pgm(out.join(&e.image_a), &pair.image_a)?;
        write_pgm(out.join(&e.image_b), &pair.image_b)?;
        fs::write(out.join(&e.geom_file), pair.geometry.serialize())?;
        entries.push(e);
    }
    let manifest = Manifest {
        root: out.to_path_buf(),
        entries,
    };
    fs::write(out.join("manifest.txt"), manifest.serialize())?;
    Ok(manifest)
}
