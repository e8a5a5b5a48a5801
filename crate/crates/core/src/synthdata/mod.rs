//! Deterministic synthetic multimodal pairs with exact ground-truth geometry.

mod manifest;
pub(crate) mod modality;
mod pair;
mod pgm;
mod scene;

pub use manifest::{dataset_pair, gen_dataset, parse_modes, DatasetConfig, GeometryKind, Manifest, ManifestEntry};
pub use modality::{render_modality, render_modality_with, Modality, RenderParams};
pub use pair::{gen_pair, Bump, PairMode, PairSpec, SceneGeometry, ScenePair, Surface, TwoView};
pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};
pub use scene::gen_base_scene;
