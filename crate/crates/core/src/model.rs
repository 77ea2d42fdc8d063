//! Place-recognition network: optional enhancer, backbone, optional TransEnc
//! branch, and the flatten-normalize descriptor head. Also the checkpoint format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use radkd_autograd::{ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::enhance::{Enhancer, EnhancerConfig};
use crate::error::{Error, Result};
use crate::features::{global_descriptor_graph, Backbone, BackboneConfig, Descriptor, FeatureBranch, FeatureMap, TransEnc};
use crate::geometry::BevImage;
use crate::registry::Strategies;
use crate::retrieval::Modality;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub backbone: BackboneConfig,
    /// Radar-side enhancement network; `None` feeds raw radar BEVs to the backbone.
    pub enhancer: Option<EnhancerConfig>,
    /// Branch layout name when a TransEnc branch is present.
    pub fdd_branch: Option<String>,
}

impl ModelConfig {
    pub fn plain(input_height: usize, input_width: usize, backbone: BackboneConfig) -> Self {
        Self {
            input_height,
            input_width,
            backbone,
            enhancer: None,
            fdd_branch: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let (h, w) = self.feature_spatial();
        if h == 0 || w == 0 {
            return Err(Error::config("model.backbone", "input too small for the backbone"));
        }
        if self.enhancer.is_some() && (self.input_height % 2 != 0 || self.input_width % 2 != 0) {
            return Err(Error::config("model.enhancer", "enhancer needs even input height and width"));
        }
        if let Some(b) = &self.fdd_branch {
            Strategies::builtin().branch.create(b)?;
        }
        Ok(())
    }

    pub fn feature_spatial(&self) -> (usize, usize) {
        self.backbone.out_spatial(self.input_height, self.input_width)
    }

    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.feature_spatial();
        (self.backbone.out_channels(), h, w)
    }

    pub fn descriptor_dim(&self) -> usize {
        let (c, h, w) = self.feature_shape();
        c * h * w
    }

    /// Hex SHA-256 of the JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Tape nodes for one radar frame.
#[derive(Clone, Copy, Debug)]
pub struct RadarNodes {
    pub input: Var,
    pub enhanced: Option<Var>,
    pub features: Var,
    pub transformed: Option<Var>,
    pub descriptor: Var,
}

/// Tape nodes for one LiDAR frame.
#[derive(Clone, Copy, Debug)]
pub struct LidarNodes {
    pub input: Var,
    pub features: Var,
    pub descriptor: Var,
}

pub struct PlaceModel {
    config: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    enhancer: Option<Enhancer>,
    trans_enc: Option<TransEnc>,
    branch: Option<Box<dyn FeatureBranch>>,
}

const BACKBONE_BIAS_INIT: f64 = 0.01;

impl PlaceModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(config.backbone.clone(), &mut store, "backbone", &mut rng);
        // A small positive bias keeps features of an empty scan away from the all-zero vector.
        let bias_ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with(".bias")).collect();
        for id in bias_ids {
            store.value_mut(id).fill(BACKBONE_BIAS_INIT);
        }
        let enhancer = config
            .enhancer
            .map(|c| Enhancer::new(c, &mut store, "enhancer", &mut rng));
        let (trans_enc, branch) = match &config.fdd_branch {
            Some(name) => (
                Some(TransEnc::new(config.backbone.out_channels(), &mut store, "trans_enc", &mut rng)),
                Some(Strategies::builtin().branch.create(name)?),
            ),
            None => (None, None),
        };
        Ok(Self {
            config,
            store,
            backbone,
            enhancer,
            trans_enc,
            branch,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn has_enhancer(&self) -> bool {
        self.enhancer.is_some()
    }

    pub fn has_trans_enc(&self) -> bool {
        self.trans_enc.is_some()
    }

    fn check_image(&self, img: &BevImage) -> Result<()> {
        let want = (self.config.input_height, self.config.input_width);
        if img.dim() != want {
            return Err(Error::Shape(format!("expected a {want:?} BEV image, got {:?}", img.dim())));
        }
        Ok(())
    }

    /// Places `img` on the tape as a 1×H×W leaf.
    pub fn input(&self, tape: &mut Tape, img: &BevImage) -> Result<Var> {
        self.check_image(img)?;
        let (h, w) = img.dim();
        let v = img.values().iter().copied().collect::<Vec<f64>>();
        Ok(tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, h, w]), v).expect("length matches")))
    }

    /// Radar path: enhance, extract, transform and combine, describe.
    pub fn radar_graph(&self, tape: &mut Tape, img: &BevImage) -> Result<RadarNodes> {
        let input = self.input(tape, img)?;
        let enhanced = self.enhancer.as_ref().map(|e| e.forward(tape, &self.store, input));
        let features = self.backbone.forward(tape, &self.store, enhanced.unwrap_or(input));
        let transformed = self.trans_enc.as_ref().map(|t| t.forward(tape, &self.store, features));
        let head = match (&self.branch, transformed) {
            (Some(b), Some(t)) => b.combine(tape, features, t),
            _ => features,
        };
        let descriptor = global_descriptor_graph(tape, head)?;
        Ok(RadarNodes {
            input,
            enhanced,
            features,
            transformed,
            descriptor,
        })
    }

    /// LiDAR path: backbone and descriptor only.
    pub fn lidar_graph(&self, tape: &mut Tape, img: &BevImage) -> Result<LidarNodes> {
        let input = self.input(tape, img)?;
        let features = self.backbone.forward(tape, &self.store, input);
        let descriptor = global_descriptor_graph(tape, features)?;
        Ok(LidarNodes {
            input,
            features,
            descriptor,
        })
    }

    pub fn describe(&self, img: &BevImage, modality: Modality) -> Result<Descriptor> {
        let mut tape = Tape::new();
        let d = match modality {
            Modality::Radar => self.radar_graph(&mut tape, img)?.descriptor,
            Modality::Lidar => self.lidar_graph(&mut tape, img)?.descriptor,
        };
        Descriptor::from_tape(&tape, d)
    }

    /// Backbone features and descriptor of a LiDAR image, as a teacher provides them.
    pub fn lidar_outputs(&self, img: &BevImage) -> Result<(FeatureMap, Descriptor)> {
        let mut tape = Tape::new();
        let n = self.lidar_graph(&mut tape, img)?;
        let f = FeatureMap::new(tape.value(n.features).clone().into_dimensionality().expect("rank 3"))?;
        Ok((f, Descriptor::from_tape(&tape, n.descriptor)?))
    }

    const MAGIC: &'static [u8; 8] = b"RADKDCK1";

    /// Magic, u64 header length, JSON header, then every parameter as little-endian f64
    /// in header order. `metadata` is stored verbatim in the header.
    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        let params: Vec<ParamHeader> = self
            .store
            .iter()
            .map(|(name, v)| ParamHeader {
                name: name.to_string(),
                shape: v.shape().to_vec(),
            })
            .collect();
        let header = CheckpointHeader {
            format_version: 1,
            config_hash: self.config.hash(),
            model: self.config.clone(),
            params,
            metadata,
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header_bytes.len() + 8 * self.store.num_scalars());
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (_, v) in self.store.iter() {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: String| Error::format(path, m);
        if bytes.len() < 16 || &bytes[..8] != Self::MAGIC {
            return Err(bad("not a checkpoint".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.config_hash != header.model.hash() {
            return Err(bad("config hash does not match the stored model config".into()));
        }
        let mut model = Self::new(header.model.clone(), 0)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .store
            .iter()
            .map(|(n, v)| (n.to_string(), v.shape().to_vec()))
            .collect();
        let stored: Vec<(String, Vec<usize>)> = header.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
        if expected != stored {
            return Err(bad("parameter layout does not match the model config".into()));
        }
        let mut data = bytes[16 + hlen..].chunks_exact(8);
        if data.len() != model.store.num_scalars() || !data.remainder().is_empty() {
            return Err(bad("parameter payload has the wrong length".into()));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            for x in model.store.value_mut(id).iter_mut() {
                *x = f64::from_le_bytes(data.next().unwrap().try_into().unwrap());
            }
        }
        if !model.store.all_finite() {
            return Err(bad("non-finite parameter values".into()));
        }
        Ok((model, header.metadata))
    }
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config_hash: String,
    model: ModelConfig,
    params: Vec<ParamHeader>,
    metadata: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_config() -> ModelConfig {
        ModelConfig {
            enhancer: Some(EnhancerConfig::default()),
            fdd_branch: Some("dual".into()),
            ..ModelConfig::plain(64, 64, BackboneConfig::desk())
        }
    }

    #[test]
    fn shapes_and_empty_scan() {
        let m = PlaceModel::new(full_config(), 1).unwrap();
        assert_eq!(m.config().feature_shape(), (32, 8, 8));
        let d = m.describe(&BevImage::zeros(64, 64), Modality::Radar).unwrap();
        assert_eq!(d.dim(), 2048);
        assert!(m.describe(&BevImage::zeros(32, 32), Modality::Lidar).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let m = PlaceModel::new(full_config(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path, serde_json::json!({"role": "test"})).unwrap();
        let (back, meta) = PlaceModel::load(&path).unwrap();
        assert_eq!(meta["role"], "test");
        let img = BevImage::new(ndarray::Array2::from_shape_fn((64, 64), |(i, j)| ((i * j) % 7) as f64 / 7.0)).unwrap();
        let a = m.describe(&img, Modality::Radar).unwrap();
        let b = back.describe(&img, Modality::Radar).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(PlaceModel::load(&path).is_err());
    }
}
