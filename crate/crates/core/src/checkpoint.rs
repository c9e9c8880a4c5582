//! Binary checkpoint: model config, vocabularies and all parameters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "DINCKPT\n"
//! version  u32      LAYOUT_VERSION
//! hdr_len  u64
//! header   hdr_len bytes of JSON: config, vocab tokens, tensor list
//! tensors  f64 values, row-major, in header order
//! ```
//!
//! Floats are stored as raw bits, so load followed by save reproduces the
//! file byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Activation, Dense, DinModel, EmbeddingTable, MlpHead, ModelConfig};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 8] = b"DINCKPT\n";
pub const LAYOUT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DinModel,
    pub users: Vocabulary,
    pub items: Vocabulary,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    user_tokens: Vec<String>,
    item_tokens: Vec<String>,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

fn tensor_list(model: &DinModel) -> Vec<(String, &[f64], usize, usize)> {
    let mut out = vec![(
        "item_embedding".to_string(),
        model.items.weights.as_slice(),
        model.items.vocab_size(),
        model.items.dim(),
    )];
    if let Some(u) = &model.users {
        out.push((
            "user_embedding".into(),
            u.weights.as_slice(),
            u.vocab_size(),
            u.dim(),
        ));
    }
    for (i, l) in model.mlp.layers.iter().enumerate() {
        let (r, c) = l.weights.shape();
        out.push((format!("mlp.{i}.weights"), l.weights.as_slice(), r, c));
        out.push((format!("mlp.{i}.bias"), &l.bias, 1, l.bias.len()));
    }
    out
}

impl Checkpoint {
    pub fn new(model: DinModel, users: Vocabulary, items: Vocabulary) -> Result<Self> {
        if items.len() != model.config.item_vocab_size {
            return Err(Error::Checkpoint(format!(
                "item vocabulary has {} tokens, model expects {}",
                items.len(),
                model.config.item_vocab_size
            )));
        }
        if model.config.use_user_profile && users.len() != model.config.user_vocab_size {
            return Err(Error::Checkpoint(format!(
                "user vocabulary has {} tokens, model expects {}",
                users.len(),
                model.config.user_vocab_size
            )));
        }
        Ok(Self { model, users, items })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = tensor_list(&self.model);
        let header = Header {
            config: self.model.config.clone(),
            user_tokens: self.users.tokens().to_vec(),
            item_tokens: self.items.tokens().to_vec(),
            tensors: tensors
                .iter()
                .map(|(name, _, rows, cols)| TensorInfo {
                    name: name.clone(),
                    rows: *rows,
                    cols: *cols,
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.model.num_parameters());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&LAYOUT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, data, _, _) in &tensors {
            for v in *data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != LAYOUT_VERSION {
            return Err(bad(format!("unsupported layout version {version}")));
        }
        let hdr_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hdr_len {
            return Err(bad("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hdr_len])?;
        let mut payload = &body[hdr_len..];

        let config = header.config;
        config.validate()?;
        let users = Vocabulary::from_tokens(header.user_tokens)?;
        let items = Vocabulary::from_tokens(header.item_tokens)?;

        let mut read = |info: &TensorInfo| -> Result<Matrix> {
            let n = info.rows * info.cols;
            if payload.len() < 8 * n {
                return Err(bad(format!("truncated tensor {}", info.name)));
            }
            let data = payload[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            payload = &payload[8 * n..];
            Matrix::from_vec(info.rows, info.cols, data)
        };

        // Rebuild the expected layout from the config and compare.
        let d = config.embedding_dim;
        let mut expected = vec![TensorInfo {
            name: "item_embedding".into(),
            rows: config.item_vocab_size,
            cols: d,
        }];
        if config.use_user_profile {
            expected.push(TensorInfo {
                name: "user_embedding".into(),
                rows: config.user_vocab_size,
                cols: d,
            });
        }
        let mut dims = vec![config.mlp_input_dim()];
        dims.extend_from_slice(&config.hidden);
        dims.push(1);
        for (i, w) in dims.windows(2).enumerate() {
            expected.push(TensorInfo {
                name: format!("mlp.{i}.weights"),
                rows: w[0],
                cols: w[1],
            });
            expected.push(TensorInfo {
                name: format!("mlp.{i}.bias"),
                rows: 1,
                cols: w[1],
            });
        }
        if expected != header.tensors {
            return Err(bad("tensor layout does not match the stored config".into()));
        }

        let mut tensors = expected.iter();
        let items_table = EmbeddingTable {
            weights: read(tensors.next().unwrap())?,
        };
        let users_table = if config.use_user_profile {
            Some(EmbeddingTable {
                weights: read(tensors.next().unwrap())?,
            })
        } else {
            None
        };
        let n_layers = dims.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let weights = read(tensors.next().unwrap())?;
            let bias = read(tensors.next().unwrap())?.as_slice().to_vec();
            layers.push(Dense {
                weights,
                bias,
                activation: if i + 1 == n_layers {
                    Activation::Sigmoid
                } else {
                    Activation::Relu
                },
            });
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing bytes", payload.len())));
        }
        if items_table.row(0).iter().any(|&v| v != 0.0) {
            return Err(bad("padding row is not zero".into()));
        }
        let model = DinModel {
            config,
            items: items_table,
            users: users_table,
            mlp: MlpHead { layers },
        };
        Checkpoint::new(model, users, items)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, generate_synthetic, SyntheticConfig};
    use crate::numerics::SeededRng;

    fn sample(use_user_profile: bool) -> Checkpoint {
        let data = generate_synthetic(&SyntheticConfig {
            num_users: 5,
            num_items: 20,
            impressions: 40,
            ..Default::default()
        })
        .unwrap();
        let (users, items) = build_vocab(&data.records);
        let config = ModelConfig {
            use_user_profile,
            ..ModelConfig::new(items.len(), users.len())
        };
        let model = DinModel::init(config, &mut SeededRng::new(3)).unwrap();
        Checkpoint::new(model, users, items).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for profile in [false, true] {
            let ckpt = sample(profile);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.ckpt");
            ckpt.save(&path).unwrap();
            let loaded = Checkpoint::load(&path).unwrap();
            assert_eq!(loaded, ckpt);
            assert_eq!(loaded.to_bytes().unwrap(), std::fs::read(&path).unwrap());
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = sample(false).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(Checkpoint::from_bytes(&wrong_version).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn vocab_size_mismatch_rejected() {
        let ckpt = sample(false);
        let (users, _) = build_vocab(&[]);
        assert!(Checkpoint::new(ckpt.model, users.clone(), users).is_err());
    }
}
