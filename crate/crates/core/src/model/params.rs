use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{io, Scalar, Tensor};

/// Named parameter tensors of one student, sorted by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

enum Init {
    Xavier,
    Zeros,
    Ones,
    /// N(0, 0.02²), for the mask and class tokens.
    Token,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let linear = |out: &mut Vec<_>, name: &str, fan_in: usize, fan_out: usize| {
        out.push((format!("{name}.weight"), vec![fan_in, fan_out], Init::Xavier));
        out.push((format!("{name}.bias"), vec![fan_out], Init::Zeros));
    };
    let norm = |out: &mut Vec<_>, name: &str, width: usize| {
        out.push((format!("{name}.gain"), vec![width], Init::Ones));
        out.push((format!("{name}.bias"), vec![width], Init::Zeros));
    };
    let e = cfg.embed_dim;
    let w = cfg.dec_width;

    linear(&mut out, "patch_embed", cfg.patch_dim(), e);
    if cfg.use_cls {
        out.push(("cls_token".into(), vec![e], Init::Token));
    }
    for (prefix, depth, width) in [("encoder", cfg.enc_depth, e), ("decoder", cfg.dec_depth, w)] {
        for l in 0..depth {
            let b = format!("{prefix}.{l}");
            norm(&mut out, &format!("{b}.norm1"), width);
            linear(&mut out, &format!("{b}.attn.qkv"), width, 3 * width);
            linear(&mut out, &format!("{b}.attn.proj"), width, width);
            norm(&mut out, &format!("{b}.norm2"), width);
            linear(&mut out, &format!("{b}.mlp.fc1"), width, cfg.mlp_ratio * width);
            linear(&mut out, &format!("{b}.mlp.fc2"), cfg.mlp_ratio * width, width);
        }
        norm(&mut out, &format!("{prefix}.norm"), width);
    }
    linear(&mut out, "decoder.embed", e, w);
    out.push(("mask_token".into(), vec![w], Init::Token));
    linear(&mut out, "decoder.pred", w, cfg.target_dim);
    linear(&mut out, "projector.fc1", e, cfg.proj_hidden());
    linear(&mut out, "projector.fc2", cfg.proj_hidden(), cfg.target_dim);
    out
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters: Xavier-uniform weights, zero biases, unit norm
    /// gains, and N(0, 0.02²) tokens. Each tensor draws from its own stream
    /// keyed by name, so the values do not depend on layout order.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tokens = Normal::new(0.0, 0.02).expect("valid normal");
        let tensors = layout(config)
            .into_iter()
            .map(|(name, shape, init)| {
                let mut rng = rng::stream(seed, &format!("init/{name}"));
                let numel: usize = shape.iter().product();
                let data: Vec<T> = match init {
                    Init::Zeros => vec![T::zero(); numel],
                    Init::Ones => vec![T::one(); numel],
                    Init::Token => (0..numel).map(|_| T::of(tokens.sample(&mut rng))).collect(),
                    Init::Xavier => {
                        let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                        (0..numel).map(|_| T::of(rng.random_range(-limit..limit))).collect()
                    }
                };
                let t = Tensor::new(shape, data).expect("layout shape");
                (name, t)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn from_tensors(config: &ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected = layout(config);
        if expected.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape, _) in &expected {
            match tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Format(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("missing parameter `{name}`"))),
            }
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Writes `u64 LE json length | ModelConfig JSON | (u64 LE name length | name | TVEC)*`
/// with names in lexicographic order.
pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, params: &ModelParams<T>) -> Result<()> {
    let path = path.as_ref();
    let header = serde_json::to_vec(&params.config)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (name, t) in &params.tensors {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        io::write_tensor(&mut buf, t).map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = bytes.as_slice();

    let header_len = take_len(&mut cur)?;
    let config: ModelConfig = serde_json::from_slice(take(&mut cur, header_len)?)?;
    let mut tensors = BTreeMap::new();
    while !cur.is_empty() {
        let name_len = take_len(&mut cur)?;
        let name = std::str::from_utf8(take(&mut cur, name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let t = io::read_tensor(&mut cur)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate parameter `{name}`")));
        }
    }
    ModelParams::from_tensors(&config, tensors)
}

fn take<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(Error::Format("checkpoint is truncated".into()));
    }
    let (head, rest) = cur.split_at(n);
    *cur = rest;
    Ok(head)
}

fn take_len(cur: &mut &[u8]) -> Result<usize> {
    let b: [u8; 8] = take(cur, 8)?.try_into().expect("8 bytes");
    usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("length overflows usize".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_side: 8,
            patch_side: 4,
            embed_dim: 8,
            enc_depth: 2,
            enc_heads: 2,
            dec_depth: 1,
            dec_width: 8,
            dec_heads: 2,
            target_dim: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let a: ModelParams = ModelParams::init(&tiny(), 3).unwrap();
        let b: ModelParams = ModelParams::init(&tiny(), 3).unwrap();
        let c: ModelParams = ModelParams::init(&tiny(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn xavier_bounds_and_token_shapes() {
        let cfg = tiny();
        let p: ModelParams<f64> = ModelParams::init(&cfg, 0).unwrap();
        let w = p.get("encoder.0.attn.qkv.weight").unwrap();
        let limit = (6.0f64 / (8.0 + 24.0)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        assert_eq!(p.get("mask_token").unwrap().shape(), &[cfg.dec_width]);
        assert_eq!(p.get("cls_token").unwrap().shape(), &[cfg.embed_dim]);
        assert!(p
            .get("encoder.0.attn.qkv.bias")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(p.get("decoder.norm.gain").unwrap().data().iter().all(|&v| v == 1.0));

        let no_cls = ModelConfig { use_cls: false, ..cfg };
        let p: ModelParams<f64> = ModelParams::init(&no_cls, 0).unwrap();
        assert!(p.get("cls_token").is_none());
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let p: ModelParams = ModelParams::init(&tiny(), 9).unwrap();
        save_checkpoint(&path, &p).unwrap();
        let back: ModelParams = load_checkpoint(&path).unwrap();
        assert_eq!(p, back);

        let bytes = fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: ModelConfig = serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
        assert_eq!(&header, p.config());

        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Format(_))));
    }
}
