use std::collections::BTreeMap;

use super::{sincos_2d, Aggregate, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::masking::PatchMask;
use crate::tensor::{Scalar, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-6;

/// Model parameters registered on one tape.
pub struct Bound<'t, T: Scalar> {
    config: ModelConfig,
    tape: &'t Tape<T>,
    vars: BTreeMap<String, Var<'t, T>>,
    enc_pos: Tensor<T>,
    dec_pos: Tensor<T>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Registers every parameter on `tape`, once each.
    pub fn new(params: &ModelParams<T>, tape: &'t Tape<T>) -> Result<Self> {
        let config = params.config().clone();
        let vars = params
            .iter()
            .map(|(name, t)| Ok((name.clone(), tape.param(name, t.clone())?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            enc_pos: sincos_2d(config.grid_side(), config.embed_dim),
            dec_pos: sincos_2d(config.grid_side(), config.dec_width),
            config,
            tape,
            vars,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn var(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no parameter named `{name}`")))
    }

    fn linear(&self, x: Var<'t, T>, name: &str) -> Result<Var<'t, T>> {
        x.matmul(self.var(&format!("{name}.weight"))?)?
            .add_row(self.var(&format!("{name}.bias"))?)
    }

    fn norm(&self, x: Var<'t, T>, name: &str) -> Result<Var<'t, T>> {
        x.layer_norm(
            self.var(&format!("{name}.gain"))?,
            self.var(&format!("{name}.bias"))?,
            T::of(LN_EPS),
        )
    }

    fn attention(&self, x: Var<'t, T>, prefix: &str, heads: usize) -> Result<Var<'t, T>> {
        let width = x.shape()[1];
        let dh = width / heads;
        let qkv = self.linear(x, &format!("{prefix}.qkv"))?;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let outs = (0..heads)
            .map(|h| {
                let q = qkv.slice_cols(h * dh, dh)?;
                let k = qkv.slice_cols(width + h * dh, dh)?;
                let v = qkv.slice_cols(2 * width + h * dh, dh)?;
                let weights = q.matmul(k.transpose()?)?.scale(scale).softmax(1)?;
                weights.matmul(v)
            })
            .collect::<Result<Vec<_>>>()?;
        self.linear(Var::concat_cols(&outs)?, &format!("{prefix}.proj"))
    }

    /// Pre-norm transformer block: attention then GELU MLP, each residual.
    fn block(&self, x: Var<'t, T>, prefix: &str, heads: usize) -> Result<Var<'t, T>> {
        let a = self.attention(
            self.norm(x, &format!("{prefix}.norm1"))?,
            &format!("{prefix}.attn"),
            heads,
        )?;
        let x = x.add(a)?;
        let h = self.linear(self.norm(x, &format!("{prefix}.norm2"))?, &format!("{prefix}.mlp.fc1"))?;
        let m = self.linear(h.gelu(), &format!("{prefix}.mlp.fc2"))?;
        x.add(m)
    }
}

/// Splits `[C × H × W]` into row-major patches, each flattened as `(c, y, x)`.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch_side: usize) -> Result<Tensor<T>> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::Dimension(format!("image must be [C, H, W], got {s:?}"))),
    };
    if patch_side == 0 || h % patch_side != 0 || w % patch_side != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} image does not tile into {patch_side}-pixel patches"
        )));
    }
    let (gy, gx) = (h / patch_side, w / patch_side);
    let px = image.data();
    let mut data = Vec::with_capacity(image.numel());
    for py in 0..gy {
        for pxi in 0..gx {
            for ch in 0..c {
                for dy in 0..patch_side {
                    let row = (ch * h + py * patch_side + dy) * w + pxi * patch_side;
                    data.extend_from_slice(&px[row..row + patch_side]);
                }
            }
        }
    }
    Tensor::new(vec![gy * gx, c * patch_side * patch_side], data)
}

/// Linear patch projection plus fixed positional embeddings, `[N × embed_dim]`.
pub fn patch_embed<'t, T: Scalar>(m: &Bound<'t, T>, image: &Tensor<T>) -> Result<Var<'t, T>> {
    let cfg = m.config();
    let expected = [cfg.in_channels, cfg.image_side, cfg.image_side];
    if image.shape() != expected {
        return Err(Error::Dimension(format!(
            "image {:?} does not match model geometry {expected:?}",
            image.shape()
        )));
    }
    let patches = m.tape().constant(patchify(image, cfg.patch_side)?);
    let pos = m.tape().constant(m.enc_pos.clone());
    m.linear(patches, "patch_embed")?.add(pos)
}

/// Per-layer encoder activations for the visible patches.
pub struct EncoderOutput<'t, T: Scalar> {
    /// `h^l` for `l = 1..=L`, each `[|visible| × embed_dim]`, class token removed.
    pub layers: Vec<Var<'t, T>>,
    /// Final-layer class token, `[1 × embed_dim]`, when enabled.
    pub cls: Option<Var<'t, T>>,
}

impl<'t, T: Scalar> EncoderOutput<'t, T> {
    pub fn last(&self) -> Var<'t, T> {
        *self.layers.last().expect("encoder depth >= 1")
    }
}

/// Runs the encoder on visible tokens only; masked patches never enter attention.
pub fn encode_visible<'t, T: Scalar>(
    m: &Bound<'t, T>,
    tokens: Var<'t, T>,
    mask: &PatchMask,
) -> Result<EncoderOutput<'t, T>> {
    let cfg = m.config();
    if mask.num_patches() != cfg.num_patches() {
        return Err(Error::Dimension(format!(
            "mask has {} patches, model expects {}",
            mask.num_patches(),
            cfg.num_patches()
        )));
    }
    let visible = mask.visible();
    if visible.is_empty() {
        return Err(Error::DegenerateMask("encoder needs at least one visible patch".into()));
    }
    let mut x = tokens.gather_rows(visible)?;
    if cfg.use_cls {
        // the class token sits at the zero position embedding
        let cls = m.var("cls_token")?.reshape(vec![1, cfg.embed_dim])?;
        x = Var::concat_rows(&[cls, x])?;
    }
    let offset = usize::from(cfg.use_cls);
    let mut layers = Vec::with_capacity(cfg.enc_depth);
    let mut cls = None;
    for l in 0..cfg.enc_depth {
        x = m.block(x, &format!("encoder.{l}"), cfg.enc_heads)?;
        layers.push(x.slice_rows(offset, visible.len())?);
        if cfg.use_cls {
            cls = Some(x.slice_rows(0, 1)?);
        }
    }
    Ok(EncoderOutput { layers, cls })
}

/// Combines per-layer outputs: mean (or sum) over all layers with
/// `multi_block`, otherwise the last layer alone.
pub fn aggregate_multi_block<'t, T: Scalar>(out: &EncoderOutput<'t, T>, cfg: &ModelConfig) -> Result<Var<'t, T>> {
    if out.layers.len() != cfg.enc_depth || out.layers.is_empty() {
        return Err(Error::Contract(format!(
            "expected {} encoder layers, got {}",
            cfg.enc_depth,
            out.layers.len()
        )));
    }
    if !cfg.multi_block || out.layers.len() == 1 {
        return Ok(out.last());
    }
    let mut total = out.layers[0];
    for &layer in &out.layers[1..] {
        total = total.add(layer)?;
    }
    Ok(match cfg.aggregate {
        Aggregate::Mean => total.scale(T::one() / T::of(out.layers.len() as f64)),
        Aggregate::Sum => total,
    })
}

/// Predicts teacher features for every patch slot, `[N × target_dim]` in patch order.
///
/// Encoder tokens are normalized and mapped to the decoder width, placed at
/// their visible slots, and the learnable mask token fills every masked slot
/// before the decoder position table is added.
pub fn decode<'t, T: Scalar>(m: &Bound<'t, T>, h_visible: Var<'t, T>, mask: &PatchMask) -> Result<Var<'t, T>> {
    let cfg = m.config();
    let n = cfg.num_patches();
    let x = m.linear(m.norm(h_visible, "encoder.norm")?, "decoder.embed")?;
    let x = x.merge_rows(m.var("mask_token")?, mask.visible(), n)?;
    let mut x = x.add(m.tape().constant(m.dec_pos.clone()))?;
    for l in 0..cfg.dec_depth {
        x = m.block(x, &format!("decoder.{l}"), cfg.dec_heads)?;
    }
    m.linear(m.norm(x, "decoder.norm")?, "decoder.pred")
}

/// Per-token projector: normalize, linear, ReLU, linear. Input excludes the class token.
pub fn project_global<'t, T: Scalar>(m: &Bound<'t, T>, h_visible: Var<'t, T>) -> Result<Var<'t, T>> {
    if h_visible.shape().first() == Some(&0) {
        return Err(Error::DegenerateMask(
            "projector needs at least one visible token".into(),
        ));
    }
    let h = m.linear(m.norm(h_visible, "encoder.norm")?, "projector.fc1")?;
    m.linear(h.relu(), "projector.fc2")
}

pub struct StudentOutput<'t, T: Scalar> {
    pub encoder: EncoderOutput<'t, T>,
    /// Aggregated visible tokens fed to the decoder.
    pub aggregated: Var<'t, T>,
    pub predictions: Var<'t, T>,
    /// Projected last-layer visible tokens, when the global branch runs.
    pub projected: Option<Var<'t, T>>,
}

/// Full student pass for one image.
pub fn forward<'t, T: Scalar>(
    m: &Bound<'t, T>,
    image: &Tensor<T>,
    mask: &PatchMask,
    with_global: bool,
) -> Result<StudentOutput<'t, T>> {
    let tokens = patch_embed(m, image)?;
    let encoder = encode_visible(m, tokens, mask)?;
    let aggregated = aggregate_multi_block(&encoder, m.config())?;
    let predictions = decode(m, aggregated, mask)?;
    let projected = if with_global {
        Some(project_global(m, encoder.last())?)
    } else {
        None
    };
    Ok(StudentOutput {
        encoder,
        aggregated,
        predictions,
        projected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{generate_mask, MaskSpec};
    use rand::{Rng, SeedableRng};

    fn tiny(use_cls: bool) -> ModelConfig {
        ModelConfig {
            image_side: 8,
            in_channels: 2,
            patch_side: 4,
            embed_dim: 8,
            enc_depth: 2,
            enc_heads: 2,
            dec_depth: 1,
            dec_width: 12,
            dec_heads: 3,
            target_dim: 5,
            mlp_ratio: 2,
            proj_hidden: Some(6),
            use_cls,
            multi_block: true,
            aggregate: Aggregate::Mean,
        }
    }

    fn image(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.in_channels * cfg.image_side * cfg.image_side;
        Tensor::new(
            vec![cfg.in_channels, cfg.image_side, cfg.image_side],
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn mask_of(cfg: &ModelConfig, masked: &[usize]) -> PatchMask {
        let mut grid = vec![false; cfg.num_patches()];
        masked.iter().for_each(|&i| grid[i] = true);
        PatchMask::from_grid(cfg.grid_side(), grid).unwrap()
    }

    #[test]
    fn patchify_counts_and_order() {
        let img: Tensor<f64> = Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(2), &[8.0, 9.0, 12.0, 13.0]);

        let big: Tensor<f32> = Tensor::zeros(vec![3, 32, 32]);
        assert_eq!(patchify(&big, 16).unwrap().shape(), &[4, 768]);
    }

    #[test]
    fn zero_image_embeds_to_positions() {
        let cfg = tiny(true);
        let params: ModelParams<f64> = ModelParams::init(&cfg, 1).unwrap();
        let tape = Tape::new();
        let m = Bound::new(&params, &tape).unwrap();
        let zeros = Tensor::zeros(vec![cfg.in_channels, cfg.image_side, cfg.image_side]);
        let tokens = patch_embed(&m, &zeros).unwrap();
        assert_eq!(
            tokens.value().data(),
            sincos_2d::<f64>(cfg.grid_side(), cfg.embed_dim).data()
        );
    }

    #[test]
    fn patch_embed_rejects_wrong_geometry() {
        let cfg = tiny(true);
        let params: ModelParams<f64> = ModelParams::init(&cfg, 1).unwrap();
        let tape = Tape::new();
        let m = Bound::new(&params, &tape).unwrap();
        let wrong = Tensor::zeros(vec![cfg.in_channels, 12, 12]);
        assert!(matches!(patch_embed(&m, &wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn swapping_patches_swaps_pre_position_embeddings() {
        let cfg = tiny(false);
        let params: ModelParams<f64> = ModelParams::init(&cfg, 2).unwrap();
        let img = image(&cfg, 5);
        // swap patch 0 (top-left) and patch 3 (bottom-right)
        let mut swapped = img.clone();
        let side = cfg.image_side;
        for c in 0..cfg.in_channels {
            for y in 0..4 {
                for x in 0..4 {
                    let a = (c * side + y) * side + x;
                    let b = (c * side + y + 4) * side + x + 4;
                    swapped.data_mut().swap(a, b);
                }
            }
        }
        let pos = sincos_2d::<f64>(cfg.grid_side(), cfg.embed_dim);
        let embed = |im: &Tensor<f64>| {
            let tape = Tape::new();
            let m = Bound::new(&params, &tape).unwrap();
            let t = patch_embed(&m, im).unwrap().value();
            let data: Vec<f64> = t.data().iter().zip(pos.data()).map(|(a, p)| a - p).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        let (a, b) = (embed(&img), embed(&swapped));
        for (i, j) in [(0, 3), (3, 0), (1, 1), (2, 2)] {
            for (x, y) in a.row(i).iter().zip(b.row(j)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_sequence_lengths() {
        for use_cls in [true, false] {
            let cfg = tiny(use_cls);
            let params: ModelParams<f64> = ModelParams::init(&cfg, 3).unwrap();
            let tape = Tape::new();
            let m = Bound::new(&params, &tape).unwrap();
            let tokens = patch_embed(&m, &image(&cfg, 1)).unwrap();

            let one_visible = encode_visible(&m, tokens, &mask_of(&cfg, &[0, 1, 2])).unwrap();
            assert_eq!(one_visible.layers.len(), 2);
            assert_eq!(one_visible.last().shape(), vec![1, 8]);
            assert_eq!(one_visible.cls.is_some(), use_cls);

            let all = encode_visible(&m, tokens, &PatchMask::all_visible(2)).unwrap();
            assert_eq!(all.last().shape(), vec![4, 8]);

            assert!(matches!(
                encode_visible(&m, tokens, &mask_of(&cfg, &[0, 1, 2, 3])),
                Err(Error::DegenerateMask(_))
            ));
        }
    }

    #[test]
    fn visible_outputs_ignore_masked_pixels() {
        let cfg = tiny(true);
        let params: ModelParams<f64> = ModelParams::init(&cfg, 4).unwrap();
        let mask = mask_of(&cfg, &[1, 2]);
        let img = image(&cfg, 8);
        let mut perturbed = img.clone();
        // patch 1 is the top-right 4x4 block, patch 2 the bottom-left
        for c in 0..cfg.in_channels {
            for y in 0..4 {
                for x in 0..4 {
                    perturbed.data_mut()[(c * 8 + y) * 8 + x + 4] += 3.0;
                    perturbed.data_mut()[(c * 8 + y + 4) * 8 + x] -= 7.0;
                }
            }
        }
        let run = |im: &Tensor<f64>| {
            let tape = Tape::new();
            let m = Bound::new(&params, &tape).unwrap();
            let out = forward(&m, im, &mask, true).unwrap();
            (
                out.encoder
                    .layers
                    .iter()
                    .map(|l| l.value().as_ref().clone())
                    .collect::<Vec<_>>(),
                out.projected.unwrap().value().as_ref().clone(),
            )
        };
        assert_eq!(run(&img), run(&perturbed));
    }

    #[test]
    fn aggregation_variants() {
        let tape: Tape<f64> = Tape::new();
        let h1 = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let h2 = tape.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let out = EncoderOutput {
            layers: vec![h1, h2],
            cls: None,
        };
        let mut cfg = tiny(false);
        assert_eq!(aggregate_multi_block(&out, &cfg).unwrap().value().data(), &[2.0, 3.0]);
        cfg.aggregate = Aggregate::Sum;
        assert_eq!(aggregate_multi_block(&out, &cfg).unwrap().value().data(), &[4.0, 6.0]);
        cfg.multi_block = false;
        assert_eq!(aggregate_multi_block(&out, &cfg).unwrap().value().data(), &[3.0, 4.0]);

        let single = EncoderOutput {
            layers: vec![h1],
            cls: None,
        };
        let cfg1 = ModelConfig {
            enc_depth: 1,
            ..tiny(false)
        };
        assert_eq!(
            aggregate_multi_block(&single, &cfg1).unwrap().value().data(),
            &[1.0, 2.0]
        );
    }

    #[test]
    fn decoder_shapes() {
        let cfg = tiny(true);
        let params: ModelParams<f64> = ModelParams::init(&cfg, 6).unwrap();
        for mask in [
            PatchMask::all_visible(2),
            mask_of(&cfg, &[0, 3]),
            mask_of(&cfg, &[1, 2, 3]),
        ] {
            let tape = Tape::new();
            let m = Bound::new(&params, &tape).unwrap();
            let out = forward(&m, &image(&cfg, 2), &mask, true).unwrap();
            assert_eq!(out.predictions.shape(), vec![4, cfg.target_dim]);
            assert_eq!(
                out.projected.unwrap().shape(),
                vec![mask.visible().len(), cfg.target_dim]
            );
        }
    }

    #[test]
    fn swapping_masked_position_embeddings_swaps_predictions() {
        let cfg = tiny(false);
        let params: ModelParams<f64> = ModelParams::init(&cfg, 7).unwrap();
        let mask = mask_of(&cfg, &[1, 2]);
        let img = image(&cfg, 3);
        let run = |swap: bool| {
            let tape = Tape::new();
            let mut m = Bound::new(&params, &tape).unwrap();
            if swap {
                let w = cfg.dec_width;
                let (r1, r2) = (m.dec_pos.row(1).to_vec(), m.dec_pos.row(2).to_vec());
                m.dec_pos.data_mut()[w..2 * w].copy_from_slice(&r2);
                m.dec_pos.data_mut()[2 * w..3 * w].copy_from_slice(&r1);
            }
            forward(&m, &img, &mask, false)
                .unwrap()
                .predictions
                .value()
                .as_ref()
                .clone()
        };
        let (a, b) = (run(false), run(true));
        for (i, j) in [(1, 2), (2, 1), (0, 0), (3, 3)] {
            for (x, y) in a.row(i).iter().zip(b.row(j)) {
                assert!((x - y).abs() < 1e-12, "slot {i} vs {j}");
            }
        }
    }

    #[test]
    fn projector_is_per_token() {
        let cfg = tiny(false);
        let mut params: ModelParams<f64> = ModelParams::init(&cfg, 8).unwrap();
        let tape = Tape::new();
        let m = Bound::new(&params, &tape).unwrap();
        let h = tape.constant(Tensor::new(vec![3, 8], (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        let p = project_global(&m, h).unwrap().value();
        let hp = project_global(&m, h.gather_rows(&[2, 0, 1]).unwrap()).unwrap().value();
        assert_eq!(p.row(2), hp.row(0));
        assert_eq!(p.row(0), hp.row(1));
        assert_eq!(p.shape(), &[3, cfg.target_dim]);

        for name in [
            "projector.fc1.weight",
            "projector.fc1.bias",
            "projector.fc2.weight",
            "projector.fc2.bias",
        ] {
            params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let m = Bound::new(&params, &tape).unwrap();
        let h = tape.constant(Tensor::ones(vec![2, 8]));
        assert!(project_global(&m, h).unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny(true);
        let params: ModelParams<f32> = ModelParams::init(&cfg, 9).unwrap();
        let spec = MaskSpec {
            image_side: 8,
            patch_side: 4,
            block_side: 4,
            mask_ratio: 0.5,
            seed: 1,
        };
        let mask = generate_mask(&spec).unwrap();
        let img = image(&cfg, 4).cast::<f32>();
        let run = || {
            let tape = Tape::new();
            let m = Bound::new(&params, &tape).unwrap();
            let p = forward(&m, &img, &mask, true).unwrap().predictions.value();
            p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
