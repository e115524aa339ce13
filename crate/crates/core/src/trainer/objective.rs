use crate::error::Result;
use crate::losses::{global_loss, patch_loss, total_loss, LossConfig};
use crate::masking::PatchMask;
use crate::model::{decode, encode_visible, forward, patch_embed, Bound};
use crate::tensor::{Scalar, Tensor, Var};

/// Which per-sample objective a training step evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepPath {
    /// Patch loss on aggregated features plus the weighted global loss.
    #[default]
    Full,
    /// Last encoder layer straight into the decoder, patch loss only. It
    /// shares no aggregation or projector code with [`StepPath::Full`].
    Baseline,
}

pub struct SampleLoss<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub patch: Var<'t, T>,
    pub global: Option<Var<'t, T>>,
}

/// Loss of one image under `path`. With `λ = 0` the global branch is not evaluated.
pub fn sample_loss<'t, T: Scalar>(
    m: &Bound<'t, T>,
    image: &Tensor<T>,
    targets: &Tensor<T>,
    mask: &PatchMask,
    loss: &LossConfig,
    path: StepPath,
) -> Result<SampleLoss<'t, T>> {
    match path {
        StepPath::Full => {
            let with_global = loss.lambda > 0.0;
            let out = forward(m, image, mask, with_global)?;
            let patch = patch_loss(out.predictions, targets, mask, loss.beta, loss.channel_reduction)?;
            match out.projected {
                Some(p) => {
                    let global = global_loss(p, targets, mask, loss.beta, loss.channel_reduction)?;
                    Ok(SampleLoss {
                        total: total_loss(patch, global, loss.lambda)?,
                        patch,
                        global: Some(global),
                    })
                }
                None => Ok(SampleLoss {
                    total: patch,
                    patch,
                    global: None,
                }),
            }
        }
        StepPath::Baseline => {
            let tokens = patch_embed(m, image)?;
            let encoded = encode_visible(m, tokens, mask)?;
            let predictions = decode(m, encoded.last(), mask)?;
            let patch = patch_loss(predictions, targets, mask, loss.beta, loss.channel_reduction)?;
            Ok(SampleLoss {
                total: patch,
                patch,
                global: None,
            })
        }
    }
}
