//! Feature-regression objectives.
//!
//! * patch loss: smooth-L1 between decoder predictions and teacher tokens,
//!   over masked slots only, divided by the masked count;
//! * global loss: smooth-L1 between the mean projected visible student token
//!   and the mean teacher token;
//! * total: `patch + λ·global`.
//!
//! Both losses reduce over feature channels with a mean by default, so their
//! scale does not depend on the teacher width. [`ChannelReduction::Sum`]
//! keeps the per-token channel sum instead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::PatchMask;
use crate::tensor::{kernels, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelReduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Smooth-L1 transition point.
    pub beta: f64,
    /// Weight of the global loss.
    pub lambda: f64,
    pub channel_reduction: ChannelReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            lambda: 0.5,
            channel_reduction: ChannelReduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("loss.beta", format!("{} must be positive", self.beta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(
                "loss.lambda",
                format!("{} must be non-negative", self.lambda),
            ));
        }
        Ok(())
    }
}

/// `0.5·x²/β` when `|x| < β`, else `|x| − 0.5·β`.
pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    kernels::smooth_l1(x, beta)
}

fn reduce<'t, T: Scalar>(elementwise: Var<'t, T>, rows: usize, how: ChannelReduction) -> Result<Var<'t, T>> {
    match how {
        ChannelReduction::Mean => elementwise.mean_all(),
        ChannelReduction::Sum => Ok(elementwise.sum_all().scale(T::one() / T::of(rows as f64))),
    }
}

/// Smooth-L1 regression of `predictions` onto `targets` over masked slots.
///
/// `predictions` and `targets` are `[N × D]` with one row per patch.
pub fn patch_loss<'t, T: Scalar>(
    predictions: Var<'t, T>,
    targets: &Tensor<T>,
    mask: &PatchMask,
    beta: f64,
    how: ChannelReduction,
) -> Result<Var<'t, T>> {
    let shape = predictions.shape();
    if shape != targets.shape() || shape.len() != 2 || shape[0] != mask.num_patches() {
        return Err(Error::Dimension(format!(
            "patch_loss: predictions {shape:?}, targets {:?}, {} mask slots",
            targets.shape(),
            mask.num_patches()
        )));
    }
    let masked = mask.masked();
    if masked.is_empty() {
        return Err(Error::DegenerateMask(
            "patch loss needs at least one masked patch".into(),
        ));
    }
    let tape = predictions.tape;
    let y = tape.constant(targets.select_rows(masked)?);
    let z = predictions.gather_rows(masked)?;
    let residual = y.sub(z)?.smooth_l1(T::of(beta))?;
    reduce(residual, masked.len(), how)
}

/// Smooth-L1 between the mean projected visible token and the mean teacher token.
///
/// `projected` holds one row per visible patch (class token excluded);
/// `targets` holds all `K` teacher tokens.
pub fn global_loss<'t, T: Scalar>(
    projected: Var<'t, T>,
    targets: &Tensor<T>,
    mask: &PatchMask,
    beta: f64,
    how: ChannelReduction,
) -> Result<Var<'t, T>> {
    let shape = projected.shape();
    let (_, dim) = targets.dims2()?;
    if shape.len() != 2 || shape[0] != mask.visible().len() || shape[1] != dim {
        return Err(Error::Dimension(format!(
            "global_loss: projected {shape:?} for {} visible slots, targets {:?}",
            mask.visible().len(),
            targets.shape()
        )));
    }
    if shape[0] == 0 {
        return Err(Error::DegenerateMask(
            "global loss needs at least one visible patch".into(),
        ));
    }
    let tape = projected.tape;
    let teacher_mean = tape.constant(targets.mean_rows()?);
    let residual = projected.mean_rows()?.sub(teacher_mean)?.smooth_l1(T::of(beta))?;
    reduce(residual, 1, how)
}

pub fn total_loss<'t, T: Scalar>(patch: Var<'t, T>, global: Var<'t, T>, lambda: f64) -> Result<Var<'t, T>> {
    patch.add(global.scale(T::of(lambda)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use proptest::prelude::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0, 2.0), 0.0);
        assert_eq!(smooth_l1(1.0, 2.0), 0.25);
        assert_eq!(smooth_l1(2.0, 2.0), 1.0);
        // quadratic branch at the boundary agrees
        assert_eq!(0.5 * 2.0 * 2.0 / 2.0, 1.0);
        assert_eq!(smooth_l1(-3.0, 2.0), 2.0);
    }

    #[test]
    fn smooth_l1_continuity_at_beta() {
        for beta in [0.5f64, 1.0, 2.0] {
            let quad = 0.5 * beta * beta / beta;
            let lin = beta - 0.5 * beta;
            assert!((quad - lin).abs() < 1e-12);
            let below = smooth_l1(beta - 1e-9, beta);
            assert!((below - smooth_l1(beta, beta)).abs() < 1e-8);
        }
    }

    #[test]
    fn patch_loss_examples() {
        let mask = PatchMask::from_grid(1, vec![true]).unwrap();
        let tape = Tape::new();
        let z = tape.param("z", mat(1, 1, &[0.0])).unwrap();
        let y = mat(1, 1, &[1.0]);
        let l = patch_loss(z, &y, &mask, 2.0, ChannelReduction::Mean).unwrap();
        assert_eq!(l.item(), 0.25);

        let mask = PatchMask::from_grid(2, vec![true, false, true, false]).unwrap();
        let y = mat(4, 2, &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let tape = Tape::new();
        let z = tape.constant(y.clone());
        assert_eq!(
            patch_loss(z, &y, &mask, 2.0, ChannelReduction::Mean).unwrap().item(),
            0.0
        );
    }

    #[test]
    fn patch_loss_ignores_visible_slots() {
        let mask = PatchMask::from_grid(2, vec![true, false, false, true]).unwrap();
        let y = mat(4, 2, &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let z1 = mat(4, 2, &[0.5, 0.1, 9., 9., 9., 9., 2., 1.]);
        let mut z2 = z1.clone();
        z2.data_mut()[2..6].copy_from_slice(&[-100., 3., 0., 42.]);
        let eval = |z: &Tensor<f64>| {
            let tape = Tape::new();
            patch_loss(tape.constant(z.clone()), &y, &mask, 2.0, ChannelReduction::Mean)
                .unwrap()
                .item()
        };
        assert_eq!(eval(&z1), eval(&z2));
    }

    #[test]
    fn patch_loss_channel_sum_variant() {
        let mask = PatchMask::from_grid(1, vec![true]).unwrap();
        let y = mat(1, 2, &[1.0, 1.0]);
        let tape = Tape::new();
        let z = tape.constant(mat(1, 2, &[0.0, 0.0]));
        assert_eq!(
            patch_loss(z, &y, &mask, 2.0, ChannelReduction::Sum).unwrap().item(),
            0.5
        );
        assert_eq!(
            patch_loss(z, &y, &mask, 2.0, ChannelReduction::Mean).unwrap().item(),
            0.25
        );
    }

    #[test]
    fn empty_index_sets_are_degenerate() {
        let tape = Tape::new();
        let all_visible = PatchMask::all_visible(1);
        let z = tape.constant(mat(1, 1, &[0.0]));
        assert!(matches!(
            patch_loss(z, &mat(1, 1, &[1.0]), &all_visible, 2.0, ChannelReduction::Mean),
            Err(Error::DegenerateMask(_))
        ));
        let all_masked = PatchMask::from_grid(1, vec![true]).unwrap();
        let p = tape.constant(Tensor::zeros(vec![0, 1]));
        assert!(matches!(
            global_loss(p, &mat(1, 1, &[1.0]), &all_masked, 2.0, ChannelReduction::Mean),
            Err(Error::DegenerateMask(_))
        ));
    }

    #[test]
    fn global_loss_examples() {
        let mask = PatchMask::from_grid(2, vec![true, false, true, false]).unwrap();
        let y = mat(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let tape = Tape::new();
        // visible mean equals teacher mean 2.5
        let p = tape.constant(mat(2, 1, &[2.0, 3.0]));
        assert_eq!(
            global_loss(p, &y, &mask, 2.0, ChannelReduction::Mean).unwrap().item(),
            0.0
        );
        // means differ by 3 -> linear branch: 3 - 1
        let p = tape.constant(mat(2, 1, &[5.0, 6.0]));
        assert_eq!(
            global_loss(p, &y, &mask, 2.0, ChannelReduction::Mean).unwrap().item(),
            2.0
        );
    }

    #[test]
    fn total_loss_examples() {
        let tape = Tape::new();
        let s = |v: f64| tape.constant(Tensor::scalar(v));
        assert_eq!(total_loss(s(0.2), s(0.4), 0.0).unwrap().item(), 0.2);
        assert!((total_loss(s(0.2), s(0.4), 0.5).unwrap().item() - 0.4).abs() < 1e-15);
        assert_eq!(total_loss(s(0.0), s(0.0), 1.0).unwrap().item(), 0.0);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig {
            beta: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            lambda: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    fn finite_diff(f: &dyn Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>) -> Vec<f64> {
        let h = 1e-5;
        (0..x.numel())
            .map(|i| {
                let (mut p, mut m) = (x.clone(), x.clone());
                p.data_mut()[i] += h;
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mask = PatchMask::from_grid(2, vec![true, false, true, true]).unwrap();
        let y = mat(4, 3, &[0.3, -1.2, 2.5, 4.0, 0.0, 1.0, -3.1, 0.7, 0.2, 1.9, -0.4, 5.5]);
        let z = mat(4, 3, &[0.1, 0.4, -0.6, 2.0, 1.0, 1.0, 0.5, 0.5, 0.5, -2.2, 0.9, 0.3]);
        let p = mat(1, 3, &[1.4, -0.2, 3.9]);
        for how in [ChannelReduction::Mean, ChannelReduction::Sum] {
            let patch = |t: &Tensor<f64>| {
                let tape = Tape::new();
                patch_loss(tape.constant(t.clone()), &y, &mask, 2.0, how)
                    .unwrap()
                    .item()
            };
            let tape = Tape::new();
            let zv = tape.param("z", z.clone()).unwrap();
            let g = tape.backward(patch_loss(zv, &y, &mask, 2.0, how).unwrap()).unwrap();
            for (a, n) in g.param("z").unwrap().data().iter().zip(finite_diff(&patch, &z)) {
                assert!((a - n).abs() <= 1e-4 * a.abs().max(n.abs()).max(1e-6));
            }

            let global = |t: &Tensor<f64>| {
                let tape = Tape::new();
                global_loss(tape.constant(t.clone()), &y, &mask, 2.0, how)
                    .unwrap()
                    .item()
            };
            let tape = Tape::new();
            let pv = tape.param("p", p.clone()).unwrap();
            let g = tape.backward(global_loss(pv, &y, &mask, 2.0, how).unwrap()).unwrap();
            for (a, n) in g.param("p").unwrap().data().iter().zip(finite_diff(&global, &p)) {
                assert!((a - n).abs() <= 1e-4 * a.abs().max(n.abs()).max(1e-6));
            }
        }
    }

    proptest! {
        #[test]
        fn smooth_l1_is_even(x in -10.0f64..10.0, beta in 0.1f64..4.0) {
            prop_assert_eq!(smooth_l1(x, beta), smooth_l1(-x, beta));
        }

        #[test]
        fn patch_loss_grows_with_residual_scale(
            resid in prop::collection::vec(-5.0f64..5.0, 6),
            c in 1.0f64..4.0,
        ) {
            let mask = PatchMask::from_grid(2, vec![true, true, false, true]).unwrap();
            let y = Tensor::zeros(vec![4, 2]);
            let mut z = vec![0.0; 8];
            for (k, &slot) in [0usize, 1, 3].iter().enumerate() {
                z[slot * 2] = resid[2 * k];
                z[slot * 2 + 1] = resid[2 * k + 1];
            }
            let eval = |scale: f64| {
                let tape = Tape::new();
                let zt = mat(4, 2, &z).map(|v| v * scale);
                patch_loss(tape.constant(zt), &y, &mask, 2.0, ChannelReduction::Mean).unwrap().item()
            };
            prop_assert!(eval(c) >= eval(1.0));
        }

        #[test]
        fn losses_are_permutation_invariant(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut rng = crate::rng::stream(seed, "perm");
            let ys: Vec<f64> = (0..8).map(|i| ((i as f64) * 1.37 + (seed % 7) as f64).sin() * 3.0).collect();
            let zs: Vec<f64> = (0..8).map(|i| ((i as f64) * 0.71).cos()).collect();
            let (y4, z4) = (mat(4, 2, &ys), mat(4, 2, &zs));
            let mask = PatchMask::from_grid(2, vec![true, false, true, true]).unwrap();
            let base = {
                let tape = Tape::new();
                patch_loss(tape.constant(z4.clone()), &y4, &mask, 2.0, ChannelReduction::Mean).unwrap().item()
            };
            // permuting masked slots jointly in y and z
            let mut order: Vec<usize> = mask.masked().to_vec();
            order.shuffle(&mut rng);
            let mut perm: Vec<usize> = (0..4).collect();
            for (&from, &to) in mask.masked().iter().zip(&order) {
                perm[to] = from;
            }
            let tape = Tape::new();
            let permuted = patch_loss(
                tape.constant(z4.select_rows(&perm).unwrap()),
                &y4.select_rows(&perm).unwrap(),
                &mask, 2.0, ChannelReduction::Mean,
            ).unwrap().item();
            prop_assert!((base - permuted).abs() < 1e-12);

            // global: permute visible projections and teacher tokens independently
            let mask = PatchMask::from_grid(2, vec![true, false, false, true]).unwrap();
            let p = mat(2, 2, &zs[..4]);
            let g0 = {
                let tape = Tape::new();
                global_loss(tape.constant(p.clone()), &y4, &mask, 2.0, ChannelReduction::Mean).unwrap().item()
            };
            let mut yperm: Vec<usize> = (0..4).collect();
            yperm.shuffle(&mut rng);
            let tape = Tape::new();
            let g1 = global_loss(
                tape.constant(p.select_rows(&[1, 0]).unwrap()),
                &y4.select_rows(&yperm).unwrap(),
                &mask, 2.0, ChannelReduction::Mean,
            ).unwrap().item();
            prop_assert!((g0 - g1).abs() < 1e-12);
        }

        #[test]
        fn global_loss_ignores_common_shift(shift in prop::collection::vec(-50.0f64..50.0, 2)) {
            let mask = PatchMask::from_grid(2, vec![true, false, true, false]).unwrap();
            let y = mat(4, 2, &[1., 2., 3., 4., 5., 6., 7., 8.]);
            let p = mat(2, 2, &[0.3, -0.7, 2.2, 1.1]);
            let shifted = |t: &Tensor<f64>| {
                let (r, c) = t.dims2().unwrap();
                Tensor::new(vec![r, c], t.data().iter().enumerate().map(|(i, v)| v + shift[i % c]).collect()).unwrap()
            };
            let eval = |p: &Tensor<f64>, y: &Tensor<f64>| {
                let tape = Tape::new();
                global_loss(tape.constant(p.clone()), y, &mask, 2.0, ChannelReduction::Mean).unwrap().item()
            };
            prop_assert!((eval(&p, &y) - eval(&shifted(&p), &shifted(&y))).abs() < 1e-9);
        }
    }
}
