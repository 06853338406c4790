//! Training objectives: reconstruction, adversarial, cycle, content
//! preservation, perceptual distance and mask supervision, plus the
//! weighted total used by the trainer.
//!
//! Every loss is built on a [`Graph`] and returns a scalar [`Var`], so the
//! same code path serves training (f32) and finite-difference audits (f64).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Per-iteration loss values logged during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub iteration: u64,
    pub adv: f64,
    pub cyc: f64,
    pub pre: f64,
    pub vgg: f64,
    pub mpn: f64,
    pub total: f64,
}

impl LossReport {
    pub fn csv_header() -> &'static str {
        "iteration,adv,cyc,pre,vgg,mpn,total"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.iteration, self.adv, self.cyc, self.pre, self.vgg, self.mpn, self.total
        )
    }
}

/// Weights of the non-adversarial terms in the total objective, one per
/// reported column: cycle, perceptual and content preservation.
#[derive(Debug, Clone, Copy)]
pub struct LambdaConfig {
    pub cyc: f64,
    pub vgg: f64,
    pub pre: f64,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        LambdaConfig { cyc: 10.0, vgg: 10.0, pre: 10.0 }
    }
}

/// Mean absolute difference over every element.
pub fn l1_loss<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean_all(d)
}

/// Mean of |a - b| weighted by a single-channel mask (N,1,H,W).
pub fn masked_l1_loss<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, mask: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    let d = g.mul_bcast_c(d, mask);
    g.mean_all(d)
}

/// Warp supervision for transformer pretraining: the warped garment must
/// reproduce the person's garment region and decay to the mid-gray
/// padding value 0 everywhere else.
pub fn warp_reconstruction_loss<T: Scalar>(
    g: &mut Graph<T>,
    warped: Var,
    person: Var,
    clothes_mask: Var,
) -> Var {
    let target = g.mul_bcast_c(person, clothes_mask);
    l1_loss(g, warped, target)
}

/// Discriminator objective in the saturating softplus form:
/// `mean softplus(-real) + mean_over_sources softplus(fake)`.
/// All-zero logits give exactly `2 ln 2`.
pub fn discriminator_loss<T: Scalar>(g: &mut Graph<T>, real: Var, fakes: &[Var]) -> Var {
    let nr = g.scale(real, -1.0);
    let sp = g.softplus(nr);
    let mut total = g.mean_all(sp);
    let weight = 1.0 / fakes.len() as f64;
    for &f in fakes {
        let sp = g.softplus(f);
        let m = g.mean_all(sp);
        let m = g.scale(m, weight);
        total = g.add(total, m);
    }
    total
}

/// Generator-side adversarial objective: `sum_i mean softplus(-fake_i)`.
pub fn generator_adversarial_loss<T: Scalar>(g: &mut Graph<T>, fakes: &[Var]) -> Var {
    let mut total: Option<Var> = None;
    for &f in fakes {
        let nf = g.scale(f, -1.0);
        let sp = g.softplus(nf);
        let m = g.mean_all(sp);
        total = Some(match total {
            Some(t) => g.add(t, m),
            None => m,
        });
    }
    total.expect("at least one fake logit map")
}

/// The three adversarial scalars of one cycle iteration.
pub struct AdversarialLosses {
    /// Non-saturating generator term over all four generated images.
    pub generator: Var,
    /// Person discriminator: real person against the two generated people.
    pub disc_person: Var,
    /// Skin discriminator: real skin against the two synthesized skins.
    pub disc_skin: Var,
}

/// Adversarial objectives from raw score maps. `tryon` and `restored` are
/// person-discriminator scores of the two generated images, `skin_tryon`
/// and `skin_restored` the skin-discriminator scores of the two
/// synthesized skins; the real scores anchor each discriminator.
pub fn adversarial_loss<T: Scalar>(
    g: &mut Graph<T>,
    tryon: Var,
    restored: Var,
    skin_tryon: Var,
    skin_restored: Var,
    real_person: Var,
    real_skin: Var,
) -> AdversarialLosses {
    AdversarialLosses {
        generator: generator_adversarial_loss(g, &[tryon, restored, skin_tryon, skin_restored]),
        disc_person: discriminator_loss(g, real_person, &[tryon, restored]),
        disc_skin: discriminator_loss(g, real_skin, &[skin_tryon, skin_restored]),
    }
}

/// Round-trip consistency: restoring the original garment must reproduce
/// both the person image and its skin image.
pub fn cycle_loss<T: Scalar>(
    g: &mut Graph<T>,
    restored: Var,
    person: Var,
    restored_skin: Var,
    skin: Var,
) -> Var {
    let i = l1_loss(g, restored, person);
    let s = l1_loss(g, restored_skin, skin);
    g.add(i, s)
}

/// Penalizes changes outside the clothes and skin regions in both the
/// try-on image and the restored image. The free region is
/// `clamp(1 - m_skin - m_clothes, 0, 1)` from the soft masks.
pub fn content_preserving_loss<T: Scalar>(
    g: &mut Graph<T>,
    tryon: Var,
    restored: Var,
    person: Var,
    mask_skin: Var,
    mask_clothes: Var,
) -> Var {
    let occupied = g.add(mask_skin, mask_clothes);
    let neg = g.scale(occupied, -1.0);
    let free = g.add_const(neg, 1.0);
    let free = g.clamp01(free);
    let a = masked_l1_loss(g, tryon, person, free);
    let b = masked_l1_loss(g, restored, person, free);
    g.add(a, b)
}

/// Multi-level feature extractor for the perceptual distance.
pub trait PerceptualExtractor<T: Scalar> {
    /// Fixed (non-trainable) feature maps at increasing depth.
    fn levels(&self, g: &mut Graph<T>, image: Var) -> Vec<Var>;
    /// Stable identifier recorded in logs and reports.
    fn name(&self) -> &str;
}

/// Deterministic random-convolution feature stack: three stride-2
/// convolutions with fixed Gaussian weights and leaky activations. A
/// drop-in stand-in for a pretrained perceptual network in environments
/// without one; distances it induces still separate structure well.
pub struct RandomConvExtractor<T: Scalar> {
    weights: Vec<Tensor<T>>,
    name: String,
}

impl<T: Scalar> RandomConvExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let chans = [3usize, 8, 16, 32];
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x7065_7263));
        let mut weights = Vec::new();
        for lvl in 0..3 {
            let (ic, oc) = (chans[lvl], chans[lvl + 1]);
            let std = (2.0 / (ic as f64 * 9.0)).sqrt();
            let len = oc * ic * 9;
            let data: Vec<T> = (0..len)
                .map(|_| T::from_f64(crate::nets::gaussian_sample(&mut rng) * std))
                .collect();
            weights.push(Tensor::from_vec(&[oc, ic, 3, 3], data));
        }
        RandomConvExtractor { weights, name: format!("random-conv-v1:{seed}") }
    }
}

impl<T: Scalar> PerceptualExtractor<T> for RandomConvExtractor<T> {
    fn levels(&self, g: &mut Graph<T>, image: Var) -> Vec<Var> {
        let mut out = Vec::new();
        let mut cur = image;
        for w in &self.weights {
            let wv = g.leaf(w.clone());
            cur = g.conv3(cur, wv, 2);
            cur = g.leaky_relu(cur, 0.2);
            out.push(cur);
        }
        out
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// Feature-space supervision tying each pass's warped garment to the
/// clothes region of the image wearing it: per-level mean absolute
/// feature difference between the warped garment and the mask-times-image
/// product, both passes, summed over levels (each level normalized by its
/// own element count, batch included).
#[allow(clippy::too_many_arguments)]
pub fn perceptual_loss<T: Scalar>(
    g: &mut Graph<T>,
    extractor: &dyn PerceptualExtractor<T>,
    warped_target: Var,
    tryon: Var,
    tryon_mask_clothes: Var,
    warped_original: Var,
    restored: Var,
    restored_mask_clothes: Var,
) -> Var {
    let masked_tryon = g.mul_bcast_c(tryon, tryon_mask_clothes);
    let masked_restored = g.mul_bcast_c(restored, restored_mask_clothes);
    let mut total: Option<Var> = None;
    for (warped, masked) in [(warped_target, masked_tryon), (warped_original, masked_restored)] {
        let lw = extractor.levels(g, warped);
        let lm = extractor.levels(g, masked);
        assert_eq!(lw.len(), lm.len());
        for (&fw, &fm) in lw.iter().zip(&lm) {
            let term = l1_loss(g, fw, fm);
            total = Some(match total {
                Some(t) => g.add(t, term),
                None => term,
            });
        }
    }
    total.expect("extractor produced no levels")
}

/// Supervision for the mask network: L1 to the reference clothes and
/// skin masks, summed over the two channels.
pub fn mask_supervision_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred_clothes: Var,
    pred_skin: Var,
    ref_clothes: Var,
    ref_skin: Var,
) -> Var {
    let c = l1_loss(g, pred_clothes, ref_clothes);
    let s = l1_loss(g, pred_skin, ref_skin);
    g.add(c, s)
}

/// Weighted total: `adv + λ_cyc·cyc + λ_vgg·vgg + λ_pre·pre`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    adv: Var,
    cyc: Var,
    pre: Var,
    vgg: Var,
    lambdas: &LambdaConfig,
) -> Var {
    let cyc = g.scale(cyc, lambdas.cyc);
    let vgg = g.scale(vgg, lambdas.vgg);
    let pre = g.scale(pre, lambdas.pre);
    let t = g.add(adv, cyc);
    let t = g.add(t, vgg);
    g.add(t, pre)
}
