//! 2D feature extraction, plane-sweep feature volumes, epipolar attention,
//! and the trait-guided variance cost volume.
//!
//! Image and trait features come from two separate stride-1 CNNs. Features
//! are warped onto the reference frustum per depth plane, refined by
//! per-pixel self-attention along the depth axis and cross-attention against
//! the reference view (trait queries retrieve reference image values), and
//! reduced to a cost volume as the cross-view variance of the concatenated
//! attended features.

use std::sync::Arc;

use crate::diff::nn::{
    batched_attention, bilinear_gather, bilinear_in_bounds, conv2d, masked_view_variance,
};
use crate::diff::ops;
use crate::diff::params::{BoundParams, ParameterSet};
use crate::diff::{Tensor, Var};
use crate::geometry::{homography, Camera, DepthHypotheses, Vec3};
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Image,
    Trait,
}

impl FeatureKind {
    /// Parameter prefix of the CNN for this input kind.
    pub fn net_prefix(self) -> &'static str {
        match self {
            FeatureKind::Image => "psi",
            FeatureKind::Trait => "psihat",
        }
    }
}

/// Full-resolution 2D feature map, stored `[H, W, C]`.
pub struct FeatureMap<F> {
    pub data: Var<F>,
    pub view_index: usize,
    pub kind: FeatureKind,
}

/// Plane-sweep feature volume on the reference frustum, stored `[H, W, D, C]`.
/// `valid` holds 1 where the source sample fell inside the source image.
pub struct FeatureVolume<F> {
    pub data: Var<F>,
    pub valid: Tensor<F>,
    pub view_index: usize,
    pub kind: FeatureKind,
}

impl<F: Scalar> FeatureVolume<F> {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2], s[3])
    }
}

/// Cross-view variance volume, stored `[H, W, D, C]`.
pub struct CostVolume<F> {
    pub data: Var<F>,
}

/// Registers the parameters of one 3-layer stride-1 feature CNN
/// (`3x3` kernels, channels `in_channels -> c1 -> c1 -> c1`, linear last
/// layer). Weights are Glorot-normal, biases zero.
pub fn init_feature_net<F: Scalar>(
    params: &mut ParameterSet<F>,
    kind: FeatureKind,
    in_channels: usize,
    c1: usize,
    rng: &mut impl rand::Rng,
) {
    let prefix = kind.net_prefix();
    let chans = [(in_channels, c1), (c1, c1), (c1, c1)];
    for (layer, &(cin, cout)) in chans.iter().enumerate() {
        let std = (2.0 / ((cin + cout) * 9) as f64).sqrt();
        params.insert(
            format!("{prefix}.conv{}.weight", layer + 1),
            gaussian_tensor(&[cout, cin, 3, 3], std, rng),
        );
        params.insert(
            format!("{prefix}.conv{}.bias", layer + 1),
            Tensor::zeros(&[cout]),
        );
    }
}

pub(crate) fn gaussian_tensor<F: Scalar>(
    shape: &[usize],
    std: f64,
    rng: &mut impl rand::Rng,
) -> Tensor<F> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0f64, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| F::cast(normal.sample(rng))).collect();
    Tensor::from_vec(shape.to_vec(), data)
}

fn conv_layer<F: Scalar>(
    x: &Var<F>,
    params: &BoundParams<F>,
    prefix: &str,
    layer: usize,
) -> Result<Var<F>> {
    let w = params.get(&format!("{prefix}.conv{layer}.weight"));
    let b = params.get(&format!("{prefix}.conv{layer}.bias"));
    let cout = b.value().len();
    let y = conv2d(x, w)?;
    ops::add(&y, &ops::reshape(b, vec![cout, 1, 1])?)
}

/// Extracts `[H, W, C1]` features from an `[H, W, Cin]` input through the CNN
/// selected by `kind`. The two inner activations are softplus; the last layer
/// is linear.
pub fn extract_features<F: Scalar>(
    params: &BoundParams<F>,
    image: &Tensor<F>,
    view_index: usize,
    kind: FeatureKind,
    expected_hw: (usize, usize),
) -> Result<FeatureMap<F>> {
    if image.ndim() != 3 {
        return Err(Error::Config(format!(
            "feature input must be [H, W, C], got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if (h, w) != expected_hw {
        return Err(Error::Config(format!(
            "input size ({h}, {w}) does not match configured ({}, {})",
            expected_hw.0, expected_hw.1
        )));
    }
    let prefix = kind.net_prefix();
    let graph = params.get(&format!("{prefix}.conv1.weight")).graph().clone();
    let x = graph.constant(image.clone());
    let x = ops::permute(&x, &[2, 0, 1])?; // [Cin, H, W]
    let h1 = ops::softplus(&conv_layer(&x, params, prefix, 1)?);
    let h2 = ops::softplus(&conv_layer(&h1, params, prefix, 2)?);
    let h3 = conv_layer(&h2, params, prefix, 3)?;
    let data = ops::permute(&h3, &[1, 2, 0])?; // [H, W, C1]
    Ok(FeatureMap {
        data,
        view_index,
        kind,
    })
}

/// Trait-input flavor of [`extract_features`]; uses the separate trait CNN.
pub fn extract_trait_features<F: Scalar>(
    params: &BoundParams<F>,
    trait_image: &Tensor<F>,
    view_index: usize,
    expected_hw: (usize, usize),
) -> Result<FeatureMap<F>> {
    extract_features(params, trait_image, view_index, FeatureKind::Trait, expected_hw)
}

/// Precomputed warp coordinates of one source view onto the reference
/// frustum: for each reference pixel and depth plane, the source-pixel
/// position and whether it falls inside the source image. Geometry only,
/// so it can be cached across training steps.
pub struct WarpGrid<F> {
    pub coords: Arc<Vec<[F; 2]>>,
    /// 1 inside the source frustum, 0 outside; shape `[H, W, D]`.
    pub valid: Tensor<F>,
    pub height: usize,
    pub width: usize,
    pub depths: usize,
}

pub fn warp_grid<F: Scalar>(
    src: &Camera<F>,
    reference: &Camera<F>,
    hyp: &DepthHypotheses<F>,
) -> Result<WarpGrid<F>> {
    let (h, w) = reference.image_size;
    let (sh, sw) = src.image_size;
    let d = hyp.len();
    let n1 = crate::geometry::default_plane_normal::<F>();
    let mut coords = Vec::with_capacity(h * w * d);
    let mut valid = vec![F::zero(); h * w * d];
    let homs: Vec<_> = hyp
        .values()
        .iter()
        .map(|&z| homography(src, reference, z, n1))
        .collect::<Result<Vec<_>>>()?;
    for v in 0..h {
        for u in 0..w {
            let base = (v * w + u) * d;
            for (zi, hm) in homs.iter().enumerate() {
                let p = hm.mul_vec(Vec3::new(F::cast(u as f64), F::cast(v as f64), F::one()));
                let (su, sv) = (p.x / p.z, p.y / p.z);
                coords.push([su, sv]);
                if p.z > F::zero() && bilinear_in_bounds(su, sv, sh, sw) {
                    valid[base + zi] = F::one();
                }
            }
        }
    }
    Ok(WarpGrid {
        coords: Arc::new(coords),
        valid: Tensor::from_vec(vec![h, w, d], valid),
        height: h,
        width: w,
        depths: d,
    })
}

/// Warps a source-view feature map onto the reference frustum by bilinear
/// sampling at each depth plane's homography image. Out-of-frustum samples
/// hold zero and are marked invalid.
pub fn warp_feature_volume_with_grid<F: Scalar>(
    fmap: &FeatureMap<F>,
    grid: &WarpGrid<F>,
) -> Result<FeatureVolume<F>> {
    let c = fmap.data.shape()[2];
    let gathered = bilinear_gather(&fmap.data, Arc::clone(&grid.coords), F::zero())?;
    let data = ops::reshape(&gathered, vec![grid.height, grid.width, grid.depths, c])?;
    Ok(FeatureVolume {
        data,
        valid: grid.valid.clone(),
        view_index: fmap.view_index,
        kind: fmap.kind,
    })
}

/// Convenience wrapper building the warp grid on the fly.
pub fn warp_feature_volume<F: Scalar>(
    fmap: &FeatureMap<F>,
    src: &Camera<F>,
    reference: &Camera<F>,
    hyp: &DepthHypotheses<F>,
) -> Result<FeatureVolume<F>> {
    let grid = warp_grid(src, reference, hyp)?;
    warp_feature_volume_with_grid(fmap, &grid)
}

/// Attention `softmax(Q Kᵀ) V` for a single query/key/value set, composed
/// from matmul and softmax (no logit scaling).
pub fn attention<F: Scalar>(q: &Var<F>, k: &Var<F>, v: &Var<F>) -> Result<Var<F>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::Shape("attention operands must be 2-D".into()));
    }
    if ks[0] == 0 {
        return Err(Error::DegenerateAttention("empty key set".into()));
    }
    if qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::Shape(format!(
            "attention shape mismatch: Q {qs:?}, K {ks:?}, V {vs:?}"
        )));
    }
    let kt = ops::permute(k, &[1, 0])?;
    let logits = ops::matmul(q, &kt)?;
    let weights = ops::softmax_axis(&logits, 1)?;
    ops::matmul(&weights, v)
}

fn volume_as_batched<F: Scalar>(vol: &FeatureVolume<F>) -> Result<Var<F>> {
    let (h, w, d, c) = vol.dims();
    ops::reshape(&vol.data, vec![h * w, d, c])
}

/// Per-pixel self-attention over the depth axis: each `[D, C]` epipolar slice
/// attends to itself.
pub fn epipolar_self_attention<F: Scalar>(vol: &FeatureVolume<F>) -> Result<FeatureVolume<F>> {
    let (h, w, d, c) = vol.dims();
    let b = volume_as_batched(vol)?;
    let out = batched_attention(&b, &b, &b)?;
    Ok(FeatureVolume {
        data: ops::reshape(&out, vec![h, w, d, c])?,
        valid: vol.valid.clone(),
        view_index: vol.view_index,
        kind: vol.kind,
    })
}

/// Cross-attention against the reference view. Image features on view i query
/// the reference image features; trait features query the reference trait
/// features but retrieve reference *image* values. For the reference view
/// itself the formulas reduce to additional self-attention.
pub fn epipolar_cross_attention<F: Scalar>(
    src_self: &FeatureVolume<F>,
    ref_self: &FeatureVolume<F>,
    src_trait_self: &FeatureVolume<F>,
    ref_trait_self: &FeatureVolume<F>,
) -> Result<(FeatureVolume<F>, FeatureVolume<F>)> {
    let (h, w, d, c) = src_self.dims();
    let (th, tw, td, tc) = src_trait_self.dims();
    if ref_self.dims() != (h, w, d, c)
        || ref_trait_self.dims() != (th, tw, td, tc)
        || (th, tw, td) != (h, w, d)
    {
        return Err(Error::Shape(
            "cross-attention volumes must share spatial dims, with matching channels per kind"
                .into(),
        ));
    }
    let q_img = volume_as_batched(src_self)?;
    let kv_img = volume_as_batched(ref_self)?;
    let q_tra = volume_as_batched(src_trait_self)?;
    let k_tra = volume_as_batched(ref_trait_self)?;

    let e = batched_attention(&q_img, &kv_img, &kv_img)?;
    let e_hat = batched_attention(&q_tra, &k_tra, &kv_img)?;
    let wrap = |data: Var<F>, kind: FeatureKind| -> Result<FeatureVolume<F>> {
        Ok(FeatureVolume {
            data: ops::reshape(&data, vec![h, w, d, c])?,
            valid: src_self.valid.clone(),
            view_index: src_self.view_index,
            kind,
        })
    };
    Ok((wrap(e, FeatureKind::Image)?, wrap(e_hat, FeatureKind::Trait)?))
}

/// Trait-guided cost volume: per `(u, v, z, channel)` population variance
/// across views of the concatenated attended image+trait features.
pub fn build_cost_volume<F: Scalar>(
    attended: &[(FeatureVolume<F>, FeatureVolume<F>)],
) -> Result<CostVolume<F>> {
    if attended.len() < 2 {
        return Err(Error::InsufficientViews(attended.len()));
    }
    let mut views = Vec::with_capacity(attended.len());
    let mut masks = Vec::with_capacity(attended.len());
    for (e, e_hat) in attended {
        views.push(ops::concat(&[&e.data, &e_hat.data], 3)?);
        masks.push(e.valid.clone());
    }
    Ok(CostVolume {
        data: masked_view_variance(&views, &masks)?,
    })
}

/// Variance cost volume over raw warped image features (no attention, no
/// trait guidance); the ablation baseline.
pub fn build_cost_volume_unguided<F: Scalar>(
    volumes: &[FeatureVolume<F>],
) -> Result<CostVolume<F>> {
    if volumes.len() < 2 {
        return Err(Error::InsufficientViews(volumes.len()));
    }
    let views: Vec<Var<F>> = volumes.iter().map(|v| v.data.clone()).collect();
    let masks: Vec<Tensor<F>> = volumes.iter().map(|v| v.valid.clone()).collect();
    Ok(CostVolume {
        data: masked_view_variance(&views, &masks)?,
    })
}
