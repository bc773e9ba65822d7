//! Neural encoding volume and conditional radiance decoding.
//!
//! The cost volume is aggregated by a miniature two-level 3D conv
//! encoder-decoder (channel trajectory `2*C1 -> 4*C1 -> 2*C1 -> C2`, 3x3x3
//! kernels, additive skip from the input). The resulting encoding volume is
//! sampled trilinearly at 3D points in the reference frustum and decoded by a
//! 4-layer MLP into density (softplus) and color (sigmoid), conditioned on
//! positionally-encoded point/direction and the per-view sampled pixel
//! colors and trait intensities.

use std::sync::Arc;

use crate::diff::nn::{conv3d, trilinear_gather, upsample_nearest3d};
use crate::diff::ops;
use crate::diff::params::{BoundParams, ParameterSet};
use crate::diff::{Tensor, Var};
use crate::encoder::{gaussian_tensor, CostVolume};
use crate::geometry::{project, Camera, DepthHypotheses, Vec3};
use crate::{Error, Result, Scalar};

/// Aggregated neural encoding volume with the frustum metadata that defines
/// its voxel-to-world map.
pub struct EncodingVolume<F> {
    /// `[H, W, D, C2]`
    pub data: Var<F>,
    pub reference: Camera<F>,
    pub hypotheses: DepthHypotheses<F>,
}

/// Density and color at one sample point.
#[derive(Clone, Copy, Debug)]
pub struct RadianceSample<F> {
    pub sigma: F,
    pub color: [F; 3],
}

/// Network width configuration; drives parameter initialization.
#[derive(Clone, Copy, Debug)]
pub struct FieldDims {
    pub cost_channels: usize,
    pub encoding_channels: usize,
    pub mlp_width: usize,
    pub pe_frequencies: usize,
    pub n_views: usize,
}

impl FieldDims {
    pub fn mid_channels(&self) -> usize {
        2 * self.cost_channels
    }

    /// 3 raw + 2 * freqs per coordinate.
    pub fn pe_width(&self) -> usize {
        3 + 6 * self.pe_frequencies
    }

    pub fn mlp_input_width(&self) -> usize {
        2 * self.pe_width() + self.encoding_channels + 4 * self.n_views
    }
}

/// Registers the aggregation network parameters: stride-2 encoder conv,
/// stride-1 decoder conv at half resolution, and the full-resolution output
/// conv applied after the additive skip.
pub fn init_aggregation_net<F: Scalar>(
    params: &mut ParameterSet<F>,
    dims: &FieldDims,
    rng: &mut impl rand::Rng,
) {
    let cp = dims.cost_channels;
    let cm = dims.mid_channels();
    let c2 = dims.encoding_channels;
    let convs = [
        ("unet.enc", cp, cm),
        ("unet.dec", cm, cp),
        ("unet.out", cp, c2),
    ];
    for (name, cin, cout) in convs {
        let std = (2.0 / ((cin + cout) * 27) as f64).sqrt();
        params.insert(
            format!("{name}.weight"),
            gaussian_tensor(&[cout, cin, 3, 3, 3], std, rng),
        );
        params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }
}

/// Registers the radiance MLP: 4 layers of `mlp_width`, final layer emitting
/// `[sigma_raw, r, g, b]`.
pub fn init_decoder<F: Scalar>(
    params: &mut ParameterSet<F>,
    dims: &FieldDims,
    rng: &mut impl rand::Rng,
) {
    let widths = [
        (dims.mlp_input_width(), dims.mlp_width),
        (dims.mlp_width, dims.mlp_width),
        (dims.mlp_width, dims.mlp_width),
        (dims.mlp_width, 4),
    ];
    for (layer, &(fan_in, fan_out)) in widths.iter().enumerate() {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        params.insert(
            format!("mlp.l{}.weight", layer + 1),
            gaussian_tensor(&[fan_in, fan_out], std, rng),
        );
        params.insert(format!("mlp.l{}.bias", layer + 1), Tensor::zeros(&[fan_out]));
    }
}

fn conv3d_layer<F: Scalar>(
    x: &Var<F>,
    params: &BoundParams<F>,
    name: &str,
    stride: usize,
) -> Result<Var<F>> {
    let w = params.get(&format!("{name}.weight"));
    let b = params.get(&format!("{name}.bias"));
    let cout = b.value().len();
    let y = conv3d(x, w, stride)?;
    ops::add(&y, &ops::reshape(b, vec![cout, 1, 1, 1])?)
}

/// Aggregates a cost volume into the neural encoding volume.
pub fn aggregate<F: Scalar>(
    params: &BoundParams<F>,
    cost: &CostVolume<F>,
    reference: &Camera<F>,
    hypotheses: &DepthHypotheses<F>,
) -> Result<EncodingVolume<F>> {
    let shape = cost.data.shape();
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    let p = ops::permute(&cost.data, &[3, 2, 0, 1])?; // [C, D, H, W]
    let enc = ops::softplus(&conv3d_layer(&p, params, "unet.enc", 2)?);
    let dec = ops::softplus(&conv3d_layer(&enc, params, "unet.dec", 1)?);
    let up = upsample_nearest3d(&dec, (d, h, w))?;
    let skip = ops::add(&up, &p)?;
    let out = conv3d_layer(&skip, params, "unet.out", 1)?;
    let data = ops::permute(&out, &[2, 3, 1, 0])?; // back to [H, W, D, C2]
    Ok(EncodingVolume {
        data,
        reference: *reference,
        hypotheses: hypotheses.clone(),
    })
}

/// Fractional frustum coordinates `(u, v, plane)` of world points plus an
/// in-frustum validity flag per point. Out-of-frustum coordinates are kept
/// as-is (the gather clamps); validity is consumed by the renderer.
pub struct FrustumCoords<F> {
    pub coords: Arc<Vec<[F; 3]>>,
    pub valid: Vec<bool>,
}

pub fn frustum_coords<F: Scalar>(
    reference: &Camera<F>,
    hypotheses: &DepthHypotheses<F>,
    points: &[Vec3<F>],
) -> FrustumCoords<F> {
    let (h, w) = reference.image_size;
    let d = hypotheses.len();
    let mut coords = Vec::with_capacity(points.len());
    let mut valid = Vec::with_capacity(points.len());
    for &x in points {
        match project(reference, x) {
            Ok((u, v, depth)) => {
                let p = hypotheses.fractional_index(depth);
                let ok = u >= F::zero()
                    && v >= F::zero()
                    && u <= F::cast((w - 1) as f64)
                    && v <= F::cast((h - 1) as f64)
                    && p >= F::zero()
                    && p <= F::cast((d - 1) as f64);
                coords.push([u, v, p]);
                valid.push(ok);
            }
            Err(_) => {
                coords.push([F::zero(), F::zero(), F::zero()]);
                valid.push(false);
            }
        }
    }
    FrustumCoords {
        coords: Arc::new(coords),
        valid,
    }
}

/// Trilinearly interpolates the encoding volume at frustum coordinates.
/// Returns `[n, C2]`; combine with [`FrustumCoords::valid`] downstream.
pub fn sample_encoding_batch<F: Scalar>(
    volume: &EncodingVolume<F>,
    coords: &FrustumCoords<F>,
) -> Result<Var<F>> {
    trilinear_gather(&volume.data, Arc::clone(&coords.coords))
}

/// Single-point convenience over [`sample_encoding_batch`].
pub fn sample_encoding<F: Scalar>(volume: &EncodingVolume<F>, x: Vec3<F>) -> Result<Vec<F>> {
    let coords = frustum_coords(&volume.reference, &volume.hypotheses, &[x]);
    let out = sample_encoding_batch(volume, &coords)?;
    Ok(out.value().data().to_vec())
}

/// Sinusoidal positional encoding: raw coordinates followed by
/// `sin(2^k pi x), cos(2^k pi x)` for `k = 0..freqs`. Output `[n, 3 + 6f]`.
pub fn positional_encoding<F: Scalar>(points: &[[F; 3]], freqs: usize) -> Tensor<F> {
    let n = points.len();
    let width = 3 + 6 * freqs;
    let mut out = Vec::with_capacity(n * width);
    for p in points {
        out.extend_from_slice(p);
        for k in 0..freqs {
            let scale = F::cast((1u64 << k) as f64) * F::PI();
            for &x in p {
                out.push((x * scale).sin());
            }
            for &x in p {
                out.push((x * scale).cos());
            }
        }
    }
    Tensor::from_vec(vec![n, width], out)
}

/// Inputs to a batched decode: everything except the sampled encoding is
/// constant with respect to the parameters.
pub struct DecodeInputs<F> {
    /// `[n, pe_width]` positional encoding of normalized points
    pub pe_points: Tensor<F>,
    /// `[n, pe_width]` positional encoding of unit view directions
    pub pe_dirs: Tensor<F>,
    /// `[n, 3V]` pixel colors of each source view at the point's projection
    pub view_colors: Tensor<F>,
    /// `[n, V]` trait intensities of each source view at the projection
    pub view_traits: Tensor<F>,
    /// `[n]` 1 where the point lies inside the reference frustum, else 0;
    /// outside points decode to zero density
    pub valid: Tensor<F>,
}

/// Decoded radiance for a batch of points.
pub struct DecodedBatch<F> {
    /// `[n]` nonnegative densities (zeroed outside the frustum)
    pub sigma: Var<F>,
    /// `[n, 3]` colors in [0, 1]
    pub color: Var<F>,
}

fn linear_layer<F: Scalar>(x: &Var<F>, params: &BoundParams<F>, name: &str) -> Result<Var<F>> {
    let w = params.get(&format!("{name}.weight"));
    let b = params.get(&format!("{name}.bias"));
    ops::add(&ops::matmul(x, w)?, b)
}

/// Runs the radiance MLP on a batch of samples.
pub fn decode_batch<F: Scalar>(
    params: &BoundParams<F>,
    s_feat: &Var<F>,
    inputs: &DecodeInputs<F>,
) -> Result<DecodedBatch<F>> {
    let n = s_feat.shape()[0];
    if !s_feat.value().all_finite() {
        return Err(Error::Numeric("non-finite decoder input".into()));
    }
    let graph = s_feat.graph().clone();
    let pe_x = graph.constant(inputs.pe_points.clone());
    let pe_d = graph.constant(inputs.pe_dirs.clone());
    let c_img = graph.constant(inputs.view_colors.clone());
    let c_tra = graph.constant(inputs.view_traits.clone());
    let x = ops::concat(&[&pe_x, &pe_d, s_feat, &c_img, &c_tra], 1)?;
    let h1 = ops::softplus(&linear_layer(&x, params, "mlp.l1")?);
    let h2 = ops::softplus(&linear_layer(&h1, params, "mlp.l2")?);
    let h3 = ops::softplus(&linear_layer(&h2, params, "mlp.l3")?);
    let out = linear_layer(&h3, params, "mlp.l4")?;
    let sigma_raw = ops::reshape(&ops::narrow(&out, 1, 0, 1)?, vec![n])?;
    let valid = graph.constant(inputs.valid.clone());
    let sigma = ops::mul(&ops::softplus(&sigma_raw), &valid)?;
    let color = ops::sigmoid(&ops::narrow(&out, 1, 1, 3)?);
    Ok(DecodedBatch { sigma, color })
}

/// Decodes a single sample; the scalar interface over [`decode_batch`].
#[allow(clippy::too_many_arguments)]
pub fn decode<F: Scalar>(
    params: &BoundParams<F>,
    x: Vec3<F>,
    direction: Vec3<F>,
    s_feat: &[F],
    view_colors: &[F],
    view_traits: &[F],
    pe_frequencies: usize,
    in_frustum: bool,
) -> Result<RadianceSample<F>> {
    let graph = params
        .iter()
        .next()
        .expect("decoder parameters registered")
        .1
        .graph()
        .clone();
    let s = graph.constant(Tensor::from_vec(vec![1, s_feat.len()], s_feat.to_vec()));
    let inputs = DecodeInputs {
        pe_points: positional_encoding(&[[x.x, x.y, x.z]], pe_frequencies),
        pe_dirs: positional_encoding(&[[direction.x, direction.y, direction.z]], pe_frequencies),
        view_colors: Tensor::from_vec(vec![1, view_colors.len()], view_colors.to_vec()),
        view_traits: Tensor::from_vec(vec![1, view_traits.len()], view_traits.to_vec()),
        valid: Tensor::from_vec(vec![1], vec![if in_frustum { F::one() } else { F::zero() }]),
    };
    let decoded = decode_batch(params, &s, &inputs)?;
    let c = decoded.color.value();
    Ok(RadianceSample {
        sigma: decoded.sigma.value().data()[0],
        color: [c.data()[0], c.data()[1], c.data()[2]],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::ops::sum_all;
    use crate::diff::Graph;
    use crate::geometry::Mat3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn dims() -> FieldDims {
        FieldDims {
            cost_channels: 4,
            encoding_channels: 3,
            mlp_width: 8,
            pe_frequencies: 2,
            n_views: 2,
        }
    }

    fn test_camera() -> Camera<f64> {
        let k = Mat3::new([[50.0, 0.0, 4.0], [0.0, 50.0, 3.0], [0.0, 0.0, 1.0]]);
        Camera::new(k, Mat3::identity(), Vec3::zero(), (6, 8)).unwrap()
    }

    fn rand_cost(
        g: &Graph<f64>,
        rng: &mut StdRng,
        h: usize,
        w: usize,
        d: usize,
        c: usize,
    ) -> CostVolume<f64> {
        CostVolume {
            data: g.leaf(Tensor::from_vec(
                vec![h, w, d, c],
                (0..h * w * d * c).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )),
        }
    }

    #[test]
    fn aggregate_output_shape_matches_encoding_channels() {
        let mut rng = StdRng::seed_from_u64(1);
        let d = dims();
        let mut params = ParameterSet::new();
        init_aggregation_net(&mut params, &d, &mut rng);
        let g = Graph::new();
        let bound = params.bind(&g);
        let cost = rand_cost(&g, &mut rng, 5, 6, 4, d.cost_channels);
        let hyp = DepthHypotheses::uniform(2.0, 4.0, 4).unwrap();
        let vol = aggregate(&bound, &cost, &test_camera(), &hyp).unwrap();
        assert_eq!(vol.data.shape(), vec![5, 6, 4, 3]);
    }

    #[test]
    fn aggregate_zero_final_layer_gives_zero_volume() {
        let mut rng = StdRng::seed_from_u64(2);
        let d = dims();
        let mut params = ParameterSet::new();
        init_aggregation_net(&mut params, &d, &mut rng);
        params.set(
            "unet.out.weight",
            Tensor::zeros(&[d.encoding_channels, d.cost_channels, 3, 3, 3]),
        );
        params.set("unet.out.bias", Tensor::zeros(&[d.encoding_channels]));
        let g = Graph::new();
        let bound = params.bind(&g);
        let cost = rand_cost(&g, &mut rng, 4, 4, 4, d.cost_channels);
        let hyp = DepthHypotheses::uniform(2.0, 4.0, 4).unwrap();
        let vol = aggregate(&bound, &cost, &test_camera(), &hyp).unwrap();
        assert!(vol.data.value().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn aggregate_passes_grad_check_on_micro_volume() {
        let mut rng = StdRng::seed_from_u64(3);
        let d = FieldDims {
            cost_channels: 2,
            encoding_channels: 2,
            mlp_width: 4,
            pe_frequencies: 1,
            n_views: 2,
        };
        let mut params = ParameterSet::new();
        init_aggregation_net(&mut params, &d, &mut rng);
        let cost_data = Tensor::from_vec(
            vec![4, 4, 4, 2],
            (0..128).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let cam = test_camera();
        let hyp = DepthHypotheses::uniform(2.0, 4.0, 4).unwrap();
        let report = crate::diff::grad_check(&params, 1e-5, move |g, bound| {
            let cost = CostVolume {
                data: g.constant(cost_data.clone()),
            };
            let vol = aggregate(bound, &cost, &cam, &hyp)?;
            Ok(sum_all(&ops::mul(&vol.data, &vol.data)?))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{}", report.max_rel_error);
    }

    #[test]
    fn sample_encoding_voxel_center_and_midpoint() {
        let g: Graph<f64> = Graph::new();
        let cam = test_camera();
        let hyp = DepthHypotheses::uniform(2.0, 5.0, 4).unwrap();
        let (h, w, d, c) = (6, 8, 4, 2);
        let data: Vec<f64> = (0..h * w * d * c).map(|i| i as f64).collect();
        let vol = EncodingVolume {
            data: g.constant(Tensor::from_vec(vec![h, w, d, c], data.clone())),
            reference: cam,
            hypotheses: hyp.clone(),
        };
        // a world point that projects exactly to pixel (u=3, v=2) at plane 1
        let z = hyp.values()[1];
        let x = Vec3::new((3.0 - 4.0) * z / 50.0, (2.0 - 3.0) * z / 50.0, z);
        let feat = sample_encoding(&vol, x).unwrap();
        for ch in 0..c {
            let want = data[((2 * w + 3) * d + 1) * c + ch];
            assert!((feat[ch] - want).abs() < 1e-9, "{} vs {}", feat[ch], want);
        }
        // midway between two depth-adjacent voxels: average of the two
        let z_mid = (hyp.values()[1] + hyp.values()[2]) / 2.0;
        let x = Vec3::new((3.0 - 4.0) * z_mid / 50.0, (2.0 - 3.0) * z_mid / 50.0, z_mid);
        let feat = sample_encoding(&vol, x).unwrap();
        for ch in 0..c {
            let a = data[((2 * w + 3) * d + 1) * c + ch];
            let b = data[((2 * w + 3) * d + 2) * c + ch];
            assert!((feat[ch] - 0.5 * (a + b)).abs() < 1e-9);
        }
    }

    #[test]
    fn sample_encoding_matches_eight_corner_oracle() {
        let mut rng = StdRng::seed_from_u64(4);
        let g = Graph::new();
        let cam = test_camera();
        let hyp = DepthHypotheses::uniform(2.0, 5.0, 5).unwrap();
        let (h, w, d, c) = (6, 8, 5, 3);
        let data: Vec<f64> = (0..h * w * d * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vol = EncodingVolume {
            data: g.constant(Tensor::from_vec(vec![h, w, d, c], data.clone())),
            reference: cam,
            hypotheses: hyp.clone(),
        };
        for _ in 0..30 {
            let u = rng.gen_range(0.0..(w - 1) as f64);
            let v = rng.gen_range(0.0..(h - 1) as f64);
            let p = rng.gen_range(0.0..(d - 1) as f64);
            let z = hyp.near() + (hyp.far() - hyp.near()) * p / (d - 1) as f64;
            let x = Vec3::new((u - 4.0) * z / 50.0, (v - 3.0) * z / 50.0, z);
            let feat = sample_encoding(&vol, x).unwrap();
            let (x0, y0, z0) = (u.floor() as usize, v.floor() as usize, p.floor() as usize);
            let (fx, fy, fz) = (u.fract(), v.fract(), p.fract());
            for ch in 0..c {
                let f =
                    |yy: usize, xx: usize, zz: usize| data[((yy * w + xx) * d + zz) * c + ch];
                let want = f(y0, x0, z0) * (1.0 - fx) * (1.0 - fy) * (1.0 - fz)
                    + f(y0, x0 + 1, z0) * fx * (1.0 - fy) * (1.0 - fz)
                    + f(y0 + 1, x0, z0) * (1.0 - fx) * fy * (1.0 - fz)
                    + f(y0 + 1, x0 + 1, z0) * fx * fy * (1.0 - fz)
                    + f(y0, x0, z0 + 1) * (1.0 - fx) * (1.0 - fy) * fz
                    + f(y0, x0 + 1, z0 + 1) * fx * (1.0 - fy) * fz
                    + f(y0 + 1, x0, z0 + 1) * (1.0 - fx) * fy * fz
                    + f(y0 + 1, x0 + 1, z0 + 1) * fx * fy * fz;
                assert!(
                    (feat[ch] - want).abs() <= 1e-9,
                    "channel {ch}: {} vs {want}",
                    feat[ch]
                );
            }
        }
    }

    #[test]
    fn sample_encoding_is_linear_in_volume() {
        let mut rng = StdRng::seed_from_u64(5);
        let g: Graph<f64> = Graph::new();
        let cam = test_camera();
        let hyp = DepthHypotheses::uniform(2.0, 5.0, 4).unwrap();
        let shape = [6usize, 8, 4, 2];
        let n: usize = shape.iter().product();
        let d1: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d2: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sum: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| 2.0 * a + 3.0 * b).collect();
        let mk = |data: Vec<f64>| EncodingVolume {
            data: g.constant(Tensor::from_vec(shape.to_vec(), data)),
            reference: cam,
            hypotheses: hyp.clone(),
        };
        let (v1, v2, vs) = (mk(d1), mk(d2), mk(sum));
        let x = Vec3::new(0.01, -0.02, 3.3);
        let (f1, f2, fs) = (
            sample_encoding(&v1, x).unwrap(),
            sample_encoding(&v2, x).unwrap(),
            sample_encoding(&vs, x).unwrap(),
        );
        for ch in 0..2 {
            let lin = 2.0 * f1[ch] + 3.0 * f2[ch];
            assert!((fs[ch] - lin).abs() <= 1e-12);
        }
    }

    #[test]
    fn decode_sigma_nonnegative_for_random_inputs() {
        let mut rng = StdRng::seed_from_u64(6);
        let d = dims();
        let mut params = ParameterSet::new();
        init_decoder(&mut params, &d, &mut rng);
        let g = Graph::new();
        let bound = params.bind(&g);
        for _ in 0..200 {
            let s: Vec<f64> = (0..d.encoding_channels)
                .map(|_| rng.gen_range(-5.0..5.0))
                .collect();
            let c_img: Vec<f64> = (0..3 * d.n_views).map(|_| rng.gen_range(0.0..1.0)).collect();
            let c_tra: Vec<f64> = (0..d.n_views).map(|_| rng.gen_range(0.0..1.0)).collect();
            let x = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let dir = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalized();
            let sample =
                decode(&bound, x, dir, &s, &c_img, &c_tra, d.pe_frequencies, true).unwrap();
            assert!(sample.sigma >= 0.0);
            for ch in sample.color {
                assert!((0.0..=1.0).contains(&ch));
            }
        }
    }

    #[test]
    fn decode_zero_output_layer_gives_constants() {
        let mut rng = StdRng::seed_from_u64(7);
        let d = dims();
        let mut params = ParameterSet::new();
        init_decoder(&mut params, &d, &mut rng);
        params.set("mlp.l4.weight", Tensor::zeros(&[d.mlp_width, 4]));
        params.set("mlp.l4.bias", Tensor::zeros(&[4]));
        let g = Graph::new();
        let bound = params.bind(&g);
        let softplus0 = 2.0f64.ln();
        for _ in 0..10 {
            let s: Vec<f64> = (0..d.encoding_channels)
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect();
            let c_img = vec![0.3; 3 * d.n_views];
            let c_tra = vec![0.5; d.n_views];
            let sample = decode(
                &bound,
                Vec3::new(0.1, 0.2, 0.3),
                Vec3::new(0.0, 0.0, 1.0),
                &s,
                &c_img,
                &c_tra,
                d.pe_frequencies,
                true,
            )
            .unwrap();
            assert!((sample.sigma - softplus0).abs() < 1e-12);
            for ch in sample.color {
                assert_eq!(ch, 0.5);
            }
        }
    }

    #[test]
    fn decode_is_deterministic() {
        let mut rng = StdRng::seed_from_u64(8);
        let d = dims();
        let mut params = ParameterSet::new();
        init_decoder(&mut params, &d, &mut rng);
        let g = Graph::new();
        let bound = params.bind(&g);
        let s: Vec<f64> = vec![0.5, -0.25, 0.75];
        let c_img = vec![0.2f64; 6];
        let c_tra = vec![1.0f64, 0.0];
        let run = || {
            decode(
                &bound,
                Vec3::new(0.3, -0.1, 2.0),
                Vec3::new(0.0, 0.0, 1.0),
                &s,
                &c_img,
                &c_tra,
                d.pe_frequencies,
                true,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.sigma.to_bits(), b.sigma.to_bits());
        for ch in 0..3 {
            assert_eq!(a.color[ch].to_bits(), b.color[ch].to_bits());
        }
    }

    #[test]
    fn decode_passes_grad_check_wrt_inputs_and_parameters() {
        let mut rng = StdRng::seed_from_u64(9);
        let d = FieldDims {
            cost_channels: 2,
            encoding_channels: 2,
            mlp_width: 6,
            pe_frequencies: 1,
            n_views: 2,
        };
        let mut params = ParameterSet::new();
        init_decoder(&mut params, &d, &mut rng);
        // treat the sampled encoding as a parameter so the check covers the
        // gradient with respect to the decoder input as well
        params.insert(
            "input.s",
            Tensor::from_vec(
                vec![1, 2],
                vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            ),
        );
        let pe_x = positional_encoding(&[[0.2f64, -0.3, 0.5]], d.pe_frequencies);
        let pe_d = positional_encoding(&[[0.0f64, 0.0, 1.0]], d.pe_frequencies);
        let c_img = Tensor::from_vec(vec![1, 6], vec![0.1, 0.5, 0.9, 0.2, 0.4, 0.6]);
        let c_tra = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]);
        let report = crate::diff::grad_check(&params, 1e-6, move |_, bound| {
            let inputs = DecodeInputs {
                pe_points: pe_x.clone(),
                pe_dirs: pe_d.clone(),
                view_colors: c_img.clone(),
                view_traits: c_tra.clone(),
                valid: Tensor::from_vec(vec![1], vec![1.0]),
            };
            let decoded = decode_batch(bound, bound.get("input.s"), &inputs)?;
            let s2 = ops::mul(&decoded.sigma, &decoded.sigma)?;
            let c2 = ops::mul(&decoded.color, &decoded.color)?;
            ops::add(&sum_all(&s2), &sum_all(&c2))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
    }

    #[test]
    fn encoder_to_field_composition_passes_grad_check() {
        // cost volume -> aggregation -> trilinear sample -> decode, end to end
        let mut rng = StdRng::seed_from_u64(10);
        let d = FieldDims {
            cost_channels: 2,
            encoding_channels: 2,
            mlp_width: 4,
            pe_frequencies: 1,
            n_views: 2,
        };
        let mut params = ParameterSet::new();
        init_aggregation_net(&mut params, &d, &mut rng);
        init_decoder(&mut params, &d, &mut rng);
        let cam = test_camera();
        let hyp = DepthHypotheses::uniform(2.0, 4.0, 4).unwrap();
        let cost_data = Tensor::from_vec(
            vec![6, 8, 4, 2],
            (0..6 * 8 * 4 * 2).map(|_| rng.gen_range(0.0..0.5)).collect(),
        );
        let pts = vec![
            Vec3::new(0.01, 0.0, 3.0),
            Vec3::new(-0.02, 0.01, 3.5),
            Vec3::new(0.0, -0.01, 2.6),
        ];
        let report = crate::diff::grad_check(&params, 1e-5, move |g, bound| {
            let cost = CostVolume {
                data: g.constant(cost_data.clone()),
            };
            let vol = aggregate(bound, &cost, &cam, &hyp)?;
            let fc = frustum_coords(&vol.reference, &vol.hypotheses, &pts);
            let s = sample_encoding_batch(&vol, &fc)?;
            let raw: Vec<[f64; 3]> = pts.iter().map(|p| [p.x, p.y, p.z]).collect();
            let dirs: Vec<[f64; 3]> = pts.iter().map(|_| [0.0, 0.0, 1.0]).collect();
            let inputs = DecodeInputs {
                pe_points: positional_encoding(&raw, 1),
                pe_dirs: positional_encoding(&dirs, 1),
                view_colors: Tensor::full(&[3, 6], 0.4),
                view_traits: Tensor::full(&[3, 2], 1.0),
                valid: Tensor::from_vec(
                    vec![3],
                    fc.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
                ),
            };
            let decoded = decode_batch(bound, &s, &inputs)?;
            let s2 = ops::mul(&decoded.sigma, &decoded.sigma)?;
            let c2 = ops::mul(&decoded.color, &decoded.color)?;
            ops::add(&sum_all(&s2), &sum_all(&c2))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }
}
