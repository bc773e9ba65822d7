//! Cameras, rays, projection, and plane-sweep homographies.
//!
//! Extrinsics follow the world-to-camera convention: a world point `X` maps
//! to camera coordinates `x = R X + t`, and the camera center is `-Rᵀ t`.
//! Pixel coordinates are `(u, v)` with `u` along image columns and `v` along
//! rows; depth is the camera-frame `z` coordinate. All operations are pure.

use crate::{Error, Result, Scalar};

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Fixed-size 3-vector used by the geometry layer.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Vec3<F> {
    pub x: F,
    pub y: F,
    pub z: F,
}

impl<F: Scalar> Vec3<F> {
    pub fn new(x: F, y: F, z: F) -> Self {
        Vec3 { x, y, z }
    }

    pub fn zero() -> Self {
        Vec3::new(F::zero(), F::zero(), F::zero())
    }

    pub fn add(self, o: Self) -> Self {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Self) -> Self {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: F) -> Self {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Self) -> F {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> F {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        self.scale(F::one() / n)
    }
}

/// Row-major 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3<F> {
    pub m: [[F; 3]; 3],
}

impl<F: Scalar> Mat3<F> {
    pub fn new(m: [[F; 3]; 3]) -> Self {
        Mat3 { m }
    }

    pub fn identity() -> Self {
        let o = F::one();
        let z = F::zero();
        Mat3::new([[o, z, z], [z, o, z], [z, z, o]])
    }

    pub fn from_rows(r0: Vec3<F>, r1: Vec3<F>, r2: Vec3<F>) -> Self {
        Mat3::new([
            [r0.x, r0.y, r0.z],
            [r1.x, r1.y, r1.z],
            [r2.x, r2.y, r2.z],
        ])
    }

    /// Builds from a row-major slice of 9 values.
    pub fn from_row_major(v: &[F]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::Shape(format!("expected 9 entries, got {}", v.len())));
        }
        Ok(Mat3::new([
            [v[0], v[1], v[2]],
            [v[3], v[4], v[5]],
            [v[6], v[7], v[8]],
        ]))
    }

    pub fn to_row_major(&self) -> [F; 9] {
        let m = &self.m;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    pub fn transpose(&self) -> Self {
        let m = &self.m;
        Mat3::new([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mat_mul(&self, o: &Self) -> Self {
        let mut r = [[F::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = F::zero();
                for k in 0..3 {
                    acc = acc + self.m[i][k] * o.m[k][j];
                }
                r[i][j] = acc;
            }
        }
        Mat3::new(r)
    }

    pub fn mul_vec(&self, v: Vec3<F>) -> Vec3<F> {
        Vec3::new(
            self.m[0][0] * v.x + self.m[0][1] * v.y + self.m[0][2] * v.z,
            self.m[1][0] * v.x + self.m[1][1] * v.y + self.m[1][2] * v.z,
            self.m[2][0] * v.x + self.m[2][1] * v.y + self.m[2][2] * v.z,
        )
    }

    pub fn add_mat(&self, o: &Self) -> Self {
        let mut r = [[F::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = self.m[i][j] + o.m[i][j];
            }
        }
        Mat3::new(r)
    }

    pub fn scale(&self, s: F) -> Self {
        let mut r = [[F::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = self.m[i][j] * s;
            }
        }
        Mat3::new(r)
    }

    /// Outer product `a bᵀ`.
    pub fn outer(a: Vec3<F>, b: Vec3<F>) -> Self {
        Mat3::new([
            [a.x * b.x, a.x * b.y, a.x * b.z],
            [a.y * b.x, a.y * b.y, a.y * b.z],
            [a.z * b.x, a.z * b.y, a.z * b.z],
        ])
    }

    pub fn det(&self) -> F {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Inverse via the adjugate; fails on (near-)singular input.
    pub fn inverse(&self) -> Result<Self> {
        let m = &self.m;
        let det = self.det();
        if det.abs() <= F::cast(1e-300) || !det.is_finite() {
            return Err(Error::InvalidCamera("singular 3x3 matrix".into()));
        }
        let inv_det = F::one() / det;
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        let mut r = [[F::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = adj[i][j] * inv_det;
            }
        }
        Ok(Mat3::new(r))
    }
}

/// Pinhole camera with world-to-camera extrinsics.
#[derive(Clone, Copy, Debug)]
pub struct Camera<F> {
    intrinsics: Mat3<F>,
    rotation: Mat3<F>,
    translation: Vec3<F>,
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
}

impl<F: Scalar> Camera<F> {
    /// Validates the intrinsic and rotation invariants before construction:
    /// intrinsics upper-triangular with positive focal entries, rotation
    /// orthonormal with determinant +1 (both to 1e-9).
    pub fn new(
        intrinsics: Mat3<F>,
        rotation: Mat3<F>,
        translation: Vec3<F>,
        image_size: (usize, usize),
    ) -> Result<Self> {
        let tol = F::cast(ORTHONORMAL_TOL);
        let k = &intrinsics.m;
        if k[1][0].abs() > tol || k[2][0].abs() > tol || k[2][1].abs() > tol {
            return Err(Error::InvalidCamera(
                "intrinsic matrix must be upper-triangular".into(),
            ));
        }
        if k[0][0] <= F::zero() || k[1][1] <= F::zero() {
            return Err(Error::InvalidCamera(
                "focal entries must be positive".into(),
            ));
        }
        let rtr = rotation.transpose().mat_mul(&rotation);
        let eye = Mat3::identity();
        for i in 0..3 {
            for j in 0..3 {
                if (rtr.m[i][j] - eye.m[i][j]).abs() > tol {
                    return Err(Error::InvalidCamera("rotation is not orthonormal".into()));
                }
            }
        }
        if (rotation.det() - F::one()).abs() > tol {
            return Err(Error::InvalidCamera(
                "rotation determinant must be +1".into(),
            ));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::InvalidCamera("image size must be nonzero".into()));
        }
        Ok(Camera {
            intrinsics,
            rotation,
            translation,
            image_size,
        })
    }

    pub fn intrinsics(&self) -> &Mat3<F> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Mat3<F> {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3<F> {
        self.translation
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vec3<F> {
        self.rotation
            .transpose()
            .mul_vec(self.translation)
            .scale(-F::one())
    }

    /// Camera optical axis (+z of the camera frame) in world coordinates.
    pub fn optical_axis(&self) -> Vec3<F> {
        // third row of R is the camera z axis expressed in world coords
        Vec3::new(self.rotation.m[2][0], self.rotation.m[2][1], self.rotation.m[2][2])
    }
}

/// Ray through a pixel, parameterized as `origin + t * direction`.
#[derive(Clone, Copy, Debug)]
pub struct Ray<F> {
    pub origin: Vec3<F>,
    pub direction: Vec3<F>,
    pub near: F,
    pub far: F,
}

/// Ordered depth-plane values swept from near to far.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthHypotheses<F> {
    values: Vec<F>,
}

impl<F: Scalar> DepthHypotheses<F> {
    /// `n` uniformly spaced values inclusive of both endpoints.
    pub fn uniform(near: F, far: F, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidCount(format!(
                "need at least 2 depth hypotheses, got {n}"
            )));
        }
        if !(near < far) {
            return Err(Error::InvalidRange(format!(
                "near ({near}) must be less than far ({far})"
            )));
        }
        let span = far - near;
        let denom = F::cast((n - 1) as f64);
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            values.push(near + span * F::cast(i as f64) / denom);
        }
        values[0] = near;
        values[n - 1] = far;
        Ok(DepthHypotheses { values })
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn near(&self) -> F {
        self.values[0]
    }

    pub fn far(&self) -> F {
        *self.values.last().unwrap()
    }

    pub fn spacing(&self) -> F {
        (self.far() - self.near()) / F::cast((self.values.len() - 1) as f64)
    }

    /// Fractional plane index of camera-frame depth `z`; exact inverse of the
    /// uniform spacing. Values outside `[0, n-1]` indicate out-of-range depth.
    pub fn fractional_index(&self, z: F) -> F {
        (z - self.near()) / (self.far() - self.near()) * F::cast((self.values.len() - 1) as f64)
    }
}

/// Plane-induced homography mapping reference pixels to source pixels.
///
/// For the fronto-parallel plane `n1ᵀ x = z` in the reference camera frame,
/// returns `H = K_s (R_s R_rᵀ + (t_s − R_s R_rᵀ t_r) n1ᵀ / z) K_r⁻¹`, so a
/// reference pixel `[u, v, 1]ᵀ` of a 3D point on the plane maps to its
/// projection in the source view.
pub fn homography<F: Scalar>(
    src: &Camera<F>,
    reference: &Camera<F>,
    z: F,
    n1: Vec3<F>,
) -> Result<Mat3<F>> {
    if z <= F::zero() {
        return Err(Error::InvalidRange(format!(
            "plane depth must be positive, got {z}"
        )));
    }
    let k_ref_inv = reference.intrinsics.inverse()?;
    let r_rel = src.rotation.mat_mul(&reference.rotation.transpose());
    let t_term = src.translation.sub(r_rel.mul_vec(reference.translation));
    let plane = Mat3::outer(t_term, n1).scale(F::one() / z);
    let h = src
        .intrinsics
        .mat_mul(&r_rel.add_mat(&plane))
        .mat_mul(&k_ref_inv);
    Ok(h)
}

/// Applies a homography to pixel `(u, v)`, returning the mapped pixel.
pub fn apply_homography<F: Scalar>(h: &Mat3<F>, u: F, v: F) -> (F, F) {
    let p = h.mul_vec(Vec3::new(u, v, F::one()));
    (p.x / p.z, p.y / p.z)
}

/// Back-projects pixel `(u, v)` into a world-frame ray with unit direction.
pub fn ray_for_pixel<F: Scalar>(
    cam: &Camera<F>,
    u: F,
    v: F,
    near: F,
    far: F,
) -> Result<Ray<F>> {
    if !(near < far) {
        return Err(Error::InvalidRange(format!(
            "near ({near}) must be less than far ({far})"
        )));
    }
    let k_inv = cam.intrinsics.inverse()?;
    let dir_cam = k_inv.mul_vec(Vec3::new(u, v, F::one()));
    let dir_world = cam.rotation.transpose().mul_vec(dir_cam).normalized();
    Ok(Ray {
        origin: cam.center(),
        direction: dir_world,
        near,
        far,
    })
}

/// Perspective projection of world point `x`, returning `(u, v, depth)` with
/// depth measured along the camera z axis.
pub fn project<F: Scalar>(cam: &Camera<F>, x: Vec3<F>) -> Result<(F, F, F)> {
    let xc = cam.rotation.mul_vec(x).add(cam.translation);
    if xc.z <= F::zero() {
        return Err(Error::BehindCamera(xc.z.to_f64_lossy()));
    }
    let p = cam.intrinsics.mul_vec(xc);
    Ok((p.x / p.z, p.y / p.z, xc.z))
}

/// Uniform depth hypotheses over `[near, far]`.
pub fn depth_hypotheses<F: Scalar>(near: F, far: F, n: usize) -> Result<DepthHypotheses<F>> {
    DepthHypotheses::uniform(near, far, n)
}

/// Default plane normal for the fronto-parallel sweep: the reference optical
/// axis expressed in the reference camera frame.
pub fn default_plane_normal<F: Scalar>() -> Vec3<F> {
    Vec3::new(F::zero(), F::zero(), F::one())
}
