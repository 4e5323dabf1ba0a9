//! Random flips, rotations and zooms of matched SA/LA training slices.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One 2-D image slice and its label slice, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSlice {
    pub rows: usize,
    pub cols: usize,
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
}

impl LabeledSlice {
    pub fn new(rows: usize, cols: usize, image: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        let s = Self { rows, cols, image, labels };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        let n = self.rows * self.cols;
        if n == 0 || self.image.len() != n || self.labels.len() != n {
            return Err(Error::validation(format!(
                "slice {}x{} has {} image and {} label values",
                self.rows,
                self.cols,
                self.image.len(),
                self.labels.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    /// Probability of mirroring columns.
    pub flip_horizontal: f64,
    /// Probability of mirroring rows.
    pub flip_vertical: f64,
    /// Rotation drawn uniformly from `[-rotation, rotation]` degrees.
    pub rotation: f64,
    /// Zoom factor drawn uniformly from `[zoom[0], zoom[1]]`.
    pub zoom: [f64; 2],
    /// Draw separate transforms for the SA and LA slice of a pair.
    pub independent_views: bool,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_horizontal: 0.5,
            flip_vertical: 0.5,
            rotation: 15.0,
            zoom: [0.9, 1.1],
            independent_views: true,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// A policy that never changes its input.
    pub fn identity() -> Self {
        Self {
            flip_horizontal: 0.0,
            flip_vertical: 0.0,
            rotation: 0.0,
            zoom: [1.0, 1.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !p_ok(self.flip_horizontal) || !p_ok(self.flip_vertical) {
            return Err(Error::validation("flip probabilities must lie in [0, 1]"));
        }
        if !(self.rotation >= 0.0) || !self.rotation.is_finite() {
            return Err(Error::validation("rotation range must be >= 0"));
        }
        let [lo, hi] = self.zoom;
        if !(lo > 0.0 && lo <= 1.0 && 1.0 <= hi && hi.is_finite()) {
            return Err(Error::validation(format!("zoom range must satisfy 0 < min <= 1 <= max, got {:?}", self.zoom)));
        }
        Ok(())
    }

    /// Draws one transform.
    pub fn sample(&self, rng: &mut impl Rng) -> Transform {
        let flip_h = rng.random::<f64>() < self.flip_horizontal;
        let flip_v = rng.random::<f64>() < self.flip_vertical;
        let degrees = if self.rotation > 0.0 {
            rng.random_range(-self.rotation..=self.rotation)
        } else {
            0.0
        };
        let [lo, hi] = self.zoom;
        let zoom = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Transform {
            flip_h,
            flip_v,
            degrees,
            zoom,
        }
    }
}

/// A geometric transform about the slice centre: flip, then rotate, then
/// zoom (zoom > 1 enlarges the content).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub flip_h: bool,
    pub flip_v: bool,
    pub degrees: f64,
    pub zoom: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        flip_h: false,
        flip_v: false,
        degrees: 0.0,
        zoom: 1.0,
    };

    /// Source position (row, col) sampled for output pixel `(r, c)`.
    fn source(&self, r: usize, c: usize, rows: usize, cols: usize) -> (f64, f64) {
        let cy = (rows as f64 - 1.0) / 2.0;
        let cx = (cols as f64 - 1.0) / 2.0;
        let y = (r as f64 - cy) / self.zoom;
        let x = (c as f64 - cx) / self.zoom;
        let (s, co) = self.degrees.to_radians().sin_cos();
        // inverse rotation
        let mut sy = co * y - s * x;
        let mut sx = s * y + co * x;
        if self.flip_v {
            sy = -sy;
        }
        if self.flip_h {
            sx = -sx;
        }
        (sy + cy, sx + cx)
    }

    /// Applies the transform to an image (bilinear) and its labels
    /// (nearest); content moved in from outside the slice is zero.
    pub fn apply(&self, slice: &LabeledSlice) -> Result<LabeledSlice> {
        slice.check()?;
        let (rows, cols) = (slice.rows, slice.cols);
        let n = rows * cols;
        let mut image = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let px = |r: isize, c: isize| -> f64 {
            if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
                0.0
            } else {
                slice.image[r as usize * cols + c as usize] as f64
            }
        };
        for r in 0..rows {
            for c in 0..cols {
                let (sy, sx) = self.source(r, c, rows, cols);
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                let top = px(y0, x0) * (1.0 - fx) + px(y0, x0 + 1) * fx;
                let bot = px(y0 + 1, x0) * (1.0 - fx) + px(y0 + 1, x0 + 1) * fx;
                image.push((top * (1.0 - fy) + bot * fy) as f32);

                let (ny, nx) = ((sy + 0.5).floor(), (sx + 0.5).floor());
                let inside = ny >= 0.0 && nx >= 0.0 && ny < rows as f64 && nx < cols as f64;
                labels.push(if inside { slice.labels[ny as usize * cols + nx as usize] } else { 0 });
            }
        }
        Ok(LabeledSlice { rows, cols, image, labels })
    }
}

/// Augments an SA slice and its matched LA slice. With
/// `policy.independent_views` each view gets its own draw; otherwise both
/// receive the same transform.
pub fn augment_pair(
    sa: &LabeledSlice,
    la: &LabeledSlice,
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
) -> Result<(LabeledSlice, LabeledSlice)> {
    policy.validate()?;
    if (sa.rows, sa.cols) != (la.rows, la.cols) {
        return Err(Error::validation(format!(
            "SA slice {}x{} and LA slice {}x{} differ in shape",
            sa.rows, sa.cols, la.rows, la.cols
        )));
    }
    let t_sa = policy.sample(rng);
    let t_la = if policy.independent_views { policy.sample(rng) } else { t_sa };
    Ok((t_sa.apply(sa)?, t_la.apply(la)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_slice(rows: usize, cols: usize, seed: u64) -> LabeledSlice {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = (0..rows * cols).map(|_| rng.random_range(0..3)).collect();
        LabeledSlice::new(rows, cols, image, labels).unwrap()
    }

    fn square(n: usize, half: usize) -> LabeledSlice {
        let c = n / 2;
        let mut labels = vec![0u8; n * n];
        for r in c - half..c + half {
            for k in c - half..c + half {
                labels[r * n + k] = 1;
            }
        }
        let image = labels.iter().map(|&l| l as f32).collect();
        LabeledSlice::new(n, n, image, labels).unwrap()
    }

    #[test]
    fn identity_policy_changes_nothing() {
        let s = random_slice(32, 24, 1);
        let l = random_slice(32, 24, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = augment_pair(&s, &l, &AugmentPolicy::identity(), &mut rng).unwrap();
        assert_eq!((a, b), (s, l));
    }

    #[test]
    fn flips_are_involutions() {
        let s = random_slice(17, 20, 3);
        for t in [
            Transform { flip_h: true, ..Transform::IDENTITY },
            Transform { flip_v: true, ..Transform::IDENTITY },
        ] {
            let once = t.apply(&s).unwrap();
            assert_ne!(once, s);
            assert_eq!(t.apply(&once).unwrap(), s);
        }
        let h = Transform { flip_h: true, ..Transform::IDENTITY }.apply(&s).unwrap();
        assert_eq!(h.labels[0], s.labels[19]);
    }

    #[test]
    fn zoom_half_quarters_a_square() {
        let s = square(128, 32);
        let before = s.labels.iter().filter(|&&l| l == 1).count() as f64;
        let t = Transform { zoom: 0.5, ..Transform::IDENTITY };
        let out = t.apply(&s).unwrap();
        let after = out.labels.iter().filter(|&&l| l == 1).count() as f64;
        assert!((after / before - 0.25).abs() < 0.02, "{}", after / before);
    }

    #[test]
    fn quarter_turn_of_square_is_square() {
        let s = square(64, 10);
        let t = Transform { degrees: 90.0, ..Transform::IDENTITY };
        let out = t.apply(&s).unwrap();
        assert_eq!(out.labels, s.labels);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = augment_pair(&random_slice(8, 8, 0), &random_slice(8, 6, 0), &AugmentPolicy::default(), &mut rng);
        assert!(matches!(r, Err(Error::Validation(_))));
        assert!(LabeledSlice::new(2, 2, vec![0.0; 4], vec![0; 3]).is_err());
        let bad = AugmentPolicy { zoom: [1.1, 1.2], ..AugmentPolicy::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn joint_mode_applies_one_transform() {
        let s = random_slice(16, 16, 5);
        let joint = AugmentPolicy { independent_views: false, ..AugmentPolicy::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b) = augment_pair(&s, &s, &joint, &mut rng).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b) = augment_pair(&s, &s, &AugmentPolicy::default(), &mut rng).unwrap();
        assert_ne!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn labels_stay_in_the_input_set(seed in any::<u64>()) {
            let s = random_slice(24, 24, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, _) = augment_pair(&s, &s, &AugmentPolicy::default(), &mut rng).unwrap();
            prop_assert!(a.labels.iter().all(|l| *l == 0 || s.labels.contains(l)));
        }

        #[test]
        fn fixed_seed_is_deterministic(seed in any::<u64>()) {
            let s = random_slice(12, 12, 1);
            let p = AugmentPolicy::default();
            let a = augment_pair(&s, &s, &p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = augment_pair(&s, &s, &p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn image_and_labels_move_together(seed in any::<u64>()) {
            // image equal to its labels: away from label edges both
            // interpolation modes agree
            let s = square(48, 12);
            let t = AugmentPolicy::default().sample(&mut ChaCha8Rng::seed_from_u64(seed));
            let out = t.apply(&s).unwrap();
            for (v, l) in out.image.iter().zip(&out.labels) {
                if *v > 0.999 || *v < 0.001 {
                    prop_assert_eq!(v.round() as u8, *l);
                }
            }
        }
    }
}
