//! Two-landmark similarity registration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel coordinates `[x, y]` (column, row) of bregma and lambda.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Landmarks {
    pub bregma: [f64; 2],
    pub lambda: [f64; 2],
}

impl Landmarks {
    /// Canonical positions on the midline: bregma at 3/8 and lambda at 3/4 of
    /// the frame height.
    pub fn atlas_default(h: usize, w: usize) -> Self {
        let x = (w as f64 - 1.0) / 2.0;
        Landmarks {
            bregma: [x, 0.375 * (h as f64 - 1.0)],
            lambda: [x, 0.75 * (h as f64 - 1.0)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.bregma, self.lambda];
        if all.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("landmark coordinates must be finite".into()));
        }
        let d = (self.bregma[0] - self.lambda[0]).hypot(self.bregma[1] - self.lambda[1]);
        if d < 1e-9 {
            return Err(Error::Domain("bregma and lambda coincide".into()));
        }
        Ok(())
    }
}

/// `p' = a * p + b` over complex numbers: rotation, isotropic scale, translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

fn cmul(p: [f64; 2], q: [f64; 2]) -> [f64; 2] {
    [p[0] * q[0] - p[1] * q[1], p[0] * q[1] + p[1] * q[0]]
}

fn cdiv(p: [f64; 2], q: [f64; 2]) -> [f64; 2] {
    let d = q[0] * q[0] + q[1] * q[1];
    [(p[0] * q[0] + p[1] * q[1]) / d, (p[1] * q[0] - p[0] * q[1]) / d]
}

fn csub(p: [f64; 2], q: [f64; 2]) -> [f64; 2] {
    [p[0] - q[0], p[1] - q[1]]
}

impl Similarity {
    /// The transform taking `from` landmarks onto `to` landmarks.
    pub fn from_landmarks(from: &Landmarks, to: &Landmarks) -> Result<Self> {
        from.validate()?;
        to.validate()?;
        let a = cdiv(csub(to.lambda, to.bregma), csub(from.lambda, from.bregma));
        let b = csub(to.bregma, cmul(a, from.bregma));
        Ok(Similarity { a, b })
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let q = cmul(self.a, p);
        [q[0] + self.b[0], q[1] + self.b[1]]
    }

    pub fn invert(&self, q: [f64; 2]) -> [f64; 2] {
        cdiv(csub(q, self.b), self.a)
    }

    pub fn scale(&self) -> f64 {
        self.a[0].hypot(self.a[1])
    }

    pub fn rotation_rad(&self) -> f64 {
        self.a[1].atan2(self.a[0])
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        (self.a[0] - 1.0).abs() < tol && self.a[1].abs() < tol && self.b[0].abs() < tol && self.b[1].abs() < tol
    }
}

/// Bilinear sample at `(x, y)`; points outside the frame read as 0.
pub fn sample_bilinear(frame: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            frame[yi as usize * w + xi as usize]
        }
    };
    let mut v = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let wgt = wx * wy;
            if wgt != 0.0 {
                v += wgt * at(x0 + dx, y0 + dy);
            }
        }
    }
    v
}

/// Resamples one frame into atlas space.
pub fn warp_frame(frame: &[f64], h: usize, w: usize, t: &Similarity) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let [x, y] = t.invert([c as f64, r as f64]);
            out[r * w + c] = sample_bilinear(frame, h, w, x, y);
        }
    }
    out
}

/// Nearest-neighbour resampling of a boolean mask into atlas space.
pub fn warp_mask(mask: &[bool], h: usize, w: usize, t: &Similarity) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let [x, y] = t.invert([c as f64, r as f64]);
            let (xi, yi) = (x.round(), y.round());
            if xi >= 0.0 && yi >= 0.0 && xi < w as f64 && yi < h as f64 {
                out[r * w + c] = mask[yi as usize * w + xi as usize];
            }
        }
    }
    out
}
