//! Canonical tri-plane feature space.
//!
//! Three axis-aligned feature planes (XY, XZ, YZ) cover the scene cube
//! `[-b, b]^3`. A 3-D point is projected onto each plane, each plane is
//! sampled with align-corners bilinear interpolation (border-clamped), and
//! the three feature vectors are summed. Source banks hold one learnable
//! plane set per input slot; an image encoder producing the same layout can
//! replace them behind this contract.
//!
//! Plane storage is texel-major `[3, R, R, C]` (plane, row = v, col = u,
//! channel), so one texel's feature vector is contiguous.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{bilinear_taps, project_plane};
use crate::tensor::Tensor;

/// Three feature planes plus the scene half-extent they span.
#[derive(Debug, Clone)]
pub struct TriPlanes {
    /// `[3, R, R, C]` texel-major storage.
    pub planes: Tensor,
    pub scene_bound: f64,
}

/// Default channel count (matches the downstream field width).
pub const CHANNELS: usize = 32;

impl TriPlanes {
    pub fn zeros(resolution: usize, channels: usize, scene_bound: f64) -> Self {
        TriPlanes {
            planes: Tensor::zeros(vec![3, resolution, resolution, channels]),
            scene_bound,
        }
    }

    pub fn resolution(&self) -> usize {
        self.planes.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.planes.shape()[3]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.planes.shape();
        if s.len() != 4 || s[0] != 3 || s[1] != s[2] {
            return Err(Error::Validation(format!("tri-planes shape {s:?}, expected [3, R, R, C]")));
        }
        if self.scene_bound <= 0.0 {
            return Err(Error::Validation("scene bound must be positive".into()));
        }
        self.planes.check_finite("triplanes")
    }

    /// Bilinear sample of one plane at plane coordinates (u, v) in [-1, 1].
    pub fn bilinear_sample(&self, plane: usize, u: f64, v: f64, out: &mut [f64]) {
        let r = self.resolution();
        let c = self.channels();
        let values = self.planes.values();
        let base = plane * r * r;
        out.fill(0.0);
        for (texel, w) in bilinear_taps(u.clamp(-1.0, 1.0), v.clamp(-1.0, 1.0), r) {
            let row = &values[(base + texel) * c..(base + texel + 1) * c];
            for (o, x) in out.iter_mut().zip(row) {
                *o += w * x;
            }
        }
    }

    /// Project onto the three planes, sample each, and sum.
    pub fn sample(&self, x: [f64; 3], out: &mut [f64]) {
        let c = self.channels();
        out.fill(0.0);
        let mut tmp = vec![0.0; c];
        for plane in 0..3 {
            let (u, v) = project_plane(&x, plane, self.scene_bound);
            self.bilinear_sample(plane, u, v, &mut tmp);
            for (o, t) in out.iter_mut().zip(&tmp) {
                *o += t;
            }
        }
    }
}

/// Zero-mean uniform noise in [-scale, scale], deterministic in the seed.
pub fn init_triplanes(seed: u64, channels: usize, resolution: usize, scale: f64, scene_bound: f64) -> Result<TriPlanes> {
    if scale < 0.0 {
        return Err(Error::contract("init_triplanes", "scale must be nonnegative"));
    }
    let mut rng = rng::stream(seed, "triplane-init");
    let count = 3 * resolution * resolution * channels;
    let values: Vec<f64> = if scale == 0.0 {
        vec![0.0; count]
    } else {
        (0..count).map(|_| rng.random_range(-scale..scale)).collect()
    };
    Ok(TriPlanes {
        planes: Tensor::new(vec![3, resolution, resolution, channels], values)?,
        scene_bound,
    })
}

/// Named tri-plane sets, one per source slot.
#[derive(Debug, Clone)]
pub struct SourceBank {
    pub slots: Vec<TriPlanes>,
}

impl SourceBank {
    pub fn new(slots: Vec<TriPlanes>) -> Result<Self> {
        if slots.is_empty() {
            return Err(Error::contract("SourceBank::new", "need at least one slot"));
        }
        let (r, c) = (slots[0].resolution(), slots[0].channels());
        for s in &slots {
            s.validate()?;
            if s.resolution() != r || s.channels() != c {
                return Err(Error::dim("SourceBank::new", format!("{r}x{r}x{c} planes"), format!("{}x{}x{}", s.resolution(), s.resolution(), s.channels())));
            }
        }
        Ok(SourceBank { slots })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}
