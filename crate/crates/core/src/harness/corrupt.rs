use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{ColorMap, DepthMap};

/// Pixel box `[u0, u1) × [v0, v1)` blanked on frames `first..=last`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionBox {
    pub u0: usize,
    pub v0: usize,
    pub u1: usize,
    pub v1: usize,
    pub first: usize,
    pub last: usize,
}

impl OcclusionBox {
    pub fn active(&self, t: usize) -> bool {
        (self.first..=self.last).contains(&t)
    }

    pub fn contains(&self, u: usize, v: usize) -> bool {
        (self.u0..self.u1).contains(&u) && (self.v0..self.v1).contains(&v)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    pub occlusions: Vec<OcclusionBox>,
    /// Standard deviation of additive depth noise, meters.
    pub depth_noise_sigma: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn is_clean(&self) -> bool {
        self.occlusions.is_empty() && self.depth_noise_sigma == 0.0
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(self.depth_noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(
                "depth noise sigma must be non-negative".into(),
            ));
        }
        for b in &self.occlusions {
            if b.u0 >= b.u1 || b.v0 >= b.v1 || b.u1 > width || b.v1 > height || b.first > b.last {
                return Err(Error::InvalidConfig(format!(
                    "occlusion box {b:?} is empty or outside the {width}x{height} image"
                )));
            }
        }
        Ok(())
    }
}

/// Blanks active occlusion boxes and adds seeded Gaussian noise to the remaining valid depths.
/// The noise stream depends only on `(seed, t)`.
pub fn corrupt_frame(
    depth: &DepthMap,
    color: &ColorMap,
    spec: &CorruptionSpec,
    t: usize,
) -> (DepthMap, ColorMap) {
    let mut d = depth.clone();
    let mut c = color.clone();
    for b in spec.occlusions.iter().filter(|b| b.active(t)) {
        for v in b.v0..b.v1.min(d.height()) {
            for u in b.u0..b.u1.min(d.width()) {
                d.set(u, v, None);
                c.set(u, v, [0, 0, 0]);
            }
        }
    }
    if spec.depth_noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(t as u64);
        let noise = Normal::new(0.0, spec.depth_noise_sigma).expect("sigma validated non-negative");
        for v in 0..d.height() {
            for u in 0..d.width() {
                if let Some(z) = d.get(u, v) {
                    let noisy = z + noise.sample(&mut rng);
                    d.set(u, v, (noisy > 0.0).then_some(noisy));
                }
            }
        }
    }
    (d, c)
}
