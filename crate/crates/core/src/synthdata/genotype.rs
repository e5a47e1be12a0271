//! Identity genotypes: the shape parameters every render of an identity
//! shares, and the binary attributes derived from them.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Names of the shared, color-free attributes in bit order.
pub const ATTRIBUTE_NAMES: [&str; 8] = [
    "angular_body",
    "tall_body",
    "has_hat",
    "has_base",
    "many_limbs",
    "has_hole",
    "has_tail",
    "striped",
];

/// Names of the palette-derived bits appended by color poisoning.
pub const COLOR_ATTRIBUTE_NAMES: [&str; 3] = ["body_red", "body_green", "body_blue"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Limb {
    /// Attachment angle on the body outline, radians (0 = right, y down).
    pub angle: f64,
    pub length: f64,
    /// Elbow bend, radians.
    pub bend: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Genotype {
    pub angular: bool,
    pub body_w: f64,
    pub body_h: f64,
    pub body_dx: f64,
    pub hat: Option<(f64, f64, f64)>,
    pub base_w: Option<f64>,
    pub limbs: Vec<Limb>,
    pub hole: Option<(f64, f64, f64)>,
    /// Tail curl and length.
    pub tail: Option<(f64, f64)>,
    /// Stripe period in canvas units, when the body fill is striped.
    pub stripes: Option<f64>,
}

/// Body and accent colors; only photos are colored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub body: [f64; 3],
    pub accent: [f64; 3],
}

impl Palette {
    /// Body color from the eight corners of a dark RGB cube (so many
    /// identities share it and every body stands out on a light
    /// background), slightly perturbed; the accent is a darker shade of it.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let corner: u8 = rng.gen_range(0..8);
        let body = [0, 1, 2].map(|c| {
            let hi = corner >> c & 1 == 1;
            (if hi { Self::HIGH } else { Self::LOW }) + rng.gen_range(-0.035..0.035)
        });
        Palette {
            body,
            accent: body.map(|v| 0.5 * v),
        }
    }

    const HIGH: f64 = 0.5;
    const LOW: f64 = 0.11;

    /// One bit per RGB channel of the body color.
    pub fn color_bits(&self) -> [u8; 3] {
        self.body.map(|v| u8::from(v > (Self::HIGH + Self::LOW) / 2.0))
    }
}

/// One identity: genotype plus the palette its photos are painted with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub identity: u32,
    pub genotype: Genotype,
    pub palette: Palette,
}

impl Genotype {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let tall = rng.gen_bool(0.5);
        let body_w: f64 = rng.gen_range(0.36..0.48);
        let ratio: f64 = if tall {
            rng.gen_range(1.25..1.5)
        } else {
            rng.gen_range(0.65..0.9)
        };
        let body_h = (body_w * ratio).min(0.6);
        let n_limbs = rng.gen_range(0..=3usize);
        let limbs = (0..n_limbs)
            .map(|_| {
                let right = rng.gen_bool(0.5);
                let a: f64 = rng.gen_range(-0.9..0.9);
                Limb {
                    angle: if right { a } else { std::f64::consts::PI - a },
                    length: rng.gen_range(0.14..0.22),
                    bend: rng.gen_range(-0.9..0.9),
                }
            })
            .collect();
        Genotype {
            angular: rng.gen_bool(0.5),
            body_w,
            body_h,
            body_dx: rng.gen_range(-0.05..0.05),
            hat: rng
                .gen_bool(0.5)
                .then(|| (rng.gen_range(0.14..0.2), rng.gen_range(0.6..0.95), rng.gen_range(-0.05..0.05))),
            base_w: rng.gen_bool(0.5).then(|| rng.gen_range(1.25..1.6)),
            limbs,
            hole: rng
                .gen_bool(0.5)
                .then(|| (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15), rng.gen_range(0.08..0.11))),
            tail: rng
                .gen_bool(0.5)
                .then(|| (rng.gen_range(-1.2..1.2), rng.gen_range(0.14..0.22))),
            stripes: rng.gen_bool(0.5).then(|| rng.gen_range(0.08..0.1)),
        }
    }

    pub fn is_tall(&self) -> bool {
        self.body_h > 1.15 * self.body_w
    }

    /// The shared attribute vector, in [`ATTRIBUTE_NAMES`] order.
    pub fn attributes(&self) -> [u8; 8] {
        [
            self.angular,
            self.is_tall(),
            self.hat.is_some(),
            self.base_w.is_some(),
            self.limbs.len() >= 2,
            self.hole.is_some(),
            self.tail.is_some(),
            self.stripes.is_some(),
        ]
        .map(u8::from)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attributes_are_roughly_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 8];
        for _ in 0..2000 {
            for (c, a) in counts.iter_mut().zip(Genotype::sample(&mut rng).attributes()) {
                *c += a as usize;
            }
        }
        for (name, c) in ATTRIBUTE_NAMES.iter().zip(counts) {
            assert!((600..1400).contains(&c), "{name}: {c}");
        }
    }
}
