use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{load_dir, synth_degrade, synthetic_clean, DegradationTag, DegradedPair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Independent stream for item `index` under `seed`; worker scheduling never
/// changes what an item receives.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<(String, DegradedPair)>,
}

/// Training and held-out parts of one dataset.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

impl Dataset {
    /// `count` procedural clean images of `h x w`, each degraded by `tag`.
    pub fn synthetic(
        count: usize,
        h: usize,
        w: usize,
        tag: &DegradationTag,
        seed: u64,
    ) -> Result<Self> {
        let items = (0..count)
            .map(|i| {
                let mut rng = item_rng(seed, i as u64);
                let clean = synthetic_clean(h, w, rng.next_u64());
                let pair = synth_degrade(&clean, tag, rng.next_u64())?;
                Ok((format!("synth_{i:04}"), pair))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { items })
    }

    pub fn from_dir(root: &Path) -> Result<Self> {
        Ok(Dataset {
            items: load_dir(root)?,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn pair(&self, index: usize) -> &DegradedPair {
        &self.items[index].1
    }

    /// The last `holdout` items become the test split.
    pub fn split(mut self, holdout: usize) -> Result<Split> {
        if holdout == 0 || holdout >= self.items.len() {
            return Err(Error::Config(format!(
                "cannot hold out {holdout} of {} pairs and still train",
                self.items.len()
            )));
        }
        let test = self.items.split_off(self.items.len() - holdout);
        Ok(Split {
            train: self,
            test: Dataset { items: test },
        })
    }
}

/// Scale factor between the clean and degraded members.
fn pair_scale(pair: &DegradedPair) -> Result<usize> {
    let (ch, dh) = (pair.clean.shape()[1], pair.degraded.shape()[1]);
    let (cw, dw) = (pair.clean.shape()[2], pair.degraded.shape()[2]);
    if dh == 0 || ch % dh != 0 || cw != dw * (ch / dh) {
        return Err(Error::shape(
            "augment",
            format!(
                "clean {:?} is not an integer multiple of degraded {:?}",
                pair.clean.shape(),
                pair.degraded.shape()
            ),
        ));
    }
    Ok(ch / dh)
}

fn crop_flip(img: &Tensor, y0: usize, x0: usize, size: usize, flip: bool) -> Tensor {
    let w = img.shape()[2];
    let h = img.shape()[1];
    Tensor::from_fn(&[3, size, size], |i| {
        let (c, y, x) = (i / (size * size), (i / size) % size, i % size);
        let x = if flip { size - 1 - x } else { x };
        img.data()[(c * h + y0 + y) * w + x0 + x]
    })
}

/// Random square crop of side `crop` (in clean pixels) and a random
/// horizontal flip, identical on both members. `None` keeps the full image.
pub fn augment(
    pair: &DegradedPair,
    crop: Option<usize>,
    rng: &mut impl Rng,
) -> Result<DegradedPair> {
    augment_with(pair, crop, true, rng)
}

/// [`augment`] with the horizontal flip optional.
pub fn augment_with(
    pair: &DegradedPair,
    crop: Option<usize>,
    flip: bool,
    rng: &mut impl Rng,
) -> Result<DegradedPair> {
    let r = pair_scale(pair)?;
    let (h, w) = (pair.degraded.shape()[1], pair.degraded.shape()[2]);
    let (size, y0, x0) = match crop {
        None if h == w => (h, 0, 0),
        None => {
            return Err(Error::invalid(
                "augment",
                "full-image augmentation needs a square pair",
            ))
        }
        Some(c) => {
            if c == 0 || c % r != 0 {
                return Err(Error::invalid(
                    "augment",
                    format!("crop {c} is not a positive multiple of the scale {r}"),
                ));
            }
            let s = c / r;
            if s > h || s > w {
                return Err(Error::invalid(
                    "augment",
                    format!("crop {c} exceeds the {}x{} image", h * r, w * r),
                ));
            }
            (s, rng.random_range(0..=h - s), rng.random_range(0..=w - s))
        }
    };
    let flip = flip && rng.random_bool(0.5);
    Ok(DegradedPair {
        degraded: crop_flip(&pair.degraded, y0, x0, size, flip),
        clean: crop_flip(&pair.clean, y0 * r, x0 * r, size * r, flip),
        tag: pair.tag.clone(),
        seed: pair.seed,
        clamped: pair.clamped,
    })
}

/// Stack pairs into `[N, 3, H, W]` degraded and clean batches.
pub fn stack_batch(pairs: &[DegradedPair]) -> Result<(Tensor, Tensor)> {
    let degraded: Vec<Tensor> = pairs.iter().map(|p| p.degraded.clone()).collect();
    let clean: Vec<Tensor> = pairs.iter().map(|p| p.clean.clone()).collect();
    Ok((Tensor::stack(&degraded)?, Tensor::stack(&clean)?))
}
