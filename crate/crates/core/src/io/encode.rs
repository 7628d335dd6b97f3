use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Encoding {
    /// The analog frame repeated at every timestep.
    #[default]
    Direct,
    /// Independent Bernoulli spikes with the pixel value as probability.
    Rate,
}

impl Encoding {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Encoding::Direct),
            "rate" => Ok(Encoding::Rate),
            other => Err(Error::Config(format!("unknown encoding `{other}`"))),
        }
    }
}

/// `[B, C, H, W]` images in `[0, 1]` to `[T, B, C, H, W]`.
pub fn encode_spikes(images: &Tensor<f32>, steps: usize, scheme: Encoding, seed: u64) -> Result<Tensor<f32>> {
    if images.rank() != 4 {
        return shape_err(format!("images must be [B, C, H, W], got {:?}", images.shape()));
    }
    if steps == 0 {
        return invalid("encoding needs at least one timestep");
    }
    if let Some((i, v)) = images
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return invalid(format!("pixel {i} = {v} outside [0, 1]"));
    }
    let per = images.numel();
    let mut shape = vec![steps];
    shape.extend_from_slice(images.shape());
    let data = match scheme {
        Encoding::Direct => images.data().repeat(steps),
        Encoding::Rate => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..steps * per)
                .map(|i| {
                    let p = images.data()[i % per] as f64;
                    if rng.gen::<f64>() < p {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    };
    Tensor::from_vec_unchecked(&shape, data)
}
