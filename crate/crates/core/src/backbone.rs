//! Five-stage convolutional feature extractor producing maps at strides 8,
//! 16 and 32.

use crate::config::Config;
use crate::nn::{Conv2d, Graph, Init, ParamStore};
use crate::numerics::{NumericsError, Padding, Result, Var};

/// Feature maps at 1/8, 1/16 and 1/32 of the input resolution. The coarsest
/// map doubles as the visual features.
#[derive(Clone, Copy, Debug)]
pub struct MultiScaleFeatures {
    pub f8: Var,
    pub f16: Var,
    pub f32: Var,
}

#[derive(Clone, Debug)]
struct Stage {
    down: Conv2d,
    refine: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &Config) -> Self {
        let c = cfg.channels;
        let widths = [3, 16, 32, c, c, c];
        // stride-2 3x3 on an even extent tiles exactly with one row/column of
        // leading padding
        let down_pad = Padding { before: 1, after: 0 };
        let stages = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Stage {
                down: Conv2d::new(store, init, &format!("backbone.s{}.down", i + 1), w[0], w[1], 3, 2, down_pad),
                refine: Conv2d::new(
                    store,
                    init,
                    &format!("backbone.s{}.refine", i + 1),
                    w[1],
                    w[1],
                    3,
                    1,
                    Padding::same(1),
                ),
            })
            .collect();
        Self { stages }
    }

    /// `image: [3, H, W]` with `H` and `W` divisible by 32.
    pub fn forward(&self, g: &mut Graph<'_>, image: Var) -> Result<MultiScaleFeatures> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 || !s[1].is_multiple_of(32) || !s[2].is_multiple_of(32) || s[1] == 0 || s[2] == 0 {
            return Err(NumericsError::Contract(format!(
                "backbone input must be [3, H, W] with H, W divisible by 32, got {s:?}"
            )));
        }
        let mut x = image;
        let mut taps = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.down.forward(g, x)?;
            x = g.relu(x)?;
            x = stage.refine.forward(g, x)?;
            x = g.relu(x)?;
            if i >= 2 {
                taps.push(x);
            }
        }
        Ok(MultiScaleFeatures { f8: taps[0], f16: taps[1], f32: taps[2] })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(c: usize) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(5));
        let cfg = Config { channels: c, ..Config::default() };
        let bb = Backbone::new(&mut store, &mut init, &cfg);
        (store, bb)
    }

    #[test]
    fn output_strides() {
        let (store, bb) = build(32);
        for (h, w) in [(64, 64), (96, 320), (32, 64)] {
            let mut g = Graph::new(&store, false);
            let img = g.constant(Tensor::full(&[3, h, w], 0.3)).unwrap();
            let ms = bb.forward(&mut g, img).unwrap();
            assert_eq!(g.shape(ms.f8), &[32, h / 8, w / 8]);
            assert_eq!(g.shape(ms.f16), &[32, h / 16, w / 16]);
            assert_eq!(g.shape(ms.f32), &[32, h / 32, w / 32]);
        }
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let (store, bb) = build(32);
        let mut g = Graph::new(&store, false);
        let img = g.constant(Tensor::zeros(&[3, 64, 64])).unwrap();
        let ms = bb.forward(&mut g, img).unwrap();
        for v in [ms.f8, ms.f16, ms.f32] {
            assert!(g.values(v).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let (store, bb) = build(16);
        let mut g = Graph::new(&store, false);
        let img = g.constant(Tensor::zeros(&[3, 48, 64])).unwrap();
        assert!(matches!(bb.forward(&mut g, img), Err(NumericsError::Contract(_))));
    }
}
