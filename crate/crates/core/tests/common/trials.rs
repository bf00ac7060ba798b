//! Randomized blocks for the collapse/oracle comparison.

use kflo::kflo::{expand, feature_filter_oracle, KfloBlock};
use kflo::tensor::{self, max_relative_deviation, ConvGeometry};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{rng, uniform};

pub const DEPTHS: [usize; 4] = [1, 2, 3, 4];
pub const RHOS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone)]
pub struct Trial {
    pub depth: usize,
    pub rho: f64,
    pub ch_in: usize,
    pub ch_out: usize,
    pub kernel: (usize, usize),
    pub geom: ConvGeometry,
    pub input: (usize, usize),
    pub deviation: f64,
}

/// Random block with random (non-dirac) cascade kernels; returns the relative
/// deviation between convolving with the collapsed kernel and running the
/// cascade over the feature maps.
pub fn collapse_trial(seed: u64) -> Trial {
    let mut r = rng(seed);
    let depth = *DEPTHS.choose(&mut r).unwrap();
    let rho = *RHOS.choose(&mut r).unwrap();
    let ch_in = r.gen_range(1..7);
    let groups = match r.gen_range(0..3) {
        0 => 1,
        1 if ch_in % 2 == 0 => 2,
        1 => 1,
        _ => ch_in,
    };
    let ch_out = groups * r.gen_range(1..4);
    let kernel = (r.gen_range(1..4), r.gen_range(1..4));
    let geom = ConvGeometry::trivial()
        .with_stride(r.gen_range(1..3), r.gen_range(1..3))
        .with_padding(r.gen_range(0..3), r.gen_range(0..3))
        .with_dilation(r.gen_range(1..3), r.gen_range(1..3))
        .with_groups(groups);
    let span = (geom.dilation.0 * (kernel.0 - 1) + 1, geom.dilation.1 * (kernel.1 - 1) + 1);
    let input = (span.0 + r.gen_range(0..6), span.1 + r.gen_range(0..6));
    let batch = r.gen_range(1..3);

    let base = expand::<f32>(ch_out, ch_in, kernel, geom, depth, rho, r.gen()).unwrap();
    let cascade = base.cascade().iter().map(|k| uniform(k.shape(), &mut r)).collect();
    let block = KfloBlock::new(base.w1().clone(), cascade, geom, rho).unwrap();
    let x = uniform::<f32>(&[batch, ch_in, input.0, input.1], &mut r);

    let collapsed = block.collapse().unwrap();
    let y = tensor::conv2d(&x, collapsed.tensor(), &geom).unwrap();
    let oracle = feature_filter_oracle(&x, &block).unwrap();
    Trial {
        depth,
        rho,
        ch_in,
        ch_out,
        kernel,
        geom,
        input,
        deviation: max_relative_deviation(&y, &oracle),
    }
}
