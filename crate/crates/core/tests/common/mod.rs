#![allow(dead_code)]

pub mod grads;
pub mod trials;

use std::path::Path;

use kflo::tensor::{ConvGeometry, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::narrow(rng.gen_range(-1.0..1.0)))
}

/// Direct seven-loop convolution in f64.
pub fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, g: &ConvGeometry) -> Tensor<f64> {
    let (b, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, gin, km, kn) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * g.padding.0 - g.dilation.0 * (km - 1) - 1) / g.stride.0 + 1;
    let ow = (w + 2 * g.padding.1 - g.dilation.1 * (kn - 1) - 1) / g.stride.1 + 1;
    let gout = cout / g.groups;
    assert_eq!(gin * g.groups, cin);
    let mut out = Tensor::zeros(&[b, cout, oh, ow]);
    for bi in 0..b {
        for o in 0..cout {
            let grp = o / gout;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for c in 0..gin {
                        for m in 0..km {
                            for n in 0..kn {
                                let r = (y * g.stride.0 + m * g.dilation.0) as isize - g.padding.0 as isize;
                                let q = (xx * g.stride.1 + n * g.dilation.1) as isize - g.padding.1 as isize;
                                if r < 0 || q < 0 || r >= h as isize || q >= w as isize {
                                    continue;
                                }
                                s += k.at(&[o, c, m, n]) * x.at(&[bi, grp * gin + c, r as usize, q as usize]);
                            }
                        }
                    }
                    let idx = out.offset(&[bi, o, y, xx]);
                    out.data_mut()[idx] = s;
                }
            }
        }
    }
    out
}

/// Writes an MNIST-style IDX pair with `n` synthetic 28x28 digits: class `c`
/// draws a bright vertical bar at column `2 + 2c` plus seeded noise.
pub fn write_idx_fixture(dir: &Path, prefix: &str, n: usize, seed: u64) {
    let mut r = rng(seed);
    let mut images = Vec::with_capacity(16 + n * 784);
    images.extend_from_slice(&0x803u32.to_be_bytes());
    for d in [n as u32, 28, 28] {
        images.extend_from_slice(&d.to_be_bytes());
    }
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&0x801u32.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for i in 0..n {
        let class = i % 10;
        labels.push(class as u8);
        for y in 0..28 {
            for x in 0..28 {
                let bar = (x == 4 + 2 * class || x == 5 + 2 * class) && (4..24).contains(&y);
                let noise: u8 = r.gen_range(0..40);
                images.push(if bar { 255 - noise } else { noise });
            }
        }
    }
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
}

/// Training and test IDX files in one directory.
pub fn mnist_fixture_dir(train: usize, test: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_idx_fixture(dir.path(), "train", train, 1);
    write_idx_fixture(dir.path(), "t10k", test, 2);
    dir
}
