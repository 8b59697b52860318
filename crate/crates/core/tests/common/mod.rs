#![allow(dead_code)]

use aswl::{Architecture, AttentionLayer, Dataset, Model, Real, Split, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random pixels in [0, 1] with uniformly random labels. Flat inputs of
/// width `d` are stored as `1×d×1` images.
pub fn synthetic(n: usize, shape: &[usize], classes: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let per: usize = shape.iter().product();
    let pixels = (0..n * per).map(|_| r.random::<f32>()).collect();
    let labels = (0..n).map(|_| r.random_range(0..classes) as u8).collect();
    let full = match *shape {
        [d] => vec![n, 1, d, 1],
        _ => [&[n], shape].concat(),
    };
    Dataset::new(Tensor::new(full, pixels).unwrap(), labels, classes, Split::Train).unwrap()
}

/// Small descriptors mixing dense and conv layers; every one has at most
/// three prunable layers and 500 weights.
pub const SMALL_ARCHS: [&str; 5] = [
    "input = 6\ndense units=5\nrelu\ndense units=3\n",
    "input = 8\ndense units=10\nrelu\ndense units=6\nrelu\ndense units=4\n",
    "input = 5x5x1\nconv kernel=3 filters=2 stride=1 padding=0\nrelu\nflatten\ndense units=3\n",
    "input = 6x6x2\nconv kernel=3 filters=3 stride=1 padding=1\nrelu\nmaxpool size=2\nflatten\ndense units=4\n",
    "input = 7x7x1\nconv kernel=3 filters=2 stride=2 padding=1\nrelu\nconv kernel=2 filters=3 stride=1 padding=0\nrelu\nflatten\ndense units=3\n",
];

pub fn small_arch(i: usize) -> Architecture {
    Architecture::parse(SMALL_ARCHS[i % SMALL_ARCHS.len()]).unwrap()
}

/// A copy of `model` whose layer `i` has its dense weights, bias and
/// attention replaced, keeping the mask.
pub fn with_layer<T: Real>(
    model: &Model<T>,
    i: usize,
    edit: impl FnOnce(&mut Vec<T>, &mut Vec<T>, &mut T),
) -> Model<T> {
    let mut layers = model.layers().to_vec();
    let old = &layers[i];
    let mut w = old.weights().data().to_vec();
    let mut b = old.bias().data().to_vec();
    let mut a = old.attention();
    edit(&mut w, &mut b, &mut a);
    let mut layer = AttentionLayer::new(
        old.kind(),
        Tensor::new(old.weights().shape().to_vec(), w).unwrap(),
        Tensor::new(old.bias().shape().to_vec(), b).unwrap(),
        a,
    )
    .unwrap();
    layer.set_mask(old.mask().to_vec()).unwrap();
    layers[i] = layer;
    Model::from_layers(model.arch().clone(), layers).unwrap()
}

/// Randomizes biases (zero at init) so their gradients are exercised.
pub fn randomize_biases<T: Real>(model: &Model<T>, seed: u64) -> Model<T> {
    let mut r = rng(seed);
    let mut m = model.clone();
    for i in 0..m.layers().len() {
        m = with_layer(&m, i, |_, b, _| {
            for x in b.iter_mut() {
                *x = T::of(r.random_range(-0.3..0.3));
            }
        });
    }
    m
}

/// Bitwise equality of every stored parameter.
pub fn same_bits<T: Real>(a: &Model<T>, b: &Model<T>) -> bool {
    let bits = |m: &Model<T>| -> Vec<u64> {
        m.layers()
            .iter()
            .flat_map(|l| {
                l.weights()
                    .data()
                    .iter()
                    .chain(l.bias().data())
                    .chain(std::iter::once(&l.attention()))
                    .map(|x| x.as_f64().to_bits())
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    bits(a) == bits(b) && a.layers().iter().zip(b.layers()).all(|(x, y)| x.mask() == y.mask())
}
