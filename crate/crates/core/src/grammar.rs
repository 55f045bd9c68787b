//! Random architectures from the supported grammar.
//!
//! An optional conv stack (conv, optional activation, optional 2×2 pool) is
//! followed by a dense head (dense, optional activation). Convs use
//! `z ∈ {1, 3, 5}`, `K ∈ [2, 64]` and an even output side whose stride and
//! padding are identifiable from the shapes alone; dense layers use
//! `N_e ∈ [4, 256]`; activations are ReLU or Sigmoid; `L ≤ 12`.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::arch::{conv_output_side, ActivationKind, Architecture, LayerSpec, TensorShape};
use crate::emulator::{emulate_inference, CostModel};
use crate::extraction::solve_stride_padding;

#[derive(Debug, Clone, PartialEq)]
pub struct GrammarParams {
    pub max_layers: usize,
    /// Emulated inference time budget (µs) under the default cost model.
    pub max_duration_us: f64,
    pub input_sides: Vec<usize>,
    pub input_channels: Vec<usize>,
}

impl Default for GrammarParams {
    fn default() -> Self {
        Self {
            max_layers: 12,
            max_duration_us: 4000.0,
            input_sides: vec![8, 12, 16, 20, 24, 28, 32],
            input_channels: vec![1, 2, 3, 4, 8],
        }
    }
}

fn activation(rng: &mut impl Rng) -> LayerSpec {
    LayerSpec::activation(if rng.random_bool(0.5) { ActivationKind::ReLU } else { ActivationKind::Sigmoid })
}

fn conv(rng: &mut impl Rng, shape: TensorShape) -> Option<LayerSpec> {
    let zs: Vec<usize> = [1, 3, 5].into_iter().filter(|&z| z > 1 || shape.c >= 4).collect();
    let z = *zs.choose(rng)?;
    let mut options = Vec::new();
    for p in 0..z {
        for s in 1..=3 {
            if let Ok(h) = conv_output_side(shape.h, z, p, s) {
                if h >= 2 && h % 2 == 0 && solve_stride_padding(shape.h, h, z) == Ok((s, p)) {
                    options.push((s, p));
                }
            }
        }
    }
    let &(s, p) = options.choose(rng)?;
    Some(LayerSpec::conv(rng.random_range(2..=64), z, s, p))
}

fn sample(rng: &mut impl Rng, g: &GrammarParams) -> Option<Architecture> {
    let input = TensorShape::new(*g.input_sides.choose(rng)?, *g.input_channels.choose(rng)?);
    let mut layers = Vec::new();
    let mut shape = input;
    for _ in 0..rng.random_range(0..=3) {
        let c = conv(rng, shape)?;
        shape = c.output_shape(shape).ok()?;
        layers.push(c);
        if rng.random_bool(0.7) {
            layers.push(activation(rng));
        }
        if shape.h.is_multiple_of(2) && shape.h >= 4 && rng.random_bool(0.5) {
            layers.push(LayerSpec::maxpool(2));
            shape = TensorShape::new(shape.h / 2, shape.c);
        }
    }
    for _ in 0..rng.random_range(1..=3) {
        layers.push(LayerSpec::dense(rng.random_range(4..=256)));
        if rng.random_bool(0.7) {
            layers.push(activation(rng));
        }
    }
    if layers.len() > g.max_layers {
        return None;
    }
    let arch = Architecture::new(input, layers);
    arch.validate().ok()?;
    let root = emulate_inference(&arch, &CostModel::default()).ok()?;
    (root.duration <= g.max_duration_us).then_some(arch)
}

/// Draws an architecture, resampling until one fits the grammar and budget.
pub fn random_architecture(rng: &mut impl Rng, g: &GrammarParams) -> Architecture {
    loop {
        if let Some(a) = sample(rng, g) {
            return a;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::LayerSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn samples_respect_grammar() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = GrammarParams::default();
        for _ in 0..100 {
            let a = random_architecture(&mut rng, &g);
            assert!(a.layers.len() <= 12);
            let shapes = a.input_shapes().unwrap();
            for (l, s) in a.layers.iter().zip(&shapes) {
                match l {
                    LayerSpec::Conv2d(c) => {
                        assert!([1, 3, 5].contains(&c.z) && (2..=64).contains(&c.k));
                        let out = l.output_shape(*s).unwrap();
                        assert_eq!(out.h % 2, 0);
                        assert_eq!(solve_stride_padding(s.h, out.h, c.z), Ok((c.s, c.p)));
                    }
                    LayerSpec::Dense(d) => assert!((4..=256).contains(&d.n_e)),
                    LayerSpec::MaxPool(m) => assert_eq!(m.z_pool, 2),
                    LayerSpec::Activation(a) => {
                        assert!(matches!(a.kind, ActivationKind::ReLU | ActivationKind::Sigmoid))
                    }
                }
            }
        }
    }
}
