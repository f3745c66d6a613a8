//! Small encoder-decoder segmentation network.
//!
//! | level | layers | channels | resolution |
//! |-------|--------|----------|------------|
//! | `enc1` | 2 × (3×3 conv + relu) | 1 → 8 → 8 | H×W |
//! | `enc2` | 2×2 max-pool, 2 × (3×3 conv + relu) | 8 → 16 → 16 | H/2 |
//! | `enc3` | 2×2 max-pool, 2 × (3×3 conv + relu) | 16 → 32 → 32 | H/4 |
//! | `dec2` | ×2 upsample, concat `enc2`, 2 × (3×3 conv + relu) | 48 → 16 → 16 | H/2 |
//! | `dec1` | ×2 upsample, concat `enc1`, 2 × (3×3 conv + relu) | 24 → 8 → 8 | H×W |
//! | `head` | 1×1 conv | 8 → K | H×W |
//!
//! Each convolution has a `<layer>.weight` of shape `[out, in, k, k]` and a
//! `<layer>.bias` of shape `[out]`. Weights use He-normal initialization,
//! biases start at zero.

use crac_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::NamedTensors;
use crate::error::{invalid, Error, Result};

/// `(layer, in_channels, out_channels, kernel)` for the given class count.
fn layers(classes: usize) -> Vec<(&'static str, usize, usize, usize)> {
    vec![
        ("enc1.conv1", 1, 8, 3),
        ("enc1.conv2", 8, 8, 3),
        ("enc2.conv1", 8, 16, 3),
        ("enc2.conv2", 16, 16, 3),
        ("enc3.conv1", 16, 32, 3),
        ("enc3.conv2", 32, 32, 3),
        ("dec2.conv1", 48, 16, 3),
        ("dec2.conv2", 16, 16, 3),
        ("dec1.conv1", 24, 8, 3),
        ("dec1.conv2", 8, 8, 3),
        ("head", 8, classes, 1),
    ]
}

/// Parameter names and shapes, in registration order.
pub fn architecture(classes: usize) -> Vec<(String, Vec<usize>)> {
    layers(classes)
        .into_iter()
        .flat_map(|(name, cin, cout, k)| {
            [
                (format!("{name}.weight"), vec![cout, cin, k, k]),
                (format!("{name}.bias"), vec![cout]),
            ]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(&self.shape, &self.data).expect("param shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    classes: usize,
    params: Vec<Param>,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * libm::log(u1)).sqrt() * libm::cos(2.0 * std::f64::consts::PI * u2)
}

impl ModelParams {
    pub fn build(seed: u64, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(invalid(format!("class count must be at least 2, got {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = architecture(classes)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if shape.len() == 4 {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let std = (2.0 / fan_in).sqrt();
                    (0..n).map(|_| (std * standard_normal(&mut rng)) as f32).collect()
                } else {
                    vec![0.0; n]
                };
                Param { name, shape, data }
            })
            .collect();
        Ok(Self { classes, params })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    /// Registers every tensor in the graph, as parameters when `trainable`.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| {
                let t = p.to_tensor();
                Ok(if trainable { g.param(t)? } else { g.constant(t)? })
            })
            .collect()
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut out = NamedTensors::new();
        for p in &self.params {
            out.push(p.name.clone(), p.shape.clone(), p.data.clone())
                .expect("unique parameter names");
        }
        out
    }

    /// Extracts model parameters from a checkpoint, inferring K from the
    /// head and checking every name and shape against the architecture.
    pub fn from_named(named: &NamedTensors) -> Result<Self> {
        let head = named.require("head.weight")?;
        let classes = *head
            .shape
            .first()
            .ok_or_else(|| Error::Incompatible("head.weight has rank 0".into()))?;
        if classes < 2 {
            return Err(Error::Incompatible(format!("checkpoint head has {classes} classes")));
        }
        let params = architecture(classes)
            .into_iter()
            .map(|(name, shape)| {
                let e = named.require(&name)?;
                if e.shape != shape {
                    return Err(Error::Incompatible(format!(
                        "{name}: checkpoint shape {:?}, architecture expects {shape:?}",
                        e.shape
                    )));
                }
                Ok(Param {
                    name,
                    shape,
                    data: e.data.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { classes, params })
    }
}

/// Logits `[N, K, H, W]` for an input batch `[N, 1, H, W]`, given the
/// variables returned by [`ModelParams::register`].
pub fn forward(g: &mut Graph, params: &[Var], input: Var) -> Result<Var> {
    let [_, c, h, w] = g.try_value(input)?.nchw()?;
    if c != 1 {
        return Err(invalid(format!("model expects 1 input channel, got {c}")));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(invalid(format!("input extents {h}x{w} must be divisible by 4")));
    }
    if params.len() != 22 {
        return Err(invalid(format!("expected 22 parameter tensors, got {}", params.len())));
    }
    let conv = |g: &mut Graph, x: Var, layer: usize, relu: bool| -> Result<Var> {
        let y = g.conv2d(x, params[2 * layer], Some(params[2 * layer + 1]))?;
        Ok(if relu { g.relu(y)? } else { y })
    };
    let e1 = conv(g, input, 0, true)?;
    let e1 = conv(g, e1, 1, true)?;
    let p1 = g.max_pool2(e1)?;
    let e2 = conv(g, p1, 2, true)?;
    let e2 = conv(g, e2, 3, true)?;
    let p2 = g.max_pool2(e2)?;
    let e3 = conv(g, p2, 4, true)?;
    let e3 = conv(g, e3, 5, true)?;
    let u2 = g.upsample2(e3)?;
    let d2 = g.concat_channels(u2, e2)?;
    let d2 = conv(g, d2, 6, true)?;
    let d2 = conv(g, d2, 7, true)?;
    let u1 = g.upsample2(d2)?;
    let d1 = g.concat_channels(u1, e1)?;
    let d1 = conv(g, d1, 8, true)?;
    let d1 = conv(g, d1, 9, true)?;
    conv(g, d1, 10, false)
}

/// Stacks sample images into an `[N, 1, H, W]` tensor.
pub fn batch_tensor(images: &[&[f32]], height: usize, width: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * height * width);
    for img in images {
        if img.len() != height * width {
            return Err(invalid("image extent mismatch"));
        }
        data.extend(img.iter().map(|&v| v as f64));
    }
    Ok(Tensor::new(vec![images.len(), 1, height, width], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crac_tensor::{grad_check, GradCheckOptions};

    /// Counted independently from the architecture table: Σ (in·out·k² + out).
    const PARAM_COUNT_K4: usize = 29_644;

    #[test]
    fn parameter_count_for_four_classes() {
        assert_eq!(ModelParams::build(0, 4).unwrap().count(), PARAM_COUNT_K4);
    }

    #[test]
    fn build_is_seed_deterministic() {
        assert_eq!(ModelParams::build(3, 4).unwrap(), ModelParams::build(3, 4).unwrap());
        assert_ne!(ModelParams::build(3, 4).unwrap(), ModelParams::build(4, 4).unwrap());
    }

    #[test]
    fn build_rejects_single_class() {
        assert!(ModelParams::build(0, 1).is_err());
    }

    #[test]
    fn forward_shape_and_determinism() {
        let params = ModelParams::build(1, 4).unwrap();
        let x = Tensor::new(vec![16, 1, 64, 64], (0..16 * 64 * 64).map(|i| ((i % 97) as f64) / 97.0).collect()).unwrap();
        let run = || {
            let mut g = Graph::new();
            let vars = params.register(&mut g, false).unwrap();
            let input = g.constant(x.clone()).unwrap();
            let y = forward(&mut g, &vars, input).unwrap();
            g.value(y).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[16, 4, 64, 64]);
        assert!(a.is_finite());
        assert_eq!(a, run());
    }

    #[test]
    fn forward_rejects_indivisible_extents() {
        let params = ModelParams::build(1, 3).unwrap();
        let mut g = Graph::new();
        let vars = params.register(&mut g, false).unwrap();
        let input = g.constant(Tensor::zeros(&[1, 1, 6, 8])).unwrap();
        assert!(forward(&mut g, &vars, input).is_err());
    }

    #[test]
    fn named_round_trip_and_incompatibility() {
        let p = ModelParams::build(2, 3).unwrap();
        let named = NamedTensors::decode(&p.to_named().encode().unwrap()).unwrap();
        assert_eq!(ModelParams::from_named(&named).unwrap(), p);
        let mut broken = NamedTensors::new();
        for e in p.to_named().entries() {
            let shape = if e.name == "dec1.conv2.weight" { vec![8, 8, 1, 9] } else { e.shape.clone() };
            broken.push(e.name.clone(), shape, e.data.clone()).unwrap();
        }
        assert!(matches!(ModelParams::from_named(&broken), Err(Error::Incompatible(_))));
    }

    #[test]
    fn mean_logit_gradient_passes_grad_check() {
        let params = ModelParams::build(5, 3).unwrap();
        let tensors: Vec<Tensor> = params.params().iter().map(Param::to_tensor).collect();
        // small non-zero biases keep relu inputs away from exact zeros
        let tensors: Vec<Tensor> = tensors
            .into_iter()
            .map(|t| if t.rank() == 1 { t.map(|_| 0.05) } else { t })
            .collect();
        let x = Tensor::new(vec![1, 1, 8, 8], (0..64).map(|i| ((i * 37 % 64) as f64) / 64.0).collect()).unwrap();
        let report = grad_check::<_, Error>(
            &tensors,
            |g, vars| {
                let input = g.constant(x.clone())?;
                let y = forward(g, vars, input)?;
                Ok(g.mean(y)?)
            },
            &GradCheckOptions::new(1e-4, 1e-3).with_max_elements(12),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.checked() > 100);
    }
}
