use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{NetworkSpec, ParamKind};
use crate::error::{Error, Result};
use crate::optim::NamedTensors;
use crate::tensor::Tensor;

/// Trainable tensors plus non-trainable buffers (batch-norm running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub params: NamedTensors,
    pub buffers: NamedTensors,
}

/// Capsule transforms are initialised so a parent's pre-squash norm is about
/// `CAPSULE_GAIN` times its children's. Squash maps small norms to roughly their
/// square, so below a gain-dependent threshold lengths shrink layer after
/// layer; at 4 that threshold is about 0.07 and deep stacks settle near 0.93.
const CAPSULE_GAIN: f64 = 4.0;

impl ModelParams {
    /// Seeded initialisation: He-normal convolutions, zero biases, unit
    /// batch-norm scales, and capsule transforms scaled by fan-in.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<ModelParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = NamedTensors::new();
        let mut buffers = NamedTensors::new();
        for e in spec.param_manifest()? {
            let normal = |std: f64, rng: &mut ChaCha8Rng| -> Tensor {
                let dist = Normal::new(0.0, std).unwrap();
                let n: usize = e.shape.iter().product();
                Tensor::from_vec(&e.shape, (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
            };
            let t = match e.kind {
                ParamKind::ConvWeight { fan_in } => normal((2.0 / fan_in as f64).sqrt(), &mut rng),
                ParamKind::CapsTransform { children, out_types, out_dim } => {
                    let std = CAPSULE_GAIN * out_types as f64 / ((children * out_dim) as f64).sqrt();
                    normal(std, &mut rng)
                }
                ParamKind::Bias | ParamKind::Zero | ParamKind::RunningMean => Tensor::zeros(&e.shape),
                ParamKind::Gamma | ParamKind::RunningVar => Tensor::full(&e.shape, 1.0),
            };
            match e.kind {
                ParamKind::RunningMean | ParamKind::RunningVar => buffers.insert(e.name, t),
                _ => params.insert(e.name, t),
            };
        }
        Ok(ModelParams { params, buffers })
    }

    /// Checks names and shapes against the network's manifest, listing every difference.
    pub fn verify(&self, spec: &NetworkSpec) -> Result<()> {
        let mut problems = Vec::new();
        let manifest = spec.param_manifest()?;
        for e in &manifest {
            let store = match e.kind {
                ParamKind::RunningMean | ParamKind::RunningVar => &self.buffers,
                _ => &self.params,
            };
            match store.get(&e.name) {
                None => problems.push(format!("missing {}", e.name)),
                Some(t) if t.shape() != e.shape.as_slice() => {
                    problems.push(format!("{}: shape {:?}, expected {:?}", e.name, t.shape(), e.shape))
                }
                _ => {}
            }
        }
        for name in self.params.keys().chain(self.buffers.keys()) {
            if !manifest.iter().any(|e| &e.name == name) {
                problems.push(format!("unexpected {name}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ManifestMismatch(problems.join("; ")))
        }
    }

    /// Names of the trainable tensors belonging to the feature extractor.
    pub fn extractor_names(&self, spec: &NetworkSpec) -> Vec<String> {
        let prefixes: Vec<String> = spec.layers[..spec.extractor_layers]
            .iter()
            .map(|l| format!("{}.", l.name))
            .collect();
        self.params
            .keys()
            .filter(|k| prefixes.iter().any(|p| k.starts_with(p.as_str())))
            .cloned()
            .collect()
    }

    /// Copies every tensor of `other` whose name exists here (used to seed fine-tuning).
    pub fn load_matching(&mut self, other: &NamedTensors) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in other {
            if let Some(dst) = self.params.get_mut(name) {
                if dst.shape() != t.shape() {
                    return Err(Error::ManifestMismatch(format!(
                        "{name}: shape {:?}, expected {:?}",
                        t.shape(),
                        dst.shape()
                    )));
                }
                *dst = t.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}
