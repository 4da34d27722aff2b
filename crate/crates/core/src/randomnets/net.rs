use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, ArrayView1, ArrayView2, Ix1, Ix2, IxDyn};
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, TensorMap};
use crate::error::{ensure, Error, Result};
use crate::rng::{self, streams};

pub const EMBED: &str = "embed";
pub const UNEMBED: &str = "unembed";

/// Architecture of the pre-norm decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    /// Pre-layer normalization (`ln1`, `ln2`, `ln_f`). Without it the norm
    /// tensors are absent and the blocks see the raw residual stream.
    pub norm: bool,
}

impl NetSpec {
    /// `d_head = d_model / n_heads`, `d_mlp = 4·d_model`, pre-norm.
    pub fn new(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        vocab_size: usize,
        context_length: usize,
    ) -> Result<Self> {
        ensure!(n_heads >= 1, "n_heads must be positive");
        let spec = Self {
            n_layers,
            d_model,
            n_heads,
            d_head: d_model / n_heads,
            d_mlp: 4 * d_model,
            vocab_size,
            context_length,
            norm: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n_layers >= 1
                && self.d_model >= 1
                && self.d_mlp >= 1
                && self.vocab_size >= 1
                && self.context_length >= 1,
            "all transformer sizes must be positive"
        );
        ensure!(
            self.d_model == self.n_heads * self.d_head,
            "d_model ({}) != n_heads ({}) * d_head ({})",
            self.d_model,
            self.n_heads,
            self.d_head
        );
        ensure!(self.d_head.is_multiple_of(2), "rotary embeddings need an even d_head");
        Ok(())
    }

    /// Every tensor name with its shape, in checkpoint order.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        let (d, m) = (self.d_model, self.d_mlp);
        let mut out = vec![
            (EMBED.to_string(), vec![self.vocab_size, d]),
            (UNEMBED.to_string(), vec![self.vocab_size, d]),
        ];
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        for l in 0..self.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            if self.norm {
                for ln in ["ln1", "ln2"] {
                    push(p(&format!("{ln}.weight")), vec![d]);
                    push(p(&format!("{ln}.bias")), vec![d]);
                }
            }
            for proj in ["q", "k", "v", "out"] {
                push(p(&format!("attn.{proj}.weight")), vec![d, d]);
                push(p(&format!("attn.{proj}.bias")), vec![d]);
            }
            push(p("mlp.in.weight"), vec![m, d]);
            push(p("mlp.in.bias"), vec![m]);
            push(p("mlp.out.weight"), vec![d, m]);
            push(p("mlp.out.bias"), vec![d]);
        }
        if self.norm {
            push("ln_f.weight".into(), vec![d]);
            push("ln_f.bias".into(), vec![d]);
        }
        out.sort();
        out
    }
}

/// Which initialization produced a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Loaded,
    Step0,
    RerandInclEmb,
    RerandExclEmb,
    Control,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Loaded => "loaded",
            Variant::Step0 => "step0",
            Variant::RerandInclEmb => "rerand_incl_emb",
            Variant::RerandExclEmb => "rerand_excl_emb",
            Variant::Control => "control",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

/// Named weights plus the variant tag. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    tensors: TensorMap,
    variant: Variant,
    /// Seeds the per-occurrence Gaussian embeddings of the control variant.
    control_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct NetSidecar {
    spec: NetSpec,
    variant: Variant,
    control_seed: u64,
}

impl NetParams {
    pub fn new(spec: &NetSpec, tensors: TensorMap, variant: Variant) -> Result<Self> {
        let p = Self {
            tensors,
            variant,
            control_seed: 0,
        };
        p.validate(spec)?;
        Ok(p)
    }

    pub fn validate(&self, spec: &NetSpec) -> Result<()> {
        spec.validate()?;
        for (name, shape) in spec.schema() {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing tensor {name}")))?;
            ensure!(
                t.shape() == shape.as_slice(),
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                shape
            );
            ensure!(t.iter().all(|v| v.is_finite()), "tensor {name} has non-finite entries");
        }
        ensure!(
            self.tensors.len() == spec.schema().len(),
            "checkpoint has tensors outside the schema"
        );
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn control_seed(&self) -> u64 {
        self.control_seed
    }

    pub fn tensors(&self) -> &TensorMap {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing tensor {name}")))
    }

    pub(crate) fn matrix(&self, name: &str) -> Result<ArrayView2<'_, f32>> {
        self.tensor(name)?
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::InvalidArgument(format!("{name}: {e}")))
    }

    pub(crate) fn vector(&self, name: &str) -> Result<ArrayView1<'_, f32>> {
        self.tensor(name)?
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|e| Error::InvalidArgument(format!("{name}: {e}")))
    }

    /// The same weights, but token embeddings are replaced at inference time
    /// by IID standard Gaussian draws for every token occurrence.
    pub fn into_control(mut self, seed: u64) -> Self {
        self.variant = Variant::Control;
        self.control_seed = seed;
        self
    }

    /// Writes the SLCK1 tensors and a JSON sidecar holding spec and variant.
    pub fn save(&self, spec: &NetSpec, path: &Path) -> Result<()> {
        checkpoint::save_tensors(path, &self.tensors)?;
        let sidecar = NetSidecar {
            spec: spec.clone(),
            variant: self.variant,
            control_seed: self.control_seed,
        };
        fs::write(checkpoint::sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    /// Loads a checkpoint. Without a sidecar, `spec` must be supplied and the
    /// variant is `Loaded`.
    pub fn load(path: &Path, spec: Option<&NetSpec>) -> Result<(NetSpec, Self)> {
        let tensors = checkpoint::load_tensors(path)?;
        let side = checkpoint::sidecar_path(path);
        let (spec, variant, control_seed) = if side.exists() {
            let s: NetSidecar = serde_json::from_str(&fs::read_to_string(side)?)?;
            (s.spec, s.variant, s.control_seed)
        } else {
            let spec = spec
                .cloned()
                .ok_or_else(|| Error::InvalidArgument("checkpoint has no sidecar; a NetSpec is required".into()))?;
            (spec, Variant::Loaded, 0)
        };
        let params = Self {
            tensors,
            variant,
            control_seed,
        };
        params.validate(&spec)?;
        Ok((spec, params))
    }
}

fn is_embedding(name: &str) -> bool {
    name == EMBED || name == UNEMBED
}

const INIT_STD: f64 = 0.02;

/// Fresh small-std initialization: weights `N(0, 0.02²)`, output projections
/// additionally scaled by `1/√(2·n_layers)`, norm gains one, biases zero.
pub fn init_step0(spec: &NetSpec, seed: u64) -> Result<NetParams> {
    spec.validate()?;
    let out_scale = 1.0 / (2.0 * spec.n_layers as f64).sqrt();
    let mut tensors = TensorMap::new();
    for (name, shape) in spec.schema() {
        let t = if name.ends_with(".bias") {
            ArrayD::zeros(IxDyn(&shape))
        } else if name.starts_with("ln") || name.contains(".ln") {
            ArrayD::ones(IxDyn(&shape))
        } else {
            let std = if name.ends_with("attn.out.weight") || name.ends_with("mlp.out.weight") {
                INIT_STD * out_scale
            } else {
                INIT_STD
            };
            let mut rng = rng::stream(seed, rng::derive(streams::NET_INIT, rng::label_id(&name)));
            let dist = Normal::new(0.0, std).expect("valid std");
            ArrayD::from_shape_simple_fn(IxDyn(&shape), || rng.sample(dist) as f32)
        };
        tensors.insert(name, t);
    }
    NetParams::new(spec, tensors, Variant::Step0)
}

/// Population mean and standard deviation of one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointStats {
    pub tensors: BTreeMap<String, TensorStats>,
}

pub fn tensor_stats(t: &ArrayD<f32>) -> TensorStats {
    let n = t.len();
    if n == 0 {
        return TensorStats { mean: 0.0, std: 0.0 };
    }
    let mean = t.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
    let var = t.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n as f64;
    TensorStats { mean, std: var.sqrt() }
}

pub fn checkpoint_stats(params: &NetParams) -> CheckpointStats {
    CheckpointStats {
        tensors: params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), tensor_stats(t)))
            .collect(),
    }
}

/// Replaces every tensor by IID `N(mean, var)` draws using that tensor's own
/// moments. With `include_embeddings == false` the embedding and unembedding
/// matrices are copied unchanged. Constant tensors stay bit-identical.
pub fn rerandomize(reference: &NetParams, include_embeddings: bool, seed: u64) -> NetParams {
    let mut tensors = TensorMap::new();
    for (name, t) in &reference.tensors {
        let keep = (!include_embeddings && is_embedding(name))
            || t.iter().all(|&v| v == t.iter().next().copied().unwrap_or(0.0));
        let new = if keep {
            t.clone()
        } else {
            let stats = tensor_stats(t);
            let dist = Normal::new(stats.mean, stats.std).expect("finite moments");
            let mut rng = rng::stream(seed, rng::derive(streams::RERANDOMIZE, rng::label_id(name)));
            ArrayD::from_shape_simple_fn(t.raw_dim(), || rng.sample(dist) as f32)
        };
        tensors.insert(name.clone(), new);
    }
    NetParams {
        tensors,
        variant: if include_embeddings {
            Variant::RerandInclEmb
        } else {
            Variant::RerandExclEmb
        },
        control_seed: reference.control_seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetSpec {
        NetSpec::new(2, 16, 2, 32, 8).unwrap()
    }

    #[test]
    fn spec_invariants() {
        let s = tiny();
        assert_eq!((s.d_head, s.d_mlp), (8, 64));
        assert!(NetSpec::new(1, 10, 3, 8, 4).is_err());
        assert!(NetSpec::new(1, 6, 2, 8, 4).is_err(), "odd d_head");
    }

    #[test]
    fn step0_is_deterministic_and_complete() {
        let s = tiny();
        let a = init_step0(&s, 1).unwrap();
        assert_eq!(a, init_step0(&s, 1).unwrap());
        assert_ne!(a, init_step0(&s, 2).unwrap());
        assert_eq!(a.variant(), Variant::Step0);
        assert_eq!(a.tensors().len(), s.schema().len());
        assert!(a.tensor("blocks.0.ln1.weight").unwrap().iter().all(|&v| v == 1.0));
        assert!(a.tensor("blocks.1.mlp.in.bias").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step0_embedding_std() {
        let s = NetSpec::new(1, 128, 4, 1024, 16).unwrap();
        let p = init_step0(&s, 3).unwrap();
        let st = tensor_stats(p.tensor(EMBED).unwrap());
        assert!((st.std - 0.02).abs() < 0.02 * 0.02, "std {}", st.std);
        let out = tensor_stats(p.tensor("blocks.0.attn.out.weight").unwrap());
        assert!((out.std - 0.02 / 2f64.sqrt()).abs() < 0.002);
    }

    #[test]
    fn stats_by_hand() {
        let t = ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let s = tensor_stats(&t);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-15);
        let z = tensor_stats(&ArrayD::<f32>::zeros(IxDyn(&[3, 3])));
        assert_eq!((z.mean, z.std), (0.0, 0.0));
    }

    #[test]
    fn rerandomize_excluding_embeddings_copies_them() {
        let s = tiny();
        let p = init_step0(&s, 1).unwrap();
        let r = rerandomize(&p, false, 9);
        assert_eq!(r.variant(), Variant::RerandExclEmb);
        assert_eq!(r.tensor(EMBED).unwrap(), p.tensor(EMBED).unwrap());
        assert_eq!(r.tensor(UNEMBED).unwrap(), p.tensor(UNEMBED).unwrap());
        assert_ne!(
            r.tensor("blocks.0.attn.q.weight").unwrap(),
            p.tensor("blocks.0.attn.q.weight").unwrap()
        );
        r.validate(&s).unwrap();
    }

    #[test]
    fn rerandomize_including_embeddings_changes_every_non_constant_tensor() {
        let s = tiny();
        let p = init_step0(&s, 1).unwrap();
        let r = rerandomize(&p, true, 9);
        assert_eq!(r.variant(), Variant::RerandInclEmb);
        for (name, t) in p.tensors() {
            let constant = t.iter().all(|&v| v == t.iter().next().copied().unwrap());
            assert_eq!(constant, r.tensor(name).unwrap() == t, "{name}");
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.slck");
        let s = tiny();
        let p = init_step0(&s, 4).unwrap().into_control(17);
        p.save(&s, &path).unwrap();
        let (s2, p2) = NetParams::load(&path, None).unwrap();
        assert_eq!((s2, p2), (s.clone(), p.clone()));
        std::fs::remove_file(checkpoint::sidecar_path(&path)).unwrap();
        assert!(NetParams::load(&path, None).is_err());
        let (_, p3) = NetParams::load(&path, Some(&s)).unwrap();
        assert_eq!(p3.variant(), Variant::Loaded);
    }

    #[test]
    fn variant_names_parse() {
        for v in [
            Variant::Loaded,
            Variant::Step0,
            Variant::RerandInclEmb,
            Variant::RerandExclEmb,
            Variant::Control,
        ] {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("trained".parse::<Variant>().is_err());
    }
}
