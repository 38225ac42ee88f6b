//! Global-noise conditional normalisation: a noise vector per ensemble member
//! is embedded once and mapped by per-block heads to `(γ, β, α, δ)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig};
use crate::model::{fan_in_bound, Init, ModelBundle, ModelError, ParamSpec, ParamVars, Params, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectionDensity {
    Full,
    /// Blocks 0, 2, 4, ...
    Half,
}

/// Noise handling across autoregressive steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// Fresh draw for every member at every step.
    Resample,
    /// One draw per member, held for the whole rollout.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseBranchConfig {
    pub d_noise: usize,
    pub injection_density: InjectionDensity,
    /// Emit a fourth head output gating long skips; must match the backbone.
    pub use_delta_gate: bool,
    /// Multiplier on the initial weights of each head's final layer.
    pub init_scale: f64,
    /// Start with exactly zero head outputs.
    pub zero_init: bool,
    pub noise_per_step: NoiseMode,
    pub ln_eps: f64,
    /// Optional cross-check against the backbone width.
    pub hidden_dim: Option<usize>,
}

impl Default for NoiseBranchConfig {
    fn default() -> Self {
        Self {
            d_noise: 32,
            injection_density: InjectionDensity::Full,
            use_delta_gate: false,
            init_scale: 1e-2,
            zero_init: false,
            noise_per_step: NoiseMode::Resample,
            ln_eps: 1e-5,
            hidden_dim: None,
        }
    }
}

impl NoiseBranchConfig {
    pub fn check_against(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.d_noise == 0 {
            return Err(ModelError::Config("d_noise must be at least 1".into()));
        }
        if let Some(d) = self.hidden_dim {
            if d != backbone.hidden_dim {
                return Err(ModelError::Config(format!(
                    "noise branch built for hidden_dim {d}, backbone has {}",
                    backbone.hidden_dim
                )));
            }
        }
        if self.use_delta_gate != backbone.long_skips {
            return Err(ModelError::Config(format!(
                "use_delta_gate ({}) must match backbone long_skips ({})",
                self.use_delta_gate, backbone.long_skips
            )));
        }
        Ok(())
    }

    pub fn injects(&self, block: usize) -> bool {
        match self.injection_density {
            InjectionDensity::Full => true,
            InjectionDensity::Half => block % 2 == 0,
        }
    }
}

pub fn is_noise_param(name: &str) -> bool {
    name.starts_with("noise.") || name.contains(".adaln.")
}

/// Parameter layout of the noise branch.
pub fn param_specs(backbone: &BackboneConfig, cfg: &NoiseBranchConfig) -> Vec<ParamSpec> {
    let e = cfg.d_noise;
    let d = backbone.hidden_dim;
    let scale = if cfg.zero_init { 0.0 } else { cfg.init_scale };
    let mut specs = vec![
        ParamSpec::new("noise.fc1.weight", &[e, 4 * e], Init::Uniform(fan_in_bound(e))),
        ParamSpec::new("noise.fc1.bias", &[4 * e], Init::Uniform(fan_in_bound(e))),
        ParamSpec::new("noise.fc2.weight", &[4 * e, e], Init::Uniform(fan_in_bound(4 * e))),
        ParamSpec::new("noise.fc2.bias", &[e], Init::Uniform(fan_in_bound(4 * e))),
        ParamSpec::new("noise.norm.gain", &[e], Init::Ones),
        ParamSpec::new("noise.norm.bias", &[e], Init::Zeros),
    ];
    for i in (0..backbone.n_blocks).filter(|&i| cfg.injects(i)) {
        let p = |s: &str| format!("blocks.{i}.adaln.{s}");
        specs.push(ParamSpec::new(p("fc1.weight"), &[e, d], Init::Uniform(fan_in_bound(e))));
        specs.push(ParamSpec::new(p("fc1.bias"), &[d], Init::Uniform(fan_in_bound(e))));
        specs.push(ParamSpec::new(p("fc2.weight"), &[d, 4 * d], Init::ScaledUniform(fan_in_bound(d), scale)));
        specs.push(ParamSpec::new(p("fc2.bias"), &[4 * d], Init::ScaledUniform(fan_in_bound(d), scale)));
    }
    specs
}

/// Independent standard-normal streams, one per ensemble member.
///
/// Member `m` always reads stream `m` of the generator seeded with `seed`, so
/// its draws do not depend on how many members exist or on thread count.
#[derive(Clone, Debug)]
pub struct NoiseStreams {
    rngs: Vec<ChaCha8Rng>,
    d_noise: usize,
}

impl NoiseStreams {
    pub fn new(seed: u64, members: usize, d_noise: usize) -> Result<Self> {
        if members == 0 {
            return Err(ModelError::Config("ensemble size must be at least 1".into()));
        }
        let rngs = (0..members)
            .map(|m| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(m as u64);
                r
            })
            .collect();
        Ok(Self { rngs, d_noise })
    }

    pub fn members(&self) -> usize {
        self.rngs.len()
    }

    /// Next `[members, d_noise]` draw.
    pub fn draw(&mut self) -> Tensor {
        let d = self.d_noise;
        let mut data = Vec::with_capacity(self.rngs.len() * d);
        for r in &mut self.rngs {
            data.extend((0..d).map(|_| -> f64 { StandardNormal.sample(r) }));
        }
        Tensor::new(vec![self.rngs.len(), d], data).expect("noise shape")
    }
}

/// `[M, d_noise]` i.i.d. standard normals, reproducible from `seed`.
pub fn sample_noise(members: usize, d_noise: usize, seed: u64) -> Result<Tensor> {
    Ok(NoiseStreams::new(seed, members, d_noise)?.draw())
}

/// `LN(W₂·SiLU(W₁ε + b₁) + b₂)`, one row per member.
pub fn noise_embedding(cfg: &NoiseBranchConfig, p: &ParamVars, eps: &Var) -> Result<Var> {
    let h = eps.linear(p.get("noise.fc1.weight")?, Some(p.get("noise.fc1.bias")?))?.silu();
    let h = h.linear(p.get("noise.fc2.weight")?, Some(p.get("noise.fc2.bias")?))?;
    Ok(h.layer_norm(p.get("noise.norm.gain")?, p.get("noise.norm.bias")?, cfg.ln_eps)?)
}

/// Per-block modulation, each field `[R, 1, hidden]` so it is shared across sites.
#[derive(Clone, Debug)]
pub struct BlockModulation {
    pub gamma: Var,
    pub beta: Var,
    pub alpha: Var,
    pub delta: Option<Var>,
}

/// Evaluates every injected block's head on the embedding of `eps` `[R, d_noise]`.
pub fn block_modulations(
    backbone: &BackboneConfig,
    cfg: &NoiseBranchConfig,
    p: &ParamVars,
    tape: &Tape,
    eps: &Tensor,
) -> Result<Vec<Option<BlockModulation>>> {
    let rows = eps.shape()[0];
    let d = backbone.hidden_dim;
    let e = noise_embedding(cfg, p, &tape.constant(eps.clone()))?;
    let mut mods = Vec::with_capacity(backbone.n_blocks);
    for i in 0..backbone.n_blocks {
        if !cfg.injects(i) {
            mods.push(None);
            continue;
        }
        let name = |s: &str| format!("blocks.{i}.adaln.{s}");
        let h = e.linear(p.get(&name("fc1.weight"))?, Some(p.get(&name("fc1.bias"))?))?.silu();
        let out = h.linear(p.get(&name("fc2.weight"))?, Some(p.get(&name("fc2.bias"))?))?;
        let part = |k: usize| -> Result<Var> { Ok(out.slice(1, k * d, d)?.reshape(&[rows, 1, d])?) };
        mods.push(Some(BlockModulation {
            gamma: part(0)?,
            beta: part(1)?,
            alpha: part(2)?,
            delta: if cfg.use_delta_gate { Some(part(3)?) } else { None },
        }));
    }
    Ok(mods)
}

/// One residual block with optional modulation and long skip:
///
/// ```text
/// x̃ = (1 + γ)·norm(x) + β
/// y = transform(x̃)
/// out = post(x + (1 + α)·y)                 (post = identity for pre-norm)
/// out = (out + δ·skip) · (1 + δ²)^(-1/2)   when a skip is wired in
/// ```
///
/// `skip` carries the skip activations and the learned gate; with modulation
/// the effective gate is `gate + δ_noise`.
pub fn modulate_block(
    x: &Var,
    skip: Option<(&Var, &Var)>,
    m: Option<&BlockModulation>,
    norm: impl Fn(&Var) -> Result<Var>,
    transform: impl Fn(&Var) -> Result<Var>,
    post: Option<&dyn Fn(&Var) -> Result<Var>>,
) -> Result<Var> {
    let mut h = norm(x)?;
    if let Some(m) = m {
        h = h.mul(&m.gamma.add_scalar(1.0))?.add(&m.beta)?;
    }
    let mut y = transform(&h)?;
    if let Some(m) = m {
        y = y.mul(&m.alpha.add_scalar(1.0))?;
    }
    let mut out = x.add(&y)?;
    if let Some(post) = post {
        out = post(&out)?;
    }
    let Some((s, gate)) = skip else {
        return Ok(out);
    };
    let delta = match m {
        Some(BlockModulation { delta: Some(dn), .. }) => gate.add(dn)?,
        Some(_) => {
            return Err(ModelError::Config(
                "block receives a long skip but the noise branch has no delta gate".into(),
            ))
        }
        None => gate.clone(),
    };
    let mixed = out.add(&delta.mul(s)?)?;
    Ok(mixed.mul(&delta.square().add_scalar(1.0).rsqrt())?)
}

impl ModelBundle {
    /// Returns a copy with a freshly initialised noise branch; backbone
    /// parameters are copied unchanged.
    pub fn attach_noise_branch(&self, cfg: NoiseBranchConfig, seed: u64) -> Result<ModelBundle> {
        if self.noise.is_some() {
            return Err(ModelError::Config("model already has a noise branch".into()));
        }
        cfg.check_against(&self.backbone)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = self.params.clone();
        let extra = Params::from_specs(&param_specs(&self.backbone, &cfg), &mut rng);
        for (k, v) in extra.iter() {
            params.insert(k.clone(), v.clone());
        }
        let bundle = ModelBundle {
            noise: Some(cfg),
            params,
            ..self.clone()
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Modulated forward of `R` rows: history `[R, k, C, spatial...]`, one
    /// noise row per history row.
    pub fn forward_with_noise(&self, p: &ParamVars, tape: &Tape, history: &Tensor, eps: &Tensor) -> Result<Var> {
        let cfg = self.noise.as_ref().ok_or(ModelError::MissingNoiseBranch)?;
        let rows = history.shape()[0];
        if eps.shape() != [rows, cfg.d_noise] {
            return Err(ModelError::Config(format!(
                "noise batch {:?} does not match {rows} rows of width {}",
                eps.shape(),
                cfg.d_noise
            )));
        }
        let mods = block_modulations(&self.backbone, cfg, p, tape, eps)?;
        backbone::forward(&self.backbone, p, tape, history, &mods)
    }

    /// `M` members from one normalised history `[k, C, spatial...]`; returns
    /// `[M, C, spatial...]`. Member `m` uses noise stream `m` of `seed`.
    pub fn forward_ensemble(&self, history: &Tensor, members: usize, seed: u64) -> Result<Tensor> {
        let cfg = self.noise.as_ref().ok_or(ModelError::MissingNoiseBranch)?;
        self.params.check_finite()?;
        let eps = sample_noise(members, cfg.d_noise, seed)?;
        let rows = replicate(history, members)?;
        let tape = Tape::new();
        let p = self.params.to_vars(&tape, |_| false);
        let out = self.forward_with_noise(&p, &tape, &rows, &eps)?;
        Ok((*out.value()).clone())
    }
}

/// Stacks `n` copies of `x` along a new leading axis.
pub fn replicate(x: &Tensor, n: usize) -> Result<Tensor> {
    let mut shape = vec![n];
    shape.extend_from_slice(x.shape());
    let mut data = Vec::with_capacity(n * x.numel());
    for _ in 0..n {
        data.extend_from_slice(x.data());
    }
    Ok(Tensor::new(shape, data)?)
}
