//! Deterministic autoregressive emulator.
//!
//! The hidden state is channel-last, `[B, sites, hidden]`. Each residual
//! block normalises, applies a circular spatial stencil followed by a per-site
//! MLP, and adds the result back; see [`crate::modulation::modulate_block`]
//! for the exact block equation.

use serde::{Deserialize, Serialize};

use crate::model::{fan_in_bound, Init, ModelBundle, ModelError, ParamSpec, ParamVars, Result};
use crate::modulation::{modulate_block, BlockModulation};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    Pre,
    /// Normalises the block output; an extra pre-normalisation layer feeds
    /// the transform so modulation always acts on normalised features.
    Post,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Layer,
    /// Pass-through, used to compare block layouts structurally.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub history_len: usize,
    pub channels: usize,
    pub spatial: Vec<usize>,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    /// Width multiplier of the per-site MLP.
    pub mlp_ratio: usize,
    /// Stencil half-width along each spatial axis.
    pub stencil_radius: usize,
    pub norm_placement: NormPlacement,
    pub norm: NormKind,
    /// Feed block `i` into block `n_blocks - 1 - i` through a gated skip.
    pub long_skips: bool,
    pub predict_residual: bool,
    pub activation: String,
    /// The stencil wraps around; non-periodic domains are not supported.
    pub periodic: bool,
    pub ln_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            history_len: 2,
            channels: 1,
            spatial: vec![40],
            hidden_dim: 32,
            n_blocks: 4,
            mlp_ratio: 2,
            stencil_radius: 2,
            norm_placement: NormPlacement::Pre,
            norm: NormKind::Layer,
            long_skips: false,
            predict_residual: true,
            activation: "silu".into(),
            periodic: true,
            ln_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.history_len == 0 || self.channels == 0 || self.hidden_dim == 0 || self.n_blocks == 0 {
            return bad("history_len, channels, hidden_dim and n_blocks must be positive".into());
        }
        if self.spatial.is_empty() || self.spatial.contains(&0) {
            return bad(format!("invalid spatial extents {:?}", self.spatial));
        }
        if self.long_skips && self.n_blocks < 2 {
            return bad("long_skips needs at least 2 blocks".into());
        }
        if !self.periodic {
            return bad("circular stencil padding requires a periodic domain".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if let Some((axis, &n)) = self.spatial.iter().enumerate().find(|(_, &n)| 2 * self.stencil_radius >= n) {
            return bad(format!("stencil radius {} too wide for axis {axis} of extent {n}", self.stencil_radius));
        }
        activation(&self.activation)?;
        Ok(())
    }

    pub fn sites(&self) -> usize {
        self.spatial.iter().product()
    }

    /// Number of stencil taps: the centre plus `2r` along each axis.
    pub fn stencil_taps(&self) -> usize {
        1 + 2 * self.stencil_radius * self.spatial.len()
    }

    /// Block whose output feeds block `j` through a long skip, if any.
    pub fn skip_source(&self, j: usize) -> Option<usize> {
        let i = self.n_blocks - 1 - j;
        (self.long_skips && i < j).then_some(i)
    }
}

fn activation(name: &str) -> Result<fn(&Var) -> Var> {
    match name {
        "silu" => Ok(Var::silu),
        "gelu" => Ok(Var::gelu),
        other => Err(ModelError::Config(format!("unknown activation `{other}` (available: silu, gelu)"))),
    }
}

/// Parameter layout of the deterministic backbone.
pub fn param_specs(cfg: &BackboneConfig) -> Vec<ParamSpec> {
    let d = cfg.hidden_dim;
    let kc = cfg.history_len * cfg.channels;
    let hidden = cfg.mlp_ratio * d;
    let k = cfg.stencil_taps();
    let mut specs = vec![
        ParamSpec::new("encoder.weight", &[kc, d], Init::Uniform(fan_in_bound(kc))),
        ParamSpec::new("encoder.bias", &[d], Init::Uniform(fan_in_bound(kc))),
    ];
    for i in 0..cfg.n_blocks {
        let p = |s: &str| format!("blocks.{i}.{s}");
        specs.push(ParamSpec::new(p("norm.gain"), &[d], Init::Ones));
        specs.push(ParamSpec::new(p("norm.bias"), &[d], Init::Zeros));
        if cfg.norm_placement == NormPlacement::Post {
            specs.push(ParamSpec::new(p("post_norm.gain"), &[d], Init::Ones));
            specs.push(ParamSpec::new(p("post_norm.bias"), &[d], Init::Zeros));
        }
        specs.push(ParamSpec::new(p("mix.weight"), &[k, d], Init::Uniform(fan_in_bound(k))));
        specs.push(ParamSpec::new(p("fc1.weight"), &[d, hidden], Init::Uniform(fan_in_bound(d))));
        specs.push(ParamSpec::new(p("fc1.bias"), &[hidden], Init::Uniform(fan_in_bound(d))));
        specs.push(ParamSpec::new(p("fc2.weight"), &[hidden, d], Init::Uniform(fan_in_bound(hidden))));
        specs.push(ParamSpec::new(p("fc2.bias"), &[d], Init::Uniform(fan_in_bound(hidden))));
        if cfg.skip_source(i).is_some() {
            specs.push(ParamSpec::new(p("skip_gate"), &[d], Init::Zeros));
        }
    }
    specs.push(ParamSpec::new("head.weight", &[d, cfg.channels], Init::Zeros));
    specs.push(ParamSpec::new("head.bias", &[cfg.channels], Init::Zeros));
    specs
}

/// Neighbour tables for the circular cross-shaped stencil: entry `[k][s]` is
/// the site read by tap `k` for output site `s`. Tap 0 is the centre.
pub fn stencil_table(spatial: &[usize], radius: usize) -> Vec<Vec<usize>> {
    let sites: usize = spatial.iter().product();
    let mut strides = vec![1usize; spatial.len()];
    for a in (0..spatial.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * spatial[a + 1];
    }
    let mut offsets: Vec<(usize, isize)> = vec![(0, 0)];
    for a in 0..spatial.len() {
        for r in 1..=radius as isize {
            offsets.push((a, -r));
            offsets.push((a, r));
        }
    }
    offsets
        .iter()
        .map(|&(axis, off)| {
            (0..sites)
                .map(|s| {
                    let n = spatial[axis] as isize;
                    let c = (s / strides[axis]) as isize % n;
                    let moved = (c + off).rem_euclid(n);
                    (s as isize + (moved - c) * strides[axis] as isize) as usize
                })
                .collect()
        })
        .collect()
}

/// Depthwise circular stencil: `out[b,s,d] = Σ_k w[k,d] · x[b, nb[k][s], d]`.
pub fn spatial_mix(x: &Var, weight: &Var, table: &std::rc::Rc<Vec<Vec<usize>>>) -> Result<Var> {
    let xv = x.value();
    let wv = weight.value();
    let shape = xv.shape().to_vec();
    let (k, sites) = (table.len(), table[0].len());
    if shape.len() != 3 || shape[1] != sites || wv.shape() != [k, shape[2]] {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "spatial_mix",
            lhs: shape,
            rhs: wv.shape().to_vec(),
        }
        .into());
    }
    let (b, d) = (shape[0], shape[2]);
    let mut out = vec![0.0; b * sites * d];
    let xd = xv.data();
    let wd = wv.data();
    for bi in 0..b {
        let base = bi * sites * d;
        for (tap, nb) in table.iter().enumerate() {
            let w = &wd[tap * d..(tap + 1) * d];
            for s in 0..sites {
                let src = &xd[base + nb[s] * d..base + nb[s] * d + d];
                let dst = &mut out[base + s * d..base + s * d + d];
                for j in 0..d {
                    dst[j] += w[j] * src[j];
                }
            }
        }
    }
    let table = table.clone();
    let value = Tensor::new(shape, out)?;
    let backward = Box::new(move |g: &[f64], needs: &[bool]| {
        let xd = xv.data();
        let wd = wv.data();
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0; xd.len()];
            for bi in 0..b {
                let base = bi * sites * d;
                for (tap, nb) in table.iter().enumerate() {
                    let w = &wd[tap * d..(tap + 1) * d];
                    for s in 0..sites {
                        let gs = &g[base + s * d..base + s * d + d];
                        let dst = &mut gx[base + nb[s] * d..base + nb[s] * d + d];
                        for j in 0..d {
                            dst[j] += w[j] * gs[j];
                        }
                    }
                }
            }
            gx
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![0.0; wd.len()];
            for bi in 0..b {
                let base = bi * sites * d;
                for (tap, nb) in table.iter().enumerate() {
                    let acc = &mut gw[tap * d..(tap + 1) * d];
                    for s in 0..sites {
                        let gs = &g[base + s * d..base + s * d + d];
                        let src = &xd[base + nb[s] * d..base + nb[s] * d + d];
                        for j in 0..d {
                            acc[j] += gs[j] * src[j];
                        }
                    }
                }
            }
            gw
        });
        vec![gx, gw]
    });
    Ok(x.tape().custom("spatial_mix", &[x, weight], value, backward)?)
}

/// Stacks a `[B, k, C, sites]` history into channel-last `[B, sites, k·C]`
/// features (feature index `t·C + c`).
pub fn stack_history(history: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    let shape = history.shape();
    let sites = cfg.sites();
    let (k, c) = (cfg.history_len, cfg.channels);
    let expected_tail: Vec<usize> = [k, c].iter().copied().chain(cfg.spatial.iter().copied()).collect();
    if shape.len() != 3 + cfg.spatial.len() || shape[1..] != expected_tail[..] {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "encode",
            lhs: shape.to_vec(),
            rhs: expected_tail,
        }
        .into());
    }
    let b = shape[0];
    let src = history.data();
    let kc = k * c;
    let mut out = vec![0.0; b * sites * kc];
    for bi in 0..b {
        for f in 0..kc {
            let plane = &src[(bi * kc + f) * sites..(bi * kc + f + 1) * sites];
            for (s, v) in plane.iter().enumerate() {
                out[(bi * sites + s) * kc + f] = *v;
            }
        }
    }
    Ok(Tensor::new(vec![b, sites, kc], out)?)
}

/// Input projection of a stacked history: `[B, sites, hidden]`.
pub fn encode(cfg: &BackboneConfig, p: &ParamVars, tape: &Tape, history: &Tensor) -> Result<Var> {
    let x = tape.constant(stack_history(history, cfg)?);
    Ok(x.linear(p.get("encoder.weight")?, Some(p.get("encoder.bias")?))?)
}

/// Full forward pass on a normalised history `[B, k, C, spatial...]`,
/// returning the normalised next state `[B, C, spatial...]`.
///
/// `mods[i]`, when present, modulates block `i`.
pub fn forward(
    cfg: &BackboneConfig,
    p: &ParamVars,
    tape: &Tape,
    history: &Tensor,
    mods: &[Option<BlockModulation>],
) -> Result<Var> {
    let act = activation(&cfg.activation)?;
    let table = std::rc::Rc::new(stencil_table(&cfg.spatial, cfg.stencil_radius));
    let mut h = encode(cfg, p, tape, history)?;
    let b = history.shape()[0];
    let mut saved: Vec<Option<Var>> = vec![None; cfg.n_blocks];
    for i in 0..cfg.n_blocks {
        let name = |s: &str| format!("blocks.{i}.{s}");
        let norm = |x: &Var, which: &str| -> Result<Var> {
            match cfg.norm {
                NormKind::Layer => Ok(x.layer_norm(
                    p.get(&name(&format!("{which}.gain")))?,
                    p.get(&name(&format!("{which}.bias")))?,
                    cfg.ln_eps,
                )?),
                NormKind::Identity => Ok(x.clone()),
            }
        };
        let transform = |x: &Var| -> Result<Var> {
            let m = spatial_mix(x, p.get(&name("mix.weight"))?, &table)?;
            let z = m.linear(p.get(&name("fc1.weight"))?, Some(p.get(&name("fc1.bias"))?))?;
            Ok(act(&z).linear(p.get(&name("fc2.weight"))?, Some(p.get(&name("fc2.bias"))?))?)
        };
        let post = |x: &Var| norm(x, "post_norm");
        let skip = match cfg.skip_source(i) {
            Some(src) => Some((saved[src].clone().expect("skip source computed earlier"), p.get(&name("skip_gate"))?.clone())),
            None => None,
        };
        h = modulate_block(
            &h,
            skip.as_ref().map(|(s, g)| (s, g)),
            mods.get(i).and_then(Option::as_ref),
            |x| norm(x, "norm"),
            transform,
            (cfg.norm_placement == NormPlacement::Post).then_some(&post as &dyn Fn(&Var) -> Result<Var>),
        )?;
        if cfg.long_skips && i < cfg.n_blocks - 1 - i {
            saved[i] = Some(h.clone());
        }
    }
    let out = h.linear(p.get("head.weight")?, Some(p.get("head.bias")?))?;
    let mut out_shape = vec![b, cfg.channels];
    out_shape.extend_from_slice(&cfg.spatial);
    let delta = out.permute(&[0, 2, 1])?.reshape(&out_shape)?;
    if !cfg.predict_residual {
        return Ok(delta);
    }
    Ok(delta.add(&tape.constant(last_frame(history)?))?)
}

/// Last history frame `[B, C, spatial...]` of a `[B, k, C, spatial...]` history.
pub fn last_frame(history: &Tensor) -> Result<Tensor> {
    let shape = history.shape();
    let (b, k) = (shape[0], shape[1]);
    let frame: usize = shape[2..].iter().product();
    let mut data = Vec::with_capacity(b * frame);
    for bi in 0..b {
        let off = (bi * k + k - 1) * frame;
        data.extend_from_slice(&history.data()[off..off + frame]);
    }
    let mut out_shape = vec![b];
    out_shape.extend_from_slice(&shape[2..]);
    Ok(Tensor::new(out_shape, data)?)
}

impl ModelBundle {
    /// Unmodulated one-step prediction in normalised units.
    pub fn forward_deterministic(&self, history: &Tensor) -> Result<Tensor> {
        self.params.check_finite()?;
        let tape = Tape::new();
        let p = self.params.to_vars(&tape, |_| false);
        let out = forward(&self.backbone, &p, &tape, history, &[])?;
        Ok((*out.value()).clone())
    }
}

#[cfg(test)]
mod tests;
