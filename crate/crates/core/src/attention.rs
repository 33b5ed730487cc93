//! Multi-head self-attention with interchangeable key pipelines.
//!
//! The query, value and output are linear projections with bias. The key is produced by
//! one of five pipelines selected by [`KeyVariantSpec`]:
//!
//! | kind       | key path                                                                 |
//! |------------|--------------------------------------------------------------------------|
//! | `baseline` | `X·W_kᵀ + b_k`                                                           |
//! | `spatialk` | expand → chart rearrange → grouped mix → inverse rearrange → `to_out`    |
//! | `kua`      | as `spatialk`, with context broadcasting right after the grouped mix     |
//! | `simplek`  | expand → chart rearrange → ungrouped condense conv (`H·N → N` channels)  |
//! | `vanillak` | expand → chart rearrange → grouped mix → optional CB → mean over charts  |
//!
//! "Expand" is `Γ ⊙ (X·W_expandᵀ)`, lifting every token from `D` to `H·D`
//! features, one `D`-sized slice per chart. The chart rearrangement maps
//! element `(token n, chart h, feature d)` to row `h·N + n`, column `d`, so
//! that each chart owns a contiguous block of `N` channels and the mix is a
//! kernel-size-one convolution with `groups = H` over those channels.
//!
//! The manifold key layers carry no bias. The whole key path runs at model width; its `N × D` output is split into
//! heads exactly like the query and value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyKind {
    Baseline,
    SpatialK,
    Kua,
    SimpleK,
    VanillaK,
}

impl KeyKind {
    pub const ALL: [KeyKind; 5] = [
        KeyKind::Baseline,
        KeyKind::SpatialK,
        KeyKind::Kua,
        KeyKind::SimpleK,
        KeyKind::VanillaK,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KeyKind::Baseline => "baseline",
            KeyKind::SpatialK => "spatialk",
            KeyKind::Kua => "kua",
            KeyKind::SimpleK => "simplek",
            KeyKind::VanillaK => "vanillak",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown key variant {s:?}")))
    }
}

/// Key pipeline selection. Normalized on construction: `kua` always has
/// context broadcasting on, `baseline` carries `charts = 1, cb = false`, and
/// CB is only configurable for `vanillak`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawKeyVariantSpec")]
pub struct KeyVariantSpec {
    pub kind: KeyKind,
    pub charts: usize,
    pub cb: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKeyVariantSpec {
    kind: KeyKind,
    #[serde(default = "one")]
    charts: usize,
    #[serde(default)]
    cb: bool,
}

fn one() -> usize {
    1
}

impl TryFrom<RawKeyVariantSpec> for KeyVariantSpec {
    type Error = Error;

    fn try_from(raw: RawKeyVariantSpec) -> Result<Self> {
        KeyVariantSpec::new(raw.kind, raw.charts, raw.cb)
    }
}

impl KeyVariantSpec {
    pub fn new(kind: KeyKind, charts: usize, cb: bool) -> Result<Self> {
        if kind != KeyKind::Baseline && charts == 0 {
            return Err(Error::Config(format!(
                "{} needs at least one chart",
                kind.name()
            )));
        }
        Ok(match kind {
            KeyKind::Baseline => Self {
                kind,
                charts: 1,
                cb: false,
            },
            KeyKind::Kua => Self {
                kind,
                charts,
                cb: true,
            },
            KeyKind::VanillaK => Self { kind, charts, cb },
            KeyKind::SpatialK | KeyKind::SimpleK => Self {
                kind,
                charts,
                cb: false,
            },
        })
    }

    pub fn baseline() -> Self {
        Self::new(KeyKind::Baseline, 1, false).unwrap()
    }

    pub fn spatialk(charts: usize) -> Self {
        Self::new(KeyKind::SpatialK, charts, false).unwrap()
    }

    pub fn kua(charts: usize) -> Self {
        Self::new(KeyKind::Kua, charts, true).unwrap()
    }

    pub fn simplek(charts: usize) -> Self {
        Self::new(KeyKind::SimpleK, charts, false).unwrap()
    }

    pub fn vanillak(charts: usize, cb: bool) -> Self {
        Self::new(KeyKind::VanillaK, charts, cb).unwrap()
    }

    /// The reference configuration for each kind: `vanillak` with CB on.
    pub fn standard(kind: KeyKind, charts: usize) -> Result<Self> {
        Self::new(kind, charts, kind == KeyKind::VanillaK)
    }

    pub fn uses_cb(&self) -> bool {
        self.cb
    }
}

impl std::fmt::Display for KeyVariantSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            KeyKind::Baseline => write!(f, "baseline"),
            k => write!(
                f,
                "{}(H={}{})",
                k.name(),
                self.charts,
                if self.cb { ",cb" } else { "" }
            ),
        }
    }
}

/// Initial value of the chart gain Γ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaInit {
    #[default]
    Ones,
    /// LayerScale-style constant, e.g. `1e-4`.
    Small(f64),
}

impl GammaInit {
    fn value(self) -> f64 {
        match self {
            GammaInit::Ones => 1.0,
            GammaInit::Small(v) => v,
        }
    }
}

/// Std of the initial linear weights.
pub const WEIGHT_INIT_STD: f64 = 0.02;
/// Std of the noise added to identity-initialized mixing coefficients.
pub const MIX_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub enum KeyParams {
    Linear {
        w_k: ParamId,
        b_k: ParamId,
    },
    Manifold {
        /// `[H·D, D]`
        w_expand: ParamId,
        /// `[H·D]`
        gamma: ParamId,
        /// `[H·N, N]` grouped mix, or `[N, H·N]` condense for `simplek`.
        mix: ParamId,
        /// `[D, H·D]`, `spatialk`/`kua` only.
        to_out: Option<ParamId>,
        /// `[D]`, whenever CB is active.
        gamma_prime: Option<ParamId>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub dim: usize,
    pub tokens: usize,
    pub spec: KeyVariantSpec,
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub key: KeyParams,
}

impl AttentionParams {
    /// Registers every tensor of one attention layer under `prefix`. Shapes
    /// are fully determined by `(dim, tokens, spec)`.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        tokens: usize,
        spec: KeyVariantSpec,
        gamma_init: GammaInit,
    ) -> Result<Self> {
        if dim == 0 || tokens == 0 {
            return Err(Error::Config(format!(
                "attention needs positive dim and token count, got dim={dim} tokens={tokens}"
            )));
        }
        let lin = Init::TruncatedNormal {
            std: WEIGHT_INIT_STD,
        };
        let mut reg = |name: &str, shape: &[usize], kind, init| {
            store.register(format!("{prefix}.{name}"), shape, kind, init)
        };
        let w_q = reg("w_q", &[dim, dim], ParamKind::Weight, lin.clone())?;
        let b_q = reg("b_q", &[dim], ParamKind::Bias, Init::Zeros)?;
        let w_v = reg("w_v", &[dim, dim], ParamKind::Weight, lin.clone())?;
        let b_v = reg("b_v", &[dim], ParamKind::Bias, Init::Zeros)?;
        let h = spec.charts;
        let key = match spec.kind {
            KeyKind::Baseline => KeyParams::Linear {
                w_k: reg("key.w_k", &[dim, dim], ParamKind::Weight, lin.clone())?,
                b_k: reg("key.b_k", &[dim], ParamKind::Bias, Init::Zeros)?,
            },
            kind => {
                let w_expand = reg(
                    "key.expand",
                    &[h * dim, dim],
                    ParamKind::Weight,
                    lin.clone(),
                )?;
                let gamma = reg(
                    "key.gamma",
                    &[h * dim],
                    ParamKind::Gain,
                    Init::Constant(gamma_init.value()),
                )?;
                let mix = if kind == KeyKind::SimpleK {
                    reg(
                        "key.condense",
                        &[tokens, h * tokens],
                        ParamKind::Weight,
                        Init::ChartAverage {
                            charts: h,
                            std: MIX_INIT_STD,
                        },
                    )?
                } else {
                    reg(
                        "key.mix",
                        &[h * tokens, tokens],
                        ParamKind::Weight,
                        Init::GroupedIdentity {
                            groups: h,
                            std: MIX_INIT_STD,
                        },
                    )?
                };
                let to_out = if matches!(kind, KeyKind::SpatialK | KeyKind::Kua) {
                    Some(reg(
                        "key.to_out",
                        &[dim, h * dim],
                        ParamKind::Weight,
                        lin.clone(),
                    )?)
                } else {
                    None
                };
                let gamma_prime = if spec.uses_cb() {
                    Some(reg(
                        "key.gamma_prime",
                        &[dim],
                        ParamKind::Gain,
                        Init::Constant(1.0),
                    )?)
                } else {
                    None
                };
                KeyParams::Manifold {
                    w_expand,
                    gamma,
                    mix,
                    to_out,
                    gamma_prime,
                }
            }
        };
        let w_out = reg("w_out", &[dim, dim], ParamKind::Weight, lin)?;
        let b_out = reg("b_out", &[dim], ParamKind::Bias, Init::Zeros)?;
        Ok(Self {
            dim,
            tokens,
            spec,
            w_q,
            b_q,
            w_v,
            b_v,
            w_out,
            b_out,
            key,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.w_q, self.b_q, self.w_v, self.b_v, self.w_out, self.b_out,
        ];
        match &self.key {
            KeyParams::Linear { w_k, b_k } => ids.extend([*w_k, *b_k]),
            KeyParams::Manifold {
                w_expand,
                gamma,
                mix,
                to_out,
                gamma_prime,
            } => {
                ids.extend([*w_expand, *gamma, *mix]);
                ids.extend(to_out.iter().chain(gamma_prime.iter()).copied());
            }
        }
        ids
    }
}

/// `SoftMax(Q·Kᵀ/√d)·V` over the last two axes. Returns the output and the
/// attention matrix `[..., N, N]`.
pub fn scaled_dot_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (
        g.shape(q).to_vec(),
        g.shape(k).to_vec(),
        g.shape(v).to_vec(),
    );
    if qs.len() < 2 || qs != ks || ks != vs {
        return Err(Error::shape("scaled_dot_attention", &qs, &ks));
    }
    let d = qs[qs.len() - 1];
    let kt = g.transpose_last2(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::lit(1.0 / (d as f64).sqrt()));
    let attn = g.softmax(scores, qs.len() - 1)?;
    let out = g.matmul(attn, v)?;
    Ok((out, attn))
}

/// `Γ ⊙ (X·W_expandᵀ)`: `[..., N, D] → [..., N, H·D]`.
pub fn expand_key<T: Scalar>(g: &mut Graph<T>, x: Var, w_expand: Var, gamma: Var) -> Result<Var> {
    let lifted = g.linear(x, w_expand, None)?;
    g.mul(lifted, gamma)
}

fn split_last_two(shape: &[usize], op: &'static str) -> Result<(Vec<usize>, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, shape, &[]));
    }
    let r = shape.len();
    Ok((shape[..r - 2].to_vec(), shape[r - 2], shape[r - 1]))
}

/// `[..., N, H·D] → [..., H·N, D]`; `(n, h, d)` lands on row `h·N + n`.
pub fn chart_rearrange<T: Scalar>(g: &mut Graph<T>, x: Var, charts: usize) -> Result<Var> {
    let (lead, n, hd) = split_last_two(g.shape(x), "chart_rearrange")?;
    if charts == 0 || hd % charts != 0 {
        return Err(Error::shape("chart_rearrange", g.shape(x), &[charts]));
    }
    let d = hd / charts;
    let r = lead.len();
    let split: Vec<usize> = lead.iter().copied().chain([n, charts, d]).collect();
    let y = g.reshape(x, &split)?;
    let mut perm: Vec<usize> = (0..r + 3).collect();
    perm.swap(r, r + 1);
    let y = g.permute(y, &perm)?;
    let merged: Vec<usize> = lead.iter().copied().chain([charts * n, d]).collect();
    g.reshape(y, &merged)
}

/// Inverse of [`chart_rearrange`]: `[..., H·N, D] → [..., N, H·D]`.
pub fn chart_unrearrange<T: Scalar>(g: &mut Graph<T>, x: Var, charts: usize) -> Result<Var> {
    let (lead, hn, d) = split_last_two(g.shape(x), "chart_unrearrange")?;
    if charts == 0 || hn % charts != 0 {
        return Err(Error::shape("chart_unrearrange", g.shape(x), &[charts]));
    }
    let n = hn / charts;
    let r = lead.len();
    let split: Vec<usize> = lead.iter().copied().chain([charts, n, d]).collect();
    let y = g.reshape(x, &split)?;
    let mut perm: Vec<usize> = (0..r + 3).collect();
    perm.swap(r, r + 1);
    let y = g.permute(y, &perm)?;
    let merged: Vec<usize> = lead.iter().copied().chain([n, charts * d]).collect();
    g.reshape(y, &merged)
}

/// Per-chart token mixing: grouped kernel-size-one conv over `[..., H·N, D]`
/// with `groups = H` and coefficients `[H·N, N]`.
pub fn chart_mix<T: Scalar>(g: &mut Graph<T>, xr: Var, mix: Var, charts: usize) -> Result<Var> {
    let (_, hn, _) = split_last_two(g.shape(xr), "chart_mix")?;
    let ws = g.shape(mix).to_vec();
    if charts == 0 || ws.len() != 2 || ws[0] != hn || ws[0] != charts * ws[1] {
        return Err(Error::Config(format!(
            "chart mix coefficients {ws:?} do not match {hn} chart-token channels over {charts} charts"
        )));
    }
    g.grouped_pointwise_conv(xr, mix, charts)
}

/// Context broadcasting over a `[..., H, N, D]` key:
/// `½·(K + mean over all H·N positions of γ′ ⊙ K)`.
pub fn context_broadcast<T: Scalar>(g: &mut Graph<T>, k: Var, gamma_prime: Var) -> Result<Var> {
    let r = g.shape(k).len();
    if r < 3 {
        return Err(Error::shape(
            "context_broadcast",
            g.shape(k),
            g.shape(gamma_prime),
        ));
    }
    let d = g.shape(k)[r - 1];
    if g.shape(gamma_prime) != [d] {
        return Err(Error::shape(
            "context_broadcast",
            g.shape(k),
            g.shape(gamma_prime),
        ));
    }
    let scaled = g.mul(k, gamma_prime)?;
    let ctx = g.mean(scaled, &[r - 3, r - 2], true)?;
    let sum = g.add(k, ctx)?;
    Ok(g.scale(sum, T::lit(0.5)))
}

/// Mean over the chart axis: `[..., H, N, D] → [..., N, D]`.
pub fn aggregate_mean<T: Scalar>(g: &mut Graph<T>, k: Var) -> Result<Var> {
    let r = g.shape(k).len();
    if r < 3 {
        return Err(Error::shape("aggregate_mean", g.shape(k), &[]));
    }
    g.mean(k, &[r - 3], false)
}

/// `[..., H·N, D] → [..., H, N, D]`
fn chart_view<T: Scalar>(g: &mut Graph<T>, x: Var, charts: usize) -> Result<Var> {
    let (lead, hn, d) = split_last_two(g.shape(x), "chart_view")?;
    let shape: Vec<usize> = lead.into_iter().chain([charts, hn / charts, d]).collect();
    g.reshape(x, &shape)
}

/// Computes the key `[..., N, D]` from tokens `[..., N, D]`.
pub fn key_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    params: &AttentionParams,
) -> Result<Var> {
    let (lead, n, d) = split_last_two(g.shape(x), "key_forward")?;
    if d != params.dim {
        return Err(Error::shape(
            "key_forward",
            g.shape(x),
            &[params.tokens, params.dim],
        ));
    }
    if n != params.tokens {
        return Err(Error::Config(format!(
            "attention was constructed for {} tokens but received {n}",
            params.tokens
        )));
    }
    let h = params.spec.charts;
    let kind = params.spec.kind;
    match &params.key {
        KeyParams::Linear { w_k, b_k } => {
            let (w, b) = (g.param(store, *w_k), g.param(store, *b_k));
            g.linear(x, w, Some(b))
        }
        KeyParams::Manifold {
            w_expand,
            gamma,
            mix,
            to_out,
            gamma_prime,
        } => {
            let (we, ga, mx) = (
                g.param(store, *w_expand),
                g.param(store, *gamma),
                g.param(store, *mix),
            );
            let expanded = expand_key(g, x, we, ga)?;
            let charted = chart_rearrange(g, expanded, h)?;
            if kind == KeyKind::SimpleK {
                return g.grouped_pointwise_conv(charted, mx, 1);
            }
            let mut k = chart_mix(g, charted, mx, h)?;
            if let Some(gp) = gamma_prime {
                let gp = g.param(store, *gp);
                let view = chart_view(g, k, h)?;
                let cb = context_broadcast(g, view, gp)?;
                let flat: Vec<usize> = lead.iter().copied().chain([h * n, d]).collect();
                k = g.reshape(cb, &flat)?;
            }
            match (kind, to_out) {
                (KeyKind::SpatialK | KeyKind::Kua, Some(to_out)) => {
                    let back = chart_unrearrange(g, k, h)?;
                    let w = g.param(store, *to_out);
                    g.linear(back, w, None)
                }
                (KeyKind::VanillaK, None) => {
                    let view = chart_view(g, k, h)?;
                    aggregate_mean(g, view)
                }
                _ => Err(Error::Config(format!(
                    "key parameters do not match variant {}",
                    params.spec
                ))),
            }
        }
    }
}

/// Sets a manifold key path to the point where it reproduces the bias-free
/// baseline key `X·W_kᵀ`: `H` stacked copies of `w_k`, `Γ = 1`, per-group identity
/// mixing (chart average for the condense conv) and an averaging `to_out`.
/// Fails for baseline and CB-enabled specs, which have no such point.
pub fn set_baseline_equivalent<T: Scalar>(
    store: &mut ParamStore<T>,
    params: &AttentionParams,
    w_k: &Tensor<T>,
) -> Result<()> {
    let (d, n, h) = (params.dim, params.tokens, params.spec.charts);
    let KeyParams::Manifold {
        w_expand,
        gamma,
        mix,
        to_out,
        gamma_prime: None,
    } = &params.key
    else {
        return Err(Error::Config(format!(
            "{} has no baseline-equivalent parameter point",
            params.spec
        )));
    };
    if w_k.shape() != [d, d] {
        return Err(Error::shape(
            "set_baseline_equivalent",
            w_k.shape(),
            &[d, d],
        ));
    }
    let stacked: Vec<T> = (0..h).flat_map(|_| w_k.data().iter().copied()).collect();
    store.set(*w_expand, Tensor::new(&[h * d, d], stacked)?)?;
    store.set(*gamma, Tensor::ones(&[h * d]))?;
    let inv_h = T::lit(1.0 / h as f64);
    if params.spec.kind == KeyKind::SimpleK {
        store.set(
            *mix,
            Tensor::from_fn(&[n, h * n], |i| {
                if (i % (h * n)) % n == i / (h * n) {
                    inv_h
                } else {
                    T::zero()
                }
            }),
        )?;
    } else {
        store.set(
            *mix,
            Tensor::from_fn(&[h * n, n], |i| {
                if (i / n) % n == i % n {
                    T::one()
                } else {
                    T::zero()
                }
            }),
        )?;
    }
    if let Some(to_out) = to_out {
        store.set(
            *to_out,
            Tensor::from_fn(&[d, h * d], |i| {
                if (i % (h * d)) % d == i / (h * d) {
                    inv_h
                } else {
                    T::zero()
                }
            }),
        )?;
    }
    Ok(())
}

/// `[B, N, D] → [B, heads, N, D/heads]`
fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let y = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    g.permute(y, &[0, 2, 1, 3])
}

fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let y = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(y, &[s[0], s[2], s[1] * s[3]])
}

#[derive(Clone, Copy, Debug)]
pub struct MhsaOutput {
    /// `[B, N, D]` (or `[N, D]` for unbatched input)
    pub out: Var,
    /// `[B, heads, N, N]`
    pub attn: Var,
}

/// Full multi-head self-attention on `[B, N, D]` or `[N, D]` tokens.
pub fn mhsa_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    params: &AttentionParams,
    heads: usize,
) -> Result<MhsaOutput> {
    if heads == 0 || !params.dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "dim {} is not divisible by {heads} heads",
            params.dim
        )));
    }
    let unbatched = g.shape(x).len() == 2;
    let x = if unbatched {
        let s = g.shape(x).to_vec();
        g.reshape(x, &[1, s[0], s[1]])?
    } else {
        x
    };
    if g.shape(x).len() != 3 {
        return Err(Error::shape(
            "mhsa_forward",
            g.shape(x),
            &[params.tokens, params.dim],
        ));
    }
    let (wq, bq) = (g.param(store, params.w_q), g.param(store, params.b_q));
    let (wv, bv) = (g.param(store, params.w_v), g.param(store, params.b_v));
    let q = g.linear(x, wq, Some(bq))?;
    let v = g.linear(x, wv, Some(bv))?;
    let k = key_forward(g, store, x, params)?;
    let (q, k, v) = (
        split_heads(g, q, heads)?,
        split_heads(g, k, heads)?,
        split_heads(g, v, heads)?,
    );
    let (o, attn) = scaled_dot_attention(g, q, k, v)?;
    let o = merge_heads(g, o)?;
    let (wo, bo) = (g.param(store, params.w_out), g.param(store, params.b_out));
    let mut out = g.linear(o, wo, Some(bo))?;
    if unbatched {
        let s = g.shape(out).to_vec();
        out = g.reshape(out, &s[1..])?;
    }
    Ok(MhsaOutput { out, attn })
}
