//! Denoiser forward pass: conditioning embedding, context encoding and the
//! adaLN transformer blocks.

use xvwm_tensor::{Graph, Real, Tensor, Var};

use super::config::ModelConfig;
use super::params::Bound;
use crate::dataset::CumAction;
use crate::error::{Result, XvwmError};
use crate::sim::ViewId;

const MAX_PERIOD: f64 = 10_000.0;
/// Relative time (seconds) is multiplied by this before the sinusoidal map.
pub const REL_TIME_SCALE: f64 = 100.0;
/// Translations are divided by this before entering the action MLP.
pub const ACTION_SCALE: f64 = 4.0;
const LN_EPS: f64 = 1e-6;

/// Everything the adaLN conditioning vector is built from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CondInput {
    pub t_diff: usize,
    pub rel_time: f64,
    pub cum_action: CumAction,
    pub output_view: ViewId,
}

/// `(Δx, Δy, sin Δφ, cos Δφ)` with translations rescaled.
pub fn action_features(a: &CumAction) -> [f64; 4] {
    [a.dx / ACTION_SCALE, a.dy / ACTION_SCALE, a.dphi.sin(), a.dphi.cos()]
}

/// Fixed 2-D sine/cosine table `[grid*grid, d]`: the first half of the
/// channels encodes the patch row, the second half the column.
pub fn pos_embed_2d(grid: usize, d: usize) -> Vec<f64> {
    let quarter = d / 4;
    let mut out = vec![0.0; grid * grid * d];
    for r in 0..grid {
        for c in 0..grid {
            let row = &mut out[(r * grid + c) * d..(r * grid + c + 1) * d];
            for i in 0..quarter {
                let w = 1.0 / MAX_PERIOD.powf(i as f64 / quarter as f64);
                row[i] = (r as f64 * w).sin();
                row[quarter + i] = (r as f64 * w).cos();
                row[2 * quarter + i] = (c as f64 * w).sin();
                row[3 * quarter + i] = (c as f64 * w).cos();
            }
        }
    }
    out
}

fn linear<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.get(&format!("{name}.w")))?;
    Ok(g.add(y, p.get(&format!("{name}.b")))?)
}

fn mlp<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.fc1"), x)?;
    let h = g.silu(h);
    linear(g, p, &format!("{prefix}.fc2"), h)
}

fn constant<T: Real>(g: &mut Graph<T>, shape: &[usize], data: impl IntoIterator<Item = f64>) -> Result<Var> {
    let data: Vec<T> = data.into_iter().map(T::of).collect();
    Ok(g.constant(Tensor::new(shape, data)?))
}

/// Conditioning vectors `[B, d]`.
pub fn embed_conditioning<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &Bound,
    conds: &[CondInput],
) -> Result<Var> {
    let b = conds.len();
    if b == 0 {
        return Err(XvwmError::Usage("empty conditioning batch".into()));
    }
    let mut rows = Vec::with_capacity(b);
    for c in conds {
        if c.t_diff >= cfg.diffusion_steps {
            return Err(XvwmError::Range(format!(
                "t_diff {} outside [0, {})",
                c.t_diff, cfg.diffusion_steps
            )));
        }
        rows.push(cfg.view_row(c.output_view)?);
    }
    let t = constant(g, &[b], conds.iter().map(|c| c.t_diff as f64))?;
    let ft = g.sinusoidal_features(t, cfg.freq_dim, T::of(MAX_PERIOD))?;
    let et = mlp(g, p, "t_mlp", ft)?;

    let rt = constant(g, &[b], conds.iter().map(|c| c.rel_time * REL_TIME_SCALE))?;
    let frt = g.sinusoidal_features(rt, cfg.freq_dim, T::of(MAX_PERIOD))?;
    let ert = mlp(g, p, "rt_mlp", frt)?;

    let fa = constant(g, &[b, 4], conds.iter().flat_map(|c| action_features(&c.cum_action)))?;
    let ea = mlp(g, p, "act_mlp", fa)?;

    let ev = g.embedding(p.get("view_table"), &rows)?;
    let c = g.add(et, ert)?;
    let c = g.add(c, ea)?;
    Ok(g.add(c, ev)?)
}

/// Layer-normed context tokens `[B, L*n, d]` from raw patches `[B, L, n, pd]`.
pub fn encode_context<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, p: &Bound, context: Tensor<T>) -> Result<Var> {
    let (l, n, pd, d) = (cfg.context_len, cfg.tokens(), cfg.patch_dim(), cfg.hidden_dim);
    let s = context.shape().to_vec();
    if s.len() != 4 || s[1] != l || s[2] != n || s[3] != pd {
        return Err(XvwmError::Usage(format!(
            "context must be [B, {l}, {n}, {pd}], got {s:?}"
        )));
    }
    let b = s[0];
    let x = g.constant(context.reshape(&[b, l * n, pd])?);
    let e = linear(g, p, "ctx_in", x)?;
    let grid = cfg.image_size / cfg.patch_size;
    let pos = pos_embed_2d(grid, d);
    let pos = constant(g, &[l * n, d], (0..l).flat_map(|_| pos.iter().copied()))?;
    let e = g.add(e, pos)?;
    let ids: Vec<usize> = (0..l).flat_map(|f| std::iter::repeat(f).take(n)).collect();
    let temporal = g.embedding(p.get("temporal"), &ids)?;
    let e = g.add(e, temporal)?;
    Ok(g.layer_norm(e, T::of(LN_EPS)))
}

fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let r = g.reshape(x, &[b, n, heads, d / heads])?;
    Ok(g.transpose(r, 1, 2)?)
}

fn merge_heads<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, h, n, dh) = (s[0], s[1], s[2], s[3]);
    let t = g.transpose(x, 1, 2)?;
    Ok(g.reshape(t, &[b, n, h * dh])?)
}

/// `softmax(q kᵀ / sqrt(dh)) v` with `kt` already transposed to `[B, H, dh, M]`.
fn attend<T: Real>(g: &mut Graph<T>, q: Var, kt: Var, v: Var) -> Result<Var> {
    let dh = g.shape(q)[3];
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, T::of(1.0 / (dh as f64).sqrt()));
    let a = g.softmax(s);
    Ok(g.matmul(a, v)?)
}

/// Keys (transposed) and values of the context for one attention module.
fn project_kv<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, p: &Bound, prefix: &str, x: Var) -> Result<(Var, Var)> {
    let k = linear(g, p, &format!("{prefix}.k"), x)?;
    let k = split_heads(g, k, cfg.heads)?;
    let kt = g.transpose(k, 2, 3)?;
    let v = linear(g, p, &format!("{prefix}.v"), x)?;
    let v = split_heads(g, v, cfg.heads)?;
    Ok((kt, v))
}

/// Per-layer cross-attention keys and values; reusable across denoising
/// steps because they depend only on the context.
pub fn context_kv<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, p: &Bound, ctx: Var) -> Result<Vec<(Var, Var)>> {
    (0..cfg.layers)
        .map(|l| project_kv(g, cfg, p, &format!("blocks.{l}.cross"), ctx))
        .collect()
}

/// Predicted noise `[B, n, pd]` for noisy target patches `[B, n, pd]`.
pub fn denoise<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &Bound,
    noisy: Var,
    kv: &[(Var, Var)],
    c: Var,
) -> Result<Var> {
    let (n, pd, d) = (cfg.tokens(), cfg.patch_dim(), cfg.hidden_dim);
    let s = g.shape(noisy).to_vec();
    if s.len() != 3 || s[1] != n || s[2] != pd {
        return Err(XvwmError::Usage(format!(
            "noisy target must be [B, {n}, {pd}], got {s:?}"
        )));
    }
    if kv.len() != cfg.layers {
        return Err(XvwmError::Usage(format!(
            "{} context key/value pairs for {} layers",
            kv.len(),
            cfg.layers
        )));
    }
    let eps = T::of(LN_EPS);
    let h = linear(g, p, "patch_in", noisy)?;
    let grid = cfg.image_size / cfg.patch_size;
    let pos = constant(g, &[n, d], pos_embed_2d(grid, d))?;
    let mut h = g.add(h, pos)?;
    let sc = g.silu(c);

    for (l, &(kt, v)) in kv.iter().enumerate() {
        let pre = format!("blocks.{l}");
        let m = linear(g, p, &format!("{pre}.ada"), sc)?;
        let chunk = |g: &mut Graph<T>, i: usize| g.slice(m, 1, i * d, d);
        let (sh1, sc1, g1) = (chunk(g, 0)?, chunk(g, 1)?, chunk(g, 2)?);
        let (sh2, sc2, g2) = (chunk(g, 3)?, chunk(g, 4)?, chunk(g, 5)?);
        let (sh3, sc3, g3) = (chunk(g, 6)?, chunk(g, 7)?, chunk(g, 8)?);

        let a = g.layer_norm(h, eps);
        let a = g.modulate(a, sh1, sc1)?;
        let q = linear(g, p, &format!("{pre}.self.q"), a)?;
        let q = split_heads(g, q, cfg.heads)?;
        let (skt, sv) = project_kv(g, cfg, p, &format!("{pre}.self"), a)?;
        let o = attend(g, q, skt, sv)?;
        let o = merge_heads(g, o)?;
        let o = linear(g, p, &format!("{pre}.self.o"), o)?;
        let o = g.gate(o, g1)?;
        h = g.add(h, o)?;

        let a = g.layer_norm(h, eps);
        let a = g.modulate(a, sh2, sc2)?;
        let q = linear(g, p, &format!("{pre}.cross.q"), a)?;
        let q = split_heads(g, q, cfg.heads)?;
        let o = attend(g, q, kt, v)?;
        let o = merge_heads(g, o)?;
        let o = linear(g, p, &format!("{pre}.cross.o"), o)?;
        let o = g.gate(o, g2)?;
        h = g.add(h, o)?;

        let a = g.layer_norm(h, eps);
        let a = g.modulate(a, sh3, sc3)?;
        let f = linear(g, p, &format!("{pre}.mlp.fc1"), a)?;
        let f = g.gelu(f);
        let f = linear(g, p, &format!("{pre}.mlp.fc2"), f)?;
        let f = g.gate(f, g3)?;
        h = g.add(h, f)?;
    }

    let m = linear(g, p, "final.ada", sc)?;
    let shift = g.slice(m, 1, 0, d)?;
    let scale = g.slice(m, 1, d, d)?;
    let a = g.layer_norm(h, eps);
    let a = g.modulate(a, shift, scale)?;
    linear(g, p, "head", a)
}

/// Full forward pass from raw tensors.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &Bound,
    noisy: Tensor<T>,
    context: Tensor<T>,
    conds: &[CondInput],
) -> Result<Var> {
    let b = noisy.shape().first().copied().unwrap_or(0);
    if b != conds.len() || context.shape().first() != Some(&b) {
        return Err(XvwmError::Usage(format!(
            "batch mismatch: noisy {:?}, context {:?}, {} conditioning records",
            noisy.shape(),
            context.shape(),
            conds.len()
        )));
    }
    let c = embed_conditioning(g, cfg, p, conds)?;
    let ctx = encode_context(g, cfg, p, context)?;
    let kv = context_kv(g, cfg, p, ctx)?;
    let x = g.constant(noisy);
    denoise(g, cfg, p, x, &kv, c)
}

/// Mean squared error between predicted and true noise.
pub fn eps_loss<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &Bound,
    noisy: Tensor<T>,
    context: Tensor<T>,
    conds: &[CondInput],
    eps: Tensor<T>,
) -> Result<Var> {
    let pred = forward(g, cfg, p, noisy, context, conds)?;
    let target = g.constant(eps);
    Ok(g.mse_loss(pred, target)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn antipodal_headings_share_features() {
        let a = action_features(&CumAction { dx: 1.0, dy: -2.0, dphi: std::f64::consts::PI });
        let b = action_features(&CumAction { dx: 1.0, dy: -2.0, dphi: -std::f64::consts::PI });
        for i in 0..4 {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn pos_embed_rows_are_distinct() {
        let pe = pos_embed_2d(4, 16);
        for i in 0..16 {
            for j in i + 1..16 {
                assert_ne!(&pe[i * 16..(i + 1) * 16], &pe[j * 16..(j + 1) * 16]);
            }
        }
    }
}
