//! Query-guided adaptive feature fusion across agents.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::nn::{attend, Linear, MultiHeadAttention};
use crate::numcore::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaffConfig {
    pub heads: usize,
    pub model_dim: usize,
}

impl Default for QaffConfig {
    fn default() -> Self {
        Self { heads: 8, model_dim: 256 }
    }
}

impl QaffConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid("qaff config", "model_dim must be divisible by heads"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Qaff {
    pub self_attention: Vec<MultiHeadAttention>,
    pub stage_scorer: Linear,
    pub cross_attention: MultiHeadAttention,
    pub agent_scorer: Linear,
}

/// Output of a fusion pass. Weight vectors are `[1, n]` rows.
#[derive(Clone, Debug)]
pub struct Fused {
    /// `[C, H, W]`.
    pub out: Var,
    pub stage_weights: Option<Var>,
    pub agent_weights: Option<Var>,
}

/// `[C, H, W]` maps of every agent slot → `[H·W, N, C]` tokens.
pub fn agent_tokens(g: &mut Graph, maps: &[Var]) -> Result<Var> {
    let mut cols = Vec::with_capacity(maps.len());
    for &m in maps {
        let s = g.shape(m).to_vec();
        let t = g.permute(m, &[1, 2, 0])?;
        cols.push(g.reshape(t, &[s[1] * s[2], 1, s[0]])?);
    }
    g.concat(&cols, 1)
}

fn check_valid(valid: &[bool]) -> Result<usize> {
    match valid.iter().filter(|&&v| v).count() {
        0 => Err(Error::NoValidEntries),
        n => Ok(n),
    }
}

/// `[1, n]` row of 0/1 flags.
pub fn valid_row(valid: &[bool]) -> Tensor {
    Tensor::from_fn(&[1, valid.len()], |i| if valid[i] { 1.0 } else { 0.0 })
}

/// Border mask for 3×3 neighbourhoods, `[H·W, 9]`.
fn neighbourhood_valid(h: usize, w: usize) -> Tensor {
    let offsets: Vec<(isize, isize)> = crate::numcore::window(1).collect();
    Tensor::from_fn(&[h * w, 9], |i| {
        let (cell, j) = (i / 9, i % 9);
        let (y, x) = ((cell / w) as isize, (cell % w) as isize);
        let (dy, dx) = offsets[j];
        let (yy, xx) = (y + dy, x + dx);
        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
            1.0
        } else {
            0.0
        }
    })
}

impl Qaff {
    pub fn new(
        store: &mut ParamStore,
        channels: usize,
        n_stages: usize,
        cfg: &QaffConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (c, d) = (channels, cfg.model_dim);
        let self_attention = (0..n_stages)
            .map(|s| MultiHeadAttention::new(store, &format!("qaff.mhsa{s}"), c, c, d, c, cfg.heads, rng))
            .collect();
        let stage_scorer = Linear::new(store, "qaff.stage_scorer", c, 1, true, rng);
        let cross_attention = MultiHeadAttention::new(store, "qaff.mhca", c, c, d, c, cfg.heads, rng);
        let agent_scorer = Linear::new(store, "qaff.agent_scorer", c, 1, true, rng);
        Ok(Self { self_attention, stage_scorer, cross_attention, agent_scorer })
    }

    /// Self-attention over the agent axis at every cell for stage `s`.
    /// Returns `[H·W, N, C]` with invalid agents zeroed.
    pub fn cross_agent_mhsa(&self, g: &mut Graph, s: usize, stage_queries: &[Var], valid: &[bool]) -> Result<Var> {
        check_valid(valid)?;
        if stage_queries.len() != valid.len() {
            return Err(Error::invalid("cross-agent attention", "one query map per agent slot"));
        }
        let tokens = agent_tokens(g, stage_queries)?;
        let shape = g.shape(tokens).to_vec();
        let (hw, n, c) = (shape[0], shape[1], shape[2]);
        let key_valid = Tensor::from_fn(&[hw, n], |i| if valid[i % n] { 1.0 } else { 0.0 });
        let out = self.self_attention[s].forward(g, tokens, tokens, Some(&key_valid))?;
        let keep = Tensor::from_fn(&[hw, n, c], |i| if valid[(i / c) % n] { 1.0 } else { 0.0 });
        g.mul_const(out, &keep)
    }

    /// ω: pooled refined queries scored per stage, softmax over stages.
    pub fn stage_weights(&self, g: &mut Graph, refined: &[Var], valid: &[bool]) -> Result<Var> {
        let n_valid = check_valid(valid)?;
        let mut pooled = Vec::with_capacity(refined.len());
        for &r in refined {
            let s = g.shape(r).to_vec();
            let (hw, n, c) = (s[0], s[1], s[2]);
            let flat = g.reshape(r, &[hw * n, c])?;
            let avg = g.constant(Tensor::full(&[1, hw * n], 1.0 / (n_valid * hw) as f64));
            pooled.push(g.matmul(avg, flat)?);
        }
        let pooled = g.concat(&pooled, 0)?;
        let scores = self.stage_scorer.forward(g, pooled)?;
        let scores = g.reshape(scores, &[1, refined.len()])?;
        Ok(g.softmax(scores))
    }

    /// Q̄ = Σ_s ω_s Q̃_s, then per-agent cross-attention over each agent's
    /// 3×3 key/value neighbourhood, then α-weighted fusion.
    ///
    /// Returns `(F_out [C, H, W], α [1, N])`.
    pub fn query_guided_fusion(
        &self,
        g: &mut Graph,
        omega: Var,
        refined: &[Var],
        features: &[Var],
        valid: &[bool],
    ) -> Result<(Var, Var)> {
        check_valid(valid)?;
        let s = g.shape(refined[0]).to_vec();
        let (hw, n, c) = (s[0], s[1], s[2]);
        let fs = g.shape(features[0]).to_vec();
        let (h, w) = (fs[1], fs[2]);
        if features.len() != n || hw != h * w || fs[0] != c {
            return Err(Error::invalid("query-guided fusion", "inconsistent agent shapes"));
        }

        let mut rows = Vec::with_capacity(refined.len());
        for &r in refined {
            rows.push(g.reshape(r, &[1, hw * n * c])?);
        }
        let stacked = g.concat(&rows, 0)?;
        let q_bar = g.matmul(omega, stacked)?;
        let q_bar = g.reshape(q_bar, &[hw, n, c])?;

        let active: Vec<usize> = (0..n).filter(|&i| valid[i]).collect();
        let mca = &self.cross_attention;
        let d = mca.key.out_dim;
        // Keys and values are projected per cell and then gathered, which
        // equals projecting every gathered neighbour: padding is masked.
        let neighbourhood = |g: &mut Graph, proj: &Linear, map: Var| -> Result<Var> {
            let t = g.permute(map, &[1, 2, 0])?;
            let t = g.reshape(t, &[hw, c])?;
            let p = proj.forward(g, t)?;
            let p = g.reshape(p, &[h, w, d])?;
            let p = g.permute(p, &[2, 0, 1])?;
            g.unfold(p, 3)
        };
        let mut queries = Vec::with_capacity(active.len());
        let mut keys = Vec::with_capacity(active.len());
        let mut values = Vec::with_capacity(active.len());
        for &i in &active {
            queries.push(g.narrow(q_bar, 1, i, 1)?);
            keys.push(neighbourhood(g, &mca.key, features[i])?);
            values.push(neighbourhood(g, &mca.value, features[i])?);
        }
        let q = g.concat(&queries, 0)?;
        let q = mca.query.forward(g, q)?;
        let k = g.concat(&keys, 0)?;
        let v = g.concat(&values, 0)?;
        let border = neighbourhood_valid(h, w);
        let mask = Tensor::from_fn(&[active.len() * hw, 9], |i| border.data()[i % (hw * 9)]);
        let cross = attend(g, q, k, v, mca.heads, Some(&mask))?;
        let cross = mca.output.forward(g, cross)?;
        let cross = g.reshape(cross, &[active.len(), hw, c])?;

        let mut per_agent = Vec::with_capacity(n);
        let mut k = 0;
        for i in 0..n {
            if valid[i] {
                per_agent.push(g.narrow(cross, 0, k, 1)?);
                k += 1;
            } else {
                per_agent.push(g.constant(Tensor::zeros(&[1, hw, c])));
            }
        }
        let cross = g.concat(&per_agent, 0)?;

        let by_channel = g.permute(cross, &[0, 2, 1])?;
        let pooled = g.mean_last(by_channel)?;
        let scores = self.agent_scorer.forward(g, pooled)?;
        let scores = g.reshape(scores, &[1, n])?;
        let alpha = g.masked_softmax(scores, &valid_row(valid))?;

        let flat = g.reshape(cross, &[n, hw * c])?;
        let fused = g.matmul(alpha, flat)?;
        let fused = g.reshape(fused, &[h, w, c])?;
        let out = g.permute(fused, &[2, 0, 1])?;
        Ok((out, alpha))
    }

    /// Full fusion pass over per-agent stage queries and features.
    pub fn forward(
        &self,
        g: &mut Graph,
        stage_queries: &[Vec<Var>],
        features: &[Var],
        valid: &[bool],
    ) -> Result<Fused> {
        let n_stages = stage_queries.first().map_or(0, Vec::len);
        let mut refined = Vec::with_capacity(n_stages);
        for s in 0..n_stages {
            let maps: Vec<Var> = stage_queries.iter().map(|q| q[s]).collect();
            refined.push(self.cross_agent_mhsa(g, s, &maps, valid)?);
        }
        let omega = self.stage_weights(g, &refined, valid)?;
        let (out, alpha) = self.query_guided_fusion(g, omega, &refined, features, valid)?;
        Ok(Fused { out, stage_weights: Some(omega), agent_weights: Some(alpha) })
    }
}

/// Fallback when fusion is disabled: plain mean of valid agents' maps.
pub fn mean_fusion(g: &mut Graph, features: &[Var], valid: &[bool]) -> Result<Fused> {
    let n_valid = check_valid(valid)?;
    let mut acc: Option<Var> = None;
    for (&f, &v) in features.iter().zip(valid) {
        if v {
            acc = Some(match acc {
                Some(a) => g.add(a, f)?,
                None => f,
            });
        }
    }
    let sum = acc.expect("at least one valid agent");
    Ok(Fused { out: g.scale(sum, 1.0 / n_valid as f64), stage_weights: None, agent_weights: None })
}
