use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::nn::Linear;
use crate::numcore::{Graph, ParamStore, Tensor, Var};

pub const COMPRESSION_RATIOS: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

/// Learned channel bottleneck `C → C/ratio → C` applied per cell. Ratio 1 is
/// the identity and owns no parameters.
#[derive(Clone, Debug)]
pub struct Compressor {
    pub ratio: usize,
    pub channels: usize,
    layers: Option<(Linear, Linear)>,
}

impl Compressor {
    pub fn new(store: &mut ParamStore, channels: usize, ratio: usize, rng: &mut impl Rng) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(Error::invalid("compress", format!("{channels} channels are not divisible by ratio {ratio}")));
        }
        let layers = (ratio > 1).then(|| {
            let narrow = channels / ratio;
            (
                Linear::new(store, "compress.down", channels, narrow, false, rng),
                Linear::new(store, "compress.up", narrow, channels, false, rng),
            )
        });
        Ok(Self { ratio, channels, layers })
    }

    /// `[C, H, W]` → `[C, H, W]` through the bottleneck.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[0] != self.channels {
            return Err(Error::ShapeMismatch { op: "compress", lhs: s, rhs: vec![self.channels] });
        }
        let Some((down, up)) = &self.layers else {
            return Ok(x);
        };
        let (c, h, w) = (s[0], s[1], s[2]);
        let t = g.permute(x, &[1, 2, 0])?;
        let t = g.reshape(t, &[h * w, c])?;
        let t = down.forward(g, t)?;
        let t = up.forward(g, t)?;
        let t = g.reshape(t, &[h, w, c])?;
        g.permute(t, &[2, 0, 1])
    }
}

/// Evaluates the bottleneck on a plain tensor.
pub fn compress(store: &ParamStore, compressor: &Compressor, f: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new(store);
    let x = g.constant(f.clone());
    let y = compressor.forward(&mut g, x)?;
    Ok(g.value(y).clone())
}
