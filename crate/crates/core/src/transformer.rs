//! Visual and depth encoders, the depth-aware decoder, and the positional
//! encodings they use.

use std::f64::consts::PI;

use crate::config::{Config, DepthCaPosition, DepthEmbedSource, DepthPosEncoding};
use crate::depth::DepthOutput;
use crate::nn::{flatten_tokens, Conv2d, Graph, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::numerics::{NumericsError, Padding, Result, Tensor, Var};

/// Dense multi-head attention with separate query, key and value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    heads: usize,
}

/// Attention output and the per-head attention maps `[queries, keys]`.
#[derive(Clone, Debug)]
pub struct Attended {
    pub output: Var,
    pub maps: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, heads: usize) -> Self {
        assert!(heads > 0 && channels.is_multiple_of(heads), "heads must divide channels");
        Self {
            q: Linear::new(store, init, &format!("{name}.q"), channels, channels),
            k: Linear::new(store, init, &format!("{name}.k"), channels, channels),
            v: Linear::new(store, init, &format!("{name}.v"), channels, channels),
            out: Linear::new(store, init, &format!("{name}.out"), channels, channels),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, query: Var, key: Var, value: Var) -> Result<Attended> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, key)?;
        let v = self.v.forward(g, value)?;
        let c = g.shape(q)[1];
        let dh = c / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let a = g.softmax(scores, 1)?;
            outs.push(g.matmul(a, vh)?);
            maps.push(a);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let output = self.out.forward(g, merged)?;
        Ok(Attended { output, maps })
    }
}

#[derive(Clone, Debug)]
struct Ffn {
    up: Linear,
    down: Linear,
}

impl Ffn {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, c: usize, width: usize) -> Self {
        Self {
            up: Linear::new(store, init, &format!("{name}.up"), c, width),
            down: Linear::new(store, init, &format!("{name}.down"), width, c),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.relu(h)?;
        self.down.forward(g, h)
    }
}

/// Self-attention and FFN, each followed by residual add and layer norm.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    ln1: LayerNorm,
    ffn: Ffn,
    ln2: LayerNorm,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &Config) -> Self {
        let c = cfg.channels;
        Self {
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), c, cfg.heads),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), c),
            ffn: Ffn::new(store, init, &format!("{name}.ffn"), c, cfg.ffn_width),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), c),
        }
    }

    /// `x, pos: [T, C]`; positions go into queries and keys only.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, pos: Var) -> Result<Attended> {
        let qk = g.add(x, pos)?;
        let att = self.attn.forward(g, qk, qk, x)?;
        let x = g.add(x, att.output)?;
        let x = self.ln1.forward(g, x)?;
        let f = self.ffn.forward(g, x)?;
        let x = g.add(x, f)?;
        let output = self.ln2.forward(g, x)?;
        Ok(Attended { output, maps: att.maps })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Sublayer {
    Depth,
    SelfAttn,
    Visual,
    Ffn,
}

fn sublayer_order(position: DepthCaPosition) -> &'static [Sublayer] {
    use Sublayer::*;
    match position {
        DepthCaPosition::First => &[Depth, SelfAttn, Visual, Ffn],
        DepthCaPosition::Second => &[SelfAttn, Depth, Visual, Ffn],
        DepthCaPosition::Third => &[SelfAttn, Visual, Depth, Ffn],
        DepthCaPosition::Off | DepthCaPosition::Add | DepthCaPosition::Concat => &[SelfAttn, Visual, Ffn],
    }
}

/// Keys and values the decoder attends over.
#[derive(Clone, Copy, Debug)]
pub struct DecoderMemory {
    pub visual_key: Var,
    pub visual_value: Var,
    /// `f_e_D + pos_D`, shared by depth keys and values.
    pub depth: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub depth_ca: Option<MultiHeadAttention>,
    ln_depth: Option<LayerNorm>,
    pub self_attn: MultiHeadAttention,
    ln_self: LayerNorm,
    pub visual_ca: MultiHeadAttention,
    ln_visual: LayerNorm,
    ffn: Ffn,
    ln_ffn: LayerNorm,
    position: DepthCaPosition,
}

/// One decoder block's output and its depth attention maps (one per head,
/// empty when the block has no depth cross-attention).
#[derive(Clone, Debug)]
pub struct DecoderStep {
    pub output: Var,
    pub depth_attention: Vec<Var>,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &Config) -> Self {
        let c = cfg.channels;
        let position = cfg.depth_ca_position;
        let has_depth = sublayer_order(position).contains(&Sublayer::Depth);
        Self {
            depth_ca: has_depth
                .then(|| MultiHeadAttention::new(store, init, &format!("{name}.depth_ca"), c, cfg.heads)),
            ln_depth: has_depth.then(|| LayerNorm::new(store, &format!("{name}.ln_depth"), c)),
            self_attn: MultiHeadAttention::new(store, init, &format!("{name}.self_attn"), c, cfg.heads),
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), c),
            visual_ca: MultiHeadAttention::new(store, init, &format!("{name}.visual_ca"), c, cfg.heads),
            ln_visual: LayerNorm::new(store, &format!("{name}.ln_visual"), c),
            ffn: Ffn::new(store, init, &format!("{name}.ffn"), c, cfg.ffn_width),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), c),
            position,
        }
    }

    /// `query_pos` is added to the attention queries (and self-attention
    /// keys) of every sublayer, so query identity survives the residual
    /// normalizations.
    pub fn forward(&self, g: &mut Graph<'_>, q: Var, query_pos: Var, memory: &DecoderMemory) -> Result<DecoderStep> {
        let mut x = q;
        let mut depth_attention = Vec::new();
        for step in sublayer_order(self.position) {
            let xq = if *step == Sublayer::Ffn { x } else { g.add(x, query_pos)? };
            let (delta, ln) = match step {
                Sublayer::Depth => {
                    let attn = self.depth_ca.as_ref().expect("depth sublayer present");
                    let a = attn.forward(g, xq, memory.depth, memory.depth)?;
                    depth_attention = a.maps;
                    (a.output, self.ln_depth.as_ref().expect("depth norm present"))
                }
                Sublayer::SelfAttn => (self.self_attn.forward(g, xq, xq, x)?.output, &self.ln_self),
                Sublayer::Visual => {
                    let a = self.visual_ca.forward(g, xq, memory.visual_key, memory.visual_value)?;
                    (a.output, &self.ln_visual)
                }
                Sublayer::Ffn => (self.ffn.forward(g, x)?, &self.ln_ffn),
            };
            let sum = g.add(x, delta)?;
            x = ln.forward(g, sum)?;
        }
        Ok(DecoderStep { output: x, depth_attention })
    }
}

/// DETR-style 2D sine/cosine encoding `[h·w, c]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn sine_position_2d(h: usize, w: usize, c: usize) -> Tensor {
    let half = c / 2;
    let eps = 1e-6;
    let mut v = vec![0.0; h * w * c];
    for i in 0..h {
        let y = (i as f64 + 1.0) / (h as f64 + eps) * 2.0 * PI;
        for j in 0..w {
            let x = (j as f64 + 1.0) / (w as f64 + eps) * 2.0 * PI;
            let row = &mut v[(i * w + j) * c..(i * w + j + 1) * c];
            sine_features(y, &mut row[..half]);
            sine_features(x, &mut row[half..2 * half]);
        }
    }
    Tensor::new(&[h * w, c], v).expect("positive extents")
}

/// Fills `out` with interleaved sin/cos of `value` at geometric frequencies.
pub fn sine_features(value: f64, out: &mut [f64]) {
    let n = out.len() as f64;
    for (k, o) in out.iter_mut().enumerate() {
        let t = 10000f64.powf(2.0 * (k / 2) as f64 / n);
        *o = if k % 2 == 0 { (value / t).sin() } else { (value / t).cos() };
    }
}

/// Learnable table with one row per integer meter in `[d_min, d_max]`.
#[derive(Clone, Debug)]
pub struct DepthPositionalTable {
    pub table: ParamId,
    d_min: f64,
}

impl DepthPositionalTable {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &Config) -> Self {
        let rows = (cfg.depth_max - cfg.depth_min).ceil() as usize + 1;
        Self {
            table: store.add("transformer.depth_pos", init.normal(&[rows, cfg.channels], 1.0)),
            d_min: cfg.depth_min,
        }
    }

    /// Interpolates rows at per-pixel depths `[P]`; depths beyond the table
    /// clamp to the end rows.
    pub fn encode(&self, g: &mut Graph<'_>, depths: Var) -> Result<Var> {
        let t = g.param(self.table)?;
        let pos = g.add_scalar(depths, -self.d_min)?;
        g.interp_rows(t, pos)
    }
}

/// Everything the decoder produced for one image.
#[derive(Clone, Debug)]
pub struct TransformerOutput {
    /// Decoded queries `[N, C]` after each block.
    pub decoded: Vec<Var>,
    /// Per block, per head `[N, T_D]` depth attention.
    pub depth_attention: Vec<Vec<Var>>,
    /// Depth embeddings `[T_D, C]`.
    pub depth_embed: Var,
    /// Depth positional encodings `[T_D, C]`.
    pub depth_pos: Var,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    visual: Vec<EncoderBlock>,
    depth_encoder: Vec<EncoderBlock>,
    depth_proj: Option<Conv2d>,
    pub decoder: Vec<DecoderBlock>,
    pub queries: ParamId,
    depth_table: Option<DepthPositionalTable>,
    source: DepthEmbedSource,
    position: DepthCaPosition,
    stop_grad: bool,
    d_min: f64,
    d_max: f64,
    channels: usize,
}

impl Transformer {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &Config) -> Self {
        let c = cfg.channels;
        let visual = (0..cfg.visual_encoder_blocks)
            .map(|i| EncoderBlock::new(store, init, &format!("visual_enc.{i}"), cfg))
            .collect();
        let depth_encoder = match cfg.depth_embed_source {
            DepthEmbedSource::Encoder => (0..cfg.depth_encoder_blocks)
                .map(|i| EncoderBlock::new(store, init, &format!("depth_enc.{i}"), cfg))
                .collect(),
            _ => Vec::new(),
        };
        let depth_proj = (cfg.depth_embed_source == DepthEmbedSource::Conv1x1)
            .then(|| Conv2d::new(store, init, "depth_proj", c, c, 1, 1, Padding::same(0)));
        let decoder = (0..cfg.decoder_blocks)
            .map(|i| DecoderBlock::new(store, init, &format!("decoder.{i}"), cfg))
            .collect();
        let queries = store.add("queries", init.normal(&[cfg.num_queries, c], cfg.query_init_std));
        let depth_table = (cfg.depth_pos_encoding == DepthPosEncoding::Learnable)
            .then(|| DepthPositionalTable::new(store, init, cfg));
        Self {
            visual,
            depth_encoder,
            depth_proj,
            decoder,
            queries,
            depth_table,
            source: cfg.depth_embed_source,
            position: cfg.depth_ca_position,
            stop_grad: cfg.depth_pos_stop_grad,
            d_min: cfg.depth_min,
            d_max: cfg.depth_max,
            channels: c,
        }
    }

    /// Positional encodings of the per-pixel expected depths.
    pub fn depth_positions(&self, g: &mut Graph<'_>, depth_grid: Var) -> Result<Var> {
        let p = g.values(depth_grid).len();
        let d = g.reshape(depth_grid, &[p])?;
        match &self.depth_table {
            Some(table) => {
                let d = if self.stop_grad { g.detach(d)? } else { d };
                table.encode(g, d)
            }
            None => {
                // fixed encoding, no gradient into the depth map
                let span = self.d_max - self.d_min;
                let c = self.channels;
                let mut v = vec![0.0; p * c];
                for (i, &depth) in g.values(d).iter().enumerate() {
                    let x = (depth.clamp(self.d_min, self.d_max) - self.d_min) / span * 2.0 * PI;
                    sine_features(x, &mut v[i * c..(i + 1) * c]);
                }
                g.constant_from(&[p, c], v)
            }
        }
    }

    /// `f_v: [C, h, w]` visual features at 1/32; the depth output lives at 1/16.
    pub fn forward(&self, g: &mut Graph<'_>, f_v: Var, depth: &DepthOutput) -> Result<TransformerOutput> {
        let sv = g.shape(f_v).to_vec();
        let sd = g.shape(depth.features).to_vec();
        if sv.len() != 3 || sd.len() != 3 || sv[0] != self.channels || sd[0] != self.channels {
            return Err(NumericsError::dimension("transformer", format!("visual {sv:?}, depth {sd:?}")));
        }
        let c = self.channels;

        let pos_v = g.constant(sine_position_2d(sv[1], sv[2], c))?;
        let mut vis = flatten_tokens(g, f_v)?;
        for block in &self.visual {
            vis = block.forward(g, vis, pos_v)?.output;
        }

        let depth_pos = self.depth_positions(g, depth.depth_grid)?;
        let depth_embed = match self.source {
            DepthEmbedSource::Encoder => {
                let pos = g.constant(sine_position_2d(sd[1], sd[2], c))?;
                let mut x = flatten_tokens(g, depth.features)?;
                for block in &self.depth_encoder {
                    x = block.forward(g, x, pos)?.output;
                }
                x
            }
            DepthEmbedSource::Conv1x1 => {
                let proj = self.depth_proj.as_ref().expect("projection built for conv1x1");
                let x = proj.forward(g, depth.features)?;
                flatten_tokens(g, x)?
            }
            DepthEmbedSource::Raw => flatten_tokens(g, depth.features)?,
            DepthEmbedSource::DepthMap => depth_pos,
        };
        let depth_kv = if self.source == DepthEmbedSource::DepthMap {
            depth_embed
        } else {
            g.add(depth_embed, depth_pos)?
        };

        let pos_vis = g.add(vis, pos_v)?;
        let (visual_key, visual_value) = match self.position {
            DepthCaPosition::Concat => (g.concat(&[pos_vis, depth_kv])?, g.concat(&[vis, depth_kv])?),
            DepthCaPosition::Add => {
                let key = upsample_tokens(g, pos_vis, sv[1], sv[2])?;
                let value = upsample_tokens(g, vis, sv[1], sv[2])?;
                (g.add(key, depth_kv)?, g.add(value, depth_kv)?)
            }
            _ => (pos_vis, vis),
        };
        let memory = DecoderMemory { visual_key, visual_value, depth: depth_kv };

        let query_pos = g.param(self.queries)?;
        let mut q = query_pos;
        let mut decoded = Vec::with_capacity(self.decoder.len());
        let mut depth_attention = Vec::with_capacity(self.decoder.len());
        for block in &self.decoder {
            let step = block.forward(g, q, query_pos, &memory)?;
            q = step.output;
            decoded.push(step.output);
            depth_attention.push(step.depth_attention);
        }
        Ok(TransformerOutput { decoded, depth_attention, depth_embed, depth_pos })
    }
}

/// `[h·w, C]` tokens to the `[4·h·w, C]` tokens of the grid upsampled by two.
fn upsample_tokens(g: &mut Graph<'_>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(tokens)[1];
    let t = g.transpose(tokens)?;
    let t = g.reshape(t, &[c, h, w])?;
    let t = g.upsample_nearest(t, 2)?;
    flatten_tokens(g, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> Config {
        Config { channels: 16, heads: 4, ffn_width: 32, ..Config::default() }
    }

    fn init() -> Init {
        Init::new(ChaCha8Rng::seed_from_u64(9))
    }

    fn random(g: &mut Graph<'_>, init: &mut Init, shape: &[usize]) -> Var {
        let t = init.normal(shape, 1.0);
        g.constant(t).unwrap()
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let mut ini = init();
        let block = EncoderBlock::new(&mut store, &mut ini, "enc", &cfg());
        let mut g = Graph::new(&store, false);
        let x = random(&mut g, &mut ini, &[4, 16]);
        let pos = g.constant(sine_position_2d(2, 2, 16)).unwrap();
        let out = block.forward(&mut g, x, pos).unwrap();
        assert_eq!(g.shape(out.output), &[4, 16]);
        for m in out.maps {
            for row in g.values(m).chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let mut ini = init();
        let block = EncoderBlock::new(&mut store, &mut ini, "enc", &cfg());
        let x = ini.normal(&[4, 16], 1.0);
        let pos = sine_position_2d(2, 2, 16);
        let perm = [2, 0, 3, 1];
        let permute = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&r| t.values()[r * 16..(r + 1) * 16].to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let run = |x: Tensor, pos: Tensor| {
            let mut g = Graph::new(&store, false);
            let x = g.constant(x).unwrap();
            let p = g.constant(pos).unwrap();
            let out = block.forward(&mut g, x, p).unwrap().output;
            g.value(out)
        };
        let base = run(x.clone(), pos.clone());
        let permuted = run(permute(&x), permute(&pos));
        for (a, b) in permute(&base).values().iter().zip(permuted.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_key_gives_projected_values() {
        let mut store = ParamStore::new();
        let mut ini = init();
        let attn = MultiHeadAttention::new(&mut store, &mut ini, "ca", 16, 4);
        let mut g = Graph::new(&store, false);
        let q = random(&mut g, &mut ini, &[5, 16]);
        let kv = random(&mut g, &mut ini, &[1, 16]);
        let out = attn.forward(&mut g, q, kv, kv).unwrap();
        for m in &out.maps {
            assert!(g.values(*m).iter().all(|&a| (a - 1.0).abs() < 1e-15));
        }
        let v = attn.v.forward(&mut g, kv).unwrap();
        let expect = attn.out.forward(&mut g, v).unwrap();
        let e = g.values(expect).to_vec();
        for row in g.values(out.output).chunks(16) {
            for (a, b) in row.iter().zip(&e) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_logits_give_uniform_attention() {
        let mut store = ParamStore::new();
        let mut ini = init();
        let attn = MultiHeadAttention::new(&mut store, &mut ini, "ca", 16, 4);
        store.get_mut(attn.q.weight).values_mut().iter_mut().for_each(|w| *w = 0.0);
        let mut g = Graph::new(&store, false);
        let q = random(&mut g, &mut ini, &[3, 16]);
        let kv = random(&mut g, &mut ini, &[6, 16]);
        let out = attn.forward(&mut g, q, kv, kv).unwrap();
        for m in &out.maps {
            assert!(g.values(*m).iter().all(|&a| (a - 1.0 / 6.0).abs() < 1e-15));
        }
    }

    #[test]
    fn depth_table_interpolates_rows() {
        let mut store = ParamStore::new();
        let mut ini = init();
        let c = cfg();
        let table = DepthPositionalTable::new(&mut store, &mut ini, &c);
        let t = store.get(table.table).clone();
        assert_eq!(t.shape(), &[81, 16]);
        let row = |r: usize| t.values()[r * 16..(r + 1) * 16].to_vec();
        let mut g = Graph::new(&store, false);
        let d = g.constant_from(&[3], vec![5.0, 5.5, 80.0]).unwrap();
        let out = table.encode(&mut g, d).unwrap();
        let v = g.values(out);
        assert_eq!(&v[..16], &row(5)[..]);
        for j in 0..16 {
            assert!((v[16 + j] - 0.5 * (row(5)[j] + row(6)[j])).abs() < 1e-15);
        }
        assert_eq!(&v[32..], &row(80)[..]);
    }

    fn decoder_setup(position: DepthCaPosition) -> (ParamStore, DecoderBlock) {
        let mut store = ParamStore::new();
        let mut ini = init();
        let c = Config { depth_ca_position: position, ..cfg() };
        let block = DecoderBlock::new(&mut store, &mut ini, "dec", &c);
        (store, block)
    }

    fn memory(g: &mut Graph<'_>, seed: u64) -> (Var, DecoderMemory) {
        let mut ini = Init::new(ChaCha8Rng::seed_from_u64(seed));
        let q = random(g, &mut ini, &[7, 16]);
        let vk = random(g, &mut ini, &[4, 16]);
        let vv = random(g, &mut ini, &[4, 16]);
        let d = random(g, &mut ini, &[8, 16]);
        (q, DecoderMemory { visual_key: vk, visual_value: vv, depth: d })
    }

    #[test]
    fn depth_ca_position_changes_output() {
        let (store, first) = decoder_setup(DepthCaPosition::First);
        let mut third = first.clone();
        third.position = DepthCaPosition::Third;
        let mut g = Graph::new(&store, false);
        let (q, mem) = memory(&mut g, 1);
        let a = first.forward(&mut g, q, q, &mem).unwrap();
        let b = third.forward(&mut g, q, q, &mem).unwrap();
        assert_eq!(g.shape(a.output), &[7, 16]);
        assert_eq!(a.depth_attention.len(), 4);
        let diff: f64 = g.values(a.output).iter().zip(g.values(b.output)).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn zeroed_cross_values_ignore_memory() {
        let (mut store, block) = decoder_setup(DepthCaPosition::First);
        for attn in [block.depth_ca.as_ref().unwrap(), &block.visual_ca] {
            for id in [attn.v.weight, attn.v.bias] {
                store.get_mut(id).values_mut().iter_mut().for_each(|w| *w = 0.0);
            }
        }
        let mut g = Graph::new(&store, false);
        let (q, m1) = memory(&mut g, 1);
        let (_, m2) = memory(&mut g, 2);
        let a = block.forward(&mut g, q, q, &m1).unwrap().output;
        let b = block.forward(&mut g, q, q, &m2).unwrap().output;
        assert_eq!(g.values(a), g.values(b));
    }

    #[test]
    fn queries_permute_outputs_and_depth_maps() {
        let (store, block) = decoder_setup(DepthCaPosition::First);
        let mut g = Graph::new(&store, false);
        let (q, mem) = memory(&mut g, 3);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let qp = g.gather_rows(q, &perm).unwrap();
        let a = block.forward(&mut g, q, q, &mem).unwrap();
        let b = block.forward(&mut g, qp, qp, &mem).unwrap();
        let ap = g.gather_rows(a.output, &perm).unwrap();
        for (x, y) in g.values(ap).iter().zip(g.values(b.output)) {
            assert!((x - y).abs() < 1e-10);
        }
        for (ma, mb) in a.depth_attention.iter().zip(&b.depth_attention) {
            let map = g.gather_rows(*ma, &perm).unwrap();
            for (x, y) in g.values(map).iter().zip(g.values(*mb)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sine_encoding_layout() {
        let t = sine_position_2d(2, 3, 8);
        assert_eq!(t.shape(), &[6, 8]);
        // first channel of each half is sin of the normalised coordinate
        let y = 1.0 / (2.0 + 1e-6) * 2.0 * PI;
        let x = 2.0 / (3.0 + 1e-6) * 2.0 * PI;
        assert!((t.at(1, 0) - y.sin()).abs() < 1e-15);
        assert!((t.at(1, 1) - y.cos()).abs() < 1e-15);
        assert!((t.at(1, 4) - x.sin()).abs() < 1e-15);
    }
}
