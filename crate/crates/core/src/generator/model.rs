use rand::Rng;

use super::attention::{attend, merge_heads, rotary_tables, sinusoidal, split_heads, AttentionWindow};
use super::config::{GeneratorConfig, Variant};
use super::flow::FlowHead;
use crate::error::{contract, shape_err, Result};
use crate::numerics::nn::{LayerNorm, Linear, INIT_STD};
use crate::numerics::{Float, ParamId, ParamStore, Tape, Tensor, Var};

/// Per-sample class (None = the null row used for guidance) and the
/// position shift applied to cross-attention queries.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning<'a> {
    pub classes: &'a [Option<usize>],
    pub shifts: &'a [usize],
}

impl<'a> Conditioning<'a> {
    pub fn new(classes: &'a [Option<usize>], shifts: &'a [usize]) -> Self {
        Self { classes, shifts }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln_self: LayerNorm,
    qkv: Linear,
    self_out: Linear,
    ln_cross: LayerNorm,
    cross_q: Linear,
    query_pe: Linear,
    cross_kv: Linear,
    cross_out: Linear,
    ln_mlp: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

struct Context<T> {
    rotary: Option<(Vec<T>, Vec<T>)>,
    mask: Option<Var>,
    cond: Var,
    pe: Option<Var>,
}

/// Causal transformer backbone plus flow-matching head.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    cfg: GeneratorConfig,
    pub store: ParamStore<T>,
    input: Linear,
    bos: ParamId,
    abs_pe: Option<ParamId>,
    class_emb: ParamId,
    cond_pos: ParamId,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    pub head: FlowHead,
}

impl<T: Float> Generator<T> {
    pub fn new(cfg: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let mut s = ParamStore::new();
        let input = Linear::new(&mut s, "input", cfg.token_channels, d, true, rng);
        let bos = s.add_trunc_normal("bos", [1, d], INIT_STD, rng);
        let abs_pe = (cfg.variant == Variant::Baseline2d).then(|| s.add_trunc_normal("abs_pe", [cfg.max_len, d], INIT_STD, rng));
        let class_emb = s.add_trunc_normal("class_emb", [cfg.n_classes + 1, d], INIT_STD, rng);
        let cond_pos = s.add_trunc_normal("cond_pos", [cfg.cond_seq_len, d], INIT_STD, rng);
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let n = |part: &str| format!("block{l}.{part}");
                Block {
                    ln_self: LayerNorm::new(&mut s, &n("ln_self"), d),
                    qkv: Linear::new(&mut s, &n("qkv"), d, 3 * d, true, rng),
                    self_out: Linear::new(&mut s, &n("self_out"), d, d, true, rng),
                    ln_cross: LayerNorm::new(&mut s, &n("ln_cross"), d),
                    cross_q: Linear::new(&mut s, &n("cross_q"), d, d, true, rng),
                    query_pe: Linear::new(&mut s, &n("query_pe"), d, d, false, rng),
                    cross_kv: Linear::new(&mut s, &n("cross_kv"), d, 2 * d, true, rng),
                    cross_out: Linear::new(&mut s, &n("cross_out"), d, d, true, rng),
                    ln_mlp: LayerNorm::new(&mut s, &n("ln_mlp"), d),
                    fc1: Linear::new(&mut s, &n("fc1"), d, cfg.mlp_ratio * d, true, rng),
                    fc2: Linear::new(&mut s, &n("fc2"), cfg.mlp_ratio * d, d, true, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(&mut s, "final_norm", d);
        let head = FlowHead::new(&mut s, &cfg, rng);
        Ok(Self { cfg, store: s, input, bos, abs_pe, class_emb, cond_pos, blocks, final_norm, head })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Parameter ids of every cross-attention query position projection.
    pub fn query_pe_params(&self) -> Vec<ParamId> {
        self.blocks.iter().map(|b| b.query_pe.weight).collect()
    }

    fn check_cond(&self, cond: &Conditioning, batch: usize) -> Result<()> {
        if cond.classes.len() != batch || cond.shifts.len() != batch {
            return Err(contract(format!(
                "{} classes / {} shifts for batch {batch}",
                cond.classes.len(),
                cond.shifts.len()
            )));
        }
        if let Some(c) = cond.classes.iter().flatten().find(|&&c| c >= self.cfg.n_classes) {
            return Err(contract(format!("class {c} outside [0, {})", self.cfg.n_classes)));
        }
        Ok(())
    }

    fn cond_sequence(&self, tape: &mut Tape<T>, classes: &[Option<usize>]) -> Result<Var> {
        let s = self.cfg.cond_seq_len;
        let rows: Vec<usize> =
            classes.iter().flat_map(|c| std::iter::repeat_n(c.unwrap_or(self.cfg.n_classes), s)).collect();
        let emb = tape.param(&self.store, self.class_emb);
        let e = tape.index_select(emb, 0, &rows)?;
        let e = tape.reshape(e, [classes.len(), s, self.cfg.hidden_dim])?;
        let pos = tape.param(&self.store, self.cond_pos);
        tape.add(e, pos)
    }

    fn query_codes(&self, tape: &mut Tape<T>, positions: &[usize], shifts: &[usize]) -> Option<Var> {
        if !self.cfg.query_pe() {
            return None;
        }
        let d = self.cfg.hidden_dim;
        let baseline = self.cfg.variant == Variant::Baseline2d;
        let mut data = Vec::with_capacity(shifts.len() * positions.len() * d);
        for &sh in shifts {
            for &p in positions {
                let at = p + if baseline { 0 } else { sh };
                data.extend(sinusoidal(at as f64, d).into_iter().map(T::lit));
            }
        }
        Some(tape.leaf(Tensor::new([shifts.len(), positions.len(), d], data).expect("sized")))
    }

    /// Token embeddings `[B, n, d]` for `inputs` `[B, m, C′]`, with the learned
    /// begin-of-sequence vector in front when `bos` is set (`n = m + bos`).
    /// The baseline adds its absolute position rows for positions
    /// `pos_offset..pos_offset + n`.
    pub fn embed(&self, tape: &mut Tape<T>, inputs: &Tensor<T>, bos: bool, pos_offset: usize) -> Result<Var> {
        if inputs.rank() != 3 || inputs.dim(2) != self.cfg.token_channels {
            return Err(shape_err(
                "embed",
                format!("inputs {:?}, expected [B, m, {}]", inputs.shape(), self.cfg.token_channels),
            ));
        }
        let (b, m, d) = (inputs.dim(0), inputs.dim(1), self.cfg.hidden_dim);
        let n = m + usize::from(bos);
        if n == 0 {
            return Err(contract("empty input sequence"));
        }
        let mut parts = Vec::new();
        if bos {
            let p = tape.param(&self.store, self.bos);
            let rows = tape.index_select(p, 0, &vec![0; b])?;
            parts.push(tape.reshape(rows, [b, 1, d])?);
        }
        if m > 0 {
            let x = tape.leaf(inputs.clone());
            parts.push(self.input.forward(tape, &self.store, x)?);
        }
        let mut h = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 1)? };
        if let Some(pe) = self.abs_pe {
            if pos_offset + n > self.cfg.max_len {
                return Err(contract(format!(
                    "baseline_2d has learned positions for {} tokens, asked for {}",
                    self.cfg.max_len,
                    pos_offset + n
                )));
            }
            let table = tape.param(&self.store, pe);
            let rows = tape.slice(table, 0, pos_offset, pos_offset + n)?;
            h = tape.add(h, rows)?;
        }
        Ok(h)
    }

    fn context(&self, tape: &mut Tape<T>, positions: &[usize], cond: &Conditioning, masked: bool) -> Result<Context<T>> {
        let rotary = if self.cfg.uses_rotary() {
            Some(rotary_tables(positions.iter().copied(), self.cfg.head_dim(), self.cfg.rotary_base)?)
        } else {
            None
        };
        let mask = masked.then(|| tape.leaf(self.cfg.attention_window().mask(positions.len())));
        let cond_seq = self.cond_sequence(tape, cond.classes)?;
        let pe = self.query_codes(tape, positions, cond.shifts);
        Ok(Context { rotary, mask, cond: cond_seq, pe })
    }

    fn block(
        &self,
        tape: &mut Tape<T>,
        blk: &Block,
        h: Var,
        ctx: &Context<T>,
        past: Option<&(Tensor<T>, Tensor<T>)>,
    ) -> Result<(Var, Var, Var)> {
        let (d, heads) = (self.cfg.hidden_dim, self.cfg.n_heads);
        let st = &self.store;

        let a = blk.ln_self.forward(tape, st, h)?;
        let qkv = blk.qkv.forward(tape, st, a)?;
        let q = tape.slice(qkv, 2, 0, d)?;
        let k = tape.slice(qkv, 2, d, 2 * d)?;
        let v = tape.slice(qkv, 2, 2 * d, 3 * d)?;
        let mut q = split_heads(tape, q, heads)?;
        let mut k = split_heads(tape, k, heads)?;
        let v = split_heads(tape, v, heads)?;
        if let Some((cos, sin)) = &ctx.rotary {
            q = tape.rotary(q, cos.clone(), sin.clone())?;
            k = tape.rotary(k, cos.clone(), sin.clone())?;
        }
        let (k_all, v_all) = match past {
            Some((pk, pv)) if pk.dim(2) > 0 => {
                let pk = tape.leaf(pk.clone());
                let pv = tape.leaf(pv.clone());
                (tape.concat(&[pk, k], 2)?, tape.concat(&[pv, v], 2)?)
            }
            _ => (k, v),
        };
        let o = attend(tape, q, k_all, v_all, ctx.mask)?;
        let o = merge_heads(tape, o)?;
        let o = blk.self_out.forward(tape, st, o)?;
        let h = tape.add(h, o)?;

        let a = blk.ln_cross.forward(tape, st, h)?;
        let mut cq = blk.cross_q.forward(tape, st, a)?;
        if let Some(pe) = ctx.pe {
            let p = blk.query_pe.forward(tape, st, pe)?;
            cq = tape.add(cq, p)?;
        }
        let kv = blk.cross_kv.forward(tape, st, ctx.cond)?;
        let ck = tape.slice(kv, 2, 0, d)?;
        let cv = tape.slice(kv, 2, d, 2 * d)?;
        let cq = split_heads(tape, cq, heads)?;
        let ck = split_heads(tape, ck, heads)?;
        let cv = split_heads(tape, cv, heads)?;
        let o = attend(tape, cq, ck, cv, None)?;
        let o = merge_heads(tape, o)?;
        let o = blk.cross_out.forward(tape, st, o)?;
        let h = tape.add(h, o)?;

        let a = blk.ln_mlp.forward(tape, st, h)?;
        let a = blk.fc1.forward(tape, st, a)?;
        let a = tape.gelu(a);
        let a = blk.fc2.forward(tape, st, a)?;
        Ok((tape.add(h, a)?, k, v))
    }

    /// Run the blocks over an embedded sequence `[B, n, d]` at absolute
    /// positions `pos_offset..pos_offset + n`; returns `z` `[B, n, d]`.
    pub fn backbone(&self, tape: &mut Tape<T>, h: Var, pos_offset: usize, cond: &Conditioning) -> Result<Var> {
        let s = tape.shape(h).to_vec();
        if s.len() != 3 || s[2] != self.cfg.hidden_dim {
            return Err(shape_err("backbone", format!("embedded {:?}, expected [B, n, {}]", s, self.cfg.hidden_dim)));
        }
        self.check_cond(cond, s[0])?;
        let positions: Vec<usize> = (pos_offset..pos_offset + s[1]).collect();
        let ctx = self.context(tape, &positions, cond, true)?;
        let mut h = h;
        for blk in &self.blocks {
            h = self.block(tape, blk, h, &ctx, None)?.0;
        }
        self.final_norm.forward(tape, &self.store, h)
    }

    /// Embed and run the backbone in one go.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        inputs: &Tensor<T>,
        bos: bool,
        pos_offset: usize,
        cond: &Conditioning,
    ) -> Result<Var> {
        let h = self.embed(tape, inputs, bos, pos_offset)?;
        self.backbone(tape, h, pos_offset, cond)
    }

    /// Teacher-forcing conditions for a full `[B, W, C′]` sequence:
    /// `z_i` for every target `i`, computed from `[BOS, x_0 .. x_{W−2}]`.
    pub fn forward_targets(&self, tape: &mut Tape<T>, tokens: &Tensor<T>, cond: &Conditioning) -> Result<Var> {
        if tokens.rank() != 3 || tokens.dim(1) == 0 {
            return Err(shape_err("forward_targets", format!("tokens {:?}", tokens.shape())));
        }
        let inputs = tokens.slice(1, 0, tokens.dim(1) - 1)?;
        self.forward(tape, &inputs, true, 0, cond)
    }

    /// Incremental decoding: feed the input at the cache's next position
    /// (`None` = begin-of-sequence, only valid at position 0) and return
    /// `z` `[B, d]` for that position.
    pub fn step(&self, cache: &mut KvWindowCache<T>, input: Option<&Tensor<T>>, cond: &Conditioning) -> Result<Tensor<T>> {
        let pos = cache.next_pos;
        let b = cache.batch;
        if input.is_none() != (pos == 0) {
            return Err(contract("begin-of-sequence must be fed exactly at position 0"));
        }
        if cache.layers.len() != self.blocks.len() {
            return Err(contract("cache built for a different model"));
        }
        let mut tape = Tape::new();
        let inputs = match input {
            Some(x) => {
                if x.shape() != [b, self.cfg.token_channels] {
                    return Err(shape_err("step", format!("input {:?}, expected [{b}, {}]", x.shape(), self.cfg.token_channels)));
                }
                x.reshape([b, 1, self.cfg.token_channels])?
            }
            None => Tensor::zeros([b, 0, self.cfg.token_channels]),
        };
        let h = self.embed(&mut tape, &inputs, input.is_none(), pos)?;
        self.check_cond(cond, b)?;
        let ctx = self.context(&mut tape, &[pos], cond, false)?;
        let mut h = h;
        let mut fresh = Vec::with_capacity(self.blocks.len());
        for (blk, past) in self.blocks.iter().zip(&cache.layers) {
            let (out, k, v) = self.block(&mut tape, blk, h, &ctx, Some(past))?;
            fresh.push((k, v));
            h = out;
        }
        let z = self.final_norm.forward(&mut tape, &self.store, h)?;
        for ((k, v), slot) in fresh.into_iter().zip(cache.layers.iter_mut()) {
            let k = Tensor::concat(&[&slot.0, tape.value(k)], 2)?;
            let v = Tensor::concat(&[&slot.1, tape.value(v)], 2)?;
            *slot = match cache.capacity {
                Some(cap) if k.dim(2) > cap => {
                    let n = k.dim(2);
                    (k.slice(2, n - cap, n)?, v.slice(2, n - cap, n)?)
                }
                _ => (k, v),
            };
        }
        cache.positions.push(pos);
        if let Some(cap) = cache.capacity {
            let n = cache.positions.len();
            cache.positions.drain(..n.saturating_sub(cap));
        }
        cache.next_pos += 1;
        tape.value(z).reshape([b, self.cfg.hidden_dim])
    }
}

/// Rotated keys and values of the most recent positions, per layer.
#[derive(Clone, Debug)]
pub struct KvWindowCache<T> {
    batch: usize,
    capacity: Option<usize>,
    layers: Vec<(Tensor<T>, Tensor<T>)>,
    positions: Vec<usize>,
    next_pos: usize,
}

impl<T: Float> KvWindowCache<T> {
    pub fn new(model: &Generator<T>, batch: usize) -> Self {
        let cfg = model.config();
        let empty = Tensor::zeros([batch, cfg.n_heads, 0, cfg.head_dim()]);
        Self {
            batch,
            capacity: cfg.attention_window().cache_capacity(),
            layers: vec![(empty.clone(), empty); cfg.n_layers],
            positions: Vec::new(),
            next_pos: 0,
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Entries held per layer.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Absolute positions of the held entries, oldest first.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn next_position(&self) -> usize {
        self.next_pos
    }

    pub fn window(&self) -> AttentionWindow {
        match self.capacity {
            Some(w) => AttentionWindow::Window(w),
            None => AttentionWindow::Full,
        }
    }
}
