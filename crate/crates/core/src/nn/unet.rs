//! Two-level encoder-decoder with skip connections and time conditioning.
//!
//! ```text
//! conv_in (+ gain * cond) -> B(c) -> pool -> B(2c) -> pool -> B(4c)
//!   -> up ++ skip -> B(2c) -> up ++ skip -> B(c) -> conv_out
//! ```
//! Each block `B` is `silu(conv2(silu(conv1(x) + proj(e))))`, where `e` is the
//! shared time embedding after a two-layer SiLU MLP.

use rand::Rng;

use super::*;
use crate::error::{DpiError, Result};

pub const EMB_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_ch: usize,
    pub out_ch: usize,
    pub base: usize,
    /// Adds a per-channel scaled single-plane condition to the first feature map.
    pub cond: bool,
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    ci: usize,
    co: usize,
    c1w: usize,
    c1b: usize,
    pw: usize,
    pb: usize,
    c2w: usize,
    c2b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    t1w: usize,
    t1b: usize,
    t2w: usize,
    t2b: usize,
    inw: usize,
    inb: usize,
    gain: Option<usize>,
    blocks: [BlockIds; 5],
    outw: usize,
    outb: usize,
}

#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    params: ParamSet,
    ids: Layout,
}

#[derive(Debug, Clone)]
struct BlockCache {
    col1: Vec<f64>,
    h1: Feat,
    col2: Vec<f64>,
    h2: Feat,
}

/// Intermediates kept by [`UNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct UNetCache {
    emb: Vec<f64>,
    z1: Vec<f64>,
    s1: Vec<f64>,
    z2: Vec<f64>,
    e: Vec<f64>,
    cond: Option<Vec<f64>>,
    col_in: Vec<f64>,
    blocks: Vec<BlockCache>,
    col_out: Vec<f64>,
}

fn grad_pair<'a>(g: &'a mut [f64], specs: &[TensorSpec], a: usize, b: usize) -> (&'a mut [f64], &'a mut [f64]) {
    let (sa, sb) = (&specs[a], &specs[b]);
    debug_assert!(sa.offset + sa.len() <= sb.offset);
    let (lo, hi) = g.split_at_mut(sb.offset);
    (&mut lo[sa.offset..sa.offset + sa.len()], &mut hi[..sb.len()])
}

impl UNet {
    /// Builds the layout with all parameters zero. Call [`UNet::init`] next.
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        if cfg.in_ch == 0 || cfg.out_ch == 0 || cfg.base == 0 {
            return Err(DpiError::param("nn", "channel counts must be positive"));
        }
        let c = cfg.base;
        let hid = 4 * c;
        let mut p = ParamSet::new();
        let t1w = p.add("temb.dense1.weight", &[hid, EMB_DIM]);
        let t1b = p.add("temb.dense1.bias", &[hid]);
        let t2w = p.add("temb.dense2.weight", &[hid, hid]);
        let t2b = p.add("temb.dense2.bias", &[hid]);
        let inw = p.add("conv_in.weight", &[c, cfg.in_ch, 3, 3]);
        let inb = p.add("conv_in.bias", &[c]);
        let gain = cfg.cond.then(|| p.add("cond.gain", &[c]));
        let mut block = |name: &str, ci: usize, co: usize| BlockIds {
            ci,
            co,
            c1w: p.add(format!("{name}.conv1.weight"), &[co, ci, 3, 3]),
            c1b: p.add(format!("{name}.conv1.bias"), &[co]),
            pw: p.add(format!("{name}.temb_proj.weight"), &[co, hid]),
            pb: p.add(format!("{name}.temb_proj.bias"), &[co]),
            c2w: p.add(format!("{name}.conv2.weight"), &[co, co, 3, 3]),
            c2b: p.add(format!("{name}.conv2.bias"), &[co]),
        };
        let blocks = [
            block("enc0", c, c),
            block("enc1", c, 2 * c),
            block("mid", 2 * c, 4 * c),
            block("dec1", 6 * c, 2 * c),
            block("dec0", 3 * c, c),
        ];
        let outw = p.add("conv_out.weight", &[cfg.out_ch, c, 3, 3]);
        let outb = p.add("conv_out.bias", &[cfg.out_ch]);
        Ok(UNet { cfg, params: p, ids: Layout { t1w, t1b, t2w, t2b, inw, inb, gain, blocks, outw, outb } })
    }

    /// He-style random weights, zero biases. With `zero_head` the output
    /// convolution starts at zero so the network initially outputs 0.
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R, zero_head: bool) {
        let ids = self.ids.clone();
        let c = self.cfg.base;
        let hid = 4 * c;
        let p = &mut self.params;
        p.randomize(ids.t1w, (1.0 / EMB_DIM as f64).sqrt(), rng);
        p.randomize(ids.t2w, (1.0 / hid as f64).sqrt(), rng);
        p.randomize(ids.inw, (2.0 / (9 * self.cfg.in_ch) as f64).sqrt(), rng);
        if let Some(g) = ids.gain {
            p.randomize(g, 0.5, rng);
        }
        for b in ids.blocks {
            p.randomize(b.c1w, (2.0 / (9 * b.ci) as f64).sqrt(), rng);
            p.randomize(b.pw, (1.0 / hid as f64).sqrt(), rng);
            p.randomize(b.c2w, (2.0 / (9 * b.co) as f64).sqrt(), rng);
        }
        if zero_head {
            p.tensor_mut(ids.outw).fill(0.0);
        } else {
            p.randomize(ids.outw, (1.0 / (9 * c) as f64).sqrt(), rng);
        }
    }

    /// Randomises every tensor, biases included; used by gradient checks.
    pub fn randomize_all<R: Rng + ?Sized>(&mut self, rng: &mut R, std: f64) {
        for id in 0..self.params.specs().len() {
            self.params.randomize(id, std, rng);
        }
    }

    pub fn config(&self) -> UNetConfig {
        self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Spatial dimensions must be divisible by 4.
    pub fn check_input(&self, x: &Feat, cond: Option<&[f64]>) -> Result<()> {
        if x.c != self.cfg.in_ch {
            return Err(DpiError::shape("nn", format!("expected {} input channels, got {}", self.cfg.in_ch, x.c)));
        }
        if x.h % 4 != 0 || x.w % 4 != 0 || x.h == 0 || x.w == 0 {
            return Err(DpiError::shape("nn", format!("spatial size {}x{} must be a positive multiple of 4", x.h, x.w)));
        }
        match (self.cfg.cond, cond) {
            (true, Some(c)) if c.len() == x.pixels() => Ok(()),
            (true, _) => Err(DpiError::shape("nn", "condition plane missing or mis-sized")),
            (false, None) => Ok(()),
            (false, Some(_)) => Err(DpiError::shape("nn", "network has no condition pathway")),
        }
    }

    fn block_forward(&self, b: &BlockIds, x: &Feat, e: &[f64]) -> (Feat, BlockCache) {
        let p = &self.params;
        let col1 = im2col(x);
        let mut h1 = conv3x3_col(&col1, b.ci, x.h, x.w, p.tensor(b.c1w), p.tensor(b.c1b));
        let proj = dense(p.tensor(b.pw), p.tensor(b.pb), e);
        for (ch, v) in proj.iter().enumerate() {
            h1.channel_mut(ch).iter_mut().for_each(|a| *a += v);
        }
        let a1 = Feat::from_vec(h1.c, h1.h, h1.w, h1.d.iter().map(|v| silu(*v)).collect());
        let col2 = im2col(&a1);
        let h2 = conv3x3_col(&col2, b.co, x.h, x.w, p.tensor(b.c2w), p.tensor(b.c2b));
        let a2 = Feat::from_vec(h2.c, h2.h, h2.w, h2.d.iter().map(|v| silu(*v)).collect());
        (a2, BlockCache { col1, h1, col2, h2 })
    }

    /// Returns `dx` and accumulates the block's contribution to `de`.
    fn block_backward(&self, b: &BlockIds, cache: &BlockCache, e: &[f64], da2: &Feat, grads: &mut [f64], de: &mut [f64]) -> Feat {
        let p = &self.params;
        let specs = p.specs();
        let dh2 = Feat::from_vec(da2.c, da2.h, da2.w, da2.d.iter().zip(&cache.h2.d).map(|(g, h)| g * silu_grad(*h)).collect());
        let da1 = {
            let (dw, db) = grad_pair(grads, specs, b.c2w, b.c2b);
            conv3x3_backward(&cache.col2, b.co, p.tensor(b.c2w), &dh2, dw, db, true).expect("dx requested")
        };
        let dh1 = Feat::from_vec(da1.c, da1.h, da1.w, da1.d.iter().zip(&cache.h1.d).map(|(g, h)| g * silu_grad(*h)).collect());
        let dproj: Vec<f64> = (0..b.co).map(|ch| dh1.channel(ch).iter().sum()).collect();
        {
            let (dw, db) = grad_pair(grads, specs, b.pw, b.pb);
            let d = dense_backward(p.tensor(b.pw), e, &dproj, dw, db);
            de.iter_mut().zip(d).for_each(|(a, v)| *a += v);
        }
        let (dw, db) = grad_pair(grads, specs, b.c1w, b.c1b);
        conv3x3_backward(&cache.col1, b.ci, p.tensor(b.c1w), &dh1, dw, db, true).expect("dx requested")
    }

    pub fn forward(&self, x: &Feat, t: f64, cond: Option<&[f64]>) -> Result<(Feat, UNetCache)> {
        self.check_input(x, cond)?;
        let p = &self.params;
        let ids = &self.ids;
        let emb = sinusoidal_embedding(t, EMB_DIM);
        let z1 = dense(p.tensor(ids.t1w), p.tensor(ids.t1b), &emb);
        let s1: Vec<f64> = z1.iter().map(|v| silu(*v)).collect();
        let z2 = dense(p.tensor(ids.t2w), p.tensor(ids.t2b), &s1);
        let e: Vec<f64> = z2.iter().map(|v| silu(*v)).collect();

        let col_in = im2col(x);
        let mut f0 = conv3x3_col(&col_in, x.c, x.h, x.w, p.tensor(ids.inw), p.tensor(ids.inb));
        if let (Some(g), Some(cv)) = (ids.gain, cond) {
            for (ch, gv) in p.tensor(g).iter().enumerate() {
                f0.channel_mut(ch).iter_mut().zip(cv).for_each(|(a, v)| *a += gv * v);
            }
        }
        let [b0, b1, b2, b3, b4] = &ids.blocks;
        let (e0, c0) = self.block_forward(b0, &f0, &e);
        let (e1, c1) = self.block_forward(b1, &avg_pool2(&e0), &e);
        let (m, c2) = self.block_forward(b2, &avg_pool2(&e1), &e);
        let (d1, c3) = self.block_forward(b3, &concat(&upsample2(&m), &e1), &e);
        let (d0, c4) = self.block_forward(b4, &concat(&upsample2(&d1), &e0), &e);
        let col_out = im2col(&d0);
        let out = conv3x3_col(&col_out, d0.c, d0.h, d0.w, p.tensor(ids.outw), p.tensor(ids.outb));
        let cache = UNetCache {
            emb,
            z1,
            s1,
            z2,
            e,
            cond: cond.map(|c| c.to_vec()),
            col_in,
            blocks: vec![c0, c1, c2, c3, c4],
            col_out,
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients of `<dout, forward(x)>` into `grads`.
    pub fn backward(&self, cache: &UNetCache, dout: &Feat, grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let p = &self.params;
        let ids = &self.ids;
        let specs = p.specs();
        let c = self.cfg.base;
        let e = &cache.e;
        let mut de = vec![0.0; e.len()];
        let [b0, b1, b2, b3, b4] = &ids.blocks;

        let dd0 = {
            let (dw, db) = grad_pair(grads, specs, ids.outw, ids.outb);
            conv3x3_backward(&cache.col_out, c, p.tensor(ids.outw), dout, dw, db, true).expect("dx requested")
        };
        let du0 = self.block_backward(b4, &cache.blocks[4], e, &dd0, grads, &mut de);
        let (dup1, de0_skip) = split(&du0, 2 * c);
        let du1 = self.block_backward(b3, &cache.blocks[3], e, &upsample2_backward(&dup1), grads, &mut de);
        let (dupm, de1_skip) = split(&du1, 4 * c);
        let dp1 = self.block_backward(b2, &cache.blocks[2], e, &upsample2_backward(&dupm), grads, &mut de);
        let mut de1 = avg_pool2_backward(&dp1);
        de1.d.iter_mut().zip(&de1_skip.d).for_each(|(a, v)| *a += v);
        let dp0 = self.block_backward(b1, &cache.blocks[1], e, &de1, grads, &mut de);
        let mut de0 = avg_pool2_backward(&dp0);
        de0.d.iter_mut().zip(&de0_skip.d).for_each(|(a, v)| *a += v);
        let df0 = self.block_backward(b0, &cache.blocks[0], e, &de0, grads, &mut de);

        if let (Some(g), Some(cv)) = (ids.gain, cache.cond.as_ref()) {
            let off = specs[g].offset;
            for ch in 0..c {
                grads[off + ch] += df0.channel(ch).iter().zip(cv).map(|(a, v)| a * v).sum::<f64>();
            }
        }
        {
            let (dw, db) = grad_pair(grads, specs, ids.inw, ids.inb);
            conv3x3_backward(&cache.col_in, self.cfg.in_ch, p.tensor(ids.inw), &df0, dw, db, false);
        }

        let dz2: Vec<f64> = de.iter().zip(&cache.z2).map(|(g, z)| g * silu_grad(*z)).collect();
        let ds1 = {
            let (dw, db) = grad_pair(grads, specs, ids.t2w, ids.t2b);
            dense_backward(p.tensor(ids.t2w), &cache.s1, &dz2, dw, db)
        };
        let dz1: Vec<f64> = ds1.iter().zip(&cache.z1).map(|(g, z)| g * silu_grad(*z)).collect();
        let (dw, db) = grad_pair(grads, specs, ids.t1w, ids.t1b);
        dense_backward(p.tensor(ids.t1w), &cache.emb, &dz1, dw, db);
    }
}
