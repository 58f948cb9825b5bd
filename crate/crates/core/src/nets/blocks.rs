//! Residual ResNet and cross-attention blocks. Both return `h + f(h, ...)`,
//! so skipping a block is exactly the identity.

use ndarray::Array2;
use rand::Rng;

use super::params::{join, silu, silu_backward, Linear, ParamSet};

/// `h + W2 silu(W1 h + Wt temb + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub uid: u64,
    pub inner: Linear,
    pub time: Array2<f64>,
    pub outer: Linear,
}

pub struct ResCache {
    h: Array2<f64>,
    u: Array2<f64>,
    a: Array2<f64>,
}

impl ResBlock {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, uid: u64, width: usize, temb_dim: usize) -> Self {
        ResBlock {
            uid,
            inner: Linear::init(rng, width, width, 1.0),
            time: super::params::gaussian(rng, temb_dim, width, 1.0 / (temb_dim as f64).sqrt()),
            outer: Linear::init(rng, width, width, 0.3),
        }
    }

    pub fn zeros(uid: u64, width: usize, temb_dim: usize) -> Self {
        ResBlock {
            uid,
            inner: Linear::zeros(width, width),
            time: Array2::zeros((temb_dim, width)),
            outer: Linear::zeros(width, width),
        }
    }

    pub fn forward(&self, h: &Array2<f64>, temb: &Array2<f64>, cache: Option<&mut Option<ResCache>>) -> Array2<f64> {
        let mut u = self.inner.forward(h);
        u += &temb.dot(&self.time);
        let a = silu(&u);
        let mut y = self.outer.forward(&a);
        y += h;
        if let Some(slot) = cache {
            *slot = Some(ResCache { h: h.clone(), u, a });
        }
        y
    }

    /// Returns `dL/dh`; adds the time-embedding gradient into `dtemb`.
    pub fn backward(
        &self,
        cache: &ResCache,
        temb: &Array2<f64>,
        dy: &Array2<f64>,
        grad: &mut ResBlock,
        dtemb: &mut Array2<f64>,
    ) -> Array2<f64> {
        let da = self.outer.backward(&cache.a, dy, &mut grad.outer);
        let du = silu_backward(&cache.u, &da);
        grad.time += &temb.t().dot(&du);
        *dtemb += &du.dot(&self.time.t());
        let mut dh = self.inner.backward(&cache.h, &du, &mut grad.inner);
        dh += dy;
        dh
    }
}

impl ParamSet for ResBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        self.inner.visit(&join(prefix, "inner"), f);
        f(join(prefix, "time"), &self.time);
        self.outer.visit(&join(prefix, "outer"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.inner.visit_mut(&join(prefix, "inner"), f);
        f(join(prefix, "time"), &mut self.time);
        self.outer.visit_mut(&join(prefix, "outer"), f);
    }
}

/// Single-head attention from features `h` (queries) to condition tokens
/// (keys and values): `h + Wo softmax(q k^T / sqrt(d)) v + bo`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnBlock {
    pub uid: u64,
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub out: Linear,
}

pub struct AttnCache {
    h: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    p: Array2<f64>,
    o: Array2<f64>,
}

impl AttnBlock {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, uid: u64, width: usize, ctx_dim: usize, attn_dim: usize) -> Self {
        use super::params::gaussian;
        AttnBlock {
            uid,
            query: gaussian(rng, width, attn_dim, 1.0 / (width as f64).sqrt()),
            key: gaussian(rng, ctx_dim, attn_dim, 1.0 / (ctx_dim as f64).sqrt()),
            value: gaussian(rng, ctx_dim, attn_dim, 1.0 / (ctx_dim as f64).sqrt()),
            out: Linear::init(rng, attn_dim, width, 0.3),
        }
    }

    pub fn zeros(uid: u64, width: usize, ctx_dim: usize, attn_dim: usize) -> Self {
        AttnBlock {
            uid,
            query: Array2::zeros((width, attn_dim)),
            key: Array2::zeros((ctx_dim, attn_dim)),
            value: Array2::zeros((ctx_dim, attn_dim)),
            out: Linear::zeros(attn_dim, width),
        }
    }

    /// `ctx` holds `tokens` rows per batch element, row `b * tokens + j`.
    pub fn forward(
        &self,
        h: &Array2<f64>,
        ctx: &Array2<f64>,
        tokens: usize,
        cache: Option<&mut Option<AttnCache>>,
    ) -> Array2<f64> {
        let batch = h.nrows();
        let dim = self.query.ncols();
        let scale = 1.0 / (dim as f64).sqrt();
        let q = h.dot(&self.query);
        let k = ctx.dot(&self.key);
        let v = ctx.dot(&self.value);
        let mut p = Array2::zeros((batch, tokens));
        let mut o = Array2::zeros((batch, dim));
        for b in 0..batch {
            let qb = q.row(b);
            let mut max = f64::NEG_INFINITY;
            for j in 0..tokens {
                let s = qb.dot(&k.row(b * tokens + j)) * scale;
                p[[b, j]] = s;
                max = max.max(s);
            }
            let mut norm = 0.0;
            for j in 0..tokens {
                let e = (p[[b, j]] - max).exp();
                p[[b, j]] = e;
                norm += e;
            }
            let mut ob = o.row_mut(b);
            for j in 0..tokens {
                p[[b, j]] /= norm;
                ob.scaled_add(p[[b, j]], &v.row(b * tokens + j));
            }
        }
        let mut y = self.out.forward(&o);
        y += h;
        if let Some(slot) = cache {
            *slot = Some(AttnCache { h: h.clone(), q, k, v, p, o });
        }
        y
    }

    /// Returns `dL/dh`; adds the context gradient into `dctx`.
    pub fn backward(
        &self,
        cache: &AttnCache,
        ctx: &Array2<f64>,
        tokens: usize,
        dy: &Array2<f64>,
        grad: &mut AttnBlock,
        dctx: &mut Array2<f64>,
    ) -> Array2<f64> {
        let batch = dy.nrows();
        let dim = self.query.ncols();
        let scale = 1.0 / (dim as f64).sqrt();
        let d_o = self.out.backward(&cache.o, dy, &mut grad.out);
        let mut dq = Array2::zeros((batch, dim));
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        let mut dp = vec![0.0; tokens];
        for b in 0..batch {
            let dob = d_o.row(b);
            let mut inner = 0.0;
            for j in 0..tokens {
                let r = b * tokens + j;
                dp[j] = dob.dot(&cache.v.row(r));
                inner += cache.p[[b, j]] * dp[j];
                dv.row_mut(r).scaled_add(cache.p[[b, j]], &dob);
            }
            for j in 0..tokens {
                let r = b * tokens + j;
                let ds = cache.p[[b, j]] * (dp[j] - inner) * scale;
                dq.row_mut(b).scaled_add(ds, &cache.k.row(r));
                dk.row_mut(r).scaled_add(ds, &cache.q.row(b));
            }
        }
        grad.query += &cache.h.t().dot(&dq);
        grad.key += &ctx.t().dot(&dk);
        grad.value += &ctx.t().dot(&dv);
        *dctx += &dk.dot(&self.key.t());
        *dctx += &dv.dot(&self.value.t());
        let mut dh = dq.dot(&self.query.t());
        dh += dy;
        dh
    }
}

impl ParamSet for AttnBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        f(join(prefix, "query"), &self.query);
        f(join(prefix, "key"), &self.key);
        f(join(prefix, "value"), &self.value);
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f(join(prefix, "query"), &mut self.query);
        f(join(prefix, "key"), &mut self.key);
        f(join(prefix, "value"), &mut self.value);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}
