//! Residual-encoder 3D U-Net with a flat, named parameter vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::NetConfig;
use crate::error::{NetError, Result};
use crate::loss::{softmax_backward, LossInputs, LossValue, LossWeights};
use crate::ops::{self, Act, ConvSpec, NormCache};

/// A named slice of the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Conv (no bias) followed by instance norm and the leaky rectifier.
/// Parameters are laid out as `[w | gamma | beta]`.
#[derive(Debug, Clone, Copy)]
struct Cna {
    spec: ConvSpec,
    offset: usize,
}

impl Cna {
    fn len(&self) -> usize {
        self.spec.weight_len() + 2 * self.spec.cout
    }
}

#[derive(Debug, Clone)]
struct Stage {
    /// Stem convolution at stage 0, strided downsampling afterwards.
    entry: Cna,
    res: Vec<Cna>,
}

#[derive(Debug, Clone, Copy)]
struct Dec {
    level: usize,
    cin: usize,
    cout: usize,
    /// `[w (cout*8 x cin) | b (cout)]`
    up_offset: usize,
    cna: Cna,
}

#[derive(Debug, Clone)]
struct Layout {
    stages: Vec<Stage>,
    /// Execution order: deepest decoder level first.
    dec: Vec<Dec>,
    head: ConvSpec,
    head_offset: usize,
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    fn new(cfg: &NetConfig) -> Layout {
        let mut segments = Vec::new();
        let cna = |prefix: &str, spec: ConvSpec, segments: &mut Vec<Segment>| {
            let offset = add(segments, format!("{prefix}.conv.w"), spec.weight_len());
            add(segments, format!("{prefix}.norm.gamma"), spec.cout);
            add(segments, format!("{prefix}.norm.beta"), spec.cout);
            Cna { spec, offset }
        };

        let mut stages = Vec::with_capacity(cfg.stages);
        for s in 0..cfg.stages {
            let c = cfg.channels(s);
            let entry = if s == 0 {
                cna("stem", ConvSpec::same3(cfg.in_channels, c), &mut segments)
            } else {
                cna(&format!("enc{s}.down"), ConvSpec::down2(cfg.channels(s - 1), c), &mut segments)
            };
            let res = (0..cfg.blocks_per_stage)
                .map(|b| cna(&format!("enc{s}.res{b}"), ConvSpec::same3(c, c), &mut segments))
                .collect();
            stages.push(Stage { entry, res });
        }
        let mut dec = Vec::new();
        for level in (0..cfg.stages - 1).rev() {
            let (cin, cout) = (cfg.channels(level + 1), cfg.channels(level));
            let up_offset = add(&mut segments, format!("dec{level}.up.w"), cout * 8 * cin);
            add(&mut segments, format!("dec{level}.up.b"), cout);
            let cna = cna(&format!("dec{level}"), ConvSpec::same3(2 * cout, cout), &mut segments);
            dec.push(Dec {
                level,
                cin,
                cout,
                up_offset,
                cna,
            });
        }
        let head = ConvSpec::pointwise(cfg.channels(0), cfg.num_classes);
        let head_offset = add(&mut segments, "head.w".into(), head.weight_len());
        add(&mut segments, "head.b".into(), cfg.num_classes);
        let total = off_of(&segments);
        Layout {
            stages,
            dec,
            head,
            head_offset,
            segments,
            total,
        }
    }
}

fn add(segments: &mut Vec<Segment>, name: String, len: usize) -> usize {
    let offset = off_of(segments);
    segments.push(Segment { name, offset, len });
    offset
}

fn off_of(segments: &[Segment]) -> usize {
    segments.last().map_or(0, |s| s.offset + s.len)
}

/// Parameter count implied by a configuration.
pub fn param_count(cfg: &NetConfig) -> usize {
    Layout::new(cfg).total
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetModel {
    pub cfg: NetConfig,
    pub seed: u64,
    pub params: Vec<f64>,
}

/// Rectifier signs to impose instead of the ones the forward pass computes.
type Frozen<'a> = Option<std::slice::Iter<'a, bool>>;

struct CnaCache {
    x: Act,
    norm: NormCache,
    pre: Act,
}

struct DecCache {
    up_in: Act,
    cna: CnaCache,
}

/// Intermediate values of one item's forward pass.
pub struct ForwardCache {
    enc: Vec<Vec<CnaCache>>,
    dec: Vec<DecCache>,
    head_in: Act,
}

impl ForwardCache {
    /// Signs of every leaky-rectifier pre-activation, in execution order.
    pub fn rectifier_signs(&self) -> Vec<bool> {
        let enc = self.enc.iter().flatten();
        let dec = self.dec.iter().map(|d| &d.cna);
        enc.chain(dec).flat_map(|c| c.pre.data.iter().map(|&v| v > 0.0)).collect()
    }
}

/// Gradient of the batch loss with respect to every parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: LossValue,
    pub grads: Vec<f64>,
}

/// Builds a model with He fan-in initialisation: conv and upsampling
/// weights are drawn from N(0, 2/fan_in) in segment order, norm scales start
/// at 1 and every shift or bias at 0.
pub fn build_model(cfg: &NetConfig, seed: u64) -> Result<NetModel> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut params = vec![0.0; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |off: usize, len: usize, fan_in: usize, params: &mut [f64]| {
        let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        for p in &mut params[off..off + len] {
            *p = d.sample(&mut rng);
        }
    };
    let init_cna = |c: &Cna, params: &mut [f64], fill: &mut dyn FnMut(usize, usize, usize, &mut [f64])| {
        fill(c.offset, c.spec.weight_len(), c.spec.cin * c.spec.taps(), params);
        let g = c.offset + c.spec.weight_len();
        params[g..g + c.spec.cout].fill(1.0);
    };
    for st in &layout.stages {
        init_cna(&st.entry, &mut params, &mut fill);
        for r in &st.res {
            init_cna(r, &mut params, &mut fill);
        }
    }
    for d in &layout.dec {
        fill(d.up_offset, d.cout * 8 * d.cin, d.cin, &mut params);
        init_cna(&d.cna, &mut params, &mut fill);
    }
    fill(layout.head_offset, layout.head.weight_len(), layout.head.cin, &mut params);
    Ok(NetModel {
        cfg: cfg.clone(),
        seed,
        params,
    })
}

impl NetModel {
    /// Wraps an existing parameter vector, checking its length.
    pub fn from_params(cfg: NetConfig, seed: u64, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let n = param_count(&cfg);
        if params.len() != n {
            return Err(NetError::Shape(format!(
                "parameter vector has {} entries, configuration needs {n}",
                params.len()
            )));
        }
        Ok(NetModel { cfg, seed, params })
    }

    pub fn segments(&self) -> Vec<Segment> {
        Layout::new(&self.cfg).segments
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        let s = self.segments().into_iter().find(|s| s.name == name)?;
        Some(&self.params[s.offset..s.offset + s.len])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = self.segments().into_iter().find(|s| s.name == name)?;
        Some(&mut self.params[s.offset..s.offset + s.len])
    }

    /// Number of leaky-rectifier units in one item's forward pass.
    pub fn rectifier_count(&self) -> usize {
        let cfg = &self.cfg;
        let vox = |s: usize| cfg.patch_voxels() >> (3 * s);
        let enc: usize = (0..cfg.stages).map(|s| (1 + cfg.blocks_per_stage) * cfg.channels(s) * vox(s)).sum();
        let dec: usize = (0..cfg.stages - 1).map(|s| cfg.channels(s) * vox(s)).sum();
        enc + dec
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.params.iter().position(|p| !p.is_finite()) {
            Some(i) => Err(NetError::NonFinite(format!("parameter {i} is {}", self.params[i]))),
            None => Ok(()),
        }
    }

    fn check_input(&self, x: &Act) -> Result<()> {
        if x.c != self.cfg.in_channels || x.dims != self.cfg.patch_size {
            return Err(NetError::Shape(format!(
                "input has {} channels of {:?}, model expects {} of {:?}",
                x.c, x.dims, self.cfg.in_channels, self.cfg.patch_size
            )));
        }
        if x.data.len() != x.c * x.voxels() {
            return Err(NetError::Shape("input buffer length does not match its shape".into()));
        }
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite("input patch".into()));
        }
        Ok(())
    }

    fn cna_fwd(&self, c: &Cna, x: Act, frozen: &mut Frozen) -> (Act, CnaCache) {
        let p = &self.params[c.offset..c.offset + c.len()];
        let (w, rest) = p.split_at(c.spec.weight_len());
        let (gamma, beta) = rest.split_at(c.spec.cout);
        let z = ops::conv_forward(&x, &c.spec, w, None);
        let (pre, norm) = ops::inorm_forward(&z, gamma, beta);
        let out = match frozen {
            Some(signs) => Act {
                c: pre.c,
                dims: pre.dims,
                data: pre
                    .data
                    .iter()
                    .map(|&v| {
                        let pos = *signs.next().expect("pattern covers every rectifier");
                        if pos {
                            v
                        } else {
                            ops::LRELU_SLOPE * v
                        }
                    })
                    .collect(),
            },
            None => ops::lrelu(&pre),
        };
        (out, CnaCache { x, norm, pre })
    }

    fn cna_bwd(&self, c: &Cna, cache: &CnaCache, dy: &Act, grads: &mut [f64], need_dx: bool) -> Option<Act> {
        let p = &self.params[c.offset..c.offset + c.len()];
        let w = &p[..c.spec.weight_len()];
        let gamma = &p[c.spec.weight_len()..c.spec.weight_len() + c.spec.cout];
        let g = &mut grads[c.offset..c.offset + c.len()];
        let (dw, rest) = g.split_at_mut(c.spec.weight_len());
        let (dgamma, dbeta) = rest.split_at_mut(c.spec.cout);
        let dpre = ops::lrelu_backward(&cache.pre, dy);
        let dz = ops::inorm_backward(&cache.norm, gamma, &dpre, dgamma, dbeta);
        ops::conv_backward(&cache.x, &c.spec, w, &dz, dw, None, need_dx)
    }

    fn forward_item(&self, layout: &Layout, x: &Act, frozen: &mut Frozen) -> (Act, ForwardCache) {
        let mut enc = Vec::with_capacity(layout.stages.len());
        let mut skips = Vec::with_capacity(layout.stages.len());
        let mut h = x.clone();
        for st in &layout.stages {
            let mut caches = Vec::with_capacity(1 + st.res.len());
            let (out, c) = self.cna_fwd(&st.entry, h, frozen);
            caches.push(c);
            h = out;
            for r in &st.res {
                let (branch, c) = self.cna_fwd(r, h.clone(), frozen);
                caches.push(c);
                h.data.iter_mut().zip(&branch.data).for_each(|(a, b)| *a += b);
            }
            enc.push(caches);
            skips.push(h.clone());
        }
        skips.pop();
        let mut dec = Vec::with_capacity(layout.dec.len());
        for d in &layout.dec {
            let (w, b) = self.params[d.up_offset..d.up_offset + d.cout * 8 * d.cin + d.cout].split_at(d.cout * 8 * d.cin);
            let u = ops::up_forward(&h, d.cout, w, b);
            let skip = skips.pop().expect("one skip per decoder level");
            let (out, c) = self.cna_fwd(&d.cna, Act::concat(&u, &skip), frozen);
            dec.push(DecCache { up_in: h, cna: c });
            h = out;
        }
        let (hw, hb) = self.params[layout.head_offset..layout.head_offset + layout.head.weight_len() + layout.head.cout]
            .split_at(layout.head.weight_len());
        let logits = ops::conv_forward(&h, &layout.head, hw, Some(hb));
        (logits, ForwardCache { enc, dec, head_in: h })
    }

    fn backward_item(&self, layout: &Layout, cache: &ForwardCache, dlogits: &Act) -> Vec<f64> {
        let mut grads = vec![0.0; self.params.len()];
        let hw_len = layout.head.weight_len();
        let (hw, _) = self.params[layout.head_offset..].split_at(hw_len);
        let (dhw, rest) = grads[layout.head_offset..].split_at_mut(hw_len);
        let mut dh = ops::conv_backward(
            &cache.head_in,
            &layout.head,
            hw,
            dlogits,
            dhw,
            Some(&mut rest[..layout.head.cout]),
            true,
        )
        .expect("requested input gradient");

        let n_stages = layout.stages.len();
        let mut dskips: Vec<Option<Act>> = (0..n_stages).map(|_| None).collect();
        for (d, dc) in layout.dec.iter().zip(&cache.dec).rev() {
            let dcat = self.cna_bwd(&d.cna, &dc.cna, &dh, &mut grads, true).expect("requested");
            let (du, dskip) = dcat.split(d.cout);
            let wl = d.cout * 8 * d.cin;
            let w = &self.params[d.up_offset..d.up_offset + wl];
            let (dw, db) = grads[d.up_offset..d.up_offset + wl + d.cout].split_at_mut(wl);
            dh = ops::up_backward(&dc.up_in, d.cout, w, &du, dw, db);
            dskips[d.level] = Some(dskip);
        }

        for (s, st) in layout.stages.iter().enumerate().rev() {
            if let Some(ds) = dskips[s].take() {
                dh.data.iter_mut().zip(&ds.data).for_each(|(a, b)| *a += b);
            }
            let caches = &cache.enc[s];
            for (r, c) in st.res.iter().zip(&caches[1..]).rev() {
                let dx = self.cna_bwd(r, c, &dh, &mut grads, true).expect("requested");
                dh.data.iter_mut().zip(&dx.data).for_each(|(a, b)| *a += b);
            }
            let need_dx = s > 0;
            if let Some(dx) = self.cna_bwd(&st.entry, &caches[0], &dh, &mut grads, need_dx) {
                dh = dx;
            }
        }
        grads
    }

    /// Logits for every batch item, each shaped `(num_classes, patch)`.
    pub fn forward(&self, batch: &[Act]) -> Result<Vec<Act>> {
        Ok(self.forward_with_cache(batch)?.into_iter().map(|(l, _)| l).collect())
    }

    /// Forward pass that keeps the intermediate values needed for backward.
    pub fn forward_with_cache(&self, batch: &[Act]) -> Result<Vec<(Act, ForwardCache)>> {
        for x in batch {
            self.check_input(x)?;
        }
        let layout = Layout::new(&self.cfg);
        Ok(batch.par_iter().map(|x| self.forward_item(&layout, x, &mut None)).collect())
    }

    /// Parameter gradients for given upstream logit gradients. Per-item
    /// contributions are summed in batch order.
    pub fn backward(&self, caches: &[ForwardCache], dlogits: &[Act]) -> Result<Vec<f64>> {
        if caches.len() != dlogits.len() {
            return Err(NetError::Shape("one logit gradient per cached item required".into()));
        }
        let layout = Layout::new(&self.cfg);
        let per_item: Vec<Vec<f64>> = caches
            .par_iter()
            .zip(dlogits.par_iter())
            .map(|(c, g)| self.backward_item(&layout, c, g))
            .collect();
        let mut total = vec![0.0; self.params.len()];
        for g in per_item {
            total.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok(total)
    }

    /// Total loss of a labelled batch and its exact gradient.
    pub fn gradients(&self, batch: &[Act], labels: &[Vec<u8>], foreground: &[u8], weights: LossWeights) -> Result<Gradients> {
        let fwd = self.forward_with_cache(batch)?;
        let (logits, caches): (Vec<Act>, Vec<ForwardCache>) = fwd.into_iter().unzip();
        let (loss, dlogits) = loss_and_logit_grad(&logits, labels, foreground, weights)?;
        let grads = self.backward(&caches, &dlogits)?;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NetError::NonFinite(format!("gradient component {i}")));
        }
        Ok(Gradients { loss, grads })
    }

    /// Loss of a labelled batch without gradients.
    pub fn loss(&self, batch: &[Act], labels: &[Vec<u8>], foreground: &[u8], weights: LossWeights) -> Result<LossValue> {
        let logits = self.forward(batch)?;
        let probs: Vec<Act> = logits.iter().map(ops::softmax).collect();
        LossInputs::from_probs(&probs, labels, foreground)?.evaluate(weights)
    }

    /// Loss with every leaky rectifier held on the linear piece given by
    /// `patterns` (one [`ForwardCache::rectifier_signs`] vector per item).
    /// Around the parameters the patterns were recorded at, this is the
    /// smooth function whose derivative [`NetModel::gradients`] returns.
    pub fn loss_with_frozen_rectifiers(
        &self,
        batch: &[Act],
        labels: &[Vec<u8>],
        foreground: &[u8],
        weights: LossWeights,
        patterns: &[Vec<bool>],
    ) -> Result<LossValue> {
        let n = self.rectifier_count();
        if patterns.len() != batch.len() || patterns.iter().any(|p| p.len() != n) {
            return Err(NetError::Shape(format!(
                "need one rectifier pattern of length {n} per batch item"
            )));
        }
        for x in batch {
            self.check_input(x)?;
        }
        let layout = Layout::new(&self.cfg);
        let probs: Vec<Act> = batch
            .iter()
            .zip(patterns)
            .map(|(x, p)| {
                let (logits, _) = self.forward_item(&layout, x, &mut Some(p.iter()));
                Ok(ops::softmax(&logits))
            })
            .collect::<Result<_>>()?;
        LossInputs::from_probs(&probs, labels, foreground)?.evaluate(weights)
    }
}

/// Loss value and its gradient with respect to the logits of every item.
pub fn loss_and_logit_grad(
    logits: &[Act],
    labels: &[Vec<u8>],
    foreground: &[u8],
    weights: LossWeights,
) -> Result<(LossValue, Vec<Act>)> {
    let probs: Vec<Act> = logits.iter().map(ops::softmax).collect();
    let li = LossInputs::from_probs(&probs, labels, foreground)?;
    let (loss, du) = li.value_and_grad(weights)?;
    let n = li.voxels;
    let k = li.classes;
    let dlogits = probs
        .iter()
        .enumerate()
        .map(|(b, u)| {
            let g = &du[b * k * n..(b + 1) * k * n];
            Act {
                c: u.c,
                dims: u.dims,
                data: softmax_backward(&u.data, g, k, n),
            }
        })
        .collect();
    Ok((loss, dlogits))
}
