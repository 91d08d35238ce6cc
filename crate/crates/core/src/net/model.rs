//! Dual-decoder dense U-Net: layer layout, forward pass with cache, reverse pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{
    conv_backward, conv_forward, numel, relu_backward_inplace, relu_inplace, upsample_nearest,
    upsample_nearest_backward, ConvSpec, Dims, Real,
};
use super::NetConfig;

/// Convolutions of one resolution level: an entry conv (stem, stride-2
/// downsampling or post-upsampling conv), the dense convs, and a 1×1 transition.
#[derive(Debug, Clone)]
pub(crate) struct Level {
    pub entry: usize,
    pub dense: Vec<usize>,
    pub trans: usize,
    /// Channels of the entry output plus any concatenated skip.
    pub base: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Decoder {
    /// Indexed by resolution level `0..levels-1`.
    pub levels: Vec<Level>,
    pub head: usize,
}

/// Layer layout derived from a [`NetConfig`]. Conv `i` owns parameter
/// tensors `2i` (weight) and `2i + 1` (bias).
#[derive(Debug, Clone)]
pub(crate) struct Arch {
    pub convs: Vec<ConvSpec>,
    pub encoder: Vec<Level>,
    pub dose: Decoder,
    pub recon: Option<Decoder>,
    pub widths: Vec<usize>,
}

impl Arch {
    pub fn new(cfg: &NetConfig) -> Self {
        let widths: Vec<usize> = (0..cfg.levels).map(|l| cfg.base_channels << l).collect();
        let mut convs = Vec::new();
        let mut push = |name: String, cin: usize, cout: usize, k: usize, stride: usize| {
            convs.push(ConvSpec {
                name,
                cin,
                cout,
                k,
                stride,
                ndim: cfg.ndim,
            });
            convs.len() - 1
        };
        let kernel = cfg.kernel;
        let g = cfg.growth;
        let n = cfg.convs_per_block;

        let mut encoder = Vec::new();
        for l in 0..cfg.levels {
            let c = widths[l];
            let entry = if l == 0 {
                push(format!("enc.{l}.stem"), cfg.in_channels, c, kernel, 1)
            } else {
                push(format!("enc.{l}.down"), widths[l - 1], c, kernel, 2)
            };
            let dense = (0..n)
                .map(|k| push(format!("enc.{l}.dense{k}"), c + k * g, g, kernel, 1))
                .collect();
            let trans = push(format!("enc.{l}.trans"), c + n * g, c, 1, 1);
            encoder.push(Level {
                entry,
                dense,
                trans,
                base: c,
            });
        }

        let mut decoder = |prefix: &str| {
            let levels = (0..cfg.levels - 1)
                .map(|l| {
                    let c = widths[l];
                    let entry = push(format!("{prefix}.{l}.up"), widths[l + 1], c, kernel, 1);
                    let dense = (0..n)
                        .map(|k| push(format!("{prefix}.{l}.dense{k}"), 2 * c + k * g, g, kernel, 1))
                        .collect();
                    let trans = push(format!("{prefix}.{l}.trans"), 2 * c + n * g, c, 1, 1);
                    Level {
                        entry,
                        dense,
                        trans,
                        base: 2 * c,
                    }
                })
                .collect();
            let head = push(format!("{prefix}.head"), widths[0], 1, 1, 1);
            Decoder { levels, head }
        };
        let dose = decoder("dose");
        let recon = cfg.recon_branch.then(|| decoder("recon"));
        Self {
            convs,
            encoder,
            dose,
            recon,
            widths,
        }
    }
}

/// Inverted-dropout mask source.
pub(crate) struct Dropout {
    pub rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: (rate > 0.0).then(|| ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Per-element multipliers: `0` with probability `rate`, else `1 / (1 - rate)`.
    pub fn mask<T: Real>(&mut self, len: usize) -> Option<Vec<T>> {
        let rng = self.rng.as_mut()?;
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        Some(
            (0..len)
                .map(|_| {
                    if rng.random::<f64>() < self.rate {
                        T::ZERO
                    } else {
                        keep
                    }
                })
                .collect(),
        )
    }
}

/// Cached state of one level's forward pass.
pub(crate) struct LevelCache<T> {
    pub dims: Dims,
    pub entry_in_dims: Dims,
    pub entry_col: Option<Vec<T>>,
    /// Entry output, concatenated skip (decoders only) and every dense output, post-ReLU.
    pub feats: Vec<T>,
    pub dense_cols: Vec<Option<Vec<T>>>,
    pub drop_mask: Option<Vec<T>>,
    pub dropped: Option<Vec<T>>,
    pub out: Vec<T>,
}

fn conv_params<'a, T>(w: &'a [Vec<T>], i: usize) -> (&'a [T], &'a [T]) {
    (&w[2 * i], &w[2 * i + 1])
}

#[allow(clippy::too_many_arguments)]
fn level_forward<T: Real>(
    arch: &Arch,
    w: &[Vec<T>],
    lv: &Level,
    entry_in: &[T],
    entry_in_dims: &Dims,
    skip: Option<&[T]>,
    dropout: &mut Dropout,
) -> LevelCache<T> {
    let entry = &arch.convs[lv.entry];
    let (ew, eb) = conv_params(w, lv.entry);
    let (mut feats, entry_col) = conv_forward(entry, ew, eb, entry_in, entry_in_dims);
    relu_inplace(&mut feats);
    let dims = entry.out_dims(entry_in_dims);
    let p = numel(&dims);
    if let Some(s) = skip {
        feats.extend_from_slice(s);
    }
    debug_assert_eq!(feats.len(), lv.base * p);
    let mut dense_cols = Vec::with_capacity(lv.dense.len());
    for &ci in &lv.dense {
        let spec = &arch.convs[ci];
        let (dw, db) = conv_params(w, ci);
        let (mut y, col) = conv_forward(spec, dw, db, &feats, &dims);
        relu_inplace(&mut y);
        feats.extend_from_slice(&y);
        dense_cols.push(col);
    }
    let drop_mask = dropout.mask::<T>(feats.len());
    let dropped = drop_mask
        .as_ref()
        .map(|m| feats.iter().zip(m).map(|(&a, &b)| a * b).collect::<Vec<T>>());
    let (tw, tb) = conv_params(w, lv.trans);
    let (mut out, _) = conv_forward(
        &arch.convs[lv.trans],
        tw,
        tb,
        dropped.as_deref().unwrap_or(&feats),
        &dims,
    );
    relu_inplace(&mut out);
    LevelCache {
        dims,
        entry_in_dims: *entry_in_dims,
        entry_col,
        feats,
        dense_cols,
        drop_mask,
        dropped,
        out,
    }
}

/// Reverse pass through one level. Returns the gradient of the concatenated
/// skip (if any) and, when `want_input` is set, of the entry input.
#[allow(clippy::too_many_arguments)]
fn level_backward<T: Real>(
    arch: &Arch,
    w: &[Vec<T>],
    lv: &Level,
    cache: &LevelCache<T>,
    entry_in: &[T],
    mut dout: Vec<T>,
    grads: &mut [Vec<T>],
    want_input: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p = numel(&cache.dims);
    relu_backward_inplace(&cache.out, &mut dout);
    let trans_in = cache.dropped.as_deref().unwrap_or(&cache.feats);
    let mut dfeats = vec![T::ZERO; cache.feats.len()];
    {
        let (tw, _) = conv_params(w, lv.trans);
        let (gw, gb) = split_grads(grads, lv.trans);
        conv_backward(
            &arch.convs[lv.trans],
            tw,
            trans_in,
            None,
            &cache.dims,
            &dout,
            gw,
            gb,
            Some(&mut dfeats),
        );
    }
    if let Some(m) = &cache.drop_mask {
        for (g, &k) in dfeats.iter_mut().zip(m) {
            *g *= k;
        }
    }
    let g = if lv.dense.is_empty() {
        0
    } else {
        arch.convs[lv.dense[0]].cout
    };
    for (k, &ci) in lv.dense.iter().enumerate().rev() {
        let start = (lv.base + k * g) * p;
        let (head, tail) = dfeats.split_at_mut(start);
        let dy = &mut tail[..g * p];
        relu_backward_inplace(&cache.feats[start..start + g * p], dy);
        let (cw, _) = conv_params(w, ci);
        let (gw, gb) = split_grads(grads, ci);
        conv_backward(
            &arch.convs[ci],
            cw,
            &cache.feats[..start],
            cache.dense_cols[k].as_deref(),
            &cache.dims,
            dy,
            gw,
            gb,
            Some(head),
        );
    }
    let entry = &arch.convs[lv.entry];
    let c = entry.cout;
    let dskip = (lv.base > c).then(|| dfeats[c * p..lv.base * p].to_vec());
    let mut dentry = dfeats[..c * p].to_vec();
    relu_backward_inplace(&cache.feats[..c * p], &mut dentry);
    let (ew, _) = conv_params(w, lv.entry);
    let mut dx = want_input.then(|| vec![T::ZERO; entry.cin * numel(&cache.entry_in_dims)]);
    let (gw, gb) = split_grads(grads, lv.entry);
    conv_backward(
        entry,
        ew,
        entry_in,
        cache.entry_col.as_deref(),
        &cache.entry_in_dims,
        &dentry,
        gw,
        gb,
        dx.as_deref_mut(),
    );
    (dskip, dx)
}

fn split_grads<T>(grads: &mut [Vec<T>], conv: usize) -> (&mut [T], &mut [T]) {
    let (a, b) = grads[2 * conv..2 * conv + 2].split_at_mut(1);
    (&mut a[0], &mut b[0])
}

pub(crate) struct DecoderCache<T> {
    /// Upsampled inputs of each level's entry conv.
    pub up_inputs: Vec<Vec<T>>,
    pub levels: Vec<LevelCache<T>>,
    pub head_in_dims: Dims,
    pub output: Vec<T>,
}

pub(crate) struct Cache<T> {
    pub input: Vec<T>,
    pub encoder: Vec<LevelCache<T>>,
    pub dose: DecoderCache<T>,
    pub recon: Option<DecoderCache<T>>,
}

fn decoder_forward<T: Real>(
    arch: &Arch,
    w: &[Vec<T>],
    dec: &Decoder,
    enc: &[LevelCache<T>],
    dropout: &mut Dropout,
) -> DecoderCache<T> {
    let nl = enc.len();
    let mut levels: Vec<Option<LevelCache<T>>> = (0..nl - 1).map(|_| None).collect();
    let mut up_inputs: Vec<Vec<T>> = vec![Vec::new(); nl - 1];
    for l in (0..nl - 1).rev() {
        let (prev, prev_dims, prev_c) = match &levels.get(l + 1).and_then(|x| x.as_ref()) {
            Some(c) => (&c.out, c.dims, arch.widths[l + 1]),
            None => (&enc[l + 1].out, enc[l + 1].dims, arch.widths[l + 1]),
        };
        let to = enc[l].dims;
        let up = upsample_nearest(prev, prev_c, &prev_dims, &to);
        let cache = level_forward(arch, w, &dec.levels[l], &up, &to, Some(&enc[l].out), dropout);
        up_inputs[l] = up;
        levels[l] = Some(cache);
    }
    let levels: Vec<LevelCache<T>> = levels.into_iter().map(|c| c.expect("filled")).collect();
    let head = &arch.convs[dec.head];
    let (hw, hb) = conv_params(w, dec.head);
    let (output, _) = conv_forward(head, hw, hb, &levels[0].out, &enc[0].dims);
    DecoderCache {
        up_inputs,
        levels,
        head_in_dims: enc[0].dims,
        output,
    }
}

/// Backward through a decoder. Adds skip gradients into `denc[l]` and the
/// bottleneck gradient into `denc[last]`.
fn decoder_backward<T: Real>(
    arch: &Arch,
    w: &[Vec<T>],
    dec: &Decoder,
    cache: &DecoderCache<T>,
    enc: &[LevelCache<T>],
    dhead: &[T],
    grads: &mut [Vec<T>],
    denc: &mut [Vec<T>],
) {
    let nl = enc.len();
    let head = &arch.convs[dec.head];
    let (hw, _) = conv_params(w, dec.head);
    let mut dprev = vec![T::ZERO; cache.levels[0].out.len()];
    {
        let (gw, gb) = split_grads(grads, dec.head);
        conv_backward(
            head,
            hw,
            &cache.levels[0].out,
            None,
            &cache.head_in_dims,
            dhead,
            gw,
            gb,
            Some(&mut dprev),
        );
    }
    for l in 0..nl - 1 {
        let lc = &cache.levels[l];
        let (dskip, dup) = level_backward(
            arch,
            w,
            &dec.levels[l],
            lc,
            &cache.up_inputs[l],
            dprev,
            grads,
            true,
        );
        add_into(&mut denc[l], &dskip.expect("decoder levels carry a skip"));
        let from = if l + 1 < nl - 1 {
            cache.levels[l + 1].dims
        } else {
            enc[nl - 1].dims
        };
        let dsmall = upsample_nearest_backward(
            &dup.expect("input gradient requested"),
            arch.widths[l + 1],
            &from,
            &lc.dims,
        );
        if l + 1 < nl - 1 {
            dprev = dsmall;
        } else {
            add_into(&mut denc[nl - 1], &dsmall);
            dprev = Vec::new();
        }
    }
}

fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

pub(crate) fn forward<T: Real>(
    arch: &Arch,
    w: &[Vec<T>],
    input: Vec<T>,
    dims: Dims,
    dropout: &mut Dropout,
    with_recon: bool,
) -> Cache<T> {
    let mut encoder: Vec<LevelCache<T>> = Vec::with_capacity(arch.encoder.len());
    for (l, lv) in arch.encoder.iter().enumerate() {
        let cache = if l == 0 {
            level_forward(arch, w, lv, &input, &dims, None, dropout)
        } else {
            let prev = &encoder[l - 1];
            level_forward(arch, w, lv, &prev.out, &prev.dims, None, dropout)
        };
        encoder.push(cache);
    }
    let dose = decoder_forward(arch, w, &arch.dose, &encoder, dropout);
    let recon = match (&arch.recon, with_recon) {
        (Some(dec), true) => Some(decoder_forward(arch, w, dec, &encoder, dropout)),
        _ => None,
    };
    Cache {
        input,
        encoder,
        dose,
        recon,
    }
}

/// Accumulates parameter gradients for output gradients `ddose` and `dct`.
pub(crate) fn backward<T: Real>(
    arch: &Arch,
    w: &[Vec<T>],
    cache: &Cache<T>,
    ddose: &[T],
    dct: Option<&[T]>,
    grads: &mut [Vec<T>],
) {
    let mut denc: Vec<Vec<T>> = cache
        .encoder
        .iter()
        .map(|c| vec![T::ZERO; c.out.len()])
        .collect();
    decoder_backward(arch, w, &arch.dose, &cache.dose, &cache.encoder, ddose, grads, &mut denc);
    if let (Some(dec), Some(rc), Some(g)) = (&arch.recon, &cache.recon, dct) {
        decoder_backward(arch, w, dec, rc, &cache.encoder, g, grads, &mut denc);
    }
    for l in (0..arch.encoder.len()).rev() {
        let entry_in: &[T] = if l == 0 {
            &cache.input
        } else {
            &cache.encoder[l - 1].out
        };
        let dout = std::mem::take(&mut denc[l]);
        let (_, dx) = level_backward(
            arch,
            w,
            &arch.encoder[l],
            &cache.encoder[l],
            entry_in,
            dout,
            grads,
            l > 0,
        );
        if let Some(dx) = dx {
            add_into(&mut denc[l - 1], &dx);
        }
    }
}

impl<T: Real> Cache<T> {
    /// Sign pattern of every ReLU unit, in forward order.
    pub fn activation_signature(&self) -> Vec<bool> {
        let mut out = Vec::new();
        let mut push_level = |c: &LevelCache<T>| {
            out.extend(c.feats.iter().map(|&v| v > T::ZERO));
            out.extend(c.out.iter().map(|&v| v > T::ZERO));
        };
        self.encoder.iter().for_each(&mut push_level);
        self.dose.levels.iter().for_each(&mut push_level);
        if let Some(r) = &self.recon {
            r.levels.iter().for_each(&mut push_level);
        }
        out
    }
}
