//! Small conditional U-Net noise predictor.
//!
//! The input is the noisy image concatenated with the low-quality
//! observation along channels. Each resolution level has one residual
//! block; levels are joined by 2x average pooling on the way down and
//! nearest upsampling plus skip concatenation on the way up. Text priors are
//! injected in the middle block through [`crate::charm`].

use serde::{Deserialize, Serialize};

use crate::charm::{charm_forward, CharmParams};
use crate::charprior::{CharEncoder, CharSequence, SpatialMask};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Rng, Scalar, Tape, Tensor, Var};
use crate::plates::PixelBox;

/// How text priors enter the middle block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    None,
    /// One mean-pooled embedding attending over the whole map.
    String,
    /// Per-character embeddings, each attending over the whole map.
    CharGlobal,
    /// Per-character embeddings confined to their character regions.
    Charm,
}

impl PriorMode {
    pub const ALL: [PriorMode; 4] = [
        PriorMode::None,
        PriorMode::String,
        PriorMode::CharGlobal,
        PriorMode::Charm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PriorMode::None => "none",
            PriorMode::String => "string",
            PriorMode::CharGlobal => "char_global",
            PriorMode::Charm => "charm",
        }
    }

    pub fn uses_text(self) -> bool {
        self != PriorMode::None
    }
}

impl std::str::FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PriorMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("prior_mode", format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Image channels; the first convolution sees twice as many.
    pub channels: usize,
    pub base_width: usize,
    /// Width multiplier per resolution level; the middle block runs at
    /// `1 / 2^(levels - 1)` of the input resolution.
    pub multipliers: Vec<usize>,
    pub groups: usize,
    /// Width of the timestep embedding MLP.
    pub time_dim: usize,
    pub prior_mode: PriorMode,
    /// Multiply attention logits by the mask and take a full softmax
    /// instead of restricting the softmax to the mask.
    pub literal_mask_product: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            channels: 1,
            base_width: 32,
            multipliers: vec![1, 2, 4],
            groups: 8,
            time_dim: 64,
            prior_mode: PriorMode::Charm,
            literal_mask_product: false,
        }
    }
}

impl DenoiserConfig {
    pub fn widths(&self) -> Vec<usize> {
        self.multipliers.iter().map(|m| m * self.base_width).collect()
    }

    /// Channel count of the middle block (and of every prior embedding).
    pub fn mid_channels(&self) -> usize {
        self.base_width * self.multipliers.last().copied().unwrap_or(1)
    }

    /// Spatial size `(w, h)` of the middle block for an input of `(w, h)`.
    pub fn mid_size(&self, width: usize, height: usize) -> (usize, usize) {
        let f = 1 << (self.multipliers.len().saturating_sub(1));
        (width / f, height / f)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: String| Err(Error::config(format!("model.{k}"), m));
        if self.channels == 0 {
            return bad("channels", "must be positive".into());
        }
        if self.base_width == 0 || self.time_dim == 0 {
            return bad("base_width", "widths must be positive".into());
        }
        if self.multipliers.is_empty() || self.multipliers.contains(&0) {
            return bad(
                "multipliers",
                format!("{:?} must be non-empty and positive", self.multipliers),
            );
        }
        if self.groups == 0 || self.widths().iter().any(|w| w % self.groups != 0) {
            return bad(
                "groups",
                format!("{} must divide every level width {:?}", self.groups, self.widths()),
            );
        }
        if !self.mid_channels().is_multiple_of(2) {
            return bad("base_width", "middle block width must be even".into());
        }
        Ok(())
    }

    /// Rejects image sizes the pooling cannot halve evenly.
    pub fn check_input(&self, width: usize, height: usize) -> Result<()> {
        let f = 1 << (self.multipliers.len() - 1);
        if !width.is_multiple_of(f) || !height.is_multiple_of(f) || width == 0 || height == 0 {
            return Err(Error::invalid(
                "denoiser",
                format!(
                    "{width}x{height} is not divisible by {f} for {} levels",
                    self.multipliers.len()
                ),
            ));
        }
        Ok(())
    }
}

/// Sinusoidal timestep features: `dim / 2` sines followed by `dim / 2`
/// cosines at frequencies `10000^(-k / (dim/2 - 1))`.
pub fn timestep_features(t: usize, dim: usize, num_steps: usize) -> Result<Vec<f64>> {
    if t >= num_steps {
        return Err(Error::invalid(
            "timestep_embedding",
            format!("t = {t} outside 0..{num_steps}"),
        ));
    }
    if dim < 4 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(
            "timestep_embedding",
            format!("dimension {dim} must be even and at least 4"),
        ));
    }
    let half = dim / 2;
    let step = (10000f64).ln() / (half - 1) as f64;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let a = t as f64 * (-(k as f64) * step).exp();
        out[k] = a.sin();
        out[half + k] = a.cos();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Creates parameters on first build, or looks them up and checks shapes
/// when attaching to a loaded store.
struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: Option<&'a mut Rng>,
}

impl<T: Scalar> Builder<'_, T> {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<usize> {
        match self.rng.as_deref_mut() {
            Some(rng) => {
                let t = match init {
                    Init::Normal(std) => rng.normal_tensor(shape, std),
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::ones(shape),
                };
                self.store.insert(name, t)
            }
            None => {
                let slot = self
                    .store
                    .slot(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
                let got = self.store.tensors()[slot].shape();
                if got != shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {got:?}, expected {shape:?}"
                    )));
                }
                Ok(slot)
            }
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) -> Result<Conv> {
        let init = if zero {
            Init::Zeros
        } else {
            Init::Normal((1.0 / (cin * k * k) as f64).sqrt())
        };
        Ok(Conv {
            w: self.param(&format!("{name}.w"), &[cout, cin, k, k], init)?,
            b: self.param(&format!("{name}.b"), &[cout], Init::Zeros)?,
        })
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.param(
                &format!("{name}.w"),
                &[dout, din],
                Init::Normal((1.0 / din as f64).sqrt()),
            )?,
            b: self.param(&format!("{name}.b"), &[dout], Init::Zeros)?,
        })
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<Norm> {
        Ok(Norm {
            g: self.param(&format!("{name}.g"), &[c], Init::Ones)?,
            b: self.param(&format!("{name}.b"), &[c], Init::Zeros)?,
        })
    }

    fn resblock(&mut self, name: &str, cin: usize, cout: usize, tdim: usize) -> Result<ResBlock> {
        Ok(ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin)?,
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, false)?,
            temb: self.linear(&format!("{name}.temb"), tdim, cout)?,
            norm2: self.norm(&format!("{name}.norm2"), cout)?,
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, false)?,
            skip: if cin != cout {
                Some(self.conv(&format!("{name}.skip"), cin, cout, 1, false)?)
            } else {
                None
            },
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    temb: Linear,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Debug, Clone)]
struct Layout {
    time1: Linear,
    time2: Linear,
    input: Conv,
    down: Vec<ResBlock>,
    mid1: ResBlock,
    mid2: ResBlock,
    up: Vec<ResBlock>,
    out_norm: Norm,
    output: Conv,
}

/// Everything a forward pass can report besides the prediction.
#[derive(Default)]
pub struct ForwardTrace<T> {
    /// Per sample, the `[n, h*w]` attention maps of the middle block.
    pub attention: Vec<Option<Tensor<T>>>,
    /// Per sample, indices of priors with empty masks.
    pub empty_masks: Vec<Vec<usize>>,
}

/// Model parameters plus the layout that names them.
#[derive(Debug, Clone)]
pub struct DenoiserModel<T: Scalar> {
    pub config: DenoiserConfig,
    pub store: ParamStore<T>,
    num_timesteps: usize,
    max_chars: usize,
    layout: Layout,
    encoder: Option<CharEncoder>,
    charm: Option<CharmParams>,
}

impl<T: Scalar> DenoiserModel<T> {
    /// Freshly initialized model for a vocabulary of `vocab` symbols and
    /// labels of up to `max_chars` characters.
    pub fn new(
        config: DenoiserConfig,
        vocab: usize,
        max_chars: usize,
        num_timesteps: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let layout = Self::layout(&config, &mut store, Some(&mut rng))?;
        let (encoder, charm) = if config.prior_mode.uses_text() {
            let c = config.mid_channels();
            let enc = CharEncoder::init(&mut store, "encoder", vocab, c, max_chars, &mut rng)?;
            let charm = CharmParams::init(&mut store, "charm", c, &mut rng)?;
            (Some(enc), Some(charm))
        } else {
            (None, None)
        };
        Ok(DenoiserModel {
            config,
            store,
            num_timesteps,
            max_chars,
            layout,
            encoder,
            charm,
        })
    }

    /// Rebuilds a model around a store loaded from disk, checking that the
    /// names and shapes agree exactly with `config`.
    pub fn from_store(
        config: DenoiserConfig,
        mut store: ParamStore<T>,
        max_chars: usize,
        num_timesteps: usize,
    ) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(&config, &mut store, None)?;
        let (encoder, charm) = if config.prior_mode.uses_text() {
            let enc =
                CharEncoder::attach(&store, "encoder", max_chars).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let charm = CharmParams::attach(&store, "charm").map_err(|e| Error::Checkpoint(e.to_string()))?;
            (Some(enc), Some(charm))
        } else {
            (None, None)
        };
        let model = DenoiserModel {
            config,
            store,
            num_timesteps,
            max_chars,
            layout,
            encoder,
            charm,
        };
        let expected = Self::new(
            model.config.clone(),
            model.vocab_size().max(1),
            max_chars,
            num_timesteps,
            0,
        )?;
        if expected.store.names() != model.store.names() {
            return Err(Error::Checkpoint(
                "parameter set does not match the model configuration".into(),
            ));
        }
        Ok(model)
    }

    fn layout(config: &DenoiserConfig, store: &mut ParamStore<T>, rng: Option<&mut Rng>) -> Result<Layout> {
        let mut b = Builder { store, rng };
        let widths = config.widths();
        let (base, td) = (config.base_width, config.time_dim);
        let time1 = b.linear("time.fc1", base, td)?;
        let time2 = b.linear("time.fc2", td, td)?;
        let input = b.conv("input", 2 * config.channels, base, 3, false)?;
        let mut down = Vec::new();
        let mut prev = base;
        for (l, &w) in widths.iter().enumerate() {
            down.push(b.resblock(&format!("down{l}"), prev, w, td)?);
            prev = w;
        }
        let mid1 = b.resblock("mid1", prev, prev, td)?;
        let mid2 = b.resblock("mid2", prev, prev, td)?;
        let mut up = Vec::new();
        for (l, &w) in widths.iter().enumerate().rev() {
            up.push(b.resblock(&format!("up{l}"), prev + w, w, td)?);
            prev = w;
        }
        let out_norm = b.norm("out.norm", prev)?;
        let output = b.conv("out.conv", prev, config.channels, 3, true)?;
        Ok(Layout {
            time1,
            time2,
            input,
            down,
            mid1,
            mid2,
            up,
            out_norm,
            output,
        })
    }

    pub fn num_timesteps(&self) -> usize {
        self.num_timesteps
    }

    pub fn max_chars(&self) -> usize {
        self.max_chars
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.as_ref().map_or(0, |e| e.vocab)
    }

    pub fn encoder(&self) -> Option<&CharEncoder> {
        self.encoder.as_ref()
    }

    pub fn charm(&self) -> Option<&CharmParams> {
        self.charm.as_ref()
    }

    /// Timestep embedding after the MLP, `[1, time_dim]`.
    pub fn timestep_embedding(&self, t: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let vars = self.store.bind(&mut tape);
        let e = self.time_embed(&mut tape, &vars, &[t])?;
        Ok(tape.value(e).clone())
    }

    fn time_embed(&self, tape: &mut Tape<T>, v: &[Var], t: &[usize]) -> Result<Var> {
        let dim = self.config.base_width;
        let mut feats = Vec::with_capacity(t.len() * dim);
        for &ti in t {
            feats.extend(timestep_features(ti, dim, self.num_timesteps)?.into_iter().map(T::of));
        }
        let x = tape.constant(Tensor::new(&[t.len(), dim], feats)?);
        let l = self.layout.time1;
        let h = tape.linear(x, v[l.w], v[l.b])?;
        let h = tape.silu(h)?;
        let l = self.layout.time2;
        tape.linear(h, v[l.w], v[l.b])
    }

    fn conv(&self, tape: &mut Tape<T>, v: &[Var], c: Conv, x: Var) -> Result<Var> {
        tape.conv2d(x, v[c.w], Some(v[c.b]))
    }

    fn norm_act(&self, tape: &mut Tape<T>, v: &[Var], n: Norm, x: Var) -> Result<Var> {
        let h = tape.group_norm(x, v[n.g], v[n.b], self.config.groups, 1e-5)?;
        tape.silu(h)
    }

    fn resblock(&self, tape: &mut Tape<T>, v: &[Var], r: &ResBlock, x: Var, temb_act: Var) -> Result<Var> {
        let h = self.norm_act(tape, v, r.norm1, x)?;
        let h = self.conv(tape, v, r.conv1, h)?;
        let t = tape.linear(temb_act, v[r.temb.w], v[r.temb.b])?;
        let h = tape.add_channel(h, t)?;
        let h = self.norm_act(tape, v, r.norm2, h)?;
        let h = self.conv(tape, v, r.conv2, h)?;
        let skip = match r.skip {
            Some(c) => self.conv(tape, v, c, x)?,
            None => x,
        };
        tape.add(skip, h)
    }

    /// Applies the configured prior injection to the `[N, C, h, w]` middle
    /// features.
    fn inject(
        &self,
        tape: &mut Tape<T>,
        v: &[Var],
        feats: Var,
        priors: &[CharSequence],
        trace: &mut ForwardTrace<T>,
    ) -> Result<Var> {
        let mode = self.config.prior_mode;
        let n = tape.shape(feats)[0];
        trace.attention = vec![None; n];
        trace.empty_masks = vec![Vec::new(); n];
        if mode == PriorMode::None {
            if priors.iter().any(|p| !p.is_empty()) {
                return Err(Error::invalid(
                    "predict_noise",
                    "text priors given to a model without prior injection",
                ));
            }
            return Ok(feats);
        }
        if !priors.is_empty() && priors.len() != n {
            return Err(Error::invalid(
                "predict_noise",
                format!("{} prior sets for a batch of {n}", priors.len()),
            ));
        }
        if priors.iter().all(|p| p.is_empty()) {
            return Ok(feats);
        }
        let (enc, charm) = (self.encoder.as_ref().unwrap(), self.charm.as_ref().unwrap());
        let (h, w) = (tape.shape(feats)[2], tape.shape(feats)[3]);
        let full = |k: usize| -> Vec<SpatialMask> {
            (0..k)
                .map(|_| SpatialMask::ones(w, h, PixelBox::new(0, 0, 0, 0)))
                .collect()
        };
        let mut outs = Vec::with_capacity(n);
        for (b, seq) in priors.iter().enumerate() {
            let f = tape.select(feats, b)?;
            if seq.is_empty() {
                outs.push(f);
                continue;
            }
            if seq.ids.len() > self.max_chars {
                return Err(Error::invalid(
                    "predict_noise",
                    format!("{} characters exceed {}", seq.ids.len(), self.max_chars),
                ));
            }
            let e = enc.encode(tape, v, &seq.ids)?;
            let (e, masks) = match mode {
                PriorMode::String => (tape.mean_rows(e)?, full(1)),
                PriorMode::CharGlobal => (e, full(seq.len())),
                _ => (e, seq.masks((w, h))),
            };
            let r = charm_forward(tape, charm, v, f, Some(e), &masks, self.config.literal_mask_product)?;
            trace.attention[b] = r.attention.map(|a| tape.value(a).clone());
            trace.empty_masks[b] = r.empty_masks;
            outs.push(r.out);
        }
        tape.stack(&outs)
    }

    /// Noise prediction with its trace. `x_t` and `x_lq` are `[N, ch, H, W]`,
    /// `t` has one step per sample, and `priors` is either empty or has one
    /// entry per sample.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x_t: Var,
        x_lq: Var,
        t: &[usize],
        priors: &[CharSequence],
    ) -> Result<(Var, ForwardTrace<T>)> {
        let xs = tape.shape(x_t).to_vec();
        if xs.len() != 4 || xs[1] != self.config.channels {
            return Err(Error::shape("predict_noise", &xs, &[self.config.channels]));
        }
        if tape.shape(x_lq) != xs.as_slice() {
            return Err(Error::shape("predict_noise", &xs, tape.shape(x_lq)));
        }
        if t.len() != xs[0] {
            return Err(Error::invalid(
                "predict_noise",
                format!("{} timesteps for a batch of {}", t.len(), xs[0]),
            ));
        }
        self.config.check_input(xs[3], xs[2])?;
        let v = self.store.bind(tape);
        let l = &self.layout;
        let mut trace = ForwardTrace::default();

        let temb = self.time_embed(tape, &v, t)?;
        let temb = tape.silu(temb)?;
        let x = tape.concat_channels(x_t, x_lq)?;
        let mut h = self.conv(tape, &v, l.input, x)?;
        let mut skips = Vec::new();
        let levels = l.down.len();
        for (i, r) in l.down.iter().enumerate() {
            h = self.resblock(tape, &v, r, h, temb)?;
            skips.push(h);
            if i + 1 < levels {
                h = tape.avgpool2x(h)?;
            }
        }
        h = self.resblock(tape, &v, &l.mid1, h, temb)?;
        h = self.inject(tape, &v, h, priors, &mut trace)?;
        h = self.resblock(tape, &v, &l.mid2, h, temb)?;
        for (j, r) in l.up.iter().enumerate() {
            let skip = skips.pop().unwrap();
            h = tape.concat_channels(h, skip)?;
            h = self.resblock(tape, &v, r, h, temb)?;
            if j + 1 < levels {
                h = tape.upsample2x(h)?;
            }
        }
        let h = self.norm_act(tape, &v, l.out_norm, h)?;
        let out = self.conv(tape, &v, l.output, h)?;
        Ok((out, trace))
    }

    pub fn predict(
        &self,
        tape: &mut Tape<T>,
        x_t: Var,
        x_lq: Var,
        t: &[usize],
        priors: &[CharSequence],
    ) -> Result<Var> {
        Ok(self.forward(tape, x_t, x_lq, t, priors)?.0)
    }

    /// Detached prediction on plain tensors.
    pub fn predict_noise(
        &self,
        x_t: &Tensor<T>,
        x_lq: &Tensor<T>,
        t: &[usize],
        priors: &[CharSequence],
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let a = tape.constant(x_t.clone());
        let b = tape.constant(x_lq.clone());
        let out = self.predict(&mut tape, a, b, t, priors)?;
        Ok(tape.value(out).clone())
    }
}
