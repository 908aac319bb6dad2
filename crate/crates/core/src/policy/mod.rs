//! The multimodal policy: frozen modality encoders, FiLM modulation driven
//! by the language embedding, a trainable temporal decoder producing the
//! global latent `g`, and the action head. Backpropagation is written out by
//! hand for every trainable block.

mod checkpoint;
mod dense;
mod head;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use dense::{axpy, cast_vec, dot, Dense, Scalar};
pub use head::{gmm_nll_grad, head_width, log_sum_exp, mse_loss_grad, HeadMode, Mixture, LOG_STD_MAX, LOG_STD_MIN};

use crate::error::{config, domain, Error, Result};
use crate::geometry::Embedding;
use crate::ifa::TaskId;
use crate::mlr::{LatentSequence, LatentShape, AGENT_VIEW, EYE_IN_HAND, LANGUAGE, MODALITIES, STATE};

pub const N_MODALITIES: usize = MODALITIES.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Side length of the square image observations.
    pub view: usize,
    pub state_dim: usize,
    pub embed: usize,
    /// Observation window length.
    pub window: usize,
    pub hidden: usize,
    pub action_dim: usize,
    pub head: HeadMode,
    pub gmm_components: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            view: 32,
            state_dim: 8,
            embed: 64,
            window: 8,
            hidden: 256,
            action_dim: 4,
            head: HeadMode::Mse,
            gmm_components: 5,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("view", self.view),
            ("state_dim", self.state_dim),
            ("embed", self.embed),
            ("window", self.window),
            ("hidden", self.hidden),
            ("action_dim", self.action_dim),
            ("gmm_components", self.gmm_components),
        ] {
            if v == 0 {
                return Err(config(format!("policy.{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> LatentShape {
        LatentShape {
            modalities: N_MODALITIES,
            window: self.window,
            embed: self.embed,
        }
    }

    pub fn head_width(&self) -> usize {
        head_width(self.head, self.action_dim, self.gmm_components)
    }
}

/// One timestep of raw sensory input.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub agent_view: Vec<f32>,
    pub eye_in_hand: Vec<f32>,
    pub state: Vec<f32>,
    pub task_language_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    VisionAgent,
    VisionEye,
    StateIn,
    StateOut,
    FilmAgent,
    FilmEye,
    FilmState,
    DecoderIn,
    DecoderOut,
    Head,
}

impl Layer {
    pub const ALL: [Layer; 10] = [
        Layer::VisionAgent,
        Layer::VisionEye,
        Layer::StateIn,
        Layer::StateOut,
        Layer::FilmAgent,
        Layer::FilmEye,
        Layer::FilmState,
        Layer::DecoderIn,
        Layer::DecoderOut,
        Layer::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layer::VisionAgent => "vision_agent",
            Layer::VisionEye => "vision_eye",
            Layer::StateIn => "state_in",
            Layer::StateOut => "state_out",
            Layer::FilmAgent => "film_agent",
            Layer::FilmEye => "film_eye",
            Layer::FilmState => "film_state",
            Layer::DecoderIn => "decoder_in",
            Layer::DecoderOut => "decoder_out",
            Layer::Head => "head",
        }
    }
}

/// Which blocks receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Everything except the vision projections and language table, which
    /// stand in for pretrained backbones.
    Pretrain,
    /// Temporal decoder and head only.
    Lifelong,
}

impl Phase {
    pub fn trainable(self) -> &'static [Layer] {
        match self {
            Phase::Pretrain => &[
                Layer::StateIn,
                Layer::StateOut,
                Layer::FilmAgent,
                Layer::FilmEye,
                Layer::FilmState,
                Layer::DecoderIn,
                Layer::DecoderOut,
                Layer::Head,
            ],
            Phase::Lifelong => &[Layer::DecoderIn, Layer::DecoderOut, Layer::Head],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams<T> {
    pub cfg: PolicyConfig,
    pub seed: u64,
    n_language: usize,
    /// `n_language × E` fixed embedding table.
    language: Vec<T>,
    layers: Vec<Dense<T>>,
}

/// Gradient buffers for the trainable layers of one phase.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub phase: Phase,
    layers: Vec<Option<Dense<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros(params: &PolicyParams<T>, phase: Phase) -> Self {
        let layers = Layer::ALL
            .iter()
            .map(|&l| {
                phase.trainable().contains(&l).then(|| {
                    let d = params.layer(l);
                    Dense::zeros(d.n_in, d.n_out)
                })
            })
            .collect();
        Self { phase, layers }
    }

    pub fn get(&self, layer: Layer) -> Option<&Dense<T>> {
        self.layers[layer as usize].as_ref()
    }

    pub fn get_mut(&mut self, layer: Layer) -> Option<&mut Dense<T>> {
        self.layers[layer as usize].as_mut()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Layer, &Dense<T>)> {
        Layer::ALL.iter().zip(&self.layers).filter_map(|(&l, d)| d.as_ref().map(|d| (l, d)))
    }

    pub fn scale(&mut self, s: T) {
        for d in self.layers.iter_mut().flatten() {
            d.w.iter_mut().chain(d.b.iter_mut()).for_each(|v| *v = *v * s);
        }
    }
}

/// Encoder output for one timestep before modulation. The vision
/// projections are fixed, so these can be computed once per observation.
#[derive(Clone, Debug, PartialEq)]
pub struct StepFeatures<T> {
    pub agent: Vec<T>,
    pub eye: Vec<T>,
    pub state: Vec<T>,
    pub lang: usize,
}

/// Activations kept from `encode_steps` for the backward pass.
#[derive(Clone, Debug)]
pub struct EncodeCache<T> {
    /// per step: tanh hidden of the state encoder and its output
    state_hidden: Vec<Vec<T>>,
    state_out: Vec<Vec<T>>,
    /// per step: FiLM generator outputs `[Δγ | β]` for agent, eye, state
    film: Vec<[Vec<T>; 3]>,
}

/// Activations of the decoder and head for one batch.
#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    pub batch: usize,
    pub x: Vec<T>,
    pub hidden: Vec<T>,
    pub g: Vec<T>,
    pub out: Vec<T>,
}

impl<T: Scalar> DecoderCache<T> {
    pub fn global(&self, i: usize) -> &[T] {
        let e = self.g.len() / self.batch;
        &self.g[i * e..(i + 1) * e]
    }

    pub fn head_out(&self, i: usize) -> &[T] {
        let o = self.out.len() / self.batch;
        &self.out[i * o..(i + 1) * o]
    }
}

/// Head prediction for a single global latent.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadOutput {
    Action(Vec<f64>),
    Mixture(Mixture),
}

impl HeadOutput {
    pub fn action(&self) -> Vec<f64> {
        match self {
            HeadOutput::Action(a) => a.clone(),
            HeadOutput::Mixture(m) => m.mean_action(),
        }
    }
}

fn tanh_vec<T: Scalar>(v: &mut [T]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

impl<T: Scalar> PolicyParams<T> {
    /// Seeded initialization. `language_table[i]` is the fixed embedding of
    /// language id `i`.
    pub fn new(cfg: PolicyConfig, language_table: &[Embedding], seed: u64) -> Result<Self> {
        cfg.validate()?;
        if language_table.is_empty() {
            return Err(config("language table must be non-empty"));
        }
        let e = cfg.embed;
        if let Some(bad) = language_table.iter().find(|l| l.dim() != e) {
            return Err(config(format!("language embedding has dim {}, expected {e}", bad.dim())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v2 = cfg.view * cfg.view;
        let d_in = N_MODALITIES * cfg.window * e;
        let film_scale = 0.1 / (e as f64).sqrt();
        let mut layers = Vec::with_capacity(Layer::ALL.len());
        for layer in Layer::ALL {
            let (n_in, n_out, scale) = match layer {
                Layer::VisionAgent | Layer::VisionEye => (v2, e, (3.0 / v2 as f64).sqrt()),
                Layer::StateIn => (cfg.state_dim, e, 1.0 / (cfg.state_dim as f64).sqrt()),
                Layer::StateOut => (e, e, 1.0 / (e as f64).sqrt()),
                Layer::FilmAgent | Layer::FilmEye | Layer::FilmState => (e, 2 * e, film_scale),
                Layer::DecoderIn => (d_in, cfg.hidden, 1.0 / (d_in as f64).sqrt()),
                Layer::DecoderOut => (cfg.hidden, e, 1.0 / (cfg.hidden as f64).sqrt()),
                Layer::Head => (e, cfg.head_width(), 1.0 / (e as f64).sqrt()),
            };
            layers.push(Dense::uniform(n_in, n_out, scale, &mut rng));
        }
        let language = language_table
            .iter()
            .flat_map(|l| l.as_slice().iter().map(|&v| T::from_f64_lossy(v as f64)))
            .collect();
        Ok(Self {
            cfg,
            seed,
            n_language: language_table.len(),
            language,
            layers,
        })
    }

    pub fn layer(&self, layer: Layer) -> &Dense<T> {
        &self.layers[layer as usize]
    }

    pub fn layer_mut(&mut self, layer: Layer) -> &mut Dense<T> {
        &mut self.layers[layer as usize]
    }

    pub fn n_language(&self) -> usize {
        self.n_language
    }

    pub fn language_row(&self, id: usize) -> Result<&[T]> {
        if id >= self.n_language {
            return Err(domain(format!("language id {id} out of range ({})", self.n_language)));
        }
        let e = self.cfg.embed;
        Ok(&self.language[id * e..(id + 1) * e])
    }

    pub fn language_table(&self) -> &[T] {
        &self.language
    }

    pub fn n_params(&self) -> usize {
        self.language.len() + self.layers.iter().map(Dense::n_params).sum::<usize>()
    }

    pub fn n_trainable(&self, phase: Phase) -> usize {
        phase.trainable().iter().map(|&l| self.layer(l).n_params()).sum()
    }

    /// Sets every FiLM generator to the identity modulation `(γ, β) = (1, 0)`.
    pub fn set_identity_film(&mut self) {
        for l in [Layer::FilmAgent, Layer::FilmEye, Layer::FilmState] {
            let d = self.layer_mut(l);
            d.w.iter_mut().chain(d.b.iter_mut()).for_each(|v| *v = T::zero());
        }
    }

    /// SHA-256 over every block that stays frozen during lifelong stages.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        let feed = |h: &mut Sha256, v: &[T]| {
            for &x in v {
                h.update(Into::<f64>::into(x).to_le_bytes());
            }
        };
        feed(&mut h, &self.language);
        for l in Layer::ALL {
            if !Phase::Lifelong.trainable().contains(&l) {
                let d = self.layer(l);
                feed(&mut h, &d.w);
                feed(&mut h, &d.b);
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> PolicyParams<U> {
        PolicyParams {
            cfg: self.cfg.clone(),
            seed: self.seed,
            n_language: self.n_language,
            language: cast_vec(&self.language),
            layers: self.layers.iter().map(Dense::cast).collect(),
        }
    }

    /// Trainable tensors paired with their gradients, `(name, params, grads)`.
    pub fn trainable_with_grads<'a>(
        &'a mut self,
        grads: &'a Gradients<T>,
    ) -> impl Iterator<Item = (String, &'a mut Vec<T>, &'a Vec<T>)> + 'a {
        self.layers
            .iter_mut()
            .zip(Layer::ALL)
            .filter_map(move |(d, l)| grads.get(l).map(|g| (d, g, l)))
            .flat_map(|(d, g, l)| {
                [
                    (format!("{}.w", l.name()), &mut d.w, &g.w),
                    (format!("{}.b", l.name()), &mut d.b, &g.b),
                ]
            })
    }

    /// Applies the fixed vision projections to one observation.
    pub fn project_step(&self, obs: &Observation) -> Result<StepFeatures<T>> {
        let v2 = self.cfg.view * self.cfg.view;
        if obs.agent_view.len() != v2 || obs.eye_in_hand.len() != v2 {
            return Err(domain(format!("image observations must have {v2} pixels")));
        }
        if obs.state.len() != self.cfg.state_dim {
            return Err(domain(format!("state must have {} values", self.cfg.state_dim)));
        }
        self.language_row(obs.task_language_id)?;
        let agent: Vec<T> = cast_vec(&obs.agent_view);
        let eye: Vec<T> = cast_vec(&obs.eye_in_hand);
        Ok(StepFeatures {
            agent: self.layer(Layer::VisionAgent).forward(&agent),
            eye: self.layer(Layer::VisionEye).forward(&eye),
            state: cast_vec(&obs.state),
            lang: obs.task_language_id,
        })
    }

    /// Modulates and stacks `L` steps into a flattened `M_mod × L × E` window.
    pub fn encode_steps(&self, steps: &[&StepFeatures<T>]) -> Result<(Vec<T>, EncodeCache<T>)> {
        let (l_win, e) = (self.cfg.window, self.cfg.embed);
        if steps.len() != l_win {
            return Err(domain(format!("window has {} steps, expected {l_win}", steps.len())));
        }
        let mut latent = vec![T::zero(); N_MODALITIES * l_win * e];
        let mut cache = EncodeCache {
            state_hidden: Vec::with_capacity(l_win),
            state_out: Vec::with_capacity(l_win),
            film: Vec::with_capacity(l_win),
        };
        let mut last_film: Option<(usize, [Vec<T>; 3])> = None;
        for (t, step) in steps.iter().enumerate() {
            let lang = self.language_row(step.lang)?;
            let film = match &last_film {
                Some((id, f)) if *id == step.lang => f.clone(),
                _ => {
                    let f = [
                        self.layer(Layer::FilmAgent).forward(lang),
                        self.layer(Layer::FilmEye).forward(lang),
                        self.layer(Layer::FilmState).forward(lang),
                    ];
                    last_film = Some((step.lang, f.clone()));
                    f
                }
            };
            let mut hidden = self.layer(Layer::StateIn).forward(&step.state);
            tanh_vec(&mut hidden);
            let state_h = self.layer(Layer::StateOut).forward(&hidden);
            let row = |m: usize| (m * l_win + t) * e;
            for (m, input, f) in [
                (AGENT_VIEW, &step.agent, &film[0]),
                (EYE_IN_HAND, &step.eye, &film[1]),
                (STATE, &state_h, &film[2]),
            ] {
                let out = &mut latent[row(m)..row(m) + e];
                for i in 0..e {
                    out[i] = (T::one() + f[i]) * input[i] + f[e + i];
                }
            }
            latent[row(LANGUAGE)..row(LANGUAGE) + e].copy_from_slice(lang);
            cache.state_hidden.push(hidden);
            cache.state_out.push(state_h);
            cache.film.push(film);
        }
        Ok((latent, cache))
    }

    /// Backpropagates `d_latent` into the FiLM generators and state encoder.
    pub fn backward_encode(
        &self,
        steps: &[&StepFeatures<T>],
        cache: &EncodeCache<T>,
        d_latent: &[T],
        grads: &mut Gradients<T>,
    ) -> Result<()> {
        let (l_win, e) = (self.cfg.window, self.cfg.embed);
        if cache.film.len() != steps.len() || d_latent.len() != N_MODALITIES * l_win * e {
            return Err(Error::Internal("encode cache does not match the window".into()));
        }
        for (t, step) in steps.iter().enumerate() {
            let lang = self.language_row(step.lang)?;
            let row = |m: usize| (m * l_win + t) * e;
            let film = &cache.film[t];
            let state_h = &cache.state_out[t];
            for (m, layer, input, f) in [
                (AGENT_VIEW, Layer::FilmAgent, &step.agent, &film[0]),
                (EYE_IN_HAND, Layer::FilmEye, &step.eye, &film[1]),
                (STATE, Layer::FilmState, state_h, &film[2]),
            ] {
                let d = &d_latent[row(m)..row(m) + e];
                if let Some(g) = grads.get_mut(layer) {
                    let mut d_film = vec![T::zero(); 2 * e];
                    for i in 0..e {
                        d_film[i] = d[i] * input[i];
                        d_film[e + i] = d[i];
                    }
                    self.layer(layer).backward_batch(lang, &d_film, 1, g, None);
                }
                if m == STATE {
                    let d_state_h: Vec<T> = (0..e).map(|i| d[i] * (T::one() + f[i])).collect();
                    let hidden = &cache.state_hidden[t];
                    let mut d_hidden = vec![T::zero(); e];
                    if let Some(g) = grads.get_mut(Layer::StateOut) {
                        self.layer(Layer::StateOut)
                            .backward_batch(hidden, &d_state_h, 1, g, Some(&mut d_hidden));
                    }
                    if let Some(g) = grads.get_mut(Layer::StateIn) {
                        let d_pre: Vec<T> = d_hidden
                            .iter()
                            .zip(hidden)
                            .map(|(&dh, &h)| dh * (T::one() - h * h))
                            .collect();
                        self.layer(Layer::StateIn).backward_batch(&step.state, &d_pre, 1, g, None);
                    }
                }
            }
        }
        Ok(())
    }

    /// Decoder and head forward pass over a row-major batch of flattened
    /// latent windows.
    pub fn forward_decoder(&self, x: Vec<T>, batch: usize) -> Result<DecoderCache<T>> {
        let dec_in = self.layer(Layer::DecoderIn);
        if batch == 0 || x.len() != batch * dec_in.n_in {
            return Err(domain(format!(
                "decoder input has {} values, expected {} × {}",
                x.len(),
                batch,
                dec_in.n_in
            )));
        }
        let mut hidden = vec![T::zero(); batch * dec_in.n_out];
        dec_in.forward_batch(&x, batch, &mut hidden);
        tanh_vec(&mut hidden);
        let dec_out = self.layer(Layer::DecoderOut);
        let mut g = vec![T::zero(); batch * dec_out.n_out];
        dec_out.forward_batch(&hidden, batch, &mut g);
        let head = self.layer(Layer::Head);
        let mut out = vec![T::zero(); batch * head.n_out];
        head.forward_batch(&g, batch, &mut out);
        Ok(DecoderCache {
            batch,
            x,
            hidden,
            g,
            out,
        })
    }

    /// Mean behavior-cloning loss of the batch and its gradient with respect
    /// to the raw head outputs.
    pub fn bc_loss_grad(&self, cache: &DecoderCache<T>, targets: &[&[f32]]) -> Result<(f64, Vec<T>)> {
        if targets.len() != cache.batch {
            return Err(domain("one target action per batch row required"));
        }
        let width = self.cfg.head_width();
        let inv_b = 1.0 / cache.batch as f64;
        let mut total = 0.0;
        let mut d_out = vec![T::zero(); cache.out.len()];
        for (i, target) in targets.iter().enumerate() {
            if target.len() != self.cfg.action_dim {
                return Err(domain(format!("target action must have {} values", self.cfg.action_dim)));
            }
            let raw = cache.head_out(i);
            let (loss, grad) = match self.cfg.head {
                HeadMode::Mse => mse_loss_grad(raw, target),
                HeadMode::Gmm => gmm_nll_grad(raw, target, self.cfg.gmm_components),
            };
            total += loss;
            for (d, g) in d_out[i * width..(i + 1) * width].iter_mut().zip(grad) {
                *d = T::from_f64_lossy(g * inv_b);
            }
        }
        Ok((total * inv_b, d_out))
    }

    /// Backpropagates head-output gradients, plus optional extra gradients on
    /// the global latents, through the head and temporal decoder. Returns the
    /// gradient on the decoder input when `want_dx` is set.
    pub fn backward_decoder(
        &self,
        cache: &DecoderCache<T>,
        d_out: &[T],
        d_global: Option<&[T]>,
        grads: &mut Gradients<T>,
        want_dx: bool,
    ) -> Result<Option<Vec<T>>> {
        let b = cache.batch;
        if d_out.len() != cache.out.len() || d_global.is_some_and(|d| d.len() != cache.g.len()) {
            return Err(Error::Internal("gradient shapes do not match cached activations".into()));
        }
        let missing = || Error::Internal("decoder and head must be trainable".into());
        let mut d_g = vec![T::zero(); cache.g.len()];
        self.layer(Layer::Head)
            .backward_batch(&cache.g, d_out, b, grads.get_mut(Layer::Head).ok_or_else(missing)?, Some(&mut d_g));
        if let Some(extra) = d_global {
            axpy(T::one(), extra, &mut d_g);
        }
        let mut d_hidden = vec![T::zero(); cache.hidden.len()];
        self.layer(Layer::DecoderOut).backward_batch(
            &cache.hidden,
            &d_g,
            b,
            grads.get_mut(Layer::DecoderOut).ok_or_else(missing)?,
            Some(&mut d_hidden),
        );
        for (d, &h) in d_hidden.iter_mut().zip(&cache.hidden) {
            *d = *d * (T::one() - h * h);
        }
        let mut dx = want_dx.then(|| vec![T::zero(); cache.x.len()]);
        self.layer(Layer::DecoderIn).backward_batch(
            &cache.x,
            &d_hidden,
            b,
            grads.get_mut(Layer::DecoderIn).ok_or_else(missing)?,
            dx.as_deref_mut(),
        );
        Ok(dx)
    }

    /// Encodes a window of `L` observations into its latent sequence.
    pub fn encode(&self, window: &[Observation], task_id: TaskId, timestep_index: usize) -> Result<LatentSequence> {
        if window.len() != self.cfg.window {
            return Err(domain(format!(
                "window has {} observations, expected {}",
                window.len(),
                self.cfg.window
            )));
        }
        let feats = window.iter().map(|o| self.project_step(o)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&StepFeatures<T>> = feats.iter().collect();
        let (latent, _) = self.encode_steps(&refs)?;
        LatentSequence::new(self.cfg.latent_shape(), cast_vec(&latent), task_id, timestep_index)
    }

    /// `g = W₂ tanh(W₁ x + b₁) + b₂` for one latent window.
    pub fn global_latent(&self, latent: &LatentSequence) -> Result<Vec<T>> {
        if latent.shape() != self.cfg.latent_shape() {
            return Err(domain(format!(
                "latent shape {:?} does not match policy shape {:?}",
                latent.shape(),
                self.cfg.latent_shape()
            )));
        }
        let cache = self.forward_decoder(cast_vec(latent.data()), 1)?;
        Ok(cache.g)
    }

    pub fn forward_global(&self, latent: &LatentSequence) -> Result<Embedding> {
        let g = self.global_latent(latent)?;
        Embedding::new(cast_vec(&g))
    }

    /// Head output for `g` and the behavior-cloning loss against `target`.
    pub fn head_forward_and_bc_loss(&self, g: &[T], target: &[f32]) -> Result<(HeadOutput, f64)> {
        if g.len() != self.cfg.embed || target.len() != self.cfg.action_dim {
            return Err(domain("global latent or target has the wrong dimension"));
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(domain("target action is not finite"));
        }
        let raw = self.layer(Layer::Head).forward(g);
        Ok(match self.cfg.head {
            HeadMode::Mse => {
                let (loss, _) = mse_loss_grad(&raw, target);
                (HeadOutput::Action(raw.iter().map(|&v| v.into()).collect()), loss)
            }
            HeadMode::Gmm => {
                let (loss, _) = gmm_nll_grad(&raw, target, self.cfg.gmm_components);
                let mix = Mixture::from_raw(&raw, self.cfg.action_dim, self.cfg.gmm_components);
                (HeadOutput::Mixture(mix), loss)
            }
        })
    }

    /// Point action predicted from raw head output (mixture mean in GMM mode).
    pub fn action_from_head(&self, raw: &[T]) -> Vec<f64> {
        match self.cfg.head {
            HeadMode::Mse => raw.iter().map(|&v| v.into()).collect(),
            HeadMode::Gmm => Mixture::from_raw(raw, self.cfg.action_dim, self.cfg.gmm_components).mean_action(),
        }
    }
}

/// Indices of the `window` observations ending at step `t`, padding the start
/// of a trajectory by repeating its first observation.
pub fn window_indices(t: usize, window: usize) -> Vec<usize> {
    (0..window).map(|i| (t + i + 1).saturating_sub(window)).collect()
}
