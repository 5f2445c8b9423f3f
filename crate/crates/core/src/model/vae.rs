use ndarray::Array2;
use rand::Rng;

use super::config::{ModelConfig, ModelDims};
use super::{one_hot, Decoder, Encoder, LatentPrior, Message};
use crate::diffcore::{gumbel_noise, GumbelMode, LstmParams, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::grammar::{ConceptString, GrammarSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Ids {
    speaker_embed: ParamId,
    speaker_lstm: LstmParams,
    speaker_proj: Affine,
    speaker_head: Affine,
    listener_embed: ParamId,
    listener_lstm: LstmParams,
    listener_head: Affine,
    prior: ParamId,
    tau: ParamId,
}

/// Speaker, listener, prior and temperature sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Vae {
    grammar: GrammarSpec,
    config: ModelConfig,
    dims: ModelDims,
    pub params: ParamStore,
    ids: Ids,
}

/// Tape handles for one ELBO evaluation over a batch.
#[derive(Debug, Clone, Copy)]
pub struct ElboVars {
    /// `B × 2l` pair log-probabilities of the speaker.
    pub logq: Var,
    /// `B × 2l` message passed to the listener.
    pub message: Var,
    /// `B × 1` reconstruction log-likelihood.
    pub recon: Var,
    /// `B × 1` analytic KL to the prior.
    pub kl: Var,
    /// `B × 1` ELBO = recon − KL.
    pub elbo: Var,
    /// `1 × 1` negative mean ELBO.
    pub loss: Var,
}

/// Values of a single-sample ELBO evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboSample {
    pub elbo: Vec<f64>,
    pub recon: Vec<f64>,
    pub kl: Vec<f64>,
    /// The sampled hard messages, one per string.
    pub messages: Vec<Message>,
}

const SPEAKER_EMBED: &str = "speaker.embed";
const SPEAKER_LSTM: &str = "speaker.lstm";
const LISTENER_EMBED: &str = "listener.embed";
const LISTENER_LSTM: &str = "listener.lstm";
const PRIOR: &str = "prior.logits";
const TAU: &str = "tau";

impl Vae {
    /// Random initialisation: uniform ±1/√fan_in weights, zero biases, zero
    /// prior logits and τ = 1. Embedding tables use fan_in = 1.
    pub fn init<R: Rng + ?Sized>(
        grammar: &GrammarSpec,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        grammar.validate()?;
        config.validate()?;
        let d = config.dims();
        let sigma = grammar.alphabet_size();
        let n = grammar.num_concepts;
        let l = d.latent_bits;
        let mut p = ParamStore::new();

        let speaker_embed = p.add_uniform(SPEAKER_EMBED, sigma, d.speaker_embed, 1, rng)?;
        let speaker_lstm = LstmParams::init(
            &mut p,
            SPEAKER_LSTM,
            n * d.speaker_embed,
            d.speaker_hidden,
            rng,
        )?;
        let speaker_proj = Affine {
            w: p.add_uniform(
                "speaker.proj.w",
                d.speaker_linear,
                d.speaker_hidden,
                d.speaker_hidden,
                rng,
            )?,
            b: p.add_zeros("speaker.proj.b", 1, d.speaker_linear)?,
        };
        let speaker_head = Affine {
            w: p.add_uniform("speaker.head.w", 2, d.speaker_linear, d.speaker_linear, rng)?,
            b: p.add_zeros("speaker.head.b", 1, 2)?,
        };
        let listener_embed = p.add_uniform(LISTENER_EMBED, 2 * l, d.listener_embed, 1, rng)?;
        let listener_lstm = LstmParams::init(
            &mut p,
            LISTENER_LSTM,
            d.listener_embed,
            d.listener_hidden,
            rng,
        )?;
        let listener_head = Affine {
            w: p.add_uniform(
                "listener.head.w",
                sigma,
                d.listener_hidden,
                d.listener_hidden,
                rng,
            )?,
            b: p.add_zeros("listener.head.b", 1, sigma)?,
        };
        let prior = p.add_zeros(PRIOR, 1, l)?;
        let tau = p.add(TAU, Array2::from_elem((1, 1), 1.0))?;
        let ids = Ids {
            speaker_embed,
            speaker_lstm,
            speaker_proj,
            speaker_head,
            listener_embed,
            listener_lstm,
            listener_head,
            prior,
            tau,
        };
        Ok(Vae {
            grammar: *grammar,
            config: *config,
            dims: d,
            params: p,
            ids,
        })
    }

    /// Every parameter zero except τ = 1.
    pub fn zeros(grammar: &GrammarSpec, config: &ModelConfig) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut vae = Self::init(grammar, config, &mut rng)?;
        for t in vae.params.tensors_mut() {
            if t.name != TAU {
                t.value.fill(0.0);
            }
        }
        Ok(vae)
    }

    /// Rebuilds a model around loaded parameters, checking names and shapes
    /// against a fresh initialisation.
    pub fn from_params(
        grammar: &GrammarSpec,
        config: &ModelConfig,
        params: ParamStore,
    ) -> Result<Self> {
        let template = Self::zeros(grammar, config)?;
        if params.len() != template.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (a, b) in template.params.tensors().iter().zip(params.tensors()) {
            if a.name != b.name || a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: expected {} {:?}, found {} {:?}",
                    a.name,
                    a.shape(),
                    b.name,
                    b.shape()
                )));
            }
        }
        Ok(Vae { params, ..template })
    }

    pub fn grammar(&self) -> &GrammarSpec {
        &self.grammar
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn tau_id(&self) -> ParamId {
        self.ids.tau
    }

    pub fn tau(&self) -> f64 {
        self.params.value(self.ids.tau)[[0, 0]]
    }

    pub fn prior_logits(&self) -> Vec<f64> {
        self.params.value(self.ids.prior).row(0).to_vec()
    }

    fn check_members(&self, strings: &[ConceptString]) -> Result<()> {
        match strings.iter().find(|s| !self.grammar.is_member(s.tokens())) {
            Some(s) => Err(Error::NotMember {
                tokens: s.tokens().to_vec(),
            }),
            None => Ok(()),
        }
    }

    /// Speaker forward pass producing `B × 2l` pair log-probabilities.
    pub fn speaker_logq(&self, tape: &mut Tape<'_>, strings: &[ConceptString]) -> Result<Var> {
        self.check_members(strings)?;
        if strings.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let b = strings.len();
        let n = self.grammar.num_concepts;
        let ids = &self.ids;
        let table = tape.param(ids.speaker_embed);
        let mut parts = Vec::with_capacity(n);
        for j in 0..n {
            let rows: Vec<usize> = strings.iter().map(|s| s.tokens()[j] as usize).collect();
            parts.push(tape.gather(table, &rows)?);
        }
        let x = tape.concat(&parts)?;
        let lstm = &ids.speaker_lstm;
        let x_proj = lstm.project_input(tape, x)?;
        let later_proj = if self.config.speaker_input_every_step {
            x_proj
        } else {
            let zero = tape.constant(Array2::zeros((b, lstm.input_size)));
            lstm.project_input(tape, zero)?
        };
        let mut h = tape.constant(Array2::zeros((b, lstm.hidden_size)));
        let mut c = tape.constant(Array2::zeros((b, lstm.hidden_size)));
        let (pw, pb) = (
            tape.param(ids.speaker_proj.w),
            tape.param(ids.speaker_proj.b),
        );
        let (hw, hb) = (
            tape.param(ids.speaker_head.w),
            tape.param(ids.speaker_head.b),
        );
        let mut logits = Vec::with_capacity(self.dims.latent_bits);
        for t in 0..self.dims.latent_bits {
            let input = if t == 0 { x_proj } else { later_proj };
            (h, c) = lstm.step(tape, input, h, c)?;
            let proj = tape.affine(h, pw, Some(pb))?;
            logits.push(tape.affine(proj, hw, Some(hb))?);
        }
        let all = tape.concat(&logits)?;
        tape.pair_log_softmax(all)
    }

    /// Listener forward pass from a `B × 2l` (one-hot or relaxed) message to
    /// one `B × |Σ|` log-probability matrix per concept position.
    pub fn listener_log_probs(&self, tape: &mut Tape<'_>, message: Var) -> Result<Vec<Var>> {
        let l = self.dims.latent_bits;
        let mv = tape.value(message);
        if mv.ncols() != 2 * l {
            return Err(Error::Shape {
                op: "listener message",
                lhs: mv.shape().to_vec(),
                rhs: vec![mv.nrows(), 2 * l],
            });
        }
        let b = mv.nrows();
        let ids = &self.ids;
        let table = tape.param(ids.listener_embed);
        let bag = tape.matmul(message, table)?;
        let lstm = &ids.listener_lstm;
        let x_proj = lstm.project_input(tape, bag)?;
        let mut h = tape.constant(Array2::zeros((b, lstm.hidden_size)));
        let mut c = tape.constant(Array2::zeros((b, lstm.hidden_size)));
        let (hw, hb) = (
            tape.param(ids.listener_head.w),
            tape.param(ids.listener_head.b),
        );
        let mut out = Vec::with_capacity(self.grammar.num_concepts);
        for _ in 0..self.grammar.num_concepts {
            (h, c) = lstm.step(tape, x_proj, h, c)?;
            let logits = tape.affine(h, hw, Some(hb))?;
            out.push(tape.log_softmax(logits)?);
        }
        Ok(out)
    }

    /// Records the single-sample ELBO for a batch with fixed Gumbel noise
    /// (`B × 2l`).
    pub fn elbo_tape(
        &self,
        tape: &mut Tape<'_>,
        strings: &[ConceptString],
        noise: &Array2<f64>,
        mode: GumbelMode,
    ) -> Result<ElboVars> {
        let logq = self.speaker_logq(tape, strings)?;
        let tau = tape.param(self.ids.tau);
        let message = tape.gumbel_softmax(logq, tau, noise, mode)?;
        let per_pos = self.listener_log_probs(tape, message)?;
        let mut recon: Option<Var> = None;
        for (j, lp) in per_pos.into_iter().enumerate() {
            let targets: Vec<usize> = strings.iter().map(|s| s.tokens()[j] as usize).collect();
            let picked = tape.pick(lp, &targets)?;
            recon = Some(match recon {
                None => picked,
                Some(r) => tape.add(r, picked)?,
            });
        }
        let recon = recon.expect("at least one concept");
        let prior = tape.param(self.ids.prior);
        let kl = tape.kl_bernoulli(logq, prior)?;
        let elbo = tape.sub(recon, kl)?;
        let mean = tape.mean(elbo)?;
        let loss = tape.scale(mean, -1.0)?;
        Ok(ElboVars {
            logq,
            message,
            recon,
            kl,
            elbo,
            loss,
        })
    }

    /// Fresh Gumbel noise for a batch of `batch` strings.
    pub fn sample_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Array2<f64> {
        gumbel_noise(rng, batch, 2 * self.dims.latent_bits)
    }

    /// Single straight-through sample of the ELBO per string.
    pub fn elbo_loss<R: Rng + ?Sized>(
        &self,
        strings: &[ConceptString],
        rng: &mut R,
    ) -> Result<ElboSample> {
        let noise = self.sample_noise(strings.len(), rng);
        let mut tape = Tape::new(&self.params);
        let v = self.elbo_tape(&mut tape, strings, &noise, GumbelMode::StraightThrough)?;
        let col = |var: Var| tape.value(var).column(0).to_vec();
        let (elbo, recon, kl) = (col(v.elbo), col(v.recon), col(v.kl));
        for (name, vals) in [("elbo", &elbo), ("recon", &recon), ("kl", &kl)] {
            if vals.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("non-finite {name} term")));
            }
        }
        let m = tape.value(v.message);
        let messages = (0..strings.len())
            .map(|r| Message::from_one_hot(m, r))
            .collect();
        Ok(ElboSample {
            elbo,
            recon,
            kl,
            messages,
        })
    }

    /// Speaker output as `B × 2l` probability pairs.
    pub fn speaker_forward(&self, strings: &[ConceptString]) -> Result<Array2<f64>> {
        let mut tape = Tape::new(&self.params);
        let logq = self.speaker_logq(&mut tape, strings)?;
        Ok(tape.value(logq).mapv(f64::exp))
    }

    /// Listener output as one `B × |Σ|` probability matrix per position.
    pub fn listener_forward(&self, messages: &[Message]) -> Result<Vec<Array2<f64>>> {
        Ok(self
            .decode_log_probs(messages)?
            .into_iter()
            .map(|m| m.mapv(f64::exp))
            .collect())
    }
}

impl Encoder for Vae {
    fn latent_bits(&self) -> usize {
        self.dims.latent_bits
    }

    fn encode_probs(&self, strings: &[ConceptString]) -> Result<Array2<f64>> {
        let pairs = self.speaker_forward(strings)?;
        let l = self.dims.latent_bits;
        Ok(Array2::from_shape_fn((strings.len(), l), |(r, t)| {
            pairs[[r, 2 * t + 1]]
        }))
    }
}

impl Decoder for Vae {
    fn latent_bits(&self) -> usize {
        self.dims.latent_bits
    }

    fn alphabet_size(&self) -> usize {
        self.grammar.alphabet_size()
    }

    fn decode_log_probs(&self, messages: &[Message]) -> Result<Vec<Array2<f64>>> {
        if messages.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let m = one_hot(messages, self.dims.latent_bits)?;
        let mut tape = Tape::new(&self.params);
        let msg = tape.constant(m);
        let vars = self.listener_log_probs(&mut tape, msg)?;
        Ok(vars.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}

impl LatentPrior for Vae {
    fn bit_probs(&self) -> Vec<f64> {
        self.prior_logits()
            .into_iter()
            .map(crate::diffcore::sigmoid)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, GradCheckConfig};
    use crate::model::{deterministic_autoencode, BaseDims, ModelFamily};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(l: usize) -> ModelConfig {
        ModelConfig {
            dims: Some(BaseDims {
                speaker_embed: 3,
                speaker_hidden: 3,
                speaker_linear: 3,
                listener_embed: 3,
                listener_hidden: 3,
            }),
            ..ModelConfig::new(ModelFamily::Desk, 1.0, l)
        }
    }

    fn g(n: usize, v: usize) -> GrammarSpec {
        GrammarSpec::new(n, v).unwrap()
    }

    #[test]
    fn zero_model_outputs_are_uniform() {
        let gr = g(3, 4);
        for l in [19, 25] {
            let vae = Vae::zeros(&gr, &ModelConfig::new(ModelFamily::Desk, 1.0, l)).unwrap();
            let strings: Vec<_> = gr.enumerate(64).unwrap().take(5).collect();
            let probs = vae.speaker_forward(&strings).unwrap();
            assert_eq!(probs.shape(), &[5, 2 * l]);
            assert!(probs.iter().all(|&p| p == 0.5));
            let dists = vae.listener_forward(&[Message::zeros(l)]).unwrap();
            assert_eq!(dists.len(), 3);
            for d in dists {
                assert!(d.iter().all(|&p| (p - 1.0 / 12.0).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn forward_distributions_are_normalised() {
        let gr = g(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vae = Vae::init(&gr, &ModelConfig::new(ModelFamily::Desk, 1.0, 6), &mut rng).unwrap();
        let strings: Vec<_> = gr.enumerate(64).unwrap().collect();
        let probs = vae.speaker_forward(&strings).unwrap();
        for row in probs.rows() {
            for pair in row.as_slice().unwrap().chunks_exact(2) {
                assert!((pair[0] + pair[1] - 1.0).abs() < 1e-12);
            }
        }
        let msgs: Vec<Message> = (0..10u64)
            .map(|k| Message::new((0..6).map(|t| ((k >> t) & 1) as u8).collect()).unwrap())
            .collect();
        for d in vae.listener_forward(&msgs).unwrap() {
            for row in d.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
        // Deterministic given z.
        assert_eq!(
            vae.listener_forward(&msgs).unwrap(),
            vae.listener_forward(&msgs).unwrap()
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let gr = g(3, 4);
        let vae = Vae::zeros(&gr, &tiny_config(4)).unwrap();
        let mut tape = Tape::new(&vae.params);
        let bad = ConceptString::new(&g(3, 5), vec![4, 5, 10]).unwrap();
        assert!(matches!(
            vae.speaker_logq(&mut tape, &[bad]),
            Err(Error::NotMember { .. })
        ));
        assert!(vae.listener_forward(&[Message::zeros(5)]).is_err());
    }

    /// Straight-line speaker oracle with explicit loops.
    fn speaker_oracle(vae: &Vae, s: &ConceptString) -> Vec<f64> {
        let p = &vae.params;
        let v = |name: &str| p.by_name(name).unwrap().value.clone();
        let emb = v("speaker.embed");
        let (w_ih, w_hh, bias) = (
            v("speaker.lstm.w_ih"),
            v("speaker.lstm.w_hh"),
            v("speaker.lstm.bias"),
        );
        let (pw, pb, hw, hb) = (
            v("speaker.proj.w"),
            v("speaker.proj.b"),
            v("speaker.head.w"),
            v("speaker.head.b"),
        );
        let x: Vec<f64> = s
            .tokens()
            .iter()
            .flat_map(|&t| emb.row(t as usize).to_vec())
            .collect();
        let hd = w_hh.ncols();
        let (mut h, mut c) = (vec![0.0; hd], vec![0.0; hd]);
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut out = Vec::new();
        for _ in 0..vae.dims().latent_bits {
            let pre: Vec<f64> = (0..4 * hd)
                .map(|k| {
                    bias[[0, k]]
                        + (0..x.len()).map(|j| w_ih[[k, j]] * x[j]).sum::<f64>()
                        + (0..hd).map(|j| w_hh[[k, j]] * h[j]).sum::<f64>()
                })
                .collect();
            for u in 0..hd {
                c[u] = sig(pre[hd + u]) * c[u] + sig(pre[u]) * pre[2 * hd + u].tanh();
                h[u] = sig(pre[3 * hd + u]) * c[u].tanh();
            }
            let proj: Vec<f64> = (0..pw.nrows())
                .map(|k| pb[[0, k]] + (0..hd).map(|j| pw[[k, j]] * h[j]).sum::<f64>())
                .collect();
            let logit: Vec<f64> = (0..2)
                .map(|k| hb[[0, k]] + (0..proj.len()).map(|j| hw[[k, j]] * proj[j]).sum::<f64>())
                .collect();
            out.push(sig(logit[1] - logit[0]));
        }
        out
    }

    fn listener_oracle(vae: &Vae, z: &Message) -> Vec<Vec<f64>> {
        let p = &vae.params;
        let v = |name: &str| p.by_name(name).unwrap().value.clone();
        let emb = v("listener.embed");
        let (w_ih, w_hh, bias) = (
            v("listener.lstm.w_ih"),
            v("listener.lstm.w_hh"),
            v("listener.lstm.bias"),
        );
        let (hw, hb) = (v("listener.head.w"), v("listener.head.b"));
        let mut x = vec![0.0; emb.ncols()];
        for (t, &b) in z.bits().iter().enumerate() {
            for (k, xk) in x.iter_mut().enumerate() {
                *xk += emb[[2 * t + b as usize, k]];
            }
        }
        let hd = w_hh.ncols();
        let (mut h, mut c) = (vec![0.0; hd], vec![0.0; hd]);
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut out = Vec::new();
        for _ in 0..vae.grammar().num_concepts {
            let pre: Vec<f64> = (0..4 * hd)
                .map(|k| {
                    bias[[0, k]]
                        + (0..x.len()).map(|j| w_ih[[k, j]] * x[j]).sum::<f64>()
                        + (0..hd).map(|j| w_hh[[k, j]] * h[j]).sum::<f64>()
                })
                .collect();
            for u in 0..hd {
                c[u] = sig(pre[hd + u]) * c[u] + sig(pre[u]) * pre[2 * hd + u].tanh();
                h[u] = sig(pre[3 * hd + u]) * c[u].tanh();
            }
            let logits: Vec<f64> = (0..hw.nrows())
                .map(|k| hb[[0, k]] + (0..hd).map(|j| hw[[k, j]] * h[j]).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
            out.push(logits.iter().map(|v| (v - m).exp() / z).collect());
        }
        out
    }

    fn randomise_biases(vae: &mut Vae, rng: &mut ChaCha8Rng) {
        for t in vae.params.tensors_mut() {
            if t.name.ends_with(".b") || t.name.ends_with(".bias") || t.name == "prior.logits" {
                t.value.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            }
        }
    }

    #[test]
    fn speaker_and_listener_match_straight_line_oracles() {
        let gr = g(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut vae = Vae::init(&gr, &tiny_config(5), &mut rng).unwrap();
        randomise_biases(&mut vae, &mut rng);
        let strings: Vec<_> = (0..6).map(|_| gr.sample_string(&mut rng)).collect();
        let probs = vae.encode_probs(&strings).unwrap();
        for (r, s) in strings.iter().enumerate() {
            for (t, want) in speaker_oracle(&vae, s).into_iter().enumerate() {
                assert!((probs[[r, t]] - want).abs() < 1e-12);
            }
        }
        let msgs: Vec<Message> = (0..6u8)
            .map(|k| Message::new((0..5).map(|t| (k >> t) & 1).collect()).unwrap())
            .collect();
        let dists = vae.listener_forward(&msgs).unwrap();
        for (r, z) in msgs.iter().enumerate() {
            for (j, want) in listener_oracle(&vae, z).into_iter().enumerate() {
                for (k, w) in want.iter().enumerate() {
                    assert!((dists[j][[r, k]] - w).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn elbo_matches_recomputation_from_saved_message() {
        let gr = g(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut vae = Vae::init(&gr, &tiny_config(4), &mut rng).unwrap();
        randomise_biases(&mut vae, &mut rng);
        let strings: Vec<_> = gr.enumerate(64).unwrap().collect();
        let sample = vae.elbo_loss(&strings, &mut rng).unwrap();
        let dists = vae.listener_forward(&sample.messages).unwrap();
        let q = vae.encode_probs(&strings).unwrap();
        let p = vae.bit_probs();
        for (r, s) in strings.iter().enumerate() {
            let recon: f64 = s
                .tokens()
                .iter()
                .enumerate()
                .map(|(j, &t)| dists[j][[r, t as usize]].ln())
                .sum();
            let kl: f64 = (0..4)
                .map(|t| {
                    let (q1, p1) = (q[[r, t]], p[t]);
                    (1.0 - q1) * ((1.0 - q1) / (1.0 - p1)).ln() + q1 * (q1 / p1).ln()
                })
                .sum();
            assert!((sample.recon[r] - recon).abs() < 1e-12);
            assert!((sample.kl[r] - kl).abs() < 1e-12);
            assert!((sample.elbo[r] - (recon - kl)).abs() < 1e-12);
            assert!(sample.elbo[r] <= sample.recon[r] && sample.recon[r] <= 0.0);
        }
    }

    #[test]
    fn initial_elbo_is_near_uniform_decoder_baseline() {
        let gr = g(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vae = Vae::init(&gr, &ModelConfig::new(ModelFamily::Desk, 1.0, 8), &mut rng).unwrap();
        let strings: Vec<_> = gr.enumerate(64).unwrap().collect();
        let s = vae.elbo_loss(&strings, &mut rng).unwrap();
        let mean_recon = s.recon.iter().sum::<f64>() / 64.0;
        let baseline = 3.0 * (1.0f64 / 12.0).ln();
        assert!(
            (mean_recon - baseline).abs() < 0.1 * baseline.abs(),
            "{mean_recon} vs {baseline}"
        );
    }

    #[test]
    fn relaxed_full_model_gradients_match_finite_differences() {
        let gr = g(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut vae = Vae::init(&gr, &tiny_config(4), &mut rng).unwrap();
        randomise_biases(&mut vae, &mut rng);
        let strings: Vec<_> = gr.enumerate(9).unwrap().collect();
        let noise = vae.sample_noise(strings.len(), &mut rng);
        let model = vae.clone();
        let report = grad_check(
            &mut vae.params,
            |tape| {
                Ok(model
                    .elbo_tape(tape, &strings, &noise, GumbelMode::Relaxed)?
                    .loss)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:#?}");
    }

    #[test]
    fn zero_model_autoencode_is_constant() {
        let gr = g(1, 5);
        let vae = Vae::zeros(&gr, &tiny_config(3)).unwrap();
        let strings: Vec<_> = gr.enumerate(5).unwrap().collect();
        let out = deterministic_autoencode(&vae, &vae, &strings).unwrap();
        assert!(out
            .iter()
            .all(|a| a.decoded == vec![0] && a.message.bits() == [0, 0, 0]));
        let matches = out.iter().filter(|a| a.exact_match).count();
        assert_eq!(matches, 1); // 1/|L*| of a uniform enumeration
    }

    #[test]
    fn from_params_checks_layout() {
        let gr = g(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = tiny_config(4);
        let vae = Vae::init(&gr, &cfg, &mut rng).unwrap();
        let back = Vae::from_params(&gr, &cfg, vae.params.clone()).unwrap();
        assert_eq!(back.params, vae.params);
        assert!(Vae::from_params(&gr, &tiny_config(5), vae.params.clone()).is_err());
    }
}
