//! Model assembly: configuration, parameter initialization, graph binding,
//! and the window-batched forward pass that ties encoder, solver, decoder,
//! and losses together.
//!
//! A batch of B windows is evaluated as one graph. Per-window tensors are
//! row-stacked along axis 0; the time-index path is computed once and tiled.
//! The per-window ridge fit, decode, and losses run on row slices.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::ForecastWindow;
use crate::decoder::{self, RidgeSolution};
use crate::encoder::{
    self, AggregationLayer, AttentionBlock, EncoderBound, PathEmbed,
};
use crate::error::{Error, Result};
use crate::features::{
    affine_init_limit, cff_encode, sine_init_limit, time_index_grid, Activation, CffBank, Matrix,
    SirenStack, TimeIndexGrid,
};
use crate::losses::{self, LossReport};
use crate::params::{BoundParams, ParamStore};
use crate::rng::substream;
use crate::solver::{self, Mlp, SolverBound};

/// Ablation variants: which input paths and which initial-condition handling
/// the model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoTemporal,
    NoSpatial,
    NoInitial,
    NoTemporalSpatial,
    /// Time-index representation only: no temporal or spatial path and no
    /// initial condition.
    InrsOnly,
}

impl Variant {
    pub fn all() -> [Variant; 6] {
        [
            Variant::Full,
            Variant::NoTemporal,
            Variant::NoSpatial,
            Variant::NoInitial,
            Variant::NoTemporalSpatial,
            Variant::InrsOnly,
        ]
    }

    pub fn label(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTemporal => "-temporal",
            Variant::NoSpatial => "-spatial",
            Variant::NoInitial => "-initial",
            Variant::NoTemporalSpatial => "-temporal-spatial",
            Variant::InrsOnly => "-all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "-temporal" | "no_temporal" => Ok(Variant::NoTemporal),
            "-spatial" | "no_spatial" => Ok(Variant::NoSpatial),
            "-initial" | "no_initial" => Ok(Variant::NoInitial),
            "-temporal-spatial" | "no_temporal_spatial" => Ok(Variant::NoTemporalSpatial),
            "-all" | "inrs_only" => Ok(Variant::InrsOnly),
            other => Err(Error::config(format!("unknown variant '{other}'"))),
        }
    }

    pub fn use_temporal(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoSpatial | Variant::NoInitial)
    }

    pub fn use_spatial(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoTemporal | Variant::NoInitial)
    }

    pub fn use_initial(&self) -> bool {
        !matches!(self, Variant::NoInitial | Variant::InrsOnly)
    }
}

/// Architecture hyperparameters for one model instance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub lookback: usize,
    pub horizon: usize,
    /// Latent width d.
    pub latent_dim: usize,
    /// Feature-stack depth k.
    pub inr_layers: usize,
    /// Aggregation layer count N.
    pub agg_layers: usize,
    pub n_heads: usize,
    /// Fourier scale count for the time-index bank.
    pub n_scales: usize,
    /// Solver patch length S.
    pub patch_len: usize,
    /// Ridge regularizer.
    pub lambda: f64,
    /// Temporal feature width (4 for hourly data, 5 for sub-hourly).
    pub t_dim: usize,
    pub smooth_l1_beta: f64,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn total_len(&self) -> usize {
        self.lookback + self.horizon
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.lookback == 0 || self.horizon == 0 {
            return Err(Error::config(
                "channels, lookback, and horizon must be positive",
            ));
        }
        if self.latent_dim == 0 || self.latent_dim % 2 != 0 {
            return Err(Error::config(format!(
                "latent dim must be positive and even, got {}",
                self.latent_dim
            )));
        }
        if self.n_heads == 0 || self.latent_dim % self.n_heads != 0 {
            return Err(Error::config(format!(
                "{} heads do not divide latent dim {}",
                self.n_heads, self.latent_dim
            )));
        }
        if self.inr_layers == 0 || self.agg_layers == 0 {
            return Err(Error::config("inr_layers and agg_layers must be >= 1"));
        }
        if self.n_scales == 0 {
            return Err(Error::config("n_scales must be >= 1"));
        }
        if self.patch_len == 0 || self.total_len() % self.patch_len != 0 {
            return Err(Error::config(format!(
                "patch length {} must divide lookback+horizon = {}",
                self.patch_len,
                self.total_len()
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::config("lambda must be positive"));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::config("smooth_l1_beta must be positive"));
        }
        if self.variant.use_temporal() && self.t_dim == 0 {
            return Err(Error::config("t_dim must be >= 1 when the temporal path is on"));
        }
        Ok(())
    }
}

fn uniform(limit: f64, n: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// The forecaster: frozen Fourier bank, trainable parameter store, and the
/// fixed time-index grid with its cached encoding.
pub struct PdeTime {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub cff: CffBank,
    pub grid: TimeIndexGrid,
    cff_matrix: Matrix,
}

/// Leaf tensors of one graph instantiation of the model.
pub struct BoundModel {
    pub enc: EncoderBound,
    pub solver: SolverBound,
    pub params: BoundParams,
}

/// Per-window results of a forward pass.
pub struct WindowOutput {
    /// H×C predictions (standardized space), initial condition added.
    pub y_hat: Vec<f64>,
    pub report: LossReport,
    /// The window's latent sequence, (L+H)×d.
    pub z: Tensor,
    pub ridge: RidgeSolution,
    /// Decoded horizon deltas before the initial condition shift.
    pub deltas: Tensor,
}

/// One batched forward pass.
pub struct BatchForward {
    /// Mean over windows of (L_p + L_c + L_f); the training objective.
    pub total: Tensor,
    pub outputs: Vec<WindowOutput>,
    pub mean_report: LossReport,
}

impl PdeTime {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut cff_rng = substream(seed, "cff");
        let cff = CffBank::new(cfg.latent_dim, cfg.n_scales, &mut cff_rng)?;
        let grid = time_index_grid(cfg.lookback, cfg.horizon)?;
        let cff_matrix = cff_encode(&grid, &cff);
        let mut rng = substream(seed, "init");
        let params = Self::build_params(&cfg, cff.output_dim(), &mut rng)?;
        Ok(PdeTime {
            cfg,
            params,
            cff,
            grid,
            cff_matrix,
        })
    }

    /// Rebuilds a model from checkpointed parts.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore, cff: CffBank) -> Result<Self> {
        cfg.validate()?;
        let grid = time_index_grid(cfg.lookback, cfg.horizon)?;
        let cff_matrix = cff_encode(&grid, &cff);
        Ok(PdeTime {
            cfg,
            params,
            cff,
            grid,
            cff_matrix,
        })
    }

    fn build_params(
        cfg: &ModelConfig,
        cff_dim: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<ParamStore> {
        let d = cfg.latent_dim;
        let k = cfg.inr_layers;
        let mut store = ParamStore::new();

        let affine = |store: &mut ParamStore,
                          name: &str,
                          fan_in: usize,
                          fan_out: usize,
                          rng: &mut rand_chacha::ChaCha8Rng|
         -> Result<()> {
            let limit = affine_init_limit(fan_in);
            store.insert(
                format!("{name}.w"),
                vec![fan_in, fan_out],
                uniform(limit, fan_in * fan_out, rng),
                true,
            )?;
            store.insert(
                format!("{name}.b"),
                vec![fan_out],
                uniform(limit, fan_out, rng),
                true,
            )
        };
        let sine = |store: &mut ParamStore,
                        name: &str,
                        fan_in: usize,
                        fan_out: usize,
                        first: bool,
                        rng: &mut rand_chacha::ChaCha8Rng|
         -> Result<()> {
            let limit = sine_init_limit(fan_in, first);
            store.insert(
                format!("{name}.w"),
                vec![fan_in, fan_out],
                uniform(limit, fan_in * fan_out, rng),
                true,
            )?;
            store.insert(
                format!("{name}.b"),
                vec![fan_out],
                uniform(limit, fan_out, rng),
                true,
            )
        };
        let norm = |store: &mut ParamStore, name: &str, width: usize| -> Result<()> {
            store.insert(format!("{name}.gain"), vec![width], vec![1.0; width], true)?;
            store.insert(format!("{name}.bias"), vec![width], vec![0.0; width], true)
        };

        // Time-index path: GeLU stack over the Fourier encoding.
        for i in 0..k {
            let fan_in = if i == 0 { cff_dim } else { d };
            affine(&mut store, &format!("enc.tau.stack.{i}"), fan_in, d, rng)?;
        }
        affine(&mut store, "enc.tau.entry", d, d, rng)?;
        norm(&mut store, "enc.tau.norm", d)?;

        // Temporal path: sine stack at the raw feature width.
        if cfg.variant.use_temporal() {
            let t = cfg.t_dim;
            for i in 0..k {
                sine(&mut store, &format!("enc.t.stack.{i}"), t, t, i == 0, rng)?;
            }
            sine(&mut store, "enc.t.entry", t, t, false, rng)?;
            norm(&mut store, "enc.t.norm", t)?;
        }

        // Spatial path: each channel's lookback history is one token.
        if cfg.variant.use_spatial() {
            for i in 0..k {
                let fan_in = if i == 0 { cfg.lookback } else { d };
                sine(&mut store, &format!("enc.x.stack.{i}"), fan_in, d, i == 0, rng)?;
            }
            affine(&mut store, "enc.x.entry", d, d, rng)?;
            norm(&mut store, "enc.x.norm", d)?;
        }

        for n in 0..cfg.agg_layers {
            if cfg.variant.use_spatial() {
                for gate in ["wq", "wk", "wv", "wo"] {
                    affine(&mut store, &format!("enc.agg{n}.attn.{gate}"), d, d, rng)?;
                }
                norm(&mut store, &format!("enc.agg{n}.attn.norm"), d)?;
            }
            let fuse_in = if cfg.variant.use_temporal() { d + cfg.t_dim } else { d };
            affine(&mut store, &format!("enc.agg{n}.fuse"), fuse_in, d, rng)?;
            norm(&mut store, &format!("enc.agg{n}.norm"), d)?;
        }

        for head in ["u", "dudt", "out"] {
            affine(&mut store, &format!("sol.{head}.l1"), d, d, rng)?;
            affine(&mut store, &format!("sol.{head}.l2"), d, d, rng)?;
        }
        Ok(store)
    }

    /// Instantiates all parameters into `graph`. `with_grad = false` builds
    /// a constant (evaluation) binding.
    pub fn bind(&self, graph: &Graph, with_grad: bool) -> Result<BoundModel> {
        let cfg = &self.cfg;
        let bound = self.params.bind(graph, with_grad)?;
        let k = cfg.inr_layers;

        let stack = |prefix: &str, act: Activation| -> Result<SirenStack> {
            let mut layers = Vec::with_capacity(k);
            for i in 0..k {
                layers.push((
                    bound.get(&format!("{prefix}.{i}.w"))?,
                    bound.get(&format!("{prefix}.{i}.b"))?,
                ));
            }
            Ok(SirenStack {
                layers,
                activation: act,
            })
        };
        let path = |name: &str, act_stack: Activation, act_entry: Activation| -> Result<PathEmbed> {
            Ok(PathEmbed {
                stack: stack(&format!("enc.{name}.stack"), act_stack)?,
                entry_w: bound.get(&format!("enc.{name}.entry.w"))?,
                entry_b: bound.get(&format!("enc.{name}.entry.b"))?,
                entry_activation: act_entry,
                norm_gain: bound.get(&format!("enc.{name}.norm.gain"))?,
                norm_bias: bound.get(&format!("enc.{name}.norm.bias"))?,
            })
        };

        let tau = path("tau", Activation::Gelu, Activation::Gelu)?;
        let temporal = if cfg.variant.use_temporal() {
            Some(path("t", Activation::Sine, Activation::Sine)?)
        } else {
            None
        };
        let spatial = if cfg.variant.use_spatial() {
            Some(path("x", Activation::Sine, Activation::Gelu)?)
        } else {
            None
        };

        let mut layers = Vec::with_capacity(cfg.agg_layers);
        for n in 0..cfg.agg_layers {
            let attention = if cfg.variant.use_spatial() {
                Some(AttentionBlock {
                    wq: bound.get(&format!("enc.agg{n}.attn.wq.w"))?,
                    bq: bound.get(&format!("enc.agg{n}.attn.wq.b"))?,
                    wk: bound.get(&format!("enc.agg{n}.attn.wk.w"))?,
                    bk: bound.get(&format!("enc.agg{n}.attn.wk.b"))?,
                    wv: bound.get(&format!("enc.agg{n}.attn.wv.w"))?,
                    bv: bound.get(&format!("enc.agg{n}.attn.wv.b"))?,
                    wo: bound.get(&format!("enc.agg{n}.attn.wo.w"))?,
                    bo: bound.get(&format!("enc.agg{n}.attn.wo.b"))?,
                    norm_gain: bound.get(&format!("enc.agg{n}.attn.norm.gain"))?,
                    norm_bias: bound.get(&format!("enc.agg{n}.attn.norm.bias"))?,
                    n_heads: cfg.n_heads,
                })
            } else {
                None
            };
            layers.push(AggregationLayer {
                attention,
                fuse_w: bound.get(&format!("enc.agg{n}.fuse.w"))?,
                fuse_b: bound.get(&format!("enc.agg{n}.fuse.b"))?,
                norm_gain: bound.get(&format!("enc.agg{n}.norm.gain"))?,
                norm_bias: bound.get(&format!("enc.agg{n}.norm.bias"))?,
            });
        }

        let mlp = |name: &str| -> Result<Mlp> {
            Ok(Mlp {
                w1: bound.get(&format!("sol.{name}.l1.w"))?,
                b1: bound.get(&format!("sol.{name}.l1.b"))?,
                w2: bound.get(&format!("sol.{name}.l2.w"))?,
                b2: bound.get(&format!("sol.{name}.l2.b"))?,
            })
        };
        let solver = SolverBound {
            u_head: mlp("u")?,
            dudt_head: mlp("dudt")?,
            out_head: mlp("out")?,
            patch_len: cfg.patch_len,
        };

        Ok(BoundModel {
            enc: EncoderBound {
                tau,
                temporal,
                spatial,
                layers,
            },
            solver,
            params: bound,
        })
    }

    fn check_window(&self, w: &ForecastWindow) -> Result<()> {
        let cfg = &self.cfg;
        if w.lookback != cfg.lookback || w.horizon != cfg.horizon || w.channels != cfg.channels {
            return Err(Error::config(format!(
                "window dims (L={}, H={}, C={}) do not match model (L={}, H={}, C={})",
                w.lookback, w.horizon, w.channels, cfg.lookback, cfg.horizon, cfg.channels
            )));
        }
        if cfg.variant.use_temporal() && w.t_feats.len() != cfg.total_len() * cfg.t_dim {
            return Err(Error::config(format!(
                "window temporal features have {} values, expected {}x{}",
                w.t_feats.len(),
                cfg.total_len(),
                cfg.t_dim
            )));
        }
        Ok(())
    }

    /// Runs the full pipeline over a batch of windows in one graph.
    pub fn forward_batch(
        &self,
        graph: &Graph,
        bound: &BoundModel,
        windows: &[ForecastWindow],
    ) -> Result<BatchForward> {
        if windows.is_empty() {
            return Err(Error::contract("forward_batch: empty window batch"));
        }
        for w in windows {
            self.check_window(w)?;
        }
        let cfg = &self.cfg;
        let b = windows.len();
        let (l, h, c) = (cfg.lookback, cfg.horizon, cfg.channels);
        let tt = cfg.total_len();
        let beta = cfg.smooth_l1_beta;

        let tau_cff = graph.constant(
            self.cff_matrix.data.clone(),
            &[self.cff_matrix.rows, self.cff_matrix.cols],
        )?;
        let t_feats = if cfg.variant.use_temporal() {
            let mut data = Vec::with_capacity(b * tt * cfg.t_dim);
            for w in windows {
                data.extend_from_slice(&w.t_feats);
            }
            Some(graph.constant(data, &[b * tt, cfg.t_dim])?)
        } else {
            None
        };
        // Channel tokens carry the lookback history as deltas from the
        // initial condition, matching the delta formulation of the targets
        // and making the pipeline exactly shift-equivariant.
        let x_tokens = if cfg.variant.use_spatial() {
            let mut data = Vec::with_capacity(b * c * l);
            for w in windows {
                for ch in 0..c {
                    let init = if cfg.variant.use_initial() {
                        w.x_init[ch]
                    } else {
                        0.0
                    };
                    for i in 0..l {
                        data.push(w.x[i * c + ch] - init);
                    }
                }
            }
            Some(graph.constant(data, &[b * c, l])?)
        } else {
            None
        };

        let alpha = encoder::encode(&bound.enc, &tau_cff, t_feats.as_ref(), x_tokens.as_ref(), b)?;
        let parts = solver::solve_parts(&alpha, &bound.solver)?;

        let zero_row = graph.constant(vec![0.0; c], &[1, c])?;
        let mut outputs = Vec::with_capacity(b);
        let mut total: Option<Tensor> = None;
        let (mut sum_p, mut sum_c, mut sum_f) = (0.0, 0.0, 0.0);
        for (w_idx, window) in windows.iter().enumerate() {
            let z_w = parts.z.narrow(0, w_idx * tt, tt)?;
            let z_lb = z_w.narrow(0, 0, l)?;
            let z_h = z_w.narrow(0, l, h)?;

            let x_init_vals = if cfg.variant.use_initial() {
                window.x_init.clone()
            } else {
                vec![0.0; c]
            };
            let x_init = graph.constant(x_init_vals.clone(), &[c])?;
            let lb_targets: Vec<f64> = window
                .x
                .iter()
                .enumerate()
                .map(|(i, v)| v - x_init_vals[i % c])
                .collect();
            let lb_targets = graph.constant(lb_targets, &[l, c])?;
            let ridge = decoder::ridge_fit(&z_lb, &lb_targets, cfg.lambda)?;
            let deltas_h = decoder::decode_deltas(&z_h, &ridge)?;

            let y_t = graph.constant(window.y.clone(), &[h, c])?;
            let l_p = losses::prediction_loss(&deltas_h, &y_t, &x_init, beta)?;

            let target_deltas: Vec<f64> = window
                .y
                .iter()
                .enumerate()
                .map(|(i, v)| v - x_init_vals[i % c])
                .collect();
            let pred_full = Tensor::cat(&[&zero_row, &deltas_h], 0)?;
            let mut targ_full_data = vec![0.0; c];
            targ_full_data.extend_from_slice(&target_deltas);
            let targ_full = graph.constant(targ_full_data, &[h + 1, c])?;
            let l_f = losses::first_difference_loss(&pred_full, &targ_full, beta)?;

            let u_w = parts.u.narrow(0, w_idx * tt, tt)?;
            let d_w = parts.dudt.narrow(0, w_idx * tt, tt)?;
            let l_c = solver::continuity_residual(&u_w, &d_w, cfg.patch_len, beta)?;

            let window_total = l_p.add(&l_c)?.add(&l_f)?;
            total = Some(match total {
                None => window_total,
                Some(t) => t.add(&window_total)?,
            });

            let y_hat = deltas_h.add_row(&x_init)?.value();
            let report = LossReport::new(l_p.item(), l_c.item(), l_f.item());
            sum_p += report.l_p;
            sum_c += report.l_c;
            sum_f += report.l_f;
            outputs.push(WindowOutput {
                y_hat,
                report,
                z: z_w,
                ridge,
                deltas: deltas_h,
            });
        }
        let total = total.expect("nonempty batch").scale(1.0 / b as f64);
        let bf = b as f64;
        Ok(BatchForward {
            total,
            outputs,
            mean_report: LossReport::new(sum_p / bf, sum_c / bf, sum_f / bf),
        })
    }

    /// Single-window inference: fits the per-window decoder on the lookback
    /// and predicts the horizon. Only the closed-form fit adapts; no
    /// encoder/solver parameters change.
    pub fn adapt_and_predict(&self, window: &ForecastWindow) -> Result<WindowOutput> {
        let graph = Graph::new();
        let bound = self.bind(&graph, false)?;
        let mut fwd = self.forward_batch(&graph, &bound, std::slice::from_ref(window))?;
        Ok(fwd.outputs.remove(0))
    }
}
