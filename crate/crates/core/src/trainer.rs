//! Adversarial training loop, checkpointing and inference.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augbuf::{ReplayBuffer, ScaleTransform};
use crate::blocks::channel_medians;
use crate::checkpoint::{self, CheckpointMeta, FORMAT_VERSION};
use crate::config::RunConfig;
use crate::data::{list_images, load_image, pad_to_divisible, save_image, PatchDataset, StoredImage};
use crate::error::{Error, Result};
use crate::losses::{
    adv_loss_content_disc, adv_loss_domain_disc, adv_loss_generators, cross_domain_contrastive, cycle_loss, identity_loss,
    total_loss, ContrastiveConfig, DomainDiscOutputs, LossParts, LossWeights,
};
use crate::models::{ClassMode, Direction, Domain, Ui2iModel};
use crate::optim::Adam;
use crate::params::no_grad;

/// Stream id of the trainer RNG, kept apart from the initialization stream.
const TRAIN_STREAM: u64 = 7;
pub const LOSS_LOG: &str = "losses.jsonl";

/// Component losses of one iteration. Serialized as one loss-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    #[serde(rename = "L_adv_G")]
    pub adv_g: f64,
    #[serde(rename = "L_adv_Dd")]
    pub adv_dd: f64,
    #[serde(rename = "L_adv_Dc")]
    pub adv_dc: f64,
    #[serde(rename = "L_cyc")]
    pub cyc: f64,
    #[serde(rename = "L_id")]
    pub id: Option<f64>,
    #[serde(rename = "L_cl")]
    pub cl: f64,
    pub total: f64,
}

/// Replay pools for generated images and bottleneck maps of both domains.
#[derive(Debug, Clone)]
pub struct Buffers {
    pub fake_a: ReplayBuffer,
    pub fake_b: ReplayBuffer,
    pub z_a: ReplayBuffer,
    pub z_b: ReplayBuffer,
}

impl Buffers {
    fn new(capacity: usize) -> Self {
        Self {
            fake_a: ReplayBuffer::new(capacity),
            fake_b: ReplayBuffer::new(capacity),
            z_a: ReplayBuffer::new(capacity),
            z_b: ReplayBuffer::new(capacity),
        }
    }

    fn named(&self) -> [(&'static str, &ReplayBuffer); 4] {
        [("fake_a", &self.fake_a), ("fake_b", &self.fake_b), ("z_a", &self.z_a), ("z_b", &self.z_b)]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut ReplayBuffer); 4] {
        [("fake_a", &mut self.fake_a), ("fake_b", &mut self.fake_b), ("z_a", &mut self.z_a), ("z_b", &mut self.z_b)]
    }
}

/// Everything needed to continue training exactly where it stopped.
pub struct TrainState {
    pub config: RunConfig,
    pub weights: LossWeights,
    pub model: Ui2iModel,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    pub buffers: Buffers,
    pub rng: ChaCha8Rng,
    /// Number of completed iterations.
    pub iteration: u64,
}

fn trainer_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRAIN_STREAM);
    rng
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn stats(name: &str, t: &Tensor) -> String {
    let summary = || -> Result<String> {
        let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let finite: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
        let nan = v.iter().filter(|x| x.is_nan()).count();
        let inf = v.iter().filter(|x| x.is_infinite()).count();
        let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
        Ok(format!("{name} {:?}: {nan} NaN, {inf} inf, finite min {min:.4e} max {max:.4e} mean {mean:.4e}", t.dims()))
    };
    summary().unwrap_or_else(|e| format!("{name}: stats unavailable ({e})"))
}

fn check_finite(name: &str, loss: &Tensor, context: &[(&str, &Tensor)]) -> Result<f64> {
    let v = scalar(loss)?;
    if v.is_finite() {
        return Ok(v);
    }
    let mut msg = format!("{name} is {v}");
    for (n, t) in context {
        msg.push_str("; ");
        msg.push_str(&stats(n, t));
    }
    Err(Error::Numerical(msg))
}

fn pair(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(Tensor::cat(&[a, b], 1)?)
}

impl TrainState {
    /// Builds the model and optimizers with seeded initial weights; output
    /// biases are left at 0 until [`TrainState::init_from_data`].
    pub fn new(config: RunConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let model = Ui2iModel::new(&config.model, DType::F32, device, seed)?;
        model.init(seed, None, None)?;
        let adam = config.train.adam();
        Ok(Self {
            weights: config.weights(),
            model,
            gen_opt: Adam::new(adam),
            disc_opt: Adam::new(adam),
            buffers: Buffers::new(config.train.buffer_capacity),
            rng: trainer_rng(seed),
            iteration: 0,
            config,
        })
    }

    /// Re-runs initialization with output biases matched to the per-channel
    /// medians of a sample of patches from each domain.
    pub fn init_from_data(&mut self, a: &PatchDataset, b: &PatchDataset) -> Result<()> {
        let n = self.config.train.median_patches.max(1) as u64;
        let dev = self.model.gen_params.device().clone();
        let sample = |d: &PatchDataset| (0..n).map(|k| d.patch(k, &dev)).collect::<Result<Vec<_>>>();
        let ma = channel_medians(&sample(a)?)?;
        let mb = channel_medians(&sample(b)?)?;
        self.model.init(self.config.train.seed, Some(&ma), Some(&mb))
    }

    fn identity_active(&self) -> bool {
        self.config.model.mode == ClassMode::ThreeClass
    }

    /// One iteration: discriminator update on detached generator outputs and
    /// replay samples, then generator update against the updated
    /// discriminators.
    pub fn train_step(&mut self, x: &Tensor, y: &Tensor, x1: &Tensor, y1: &Tensor) -> Result<LossReport> {
        let mode = self.config.model.mode;
        let identity = self.identity_active();
        let (_, _, h, w) = x.dims4()?;
        if y.dims4()?.2 != h || y.dims4()?.3 != w {
            return Err(Error::invalid_arg("domain patches must share a spatial size"));
        }
        let g = &self.model.generators;
        let dd = &self.model.domain_disc;
        let dc = &self.model.content_disc;

        // generator pass
        let ab = g.forward(Direction::Ab, x)?;
        let ba = g.forward(Direction::Ba, y)?;
        let (y_fake, z_x) = (ab.image, ab.bottleneck);
        let (x_fake, z_y) = (ba.image, ba.bottleneck);
        let back_a = g.forward(Direction::Ba, &y_fake)?;
        let back_b = g.forward(Direction::Ab, &x_fake)?;
        let (x_cyc, z_y_fake) = (back_a.image, back_a.bottleneck);
        let (y_cyc, z_x_fake) = (back_b.image, back_b.bottleneck);
        let ids = if identity {
            let x_id = g.forward(Direction::Ba, x)?.image;
            let y_id = g.forward(Direction::Ab, y)?.image;
            Some((x_id, y_id))
        } else {
            None
        };

        let t = ScaleTransform::sample(&self.config.train.augment, h, w, &mut self.rng);

        // discriminator step
        let fa = self.buffers.fake_a.push_sample(&x_fake, &mut self.rng)?;
        let fb = self.buffers.fake_b.push_sample(&y_fake, &mut self.rng)?;
        let za = self.buffers.z_a.push_sample(&z_x, &mut self.rng)?;
        let zb = self.buffers.z_b.push_sample(&z_y, &mut self.rng)?;
        let real_in = t.apply(&pair(x, y)?)?;
        let fake_in = t.apply(&Tensor::cat(&[pair(&x_fake.detach(), &y_fake.detach())?, pair(&fa, &fb)?], 0)?)?;
        let d_out = DomainDiscOutputs {
            real: dd.forward(&real_in)?,
            fake: dd.forward(&fake_in)?,
            identity: match &ids {
                Some((x_id, y_id)) => Some((
                    dd.forward(&t.apply(&pair(x, &x_id.detach())?)?)?,
                    dd.forward(&t.apply(&pair(y, &y_id.detach())?)?)?,
                )),
                None => None,
            },
        };
        let l_dd = adv_loss_domain_disc(&d_out, mode)?;
        let sx = dc.forward(&Tensor::cat(&[z_x.detach(), za], 0)?)?;
        let sy = dc.forward(&Tensor::cat(&[z_y.detach(), zb], 0)?)?;
        let l_dc = adv_loss_content_disc(&sx, &sy)?;
        let adv_dd = check_finite("L_adv_Dd", &l_dd, &[("D_d(real)", &d_out.real), ("D_d(fake)", &d_out.fake)])?;
        let adv_dc = check_finite("L_adv_Dc", &l_dc, &[("D_c(z_x)", &sx), ("D_c(z_y)", &sy)])?;
        let d_grads = (l_dd + l_dc)?.backward()?;
        self.disc_opt.step(&self.model.disc_params, &d_grads)?;
        drop(d_grads);

        // generator step
        let fake_score = dd.forward(&t.apply(&pair(&x_fake, &y_fake)?)?)?;
        let id_scores = match &ids {
            Some((x_id, y_id)) => Some((dd.forward(&t.apply(&pair(x, x_id)?)?)?, dd.forward(&t.apply(&pair(y, y_id)?)?)?)),
            None => None,
        };
        let content = (dc.forward(&z_x)?, dc.forward(&z_y)?);
        let adv = adv_loss_generators(
            &fake_score,
            id_scores.as_ref().map(|(a, b)| (a, b)),
            Some((&content.0, &content.1)),
            mode,
        )?;
        let cyc = cycle_loss(x, y, &x_cyc, &y_cyc)?;
        let id = match &ids {
            Some((x_id, y_id)) => Some(identity_loss(x, x_id, y, y_id)?),
            None => None,
        };

        let proj = |z: &Tensor| self.model.projection.forward(z);
        let p_x = proj(&z_x)?;
        let p_y = proj(&z_y)?;
        let p_x1 = proj(&g.encode(Domain::A, x1)?.0)?;
        let p_y1 = proj(&g.encode(Domain::B, y1)?.0)?;
        let p_yf = proj(&z_y_fake)?;
        let p_xf = proj(&z_x_fake)?;
        // fourth anchor: the identity image when it exists, otherwise the
        // A→B translation of x
        let p_4 = match &ids {
            Some((x_id, _)) => proj(&g.encode(Domain::A, x_id)?.0)?,
            None => p_yf.clone(),
        };
        let neg_a = vec![&p_x1, &p_y, &p_y1, &p_xf];
        let neg_b = vec![&p_y1, &p_x, &p_x1, &p_yf];
        let configs = [
            ContrastiveConfig { anchor: &p_x, positive: &p_yf, negatives: neg_a.clone() },
            ContrastiveConfig { anchor: &p_y, positive: &p_xf, negatives: neg_b.clone() },
            ContrastiveConfig { anchor: &p_xf, positive: &p_y, negatives: neg_b },
            ContrastiveConfig { anchor: &p_4, positive: &p_x, negatives: neg_a },
        ];
        let cl = cross_domain_contrastive(&configs, self.weights.tau, self.config.train.max_negatives(), &mut self.rng)?;

        let adv_g = check_finite("L_adv_G", &adv, &[("D_d(fake)", &fake_score), ("G_AB(x)", &y_fake), ("G_BA(y)", &x_fake)])?;
        let cyc_v = check_finite("L_cyc", &cyc, &[("x_cyc", &x_cyc), ("y_cyc", &y_cyc)])?;
        let id_v = match &id {
            Some(l) => Some(check_finite("L_id", l, &[])?),
            None => None,
        };
        let cl_v = check_finite("L_cl", &cl, &[("z(x)", &z_x), ("z(y)", &z_y)])?;
        let parts = LossParts { adv, cyc, id, cl };
        let total = total_loss(&parts, &self.weights)?;
        let total_v = check_finite("total", &total, &[])?;
        let g_grads = total.backward()?;
        self.gen_opt.step(&self.model.gen_params, &g_grads)?;

        self.iteration += 1;
        Ok(LossReport {
            iteration: self.iteration,
            adv_g,
            adv_dd,
            adv_dc,
            cyc: cyc_v,
            id: id_v,
            cl: cl_v,
            total: total_v,
        })
    }

    /// Runs one iteration with the patches at stream positions derived from
    /// the iteration counter: `x` at `k`, `x1` at `k + 1` (the next queued
    /// sample), likewise for `y`.
    pub fn step_with_data(&mut self, a: &PatchDataset, b: &PatchDataset) -> Result<LossReport> {
        let dev = self.model.gen_params.device().clone();
        let k = self.iteration;
        let x = a.patch(k, &dev)?;
        let x1 = a.patch(k + 1, &dev)?;
        let y = b.patch(k, &dev)?;
        let y1 = b.patch(k + 1, &dev)?;
        self.train_step(&x, &y, &x1, &y1)
    }

    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        for (prefix, store) in [("gen", &self.model.gen_params), ("disc", &self.model.disc_params)] {
            for (name, p) in store.iter() {
                out.push((format!("param.{prefix}/{name}"), p.var.as_tensor().clone()));
            }
        }
        out.extend(self.gen_opt.state_tensors("adam_gen"));
        out.extend(self.disc_opt.state_tensors("adam_disc"));
        for (name, buf) in self.buffers.named() {
            for (i, t) in buf.items().iter().enumerate() {
                out.push((format!("buffer.{name}/{i:06}"), t.clone()));
            }
        }
        out
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            iteration: self.iteration,
            seed: self.config.train.seed,
            config: self.config.clone(),
            config_hash: self.config.hash(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            gen_adam_steps: self.gen_opt.step_count(),
            disc_adam_steps: self.disc_opt.step_count(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(path, &self.meta(), &self.checkpoint_tensors())
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let (meta, tensors) = checkpoint::load_checkpoint(path, device)?;
        if meta.config.hash() != meta.config_hash {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let mut state = Self::new(meta.config.clone(), device)?;
        let section = |prefix: &str| -> BTreeMap<String, Tensor> {
            tensors
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
                .collect()
        };
        state.model.gen_params.load(&section("param.gen/"))?;
        state.model.disc_params.load(&section("param.disc/"))?;
        state.gen_opt.load_state("adam_gen", meta.gen_adam_steps, &tensors)?;
        state.disc_opt.load_state("adam_disc", meta.disc_adam_steps, &tensors)?;
        for (name, buf) in state.buffers.named_mut() {
            buf.set_items(section(&format!("buffer.{name}/")).into_values().collect());
        }
        let pos: u128 = meta.rng_word_pos.parse().map_err(|_| Error::Checkpoint("bad RNG position".into()))?;
        state.rng.set_word_pos(pos);
        state.iteration = meta.iteration;
        Ok(state)
    }
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint-{iteration}"))
}

fn last_logged_iteration(path: &Path) -> Result<Option<u64>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut last = None;
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: LossReport = serde_json::from_str(&line)?;
        last = Some(r.iteration);
    }
    Ok(last)
}

/// Continues `state` until `config.train.iterations`, writing the loss log
/// and checkpoints into `out` when given. Returns the reports of the
/// iterations run.
pub fn train_from(state: &mut TrainState, a: &PatchDataset, b: &PatchDataset, out: Option<&Path>) -> Result<Vec<LossReport>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid_arg("both datasets must be non-empty"));
    }
    let cfg = state.config.train.clone();
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(LOSS_LOG);
            if let Some(last) = last_logged_iteration(&path)? {
                if last > state.iteration {
                    return Err(Error::InvalidState(format!(
                        "{} already records iteration {last}, past the resume point {}",
                        path.display(),
                        state.iteration
                    )));
                }
            }
            Some(OpenOptions::new().create(true).append(true).open(path)?)
        }
        None => None,
    };
    let mut reports = Vec::new();
    while state.iteration < cfg.iterations {
        let r = state.step_with_data(a, b)?;
        if let Some(f) = log.as_mut() {
            if r.iteration % cfg.log_every == 0 || r.iteration == cfg.iterations {
                writeln!(f, "{}", serde_json::to_string(&r)?)?;
                f.flush()?;
            }
        }
        if r.iteration % 50 == 0 {
            log::info!(
                "iter {} total {:.4} adv_G {:.4} cyc {:.4} cl {:.4} D_d {:.4} D_c {:.4}",
                r.iteration, r.total, r.adv_g, r.cyc, r.cl, r.adv_dd, r.adv_dc
            );
        }
        if let Some(dir) = out {
            if r.iteration % cfg.checkpoint_every == 0 || r.iteration == cfg.iterations {
                state.save(&checkpoint_path(dir, r.iteration))?;
            }
        }
        reports.push(r);
    }
    Ok(reports)
}

/// Fresh training run with data-matched output biases.
pub fn train(config: &RunConfig, a: &PatchDataset, b: &PatchDataset, out: Option<&Path>, device: &Device) -> Result<(TrainState, Vec<LossReport>)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid_arg("both datasets must be non-empty"));
    }
    for (d, ds) in [(Domain::A, a), (Domain::B, b)] {
        if ds.channels != config.model.channels(d) {
            return Err(Error::invalid_arg(format!(
                "domain {d:?} images have {} channels, model expects {}",
                ds.channels,
                config.model.channels(d)
            )));
        }
    }
    let mut state = TrainState::new(config.clone(), device)?;
    state.init_from_data(a, b)?;
    let reports = train_from(&mut state, a, b, out)?;
    Ok((state, reports))
}

/// Translates `(1, C, H, W)` images in `[-1, 1]`; each is padded to the
/// model's divisor, translated and cropped back.
pub fn translate(model: &Ui2iModel, images: &[Tensor], dir: Direction) -> Result<Vec<Tensor>> {
    let src = model.cfg.channels(dir.source());
    let dtype = model.gen_params.dtype();
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let img = if img.rank() == 3 { img.unsqueeze(0)? } else { img.clone() };
        let c = img.dim(1)?;
        if c != src {
            return Err(Error::invalid_arg(format!(
                "direction {dir:?} expects {src}-channel inputs, got {c}"
            )));
        }
        let (padded, crop) = pad_to_divisible(&img.to_dtype(dtype)?, model.cfg.divisor())?;
        let y = no_grad(|| model.generators.forward(dir, &padded))?.image;
        out.push(crop.apply(&y)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TranslateSummary {
    pub direction: Direction,
    pub images: usize,
    /// Mean `|x - G_back(G(x))|` over all inputs, in the `[-1, 1]` range the
    /// training cycle loss uses.
    pub mean_cycle_l1: f64,
}

/// Translates every image of `input` into `output`, keeping file names,
/// container format and bit depth.
pub fn translate_dir(model: &Ui2iModel, input: &Path, output: &Path, dir: Direction) -> Result<TranslateSummary> {
    let files = list_images(input)?;
    if files.is_empty() {
        return Err(Error::invalid_arg(format!("no PNG/TIFF images in {}", input.display())));
    }
    let back = match dir {
        Direction::Ab => Direction::Ba,
        Direction::Ba => Direction::Ab,
    };
    let device = model.gen_params.device().clone();
    let mut cycle = 0.0;
    for path in &files {
        let img = load_image(path)?;
        let x = img.to_tensor(&device)?;
        let y = translate(model, std::slice::from_ref(&x), dir)?.remove(0);
        let x_back = translate(model, std::slice::from_ref(&y), back)?.remove(0);
        cycle += (x.to_dtype(DType::F64)? - x_back.to_dtype(DType::F64)?)?.abs()?.mean_all()?.to_scalar::<f64>()?;
        let name = path.file_name().expect("listed files have names");
        save_image(&output.join(name), &StoredImage::from_tensor(&y, img.depth)?)?;
    }
    Ok(TranslateSummary { direction: dir, images: files.len(), mean_cycle_l1: cycle / files.len() as f64 })
}
