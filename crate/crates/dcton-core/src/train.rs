//! Two-phase training: warp pretraining of the mask network and spatial
//! transformer, then adversarial cycle-consistency training of the full
//! generator with the transformer frozen.
//!
//! Determinism contract: with a fixed [`TrainConfig`] and dataset, every
//! run produces byte-identical loss logs and checkpoints. Shuffling is
//! re-seeded per epoch from (seed, phase, epoch), so resuming from a
//! checkpoint reproduces the uninterrupted run exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, TryOnSample, LABEL_CLOTHES, LABEL_SKIN};
use crate::error::{Error, Result};
use crate::geometry::TransformMatrix;
use crate::graph::{Gradients, Graph, Var};
use crate::losses::{
    adversarial_loss, content_preserving_loss, cycle_loss, generator_adversarial_loss,
    mask_supervision_loss, perceptual_loss, total_loss, warp_reconstruction_loss, LambdaConfig,
    LossReport, RandomConvExtractor,
};
use crate::nets::{
    self, save_checkpoint, GenInputs, Generator, ModelConfig, Params, PatchDiscriminator,
};
use crate::tensor::Tensor;

/// Namespaces for binding both stores into one graph.
const NS_GEN: u64 = 1;
const NS_DISC: u64 = 2;

// ── Configuration ───────────────────────────────────────────────────────

/// All training knobs. Serializable as flat `key=value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Cycle-training epochs.
    pub epochs: usize,
    /// Warp pretraining epochs (before cycle training).
    pub stn_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    pub lambda_cyc: f64,
    pub lambda_vgg: f64,
    pub lambda_pre: f64,
    /// Weight of the transform-consistency regularizer in pretraining.
    pub stn_reg_weight: f64,
    /// Structural switch: drop the skin pyramid encoder.
    pub ablate_skin_encoder: bool,
    /// Switch: drop the transform-consistency regularizer.
    pub ablate_stn_reg: bool,
    /// Save an intermediate checkpoint every N cycle epochs (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            stn_epochs: 3,
            batch_size: 4,
            lr: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            seed: 0,
            lambda_cyc: 10.0,
            lambda_vgg: 10.0,
            lambda_pre: 10.0,
            stn_reg_weight: 1.0,
            ablate_skin_encoder: false,
            ablate_stn_reg: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let b = |v: bool| if v { "true" } else { "false" }.to_string();
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("stn_epochs".into(), self.stn_epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("lr".into(), format!("{:e}", self.lr)),
            ("adam_beta1".into(), self.adam_beta1.to_string()),
            ("adam_beta2".into(), self.adam_beta2.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("lambda_cyc".into(), self.lambda_cyc.to_string()),
            ("lambda_vgg".into(), self.lambda_vgg.to_string()),
            ("lambda_pre".into(), self.lambda_pre.to_string()),
            ("stn_reg_weight".into(), self.stn_reg_weight.to_string()),
            ("ablate_skin_encoder".into(), b(self.ablate_skin_encoder)),
            ("ablate_stn_reg".into(), b(self.ablate_stn_reg)),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
        ]
    }

    fn apply(&mut self, key: &str, value: &str, origin: &Path) -> Result<bool> {
        let bad = |what: &str| Error::format(origin, format!("bad value for {what}: {value}"));
        match key {
            "epochs" => self.epochs = value.parse().map_err(|_| bad(key))?,
            "stn_epochs" => self.stn_epochs = value.parse().map_err(|_| bad(key))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key))?,
            "lr" => self.lr = value.parse().map_err(|_| bad(key))?,
            "adam_beta1" => self.adam_beta1 = value.parse().map_err(|_| bad(key))?,
            "adam_beta2" => self.adam_beta2 = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "lambda_cyc" => self.lambda_cyc = value.parse().map_err(|_| bad(key))?,
            "lambda_vgg" => self.lambda_vgg = value.parse().map_err(|_| bad(key))?,
            "lambda_pre" => self.lambda_pre = value.parse().map_err(|_| bad(key))?,
            "stn_reg_weight" => self.stn_reg_weight = value.parse().map_err(|_| bad(key))?,
            "ablate_skin_encoder" => {
                self.ablate_skin_encoder = value.parse().map_err(|_| bad(key))?
            }
            "ablate_stn_reg" => self.ablate_stn_reg = value.parse().map_err(|_| bad(key))?,
            "checkpoint_every" => self.checkpoint_every = value.parse().map_err(|_| bad(key))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Strict parse: every key must be a known configuration field.
    pub fn from_pairs(pairs: &[(String, String)], origin: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in pairs {
            if !cfg.apply(k, v, origin)? {
                return Err(Error::format(origin, format!("unknown configuration key: {k}")));
            }
        }
        Ok(cfg)
    }

    /// Lenient parse for checkpoint echoes that carry extra state keys.
    pub fn from_pairs_loose(pairs: &[(String, String)], origin: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in pairs {
            cfg.apply(k, v, origin)?;
        }
        Ok(cfg)
    }

    /// Read a flat `key=value` file ('#' comments and blank lines allowed).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("expected key=value, got: {line}")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (k, v) in self.to_pairs() {
            writeln!(text, "{k}={v}").expect("string write");
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

// ── Optimizer ───────────────────────────────────────────────────────────

/// Adam with per-parameter first/second moment tensors.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    fn new(params: &Params<f32>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = params.entries().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let v = params.entries().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam { lr, beta1, beta2, eps: 1e-8, t: 0, m, v }
    }

    /// One update; `grads[i]` pairs with the i-th parameter, `None` skips.
    fn step(&mut self, params: &mut Params<f32>, grads: &[Option<Tensor<f32>>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr = self.lr;
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(gr) = &grads[i] else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            let g = gr.data();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m[j] as f64 / bc1;
                let vh = v[j] as f64 / bc2;
                p[j] -= (lr * mh / (vh.sqrt() + self.eps)) as f32;
            }
        }
    }
}

// ── Batching ────────────────────────────────────────────────────────────

/// One training batch of stacked sample tensors.
pub struct Batch {
    person: Tensor<f32>,
    skin: Tensor<f32>,
    clothes: Tensor<f32>,
    target: Tensor<f32>,
    descriptor: Tensor<f32>,
    mask_clothes: Tensor<f32>,
    mask_skin: Tensor<f32>,
}

/// Stack samples into batch tensors (skin and reference masks included).
/// `targets[i].clothes` is the garment sample i tries on in pass 1.
pub fn make_batch(samples: &[&TryOnSample], targets: &[&TryOnSample]) -> Batch {
    assert_eq!(samples.len(), targets.len(), "one target garment per sample");
    let (h, w) = (samples[0].person.dim(1), samples[0].person.dim(2));
    let skins: Vec<Tensor<f32>> =
        samples.iter().map(|s| data::extract_skin(&s.person, &s.parse)).collect();
    let mc: Vec<Tensor<f32>> =
        samples.iter().map(|s| data::parse_mask(&s.parse, LABEL_CLOTHES, h, w)).collect();
    let ms: Vec<Tensor<f32>> =
        samples.iter().map(|s| data::parse_mask(&s.parse, LABEL_SKIN, h, w)).collect();
    Batch {
        person: data::stack(&samples.iter().map(|s| &s.person).collect::<Vec<_>>()),
        skin: data::stack(&skins.iter().collect::<Vec<_>>()),
        clothes: data::stack(&samples.iter().map(|s| &s.clothes).collect::<Vec<_>>()),
        target: data::stack(&targets.iter().map(|s| &s.clothes).collect::<Vec<_>>()),
        descriptor: data::stack(&samples.iter().map(|s| &s.descriptor).collect::<Vec<_>>()),
        mask_clothes: data::stack(&mc.iter().collect::<Vec<_>>()),
        mask_skin: data::stack(&ms.iter().collect::<Vec<_>>()),
    }
}

fn collect_grads(
    g: &Graph<f32>,
    grads: &Gradients<f32>,
    params: &Params<f32>,
) -> Vec<Option<Tensor<f32>>> {
    params
        .ids()
        .enumerate()
        .map(|(i, _)| g.param_var(params.uid(i)).and_then(|v| grads.get(v).cloned()))
        .collect()
}

// ── Pretraining report ──────────────────────────────────────────────────

/// Per-iteration warp pretraining losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainReport {
    pub iteration: u64,
    /// Masked reconstruction of the person's garment by the warp.
    pub warp: f64,
    /// Mask supervision.
    pub mask: f64,
    /// Transform-consistency regularizer (0 when disabled or first step).
    pub reg: f64,
    pub total: f64,
}

impl PretrainReport {
    pub fn csv_header() -> &'static str {
        "iteration,warp,mask,reg,total"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.iteration, self.warp, self.mask, self.reg, self.total
        )
    }
}

// ── Trainer ─────────────────────────────────────────────────────────────

/// Holds model, discriminators and optimizer state across steps.
pub struct Trainer {
    pub config: TrainConfig,
    pub gen_params: Params<f32>,
    pub disc_params: Params<f32>,
    pub generator: Generator,
    pub disc_person: PatchDiscriminator,
    pub disc_skin: PatchDiscriminator,
    extractor: RandomConvExtractor<f32>,
    adam_gen: Adam,
    adam_disc: Adam,
    prev_transform: Option<TransformMatrix>,
    pub iteration: u64,
    /// Next cycle epoch to run (completed epochs count).
    pub next_epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Self {
        let mut gen_params = Params::with_namespace(NS_GEN);
        let generator = Generator::build(
            &mut gen_params,
            ModelConfig { skin_encoder: !config.ablate_skin_encoder },
            config.seed,
        );
        let mut disc_params = Params::with_namespace(NS_DISC);
        let disc_person =
            PatchDiscriminator::build(&mut disc_params, config.seed ^ 0xD15C_0001, "disc.person");
        let disc_skin =
            PatchDiscriminator::build(&mut disc_params, config.seed ^ 0xD15C_0002, "disc.skin");
        let extractor = RandomConvExtractor::new(config.seed ^ 0x7065_7263);
        let adam_gen = Adam::new(&gen_params, config.lr, config.adam_beta1, config.adam_beta2);
        let adam_disc = Adam::new(&disc_params, config.lr, config.adam_beta1, config.adam_beta2);
        Trainer {
            config,
            gen_params,
            disc_params,
            generator,
            disc_person,
            disc_skin,
            extractor,
            adam_gen,
            adam_disc,
            prev_transform: None,
            iteration: 0,
            next_epoch: 0,
        }
    }

    fn lambdas(&self) -> LambdaConfig {
        LambdaConfig {
            cyc: self.config.lambda_cyc,
            vgg: self.config.lambda_vgg,
            pre: self.config.lambda_pre,
        }
    }

    /// One warp pretraining step (mask network + spatial transformer).
    pub fn pretrain_step(&mut self, batch: &Batch) -> Result<PretrainReport> {
        let mut g = Graph::<f32>::new();
        let person = g.leaf(batch.person.clone());
        let clothes = g.leaf(batch.clothes.clone());
        let descriptor = g.leaf(batch.descriptor.clone());
        let gt_c = g.leaf(batch.mask_clothes.clone());
        let gt_s = g.leaf(batch.mask_skin.clone());

        let bind = nets::Binder::new(&self.gen_params, false);
        let (mc, ms) = self.generator.mpn.forward(&mut g, bind, descriptor, clothes);
        let stn_out = self.generator.stn.forward(&mut g, bind, mc, clothes)?;
        let warp = warp_reconstruction_loss(&mut g, stn_out.warped, person, gt_c);
        let mask = mask_supervision_loss(&mut g, mc, ms, gt_c, gt_s);
        let mut total = g.add(warp, mask);

        let mut reg_val = 0.0;
        if !self.config.ablate_stn_reg {
            let mean_dst = g.mean_batch(stn_out.dst_points);
            if let Some(prev) = &self.prev_transform {
                let reg = g.homog_reg(prev, mean_dst)?;
                reg_val = g.value(reg).item() as f64;
                let weighted = g.scale(reg, self.config.stn_reg_weight);
                total = g.add(total, weighted);
            }
            let mv = g.value(mean_dst);
            let pts: Vec<[f64; 2]> = (0..mv.dim(0))
                .map(|j| [mv.data()[j * 2] as f64, mv.data()[j * 2 + 1] as f64])
                .collect();
            self.prev_transform = Some(TransformMatrix::from_points(&pts));
        }

        self.iteration += 1;
        let report = PretrainReport {
            iteration: self.iteration,
            warp: g.value(warp).item() as f64,
            mask: g.value(mask).item() as f64,
            reg: reg_val,
            total: g.value(total).item() as f64,
        };
        if !report.total.is_finite() {
            return Err(Error::Diverged {
                report: LossReport {
                    iteration: report.iteration,
                    adv: 0.0,
                    cyc: 0.0,
                    pre: 0.0,
                    vgg: 0.0,
                    mpn: report.mask,
                    total: report.total,
                },
            });
        }
        let grads = g.backward(total);
        let gen_grads = collect_grads(&g, &grads, &self.gen_params);
        drop(grads);
        drop(g);
        self.adam_gen.step(&mut self.gen_params, &gen_grads);
        Ok(report)
    }

    /// One adversarial cycle step: generator update from the two-pass
    /// cycle objective, then a discriminator update on detached outputs.
    pub fn cycle_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let mut g = Graph::<f32>::new();
        let person = g.leaf(batch.person.clone());
        let skin = g.leaf(batch.skin.clone());
        let clothes = g.leaf(batch.clothes.clone());
        let target = g.leaf(batch.target.clone());
        let descriptor = g.leaf(batch.descriptor.clone());
        let gt_c = g.leaf(batch.mask_clothes.clone());
        let gt_s = g.leaf(batch.mask_skin.clone());

        // Pass 1: put the target garment on.
        let pass1 = self.generator.forward(
            &mut g,
            &self.gen_params,
            &GenInputs { person, skin, clothes: target, descriptor },
            true,
        )?;
        // Skin of the intermediate person: its own image times its
        // predicted skin mask, mid-gray outside, exactly like the
        // dataset's skin extracts. Gradients flow through both factors.
        let skin_tryon = g.mul_bcast_c(pass1.image, pass1.mask_skin);
        // Pass 2: put the original garment back (same weights).
        let pass2 = self.generator.forward(
            &mut g,
            &self.gen_params,
            &GenInputs { person: pass1.image, skin: skin_tryon, clothes, descriptor },
            true,
        )?;
        let skin_restored = g.mul_bcast_c(pass2.image, pass2.mask_skin);

        let cyc = cycle_loss(&mut g, pass2.image, person, skin_restored, skin);
        let pre = content_preserving_loss(
            &mut g,
            pass1.image,
            pass2.image,
            person,
            pass1.mask_skin,
            pass1.mask_clothes,
        );
        let vgg = perceptual_loss(
            &mut g,
            &self.extractor,
            pass1.warped_clothes,
            pass1.image,
            pass1.mask_clothes,
            pass2.warped_clothes,
            pass2.image,
            pass2.mask_clothes,
        );
        let m1 = mask_supervision_loss(&mut g, pass1.mask_clothes, pass1.mask_skin, gt_c, gt_s);
        let m2 = mask_supervision_loss(&mut g, pass2.mask_clothes, pass2.mask_skin, gt_c, gt_s);
        let mpn = g.add(m1, m2);
        let sc_tryon = self.disc_person.forward(&mut g, &self.disc_params, pass1.image);
        let sc_restored = self.disc_person.forward(&mut g, &self.disc_params, pass2.image);
        let sc_skin_t = self.disc_skin.forward(&mut g, &self.disc_params, skin_tryon);
        let sc_skin_r = self.disc_skin.forward(&mut g, &self.disc_params, skin_restored);
        let adv =
            generator_adversarial_loss(&mut g, &[sc_tryon, sc_restored, sc_skin_t, sc_skin_r]);
        let lambdas = self.lambdas();
        // The logged total is the weighted composite objective; mask
        // supervision is an auxiliary term added for the update only and
        // reported in its own column.
        let total = total_loss(&mut g, adv, cyc, pre, vgg, &lambdas);
        let objective = g.add(total, mpn);

        self.iteration += 1;
        let adv_v = g.value(adv).item() as f64;
        let cyc_v = g.value(cyc).item() as f64;
        let pre_v = g.value(pre).item() as f64;
        let vgg_v = g.value(vgg).item() as f64;
        let report = LossReport {
            iteration: self.iteration,
            adv: adv_v,
            cyc: cyc_v,
            pre: pre_v,
            vgg: vgg_v,
            mpn: g.value(mpn).item() as f64,
            // Composited from the logged terms so the reported columns
            // satisfy the weighted-sum identity exactly; the graph node
            // holds the same quantity up to single-precision rounding.
            total: adv_v + lambdas.cyc * cyc_v + lambdas.vgg * vgg_v + lambdas.pre * pre_v,
        };
        if !g_item(&g, objective).is_finite() {
            return Err(Error::Diverged { report });
        }

        let fake_person_t = g.value(pass1.image).clone();
        let fake_person_r = g.value(pass2.image).clone();
        let fake_skin_t = g.value(skin_tryon).clone();
        let fake_skin_r = g.value(skin_restored).clone();
        let grads = g.backward(objective);
        let gen_grads = collect_grads(&g, &grads, &self.gen_params);
        drop(grads);
        drop(g);
        self.adam_gen.step(&mut self.gen_params, &gen_grads);

        // Discriminator update on detached fakes: the person judge sees
        // both generated people, the skin judge both synthesized skins.
        let mut gd = Graph::<f32>::new();
        let real_person = gd.leaf(batch.person.clone());
        let real_skin = gd.leaf(batch.skin.clone());
        let fp_t = gd.leaf(fake_person_t);
        let fp_r = gd.leaf(fake_person_r);
        let fs_t = gd.leaf(fake_skin_t);
        let fs_r = gd.leaf(fake_skin_r);
        let sp_t = self.disc_person.forward(&mut gd, &self.disc_params, fp_t);
        let sp_r = self.disc_person.forward(&mut gd, &self.disc_params, fp_r);
        let ss_t = self.disc_skin.forward(&mut gd, &self.disc_params, fs_t);
        let ss_r = self.disc_skin.forward(&mut gd, &self.disc_params, fs_r);
        let sp_real = self.disc_person.forward(&mut gd, &self.disc_params, real_person);
        let ss_real = self.disc_skin.forward(&mut gd, &self.disc_params, real_skin);
        let a = adversarial_loss(&mut gd, sp_t, sp_r, ss_t, ss_r, sp_real, ss_real);
        let dloss = gd.add(a.disc_person, a.disc_skin);
        if !(g_item(&gd, dloss)).is_finite() {
            return Err(Error::Diverged { report });
        }
        let dgrads = gd.backward(dloss);
        let disc_grads = collect_grads(&gd, &dgrads, &self.disc_params);
        drop(dgrads);
        drop(gd);
        self.adam_disc.step(&mut self.disc_params, &disc_grads);

        Ok(report)
    }

    /// Persist model, discriminators and optimizer state under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut config = self.config.to_pairs();
        config.push(("iteration".into(), self.iteration.to_string()));
        config.push(("next_epoch".into(), self.next_epoch.to_string()));
        let model: Vec<(&str, &Tensor<f32>)> = self.gen_params.entries().collect();
        save_checkpoint(&dir.join("model"), &model, &config)?;
        let disc: Vec<(&str, &Tensor<f32>)> = self.disc_params.entries().collect();
        save_checkpoint(&dir.join("disc"), &disc, &[])?;
        let mut opt_names: Vec<String> = Vec::new();
        for (name, _) in self.gen_params.entries() {
            opt_names.push(format!("{name}.m"));
            opt_names.push(format!("{name}.v"));
        }
        for (name, _) in self.disc_params.entries() {
            opt_names.push(format!("{name}.m"));
            opt_names.push(format!("{name}.v"));
        }
        let mut opt_entries: Vec<(&str, &Tensor<f32>)> = Vec::new();
        for (i, _) in self.gen_params.entries().enumerate() {
            opt_entries.push((&opt_names[i * 2], &self.adam_gen.m[i]));
            opt_entries.push((&opt_names[i * 2 + 1], &self.adam_gen.v[i]));
        }
        let base = self.gen_params.len() * 2;
        for (i, _) in self.disc_params.entries().enumerate() {
            opt_entries.push((&opt_names[base + i * 2], &self.adam_disc.m[i]));
            opt_entries.push((&opt_names[base + i * 2 + 1], &self.adam_disc.v[i]));
        }
        let opt_config = vec![
            ("gen_t".to_string(), self.adam_gen.t.to_string()),
            ("disc_t".to_string(), self.adam_disc.t.to_string()),
        ];
        save_checkpoint(&dir.join("opt"), &opt_entries, &opt_config)
    }

    /// Restore a trainer from a checkpoint directory written by [`save`].
    ///
    /// [`save`]: Trainer::save
    pub fn load(dir: &Path) -> Result<Self> {
        let model_dir = dir.join("model");
        let (config_pairs, _) = nets::read_manifest(&model_dir)?;
        let config = TrainConfig::from_pairs_loose(&config_pairs, &model_dir)?;
        let mut trainer = Trainer::new(config);
        nets::load_into(&model_dir, &mut trainer.gen_params)?;
        nets::load_into(&dir.join("disc"), &mut trainer.disc_params)?;
        let opt_dir = dir.join("opt");
        let (opt_config, _) = nets::read_manifest(&opt_dir)?;
        let parse_t = |key: &str| -> Result<u64> {
            nets::config_value(&opt_config, key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(&opt_dir, format!("missing optimizer key {key}")))
        };
        trainer.adam_gen.t = parse_t("gen_t")?;
        trainer.adam_disc.t = parse_t("disc_t")?;
        for (i, (name, _)) in trainer.gen_params.entries().enumerate() {
            trainer.adam_gen.m[i] = crate::tfile::read_tensor(&opt_dir.join(format!("{name}.m.tns")))?;
            trainer.adam_gen.v[i] = crate::tfile::read_tensor(&opt_dir.join(format!("{name}.v.tns")))?;
        }
        for (i, (name, _)) in trainer.disc_params.entries().enumerate() {
            trainer.adam_disc.m[i] =
                crate::tfile::read_tensor(&opt_dir.join(format!("{name}.m.tns")))?;
            trainer.adam_disc.v[i] =
                crate::tfile::read_tensor(&opt_dir.join(format!("{name}.v.tns")))?;
        }
        trainer.iteration = nets::config_value(&config_pairs, "iteration")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        trainer.next_epoch = nets::config_value(&config_pairs, "next_epoch")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        Ok(trainer)
    }
}

fn g_item(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).item() as f64
}

// ── Driver ──────────────────────────────────────────────────────────────

/// Everything a finished run produced.
pub struct TrainSummary {
    pub pretrain_reports: Vec<PretrainReport>,
    pub reports: Vec<LossReport>,
    /// Directory of the final checkpoint (`model/`, `disc/`, `opt/`).
    pub checkpoint: PathBuf,
}

fn epoch_rng(seed: u64, phase: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ phase.wrapping_mul(0xA076_1D64_78BD_642F)
            ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    )
}

fn shuffled_order(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order
}

/// For each sample, a uniformly drawn other sample whose garment it will
/// try on. A single-sample set falls back to its own garment.
fn draw_partners(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::Rng;
    (0..len)
        .map(|i| {
            if len == 1 {
                return 0;
            }
            let j = rng.gen_range(0..len - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect()
}

/// Run warp pretraining followed by cycle training; write `loss_log.csv`,
/// `pretrain_log.csv` and checkpoints under `out_dir`. With `resume`, the
/// stored state continues from its recorded epoch (pretraining is not
/// repeated); the resumed run must use a config equal to the stored one
/// except for `epochs` and `checkpoint_every`.
pub fn train(
    dataset: &[TryOnSample],
    config: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    mut progress: Option<&mut dyn FnMut(&LossReport)>,
) -> Result<TrainSummary> {
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if dataset.len() < config.batch_size {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} samples but the batch size is {}",
            dataset.len(),
            config.batch_size
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut trainer = match resume {
        Some(dir) => {
            let t = Trainer::load(dir)?;
            let mut stored = t.config.clone();
            let mut wanted = config.clone();
            stored.epochs = 0;
            wanted.epochs = 0;
            stored.checkpoint_every = 0;
            wanted.checkpoint_every = 0;
            if stored != wanted {
                return Err(Error::InvalidArgument(
                    "resume config differs from the checkpoint (only epochs and \
                     checkpoint_every may change)"
                        .into(),
                ));
            }
            let mut t = t;
            t.config.epochs = config.epochs;
            t.config.checkpoint_every = config.checkpoint_every;
            t
        }
        None => Trainer::new(config.clone()),
    };

    let mut pretrain_reports = Vec::new();
    if resume.is_none() {
        // Pretraining is self-supervised on paired data: each sample warps
        // its own garment, so the target slot is unused.
        for epoch in 0..trainer.config.stn_epochs {
            let mut rng = epoch_rng(trainer.config.seed, 0x5052_4554, epoch);
            for chunk in shuffled_order(dataset.len(), &mut rng)
                .chunks_exact(trainer.config.batch_size)
            {
                let refs: Vec<&TryOnSample> = chunk.iter().map(|&i| &dataset[i]).collect();
                let batch = make_batch(&refs, &refs);
                pretrain_reports.push(trainer.pretrain_step(&batch)?);
            }
        }
    }

    let mut reports = Vec::new();
    let epochs = trainer.config.epochs;
    while trainer.next_epoch < epochs {
        let epoch = trainer.next_epoch;
        let mut rng = epoch_rng(trainer.config.seed, 0x4359_434C, epoch);
        // Each sample tries on a uniformly re-drawn other garment every
        // epoch; the order is an independent shuffle of the same stream.
        let partners = draw_partners(dataset.len(), &mut rng);
        for chunk in shuffled_order(dataset.len(), &mut rng).chunks_exact(trainer.config.batch_size)
        {
            let samples: Vec<&TryOnSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let targets: Vec<&TryOnSample> =
                chunk.iter().map(|&i| &dataset[partners[i]]).collect();
            let batch = make_batch(&samples, &targets);
            let report = trainer.cycle_step(&batch)?;
            if let Some(cb) = progress.as_deref_mut() {
                cb(&report);
            }
            reports.push(report);
        }
        trainer.next_epoch = epoch + 1;
        let every = trainer.config.checkpoint_every;
        if every > 0 && trainer.next_epoch % every == 0 && trainer.next_epoch < epochs {
            trainer.save(&out_dir.join(format!("checkpoint_e{:03}", trainer.next_epoch)))?;
        }
    }

    let checkpoint = out_dir.join("checkpoint_final");
    trainer.save(&checkpoint)?;

    let mut pre_log = String::from(PretrainReport::csv_header());
    pre_log.push('\n');
    for r in &pretrain_reports {
        pre_log.push_str(&r.to_csv());
        pre_log.push('\n');
    }
    let pre_path = out_dir.join("pretrain_log.csv");
    fs::write(&pre_path, pre_log).map_err(|e| Error::io(&pre_path, e))?;

    let mut log = String::from(LossReport::csv_header());
    log.push('\n');
    for r in &reports {
        log.push_str(&r.to_csv());
        log.push('\n');
    }
    let log_path = out_dir.join("loss_log.csv");
    fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;

    Ok(TrainSummary { pretrain_reports, reports, checkpoint })
}
