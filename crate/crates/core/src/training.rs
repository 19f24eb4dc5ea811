//! Hallucination pose sampling and the two-step training procedure.
//!
//! Step I runs both network complexes on the sampled hallucination
//! poses (source pose first, the rest drawn from a different clothes
//! identity) to obtain the estimated texture map and the hallucination
//! texture feature. Step II reruns the hallucination complex alone on
//! the supervised target poses, attending to that retained feature;
//! rendered targets come from compositing the step-I texture map over
//! the generated images. All losses are evaluated against the target
//! ground truths in a single graph so the texture network receives its
//! supervision through the kept feature (a detach flag severs that link
//! for ablation). One generator and one discriminator ADAM update are
//! computed per iteration from the same pre-update parameter state.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::nn::{seeded_rng, Adam, ParamId, ParamStore};
use crate::autodiff::{Arr, Graph, Var};
use crate::config::TrainerConfig;
use crate::data::{derive_seed, Dataset, PairDraw, SampleRecord};
use crate::error::{Error, Result};
use crate::geometry::{
    hwc_to_chw, mask_chw, render_composite_graph, rescale_coordinates, texture_pose_from_image_pose,
    unwrap_to_texture, CoordinateAnnotation, PoseHeatmap,
};
use crate::losses::{
    loss_adv, loss_consistency, loss_coord, loss_correctness, loss_rec, loss_reg_single,
    loss_reg_tv_single, total_loss, AdvSide, LossReport, LossTerms,
};
use crate::networks::{FeaturePyramid, Model};

/// One training example: source record, same-identity targets, and the
/// donor pool (identity indices) for hallucination pose sampling.
pub struct TrainingSample {
    pub source: SampleRecord,
    pub targets: Vec<SampleRecord>,
    pub donor_pool: Vec<usize>,
}

pub fn load_training_sample(ds: &Dataset, draw: &PairDraw) -> Result<TrainingSample> {
    let source = ds.load(draw.identity, draw.source_pose)?;
    let mut targets = Vec::with_capacity(draw.target_poses.len());
    for &p in &draw.target_poses {
        targets.push(ds.load(draw.identity, p)?);
    }
    Ok(TrainingSample {
        source,
        targets,
        donor_pool: draw.donor_pool.clone(),
    })
}

/// Image pose, texture pose, and coordinate annotation of one
/// hallucination view.
pub struct PoseTriple {
    pub p: PoseHeatmap,
    pub b: PoseHeatmap,
    pub c: CoordinateAnnotation,
}

fn triple_from_record(rec: &SampleRecord, sigma: f64) -> Result<PoseTriple> {
    let p = rec.image_pose(sigma);
    let b = texture_pose_from_image_pose(&p, &rec.coord)?;
    Ok(PoseTriple {
        p,
        b,
        c: rec.coord.clone(),
    })
}

/// Hallucination poses: the source pose first, then `n_h - 1` poses
/// drawn from one donor identity with different clothes.
pub fn sample_hallucination_poses(
    ds: &Dataset,
    sample: &TrainingSample,
    n_h: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PoseTriple>> {
    if n_h == 0 {
        return Err(Error::contract("n_h must be at least 1"));
    }
    let mut triples = vec![triple_from_record(&sample.source, sigma)?];
    if n_h == 1 {
        return Ok(triples);
    }
    if sample.donor_pool.is_empty() {
        return Err(Error::contract(
            "hallucination sampling needs a non-empty donor pool when n_h > 1",
        ));
    }
    let donor_identity = sample.donor_pool[rng.random_range(0..sample.donor_pool.len())];
    let n_poses = ds.identities[donor_identity].poses.len();
    for _ in 1..n_h {
        let pose = rng.random_range(0..n_poses);
        let rec = ds.load(donor_identity, pose)?;
        triples.push(triple_from_record(&rec, sigma)?);
    }
    Ok(triples)
}

/// Per-iteration outcome: the eight generator terms plus the weighted
/// total, and the discriminator objective kept separate.
#[derive(Clone, Copy, Debug)]
pub struct IterationOutcome {
    pub report: LossReport,
    pub disc: f64,
}

/// Nearest-neighbor mask downsampling to a flow level's resolution.
fn mask_at_scale(mask: &Array2<f64>, h: usize, w: usize) -> Arr {
    let (sh, sw) = mask.dim();
    let mut out = Array3::<f64>::zeros((1, h, w));
    for y in 0..h {
        for x in 0..w {
            let sy = (((y as f64 + 0.5) * sh as f64 / h as f64) - 0.5)
                .round()
                .clamp(0.0, (sh - 1) as f64) as usize;
            let sx = (((x as f64 + 0.5) * sw as f64 / w as f64) - 0.5)
                .round()
                .clamp(0.0, (sw - 1) as f64) as usize;
            out[[0, y, x]] = if mask[[sy, sx]] > 0.5 { 1.0 } else { 0.0 };
        }
    }
    out.into_dyn()
}

pub struct Trainer {
    pub store: ParamStore,
    pub model: Model,
    pub cfg: TrainerConfig,
    pub opt_gen: Adam,
    pub opt_disc: Adam,
    pub step: u64,
    /// Where non-finite-loss diagnostics are dumped (set by `fit`).
    pub diagnostics_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: &TrainerConfig) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.model.n_h = cfg.n_h;
        cfg.validate()?;
        if cfg.model.extractor_channels.len() < cfg.model.attn_levels {
            return Err(Error::contract(
                "extractor needs at least one layer per attention level",
            ));
        }
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, &cfg.model, cfg.seed)?;
        let opt_gen = Adam::new(store.ids_with_prefix("gen."), cfg.learning_rate, 0.5, 0.999);
        let opt_disc = Adam::new(store.ids_with_prefix("disc."), cfg.learning_rate, 0.5, 0.999);
        Ok(Trainer {
            store,
            model,
            cfg,
            opt_gen,
            opt_disc,
            step: 0,
            diagnostics_dir: None,
        })
    }

    /// One two-step training iteration with a generator and a
    /// discriminator update.
    pub fn train_iteration(
        &mut self,
        ds: &Dataset,
        sample: &TrainingSample,
        rng: &mut ChaCha8Rng,
    ) -> Result<IterationOutcome> {
        let cfg = &self.cfg;
        let mcfg = &self.cfg.model;
        let sigma = mcfg.heatmap_sigma;
        let n_t = cfg.n_t.min(sample.targets.len());
        if n_t == 0 {
            return Err(Error::contract("training sample has no targets"));
        }

        let triples = sample_hallucination_poses(ds, sample, cfg.n_h, sigma, rng)?;
        let mut g = Graph::new();
        let store = &self.store;
        let model = &self.model;

        let x_s = g.constant(hwc_to_chw(&sample.source.image.data));
        let p_s = sample.source.image_pose(sigma);

        // ---- Step I: hallucinations plus texture estimation
        let phi_tex0 = model.zero_texture_pyramid(&mut g);
        let hallu_poses: Vec<PoseHeatmap> = triples.iter().map(|t| t.p.clone()).collect();
        let hallu_tex_poses: Vec<PoseHeatmap> = triples.iter().map(|t| t.b.clone()).collect();
        let hallu_coords: Vec<CoordinateAnnotation> =
            triples.iter().map(|t| t.c.clone()).collect();
        let views = model.hallunet_forward(&mut g, store, x_s, &p_s, &hallu_poses, &phi_tex0)?;
        let pyramids: Vec<FeaturePyramid> = views.iter().map(|v| v.pyramid.clone()).collect();
        let texout = model.texnet_forward(
            &mut g,
            store,
            &hallu_poses,
            &hallu_tex_poses,
            &hallu_coords,
            &pyramids,
        )?;
        let texture = texout.texture;

        // The retained hallucination texture feature, optionally detached.
        let phi_hallu = if mcfg.detach_texture_feature {
            let vars: Vec<Var> = (0..mcfg.levels)
                .map(|s| g.detach(texout.pyramid.at_scale(s).var))
                .collect();
            FeaturePyramid::from_scale_maps(vars, crate::attention::Domain::Texture)
        } else {
            texout.pyramid.clone()
        };

        // ---- Step II: supervised targets against the kept feature
        let target_poses: Vec<PoseHeatmap> = sample.targets[..n_t]
            .iter()
            .map(|t| t.image_pose(sigma))
            .collect();
        let tviews = model.hallunet_forward(&mut g, store, x_s, &p_s, &target_poses, &phi_hallu)?;

        // Renders via the step-I texture map and target surface annotations.
        let mut rendered = Vec::with_capacity(n_t);
        for (i, view) in tviews.iter().enumerate() {
            rendered.push(render_composite_graph(
                &mut g,
                texture,
                &sample.targets[i].surface,
                view.image,
            ));
        }

        // ---- generator losses
        let ext = &model.extractor;
        let psi_src = ext.forward(&mut g, store, x_s);
        let mut rec_t = None;
        let mut perc_t = None;
        let mut styl_t = None;
        let mut cor_t = None;
        let mut cons_t = None;
        let mut fakes = Vec::new();
        let attn_scales = mcfg.attn_scales();

        for (i, view) in tviews.iter().enumerate() {
            let x_gt = g.constant(hwc_to_chw(&sample.targets[i].image.data));
            let x_hat = view.image;
            let x_tilde = rendered[i];

            let r = loss_rec(&mut g, x_hat, x_tilde, x_gt);
            rec_t = accum_term(&mut g, rec_t, r);

            let fh = ext.forward(&mut g, store, x_hat);
            let ft = ext.forward(&mut g, store, x_tilde);
            let fx = ext.forward(&mut g, store, x_gt);
            let p = crate::losses::loss_perc_feats(&mut g, &fh, &ft, &fx);
            perc_t = accum_term(&mut g, perc_t, p);
            let s = crate::losses::loss_style_feats(&mut g, &fh, &ft, &fx);
            styl_t = accum_term(&mut g, styl_t, s);

            // sample correctness per attention scale
            for &sc in &attn_scales {
                let lvl = view.flows_st.at_scale(sc)?;
                let c = loss_correctness(&mut g, psi_src[sc], fx[sc], lvl.flow, lvl.repr);
                cor_t = accum_term(&mut g, cor_t, c);
            }

            // path consistency: direct target flow vs source-view
            // image-to-texture flow sampled along the texture-to-image flow
            for &sc in &attn_scales {
                let direct = view.flows_st.at_scale(sc)?;
                let ti = view.flows_ti.at_scale(sc)?;
                let it_src = texout.flows_it[0].at_scale(sc)?;
                let (mh, mw) = mcfg.img_dims(sc);
                let m = g.constant(mask_at_scale(&sample.targets[i].surface.mask, mh, mw));
                let l = loss_consistency(&mut g, direct.flow, direct.repr, it_src.flow, ti.flow, m);
                cons_t = accum_term(&mut g, cons_t, l);
            }

            let d_hat = model.disc.forward_image(&mut g, store, x_hat);
            let d_tilde = model.disc.forward_image(&mut g, store, x_tilde);
            fakes.push(d_hat);
            fakes.push(d_tilde);
        }
        let denom_t = n_t as f64;
        let rec = scale_term(&mut g, rec_t, 1.0 / denom_t);
        let perc = scale_term(&mut g, perc_t, 1.0 / denom_t);
        let styl = scale_term(&mut g, styl_t, 1.0 / denom_t);
        let cor = scale_term(&mut g, cor_t, 1.0 / (denom_t * attn_scales.len() as f64));
        let cons = scale_term(&mut g, cons_t, 1.0 / (denom_t * attn_scales.len() as f64));

        // coordinate loss over step-I hallucination views
        let mut coord_t = None;
        for (j, triple) in triples.iter().enumerate() {
            for &sc in &attn_scales {
                let lvl = texout.flows_it[j].at_scale(sc)?;
                let c_resc = rescale_coordinates(&triple.c, mcfg.tex_dims(sc), mcfg.img_dims(sc));
                let l = loss_coord(&mut g, lvl.flow, &c_resc);
                coord_t = accum_term(&mut g, coord_t, l);
            }
        }
        let coord = scale_term(
            &mut g,
            coord_t,
            1.0 / (triples.len() as f64 * attn_scales.len() as f64),
        );

        // flow regularization: source-to-target and image-to-texture flows
        let mut reg_t = None;
        let mut reg_count = 0usize;
        for view in &tviews {
            for &sc in &attn_scales {
                let lvl = view.flows_st.at_scale(sc)?;
                let l = reg_one(&mut g, mcfg, lvl.flow, lvl.repr);
                reg_t = accum_term(&mut g, reg_t, l);
                reg_count += 1;
            }
        }
        for bundle in &texout.flows_it {
            for &sc in &attn_scales {
                let lvl = bundle.at_scale(sc)?;
                let l = reg_one(&mut g, mcfg, lvl.flow, lvl.repr);
                reg_t = accum_term(&mut g, reg_t, l);
                reg_count += 1;
            }
        }
        let reg = scale_term(&mut g, reg_t, 1.0 / reg_count as f64);

        // adversarial supervision: hallucinations get only this signal
        if mcfg.hallu_adversarial {
            for view in &views {
                let d = model.disc.forward_image(&mut g, store, view.image);
                fakes.push(d);
            }
        }
        let vis_src = visibility_mask_chw(&sample.source.coord);
        if mcfg.texture_adversarial {
            let vis = g.constant(vis_src.clone());
            let masked_t = g.broadcast_mul_channel(vis, texture);
            let d = model.disc.forward_texture(&mut g, store, masked_t);
            fakes.push(d);
        }
        let adv = loss_adv(&mut g, &[], &fakes, AdvSide::Generator);

        let terms = LossTerms {
            rec,
            perc,
            styl,
            adv,
            cor,
            coord,
            cons,
            reg,
        };
        let total = total_loss(&mut g, &terms, &cfg.weights);

        // ---- discriminator objective on detached fakes
        let mut d_reals = Vec::new();
        let mut d_fakes = Vec::new();
        for (i, view) in tviews.iter().enumerate() {
            let x_gt = g.constant(hwc_to_chw(&sample.targets[i].image.data));
            let dr = model.disc.forward_image(&mut g, store, x_gt);
            d_reals.push(dr);
            let det_hat = g.detach(view.image);
            let det_tilde = g.detach(rendered[i]);
            let df1 = model.disc.forward_image(&mut g, store, det_hat);
            let df2 = model.disc.forward_image(&mut g, store, det_tilde);
            d_fakes.push(df1);
            d_fakes.push(df2);
        }
        if mcfg.hallu_adversarial {
            for view in &views {
                let det = g.detach(view.image);
                let d = model.disc.forward_image(&mut g, store, det);
                d_fakes.push(d);
            }
        }
        if mcfg.texture_adversarial {
            let unwrapped = unwrap_to_texture(
                &sample.source.image,
                &sample.source.coord,
                &sample.source.layout_id,
            )?;
            let real_tex = g.constant(hwc_to_chw(&unwrapped.data));
            let dr = model.disc.forward_texture(&mut g, store, real_tex);
            d_reals.push(dr);
            let vis = g.constant(vis_src);
            let det_t = g.detach(texture);
            let masked_t = g.broadcast_mul_channel(vis, det_t);
            let df = model.disc.forward_texture(&mut g, store, masked_t);
            d_fakes.push(df);
        }
        let d_loss = loss_adv(&mut g, &d_reals, &d_fakes, AdvSide::Discriminator);

        let report = LossReport {
            rec: g.scalar_value(rec),
            perc: g.scalar_value(perc),
            styl: g.scalar_value(styl),
            adv: g.scalar_value(adv),
            cor: g.scalar_value(cor),
            coord: g.scalar_value(coord),
            cons: g.scalar_value(cons),
            reg: g.scalar_value(reg),
            total: g.scalar_value(total),
        };
        let disc_value = g.scalar_value(d_loss);
        if let Some(term) = report.non_finite_term() {
            let dump = self.write_diagnostics(&report, disc_value);
            return Err(Error::NonFiniteLoss {
                term,
                step: self.step,
                dump,
            });
        }
        if !disc_value.is_finite() {
            let dump = self.write_diagnostics(&report, disc_value);
            return Err(Error::NonFiniteLoss {
                term: "disc",
                step: self.step,
                dump,
            });
        }

        // ---- updates (both computed at the pre-update parameter state)
        let gen_grads = g.backward(total);
        let gen_pg = g.param_grads(&gen_grads);
        let disc_grads = g.backward(d_loss);
        let disc_pg = g.param_grads(&disc_grads);
        self.opt_gen.step(&mut self.store, &gen_pg);
        self.opt_disc.step(&mut self.store, &disc_pg);
        self.step += 1;

        Ok(IterationOutcome {
            report,
            disc: disc_value,
        })
    }

    fn write_diagnostics(&self, report: &LossReport, disc: f64) -> Option<PathBuf> {
        let dir = self.diagnostics_dir.as_ref()?;
        let path = dir.join(format!("nan_dump_step{}.txt", self.step));
        let mut text = String::from("non-finite loss diagnostic\n");
        for (name, value) in report.named() {
            text.push_str(&format!("{name}\t{value:e}\n"));
        }
        text.push_str(&format!("disc\t{disc:e}\n"));
        for (_, name, value) in self.store.iter() {
            let norm = value.iter().map(|v| v * v).sum::<f64>().sqrt();
            text.push_str(&format!("param\t{name}\t{norm:e}\n"));
        }
        fs::write(&path, text).ok()?;
        Some(path)
    }

    /// Full training loop with periodic checkpointing and an
    /// append-only metrics log; resumable from the written checkpoint.
    pub fn fit(&mut self, ds: &Dataset, out_dir: &Path) -> Result<PathBuf> {
        if ds.is_empty() {
            return Err(Error::Dataset("cannot train on an empty dataset".into()));
        }
        fs::create_dir_all(out_dir)?;
        self.diagnostics_dir = Some(out_dir.to_path_buf());
        let log_path = out_dir.join("metrics.tsv");
        let mut log = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)?;
        if log.metadata()?.len() == 0 {
            writeln!(log, "step\tterm\tvalue")?;
        }
        let ckpt_path = out_dir.join("checkpoint.bin");
        while self.step < self.cfg.steps {
            let mut rng = seeded_rng(derive_seed(self.cfg.seed, 0xda7a_0000 + self.step));
            let draw = ds.sample_pair(self.cfg.n_t, &mut rng)?;
            let sample = load_training_sample(ds, &draw)?;
            let outcome = self.train_iteration(ds, &sample, &mut rng)?;
            let step = self.step; // already advanced
            if step % self.cfg.log_every.max(1) == 0 || step == self.cfg.steps {
                for (name, value) in outcome.report.named() {
                    writeln!(log, "{step}\t{name}\t{value:e}")?;
                }
                writeln!(log, "{step}\tdisc\t{:e}", outcome.disc)?;
            }
            if self.cfg.checkpoint_every > 0 && step % self.cfg.checkpoint_every == 0 {
                self.save_checkpoint(&ckpt_path)?;
            }
        }
        self.save_checkpoint(&ckpt_path)?;
        Ok(ckpt_path)
    }

    // ---- checkpoint container -------------------------------------------

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let digest = self.cfg.config_digest();
        let mut entries: Vec<(String, Arr)> = Vec::new();
        for (_, name, value) in self.store.iter() {
            entries.push((name.to_string(), value.clone()));
        }
        entries.push((
            "trainer.step".into(),
            Arr::from_elem(IxDyn(&[1]), self.step as f64),
        ));
        for (opt, tag) in [(&self.opt_gen, "gen"), (&self.opt_disc, "disc")] {
            entries.push((
                format!("opt.{tag}.step"),
                Arr::from_elem(IxDyn(&[1]), opt.step_count as f64),
            ));
            for &pid in opt.params() {
                if let Some((m, v)) = opt.moments(pid) {
                    let name = self.store.name(pid);
                    entries.push((format!("opt.{tag}.m.{name}"), m.clone()));
                    entries.push((format!("opt.{tag}.v.{name}"), v.clone()));
                }
            }
        }
        write_container(path, &digest, &entries)
    }

    /// Restore parameters and optimizer state from a checkpoint written
    /// by [`Trainer::save_checkpoint`]; the config digest must match.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let (digest, entries) = read_container(path)?;
        let expected = self.cfg.config_digest();
        if digest != expected {
            return Err(Error::DigestMismatch {
                stored: digest,
                current: expected,
            });
        }
        let map: HashMap<String, Arr> = entries.into_iter().collect();
        for (pid, name, value) in collect_param_targets(&self.store) {
            let Some(new) = map.get(&name) else {
                return Err(Error::Checkpoint(format!("missing parameter '{name}'")));
            };
            if new.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' shape {:?} does not match model {:?}",
                    new.shape(),
                    value.shape()
                )));
            }
            self.store.value_mut(pid).assign(new);
        }
        self.step = map
            .get("trainer.step")
            .map(|a| a[[0]] as u64)
            .ok_or_else(|| Error::Checkpoint("missing trainer.step".into()))?;
        for (opt, tag) in [(&mut self.opt_gen, "gen"), (&mut self.opt_disc, "disc")] {
            opt.step_count = map
                .get(&format!("opt.{tag}.step"))
                .map(|a| a[[0]] as u64)
                .unwrap_or(0);
            for pid in opt.params().to_vec() {
                let name = self.store.name(pid).to_string();
                if let (Some(m), Some(v)) = (
                    map.get(&format!("opt.{tag}.m.{name}")),
                    map.get(&format!("opt.{tag}.v.{name}")),
                ) {
                    opt.set_moments(pid, m.clone(), v.clone());
                }
            }
        }
        Ok(())
    }
}

fn collect_param_targets(store: &ParamStore) -> Vec<(ParamId, String, Arr)> {
    store
        .iter()
        .map(|(pid, name, value)| (pid, name.to_string(), value.clone()))
        .collect()
}

fn accum_term(g: &mut Graph, acc: Option<Var>, term: Var) -> Option<Var> {
    Some(match acc {
        None => term,
        Some(a) => g.add(a, term),
    })
}

fn scale_term(g: &mut Graph, acc: Option<Var>, k: f64) -> Var {
    let v = acc.expect("at least one term accumulated");
    g.mul_scalar(v, k)
}

fn reg_one(
    g: &mut Graph,
    mcfg: &crate::config::ModelConfig,
    flow: Var,
    repr: crate::geometry::FlowRepr,
) -> Var {
    let sh = g.value(flow).shape().to_vec();
    if mcfg.reg_tv_surrogate || sh[1] < mcfg.reg_neighborhood || sh[2] < mcfg.reg_neighborhood {
        loss_reg_tv_single(g, flow, repr)
    } else {
        loss_reg_single(g, flow, repr, mcfg.reg_neighborhood)
    }
}

fn visibility_mask_chw(c: &CoordinateAnnotation) -> Arr {
    mask_chw(&c.visibility)
}

// ---- checkpoint container format ------------------------------------------
//
// magic "DTXCKPT1", then digest (u32 length + utf8), then u32 entry
// count; each entry: u32 name length + name, u32 ndim + u32 dims,
// little-endian f32 payload.

const CKPT_MAGIC: &[u8; 8] = b"DTXCKPT1";

fn write_container(path: &Path, digest: &str, entries: &[(String, Arr)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.write_u32::<LittleEndian>(digest.len() as u32)?;
    buf.extend_from_slice(digest.as_bytes());
    buf.write_u32::<LittleEndian>(entries.len() as u32)?;
    for (name, arr) in entries {
        buf.write_u32::<LittleEndian>(name.len() as u32)?;
        buf.extend_from_slice(name.as_bytes());
        buf.write_u32::<LittleEndian>(arr.ndim() as u32)?;
        for d in arr.shape() {
            buf.write_u32::<LittleEndian>(*d as u32)?;
        }
        for &v in arr.iter() {
            buf.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(String, Vec<(String, Arr)>)> {
    let mut f = fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    let mut cur = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 8];
    std::io::Read::read_exact(&mut cur, &mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad checkpoint magic".into()));
    }
    let dlen = cur.read_u32::<LittleEndian>()? as usize;
    let mut dbytes = vec![0u8; dlen];
    std::io::Read::read_exact(&mut cur, &mut dbytes)?;
    let digest = String::from_utf8(dbytes)
        .map_err(|_| Error::Checkpoint("digest is not utf8".into()))?;
    let n = cur.read_u32::<LittleEndian>()? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let nlen = cur.read_u32::<LittleEndian>()? as usize;
        let mut nbytes = vec![0u8; nlen];
        std::io::Read::read_exact(&mut cur, &mut nbytes)?;
        let name = String::from_utf8(nbytes)
            .map_err(|_| Error::Checkpoint("entry name is not utf8".into()))?;
        let ndim = cur.read_u32::<LittleEndian>()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.read_u32::<LittleEndian>()? as usize);
        }
        let count: usize = dims.iter().product();
        let mut arr = Arr::zeros(IxDyn(&dims));
        {
            let slice = arr.as_slice_mut().unwrap();
            for v in slice.iter_mut().take(count) {
                *v = cur.read_f32::<LittleEndian>()? as f64;
            }
        }
        entries.push((name, arr));
    }
    Ok((digest, entries))
}
