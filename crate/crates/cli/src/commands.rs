use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vavae_core::data::ImageSet;
use vavae_core::diagnostics::{
    analyze_embedding, analyze_latents, emit_report, psnr, read_embedding, ssim, MetricRow, UniformityReport,
};
use vavae_core::foundation::FeatureSource;
use vavae_core::io::TensorTable;
use vavae_core::lightningdit::{euler_sample, train_dit, DiTModel};
use vavae_core::selfcheck;
use vavae_core::tokenizer::{
    latent_vectors, load_checkpoint, posterior_means, save_checkpoint, train_tokenizer, TokenizerModel,
};
use vavae_core::Tensor;

use crate::config::{resolve, RunConfig};
use crate::manifest::Manifest;
use crate::CliError;

const ENCODE_BATCH: usize = 64;

/// Shared state of one invocation.
pub struct Ctx {
    pub cfg: RunConfig,
    pub root: PathBuf,
    /// Config file given on the command line, hashed as an input.
    pub config_file: Option<PathBuf>,
}

impl Ctx {
    fn path(&self, p: &str) -> PathBuf {
        resolve(&self.root, p)
    }

    fn reports(&self, sub: &str) -> PathBuf {
        self.path(&self.cfg.paths.reports).join(sub)
    }

    fn manifest(&self) -> Manifest {
        let mut m = Manifest::default();
        if let Some(p) = &self.config_file {
            m.input(p);
        }
        m
    }
}

fn ensure_parent(p: &Path) -> Result<(), CliError> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => std::fs::create_dir_all(d).map_err(|e| CliError::io(d, e)),
        _ => Ok(()),
    }
}

fn require(p: &Path, hint: &str) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Missing {
            path: p.display().to_string(),
            hint: hint.to_string(),
        })
    }
}

fn load_dataset(ctx: &Ctx, m: &mut Manifest) -> Result<ImageSet, CliError> {
    let p = ctx.path(&ctx.cfg.paths.dataset);
    require(&p, "run gen-data first")?;
    m.input(&p);
    Ok(ImageSet::load(&p)?)
}

fn load_tokenizer(ctx: &Ctx, m: &mut Manifest) -> Result<TokenizerModel, CliError> {
    let p = ctx.path(&ctx.cfg.paths.tokenizer);
    require(&p, "run train-vae first")?;
    m.input(&p);
    Ok(load_checkpoint(&p)?)
}

pub fn gen_data(ctx: &Ctx) -> Result<PathBuf, CliError> {
    let d = &ctx.cfg.data;
    let set = ImageSet::synthetic(d.n, d.size, d.seed)?;
    let out = ctx.path(&ctx.cfg.paths.dataset);
    ensure_parent(&out)?;
    set.save(&out)?;
    let mut m = ctx.manifest();
    m.output(&out);
    m.write("gen-data", &ctx.cfg, out.parent().unwrap_or(Path::new(".")))?;
    log::info!("wrote {} images to {}", set.len(), out.display());
    Ok(out)
}

fn uniformity(ctx: &Ctx, model: &TokenizerModel, images: &Tensor) -> Result<UniformityReport, CliError> {
    let vectors = latent_vectors(model, images, ENCODE_BATCH)?;
    Ok(analyze_latents(&vectors, ctx.cfg.analyze.max_points, ctx.cfg.seed, ctx.cfg.bandwidth()?)?)
}

pub fn train_vae(ctx: &Ctx) -> Result<PathBuf, CliError> {
    let mut m = ctx.manifest();
    let data = load_dataset(ctx, &mut m)?;
    let source = ctx.cfg.feature_source(&ctx.root);
    if let Some(FeatureSource::File { path }) = &source {
        require(path, "export features for the dataset first")?;
        m.input(path);
    }
    let trained = train_tokenizer(&data, source.as_ref(), &ctx.cfg.tokenizer_train())?;
    let ckpt = ctx.path(&ctx.cfg.paths.tokenizer);
    ensure_parent(&ckpt)?;
    save_checkpoint(&trained.model, trained.head.as_ref(), &ckpt)?;

    let mut rows = Vec::new();
    for e in &trained.log {
        let l = &e.losses;
        for (name, v) in [
            ("l_rec", l.l_rec),
            ("l_kl", l.l_kl),
            ("l_mcos", l.l_mcos),
            ("l_mdms", l.l_mdms),
            ("l_vf", l.l_vf),
            ("w_adaptive", l.w_adaptive),
        ] {
            rows.push(MetricRow::new(e.epoch, name, v));
        }
    }
    let report = uniformity(ctx, &trained.model, &data.images)?;
    let dir = ctx.reports("vae");
    let (csv, svg) = emit_report(Some(&report), &rows, &dir)?;
    m.output(&ckpt);
    m.output(csv);
    m.output(svg);
    m.write("train-vae", &ctx.cfg, &dir)?;
    Ok(ckpt)
}

pub fn train_dit_cmd(ctx: &Ctx) -> Result<PathBuf, CliError> {
    let mut m = ctx.manifest();
    let data = load_dataset(ctx, &mut m)?;
    let tok = load_tokenizer(ctx, &mut m)?;
    let latents = posterior_means(&tok, &data.images, ENCODE_BATCH)?;
    let trained = train_dit(&latents, &data.labels, &ctx.cfg.dit_train())?;
    let ckpt = ctx.path(&ctx.cfg.paths.dit);
    ensure_parent(&ckpt)?;
    trained.model.to_table(Some(&trained.stats)).save(&ckpt)?;

    let rows: Vec<MetricRow> = trained
        .losses
        .iter()
        .enumerate()
        .map(|(step, &v)| MetricRow::new(step, "velocity_loss", v))
        .collect();
    let dir = ctx.reports("dit");
    let (csv, svg) = emit_report(None, &rows, &dir)?;
    m.output(&ckpt);
    m.output(csv);
    m.output(svg);
    m.write("train-dit", &ctx.cfg, &dir)?;
    Ok(ckpt)
}

/// Binary PPM of `[n, 3, h, w]` images in `[-1, 1]`, tiled row-major.
pub fn image_grid_ppm(images: &Tensor) -> Result<Vec<u8>, CliError> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(CliError::Config(format!("cannot tile images of shape {s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * w, rows * h);
    let mut px = vec![0u8; gw * gh * 3];
    let d = images.data();
    for k in 0..n {
        let (oy, ox) = ((k / cols) * h, (k % cols) * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = d[((k * 3 + c) * h + y) * w + x];
                    let byte = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
                    px[((oy + y) * gw + ox + x) * 3 + c] = byte;
                }
            }
        }
    }
    let mut out = format!("P6\n{gw} {gh}\n255\n").into_bytes();
    out.extend(px);
    Ok(out)
}

pub fn sample(ctx: &Ctx) -> Result<PathBuf, CliError> {
    let mut m = ctx.manifest();
    let tok = load_tokenizer(ctx, &mut m)?;
    let dit_path = ctx.path(&ctx.cfg.paths.dit);
    require(&dit_path, "run train-dit first")?;
    m.input(&dit_path);
    let (model, stats) = DiTModel::from_table(&TensorTable::load(&dit_path)?)?;
    let stats = stats.ok_or_else(|| CliError::Config(format!("{} has no latent statistics", dit_path.display())))?;
    let s = &ctx.cfg.sampler;
    let classes = model.config.num_classes;
    let labels: Vec<usize> = (0..s.count)
        .map(|i| if s.label < 0 { i % classes } else { s.label as usize })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let z = euler_sample(&model, &ctx.cfg.sampler(), &labels, &mut rng)?;
    let images = tok.decode(&stats.denormalize(&z)?)?.detach();
    let out = ctx.path(&ctx.cfg.paths.samples);
    ensure_parent(&out)?;
    vavae_core::io::write_file(&out, &image_grid_ppm(&images)?)?;
    m.output(&out);
    m.write("sample", &ctx.cfg, out.parent().unwrap_or(Path::new(".")))?;
    Ok(out)
}

pub fn analyze(ctx: &Ctx) -> Result<PathBuf, CliError> {
    let mut m = ctx.manifest();
    let data = load_dataset(ctx, &mut m)?;
    let tok = load_tokenizer(ctx, &mut m)?;
    let report = uniformity(ctx, &tok, &data.images)?;

    let means = posterior_means(&tok, &data.images, ENCODE_BATCH)?;
    let mut recon = Vec::new();
    let n = means.shape()[0];
    for start in (0..n).step_by(ENCODE_BATCH) {
        let len = ENCODE_BATCH.min(n - start);
        recon.push(tok.decode(&means.narrow(0, start, len)?)?.detach());
    }
    let recon = Tensor::concat(&recon, 0)?;
    let mut rows = vec![
        MetricRow::new(0, "psnr", psnr(&data.images, &recon, 2.0)?),
        MetricRow::new(0, "ssim", ssim(&data.images, &recon, 2.0)?),
    ];
    if !ctx.cfg.analyze.embedding.is_empty() {
        let p = ctx.path(&ctx.cfg.analyze.embedding);
        m.input(&p);
        let e = analyze_embedding(&read_embedding(&p)?, ctx.cfg.bandwidth()?)?;
        rows.push(MetricRow::new(0, "embedding_density_cv", e.density_cv));
        rows.push(MetricRow::new(0, "embedding_gini", e.gini));
        rows.push(MetricRow::new(0, "embedding_normalized_entropy", e.normalized_entropy));
    }
    let dir = ctx.reports("analyze");
    let (csv, svg) = emit_report(Some(&report), &rows, &dir)?;
    println!(
        "density_cv={:.6} gini={:.6} normalized_entropy={:.6} n_points={}",
        report.density_cv, report.gini, report.normalized_entropy, report.n_points
    );
    m.output(&csv);
    m.output(svg);
    m.write("analyze", &ctx.cfg, &dir)?;
    Ok(csv)
}

pub fn gradcheck(ctx: &Ctx) -> Result<PathBuf, CliError> {
    let cases = selfcheck::run_suite(ctx.cfg.seed, usize::MAX)?;
    let table = selfcheck::render_table(&cases);
    print!("{table}");
    let dir = ctx.reports("gradcheck");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let out = dir.join("gradcheck.txt");
    std::fs::write(&out, &table).map_err(|e| CliError::io(&out, e))?;
    let mut m = ctx.manifest();
    m.output(&out);
    m.write("gradcheck", &ctx.cfg, &dir)?;
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(out)
    } else {
        Err(CliError::GradcheckFailed(failed.join(",")))
    }
}
