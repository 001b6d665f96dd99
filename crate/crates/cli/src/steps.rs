use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use ndarray::Array2;

use roadweave::config::PipelineConfig;
use roadweave::curate::{
    density_histogram, histogram_table, pool_file_text, pool_report, read_pool_file, select_pool,
    DensityRecord, PoolReport,
};
use roadweave::fetch::{FetchPolicy, Fetcher};
use roadweave::io::{write_output, WriteOutcome};
use roadweave::manifest::{ManifestError, ManifestHeader, PAIR_SCHEMA};
use roadweave::metrics::{confusion, dice_loss, miou, threshold, ConfusionCounts, SoftMaskPair};
use roadweave::osm::{
    encode_extract, frames_touched, ingest, partition_by_frame, read_extract, summary_text,
    FrameExtract, EXTRACT_EXT,
};
use roadweave::render::{mask_file_name, measure_density, render_frame_par};
use roadweave::sample::{export_patches, patch_header, resolve_pool, FrameSource};
use roadweave::stitch::{read_pairs, PairStore, StitchError, StitchedPair, MANIFEST_FILE};
use roadweave::tile::{StitchFrame, TileCoord};

const OFFLINE_TEMPLATE: &str = "http://offline.invalid/{z}/{x}/{y}";

fn put(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    match write_output(path, bytes, force).with_context(|| format!("writing {}", path.display()))? {
        WriteOutcome::Written => log::debug!("wrote {}", path.display()),
        WriteOutcome::Unchanged => log::debug!("unchanged {}", path.display()),
    }
    Ok(())
}

fn emit(path: Option<&Path>, text: &str, force: bool) -> Result<()> {
    match path {
        Some(p) => put(p, text.as_bytes(), force),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn frame_from_key(cfg: &PipelineConfig, key: &str) -> Result<StitchFrame> {
    let origin = TileCoord::parse_key(key)?;
    Ok(StitchFrame::new(origin, cfg.tiles.grid, cfg.tiles.tile_px)?)
}

fn list_extracts(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some(EXTRACT_EXT))
        .collect();
    v.sort();
    Ok(v)
}

fn pairs_root(manifest: &Path) -> PathBuf {
    if manifest.is_dir() || manifest.extension().and_then(|e| e.to_str()) != Some("jsonl") {
        manifest.to_path_buf()
    } else {
        manifest.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

fn load_pairs(manifest: &Path) -> Result<(PathBuf, Vec<StitchedPair>)> {
    let root = pairs_root(manifest);
    let (_, pairs) = read_pairs(&root)
        .with_context(|| format!("reading pair manifest in {}", root.display()))?;
    Ok((root, pairs))
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// OSM XML file, optionally gzip-compressed
    #[arg(long)]
    pub osm: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Only write these frame keys (z_x_y of the origin tile)
    #[arg(long = "frame")]
    pub frames: Vec<String>,
    #[arg(long)]
    pub margin: Option<u32>,
}

fn run_extract(
    cfg: &PipelineConfig,
    osm: &Path,
    out: &Path,
    only: &[String],
    force: bool,
) -> Result<Vec<FrameExtract>> {
    let classifier = cfg.classifier()?;
    let file = File::open(osm).with_context(|| format!("opening {}", osm.display()))?;
    let (ways, stats) = ingest(file, &classifier)?;
    log::info!(
        "{} nodes, {} ways, {} road ways kept, {} rejected",
        stats.nodes,
        stats.ways_seen,
        ways.len(),
        stats.rejected_ways
    );
    if stats.warnings() > 0 {
        log::warn!(
            "{} warning(s): {} duplicate nodes, {} invalid nodes, {} dangling refs, {} short ways",
            stats.warnings(),
            stats.duplicate_nodes,
            stats.invalid_nodes,
            stats.dangling_refs,
            stats.short_ways
        );
    }
    let t = &cfg.tiles;
    let margin = cfg.render.margin_px;
    let frames = if only.is_empty() {
        frames_touched(&ways, t.zoom, t.grid, t.tile_px, margin)
    } else {
        only.iter()
            .map(|k| frame_from_key(cfg, k))
            .collect::<Result<Vec<_>>>()?
    };
    let extracts = partition_by_frame(&ways, &frames, margin);
    std::fs::create_dir_all(out)?;
    for e in &extracts {
        put(
            &out.join(format!("{}.{EXTRACT_EXT}", e.frame.key())),
            &encode_extract(e),
            force,
        )?;
        put(
            &out.join(format!("{}.txt", e.frame.key())),
            summary_text(e).as_bytes(),
            force,
        )?;
    }
    put(
        &out.join("ingest.json"),
        &serde_json::to_vec_pretty(&stats)?,
        force,
    )?;
    log::info!("{} frame extract(s) in {}", extracts.len(), out.display());
    Ok(extracts)
}

pub fn extract(cfg: &mut PipelineConfig, a: ExtractArgs, force: bool) -> Result<()> {
    if let Some(m) = a.margin {
        cfg.render.margin_px = m;
    }
    cfg.validate()?;
    let osm = a
        .osm
        .or_else(|| cfg.paths.osm.clone())
        .context("--osm is required")?;
    for e in run_extract(cfg, &osm, &a.out, &a.frames, force)? {
        println!("{},{}", e.frame.key(), e.way_count());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Extract file or directory of extracts
    #[arg(long)]
    pub extract: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn render(cfg: &mut PipelineConfig, a: RenderArgs, force: bool) -> Result<()> {
    cfg.validate()?;
    let files = if a.extract.is_dir() {
        list_extracts(&a.extract)?
    } else {
        vec![a.extract.clone()]
    };
    std::fs::create_dir_all(&a.out)?;
    println!("frame,road_pixels,density");
    for f in files {
        let e = read_extract(&f).with_context(|| format!("reading {}", f.display()))?;
        let mask = render_frame_par(&e);
        put(
            &a.out.join(mask_file_name(&e.frame)),
            &mask.to_png()?,
            force,
        )?;
        println!(
            "{},{},{}",
            e.frame.key(),
            mask.road_pixel_count(),
            measure_density(&mask)
        );
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct FetchArgs {
    /// URL template with {z}, {x}, {y} and optionally {key}
    #[arg(long)]
    pub template: Option<String>,
    /// File of frame keys, one per line
    #[arg(long)]
    pub frames_manifest: Option<PathBuf>,
    /// Fetch the frames of every extract in this directory
    #[arg(long)]
    pub extract_dir: Option<PathBuf>,
    /// Requests per second
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub offline: bool,
    #[arg(long)]
    pub revalidate: bool,
}

pub fn fetch(cfg: &mut PipelineConfig, a: FetchArgs) -> Result<()> {
    if let Some(t) = a.template {
        cfg.fetch.template = Some(t);
    }
    if let Some(r) = a.rate {
        cfg.fetch.rate = r;
    }
    if let Some(c) = a.concurrency {
        cfg.fetch.concurrency = c;
    }
    cfg.fetch.offline |= a.offline;
    cfg.fetch.revalidate |= a.revalidate;
    cfg.validate()?;
    let cache = a
        .cache_dir
        .or_else(|| cfg.paths.tile_cache.clone())
        .context("--cache-dir is required")?;
    let template = match (&cfg.fetch.template, cfg.fetch.offline) {
        (Some(t), _) => t.clone(),
        (None, true) => OFFLINE_TEMPLATE.to_string(),
        (None, false) => bail!("--template is required unless --offline is set"),
    };
    let keys: Vec<String> = match (&a.frames_manifest, &a.extract_dir) {
        (Some(f), _) => read_pool_file(
            &std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?,
        ),
        (None, Some(d)) => list_extracts(d)?
            .iter()
            .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(String::from))
            .collect(),
        (None, None) => bail!("one of --frames-manifest or --extract-dir is required"),
    };
    let fetcher = Fetcher::new(&template, &cache, cfg.fetch_policy())?;
    println!("frame,tiles,network_calls");
    for k in keys {
        let before = fetcher.network_calls();
        let assets = fetcher.fetch_frame(&frame_from_key(cfg, &k)?)?;
        println!("{k},{},{}", assets.len(), fetcher.network_calls() - before);
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct StitchArgs {
    #[arg(long)]
    pub extract_dir: PathBuf,
    #[arg(long)]
    pub tile_cache: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Fetch missing tiles from this template instead of failing
    #[arg(long)]
    pub template: Option<String>,
}

fn pair_header(cfg: &PipelineConfig) -> ManifestHeader {
    ManifestHeader::new(PAIR_SCHEMA, cfg.digest(), cfg.seed)
}

fn open_store(cfg: &PipelineConfig, out: &Path, force: bool) -> Result<PairStore> {
    match PairStore::open(out, pair_header(cfg), force) {
        Err(StitchError::Manifest(ManifestError::Header { .. })) if force => {
            log::warn!(
                "replacing manifest with a different header in {}",
                out.display()
            );
            std::fs::remove_file(out.join(MANIFEST_FILE))?;
            Ok(PairStore::open(out, pair_header(cfg), force)?)
        }
        r => Ok(r?),
    }
}

fn make_fetcher(cfg: &PipelineConfig, cache: &Path, template: Option<String>) -> Result<Fetcher> {
    let template = template.or_else(|| cfg.fetch.template.clone());
    let policy = FetchPolicy {
        offline: cfg.fetch.offline || template.is_none(),
        ..cfg.fetch_policy()
    };
    Ok(Fetcher::new(
        template.as_deref().unwrap_or(OFFLINE_TEMPLATE),
        cache,
        policy,
    )?)
}

fn stitch_all(
    store: &PairStore,
    fetcher: &Fetcher,
    extracts: impl Iterator<Item = Result<FrameExtract>>,
) -> Result<Vec<StitchedPair>> {
    let mut out = Vec::new();
    for e in extracts {
        let e = e?;
        let assets = fetcher.fetch_frame(&e.frame)?;
        let pair = store.build_pair(&e.frame, &assets, &e)?;
        log::info!("pair {} density {:.5}", pair.key, pair.density);
        out.push(pair);
    }
    Ok(out)
}

pub fn stitch(cfg: &mut PipelineConfig, a: StitchArgs, force: bool) -> Result<()> {
    cfg.validate()?;
    let cache = a
        .tile_cache
        .or_else(|| cfg.paths.tile_cache.clone())
        .context("--tile-cache is required")?;
    let fetcher = make_fetcher(cfg, &cache, a.template)?;
    let store = open_store(cfg, &a.out, force)?;
    let files = list_extracts(&a.extract_dir)?;
    let pairs = stitch_all(
        &store,
        &fetcher,
        files
            .iter()
            .map(|f| read_extract(f).with_context(|| format!("reading {}", f.display()))),
    )?;
    println!("frame,density");
    for p in pairs {
        println!("{},{}", p.key, p.density);
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct DensityArgs {
    /// Pair manifest file or the directory holding it
    #[arg(long)]
    pub manifest: PathBuf,
    /// Bin width in percentage points
    #[arg(long)]
    pub bin_width: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn density_records(pairs: &[StitchedPair]) -> Vec<DensityRecord> {
    pairs
        .iter()
        .map(|p| DensityRecord::new(p.key.clone(), p.density))
        .collect()
}

pub fn density(cfg: &mut PipelineConfig, a: DensityArgs, force: bool) -> Result<()> {
    if let Some(w) = a.bin_width {
        cfg.curate.bin_width_pp = w;
    }
    cfg.validate()?;
    let (_, pairs) = load_pairs(&a.manifest)?;
    let bins = density_histogram(&density_records(&pairs), cfg.curate.bin_width_pp)?;
    emit(a.out.as_deref(), &histogram_table(&bins), force)
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub scale: Option<f64>,
    /// Target mean density as a fraction, e.g. 0.06563
    #[arg(long)]
    pub target_density: Option<f64>,
    /// Tolerance in percentage points
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub baseline: Option<f64>,
    #[arg(long)]
    pub min_density: Option<f64>,
    /// Pool file: member frame keys, one per line
    #[arg(long)]
    pub out: PathBuf,
    /// Summary JSON (default: standard output)
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct PoolSummary<'a> {
    #[serde(flatten)]
    header: ManifestHeader,
    spec: &'a roadweave::curate::PoolSpec,
    implied_count: usize,
    report: PoolReport,
    infeasible: bool,
    diagnostics: &'a [String],
}

fn run_select(
    cfg: &PipelineConfig,
    pairs: &[StitchedPair],
    pool: &Path,
    summary: Option<&Path>,
    force: bool,
) -> Result<Vec<String>> {
    let spec = cfg.pool_spec();
    let sel = select_pool(&density_records(pairs), &spec)?;
    for d in &sel.diagnostics {
        log::warn!("{d}");
    }
    let report = pool_report(&sel);
    log::info!("{}", PoolReport::csv_header());
    log::info!("{}", report.csv_row());
    put(pool, pool_file_text(&sel).as_bytes(), force)?;
    let s = PoolSummary {
        header: ManifestHeader::new("roadweave.pool/1", cfg.digest(), cfg.seed),
        spec: &spec,
        implied_count: spec.implied_count(),
        report,
        infeasible: sel.infeasible,
        diagnostics: &sel.diagnostics,
    };
    let mut text = serde_json::to_string_pretty(&s)?;
    text.push('\n');
    emit(summary, &text, force)?;
    Ok(sel.members)
}

pub fn select(cfg: &mut PipelineConfig, a: SelectArgs, force: bool) -> Result<()> {
    let c = &mut cfg.curate;
    if let Some(v) = a.scale {
        c.scale = v;
    }
    if let Some(v) = a.target_density {
        c.target_density = v;
    }
    if let Some(v) = a.tolerance {
        c.tolerance_pp = v;
    }
    if let Some(v) = a.baseline {
        c.baseline_pixels = v;
    }
    if let Some(v) = a.min_density {
        c.min_density = v;
    }
    cfg.validate()?;
    let (_, pairs) = load_pairs(&a.manifest)?;
    run_select(cfg, &pairs, &a.out, a.summary.as_deref(), force)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Pool file from `select`
    #[arg(long)]
    pub pool: PathBuf,
    /// Directory holding the pair manifest
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub n: Option<u64>,
    #[arg(long)]
    pub size: Option<u32>,
    /// Patches drawn per frame load
    #[arg(long)]
    pub block: Option<u32>,
    /// Independent random streams
    #[arg(long)]
    pub workers: Option<u32>,
    #[arg(long)]
    pub out: PathBuf,
}

fn run_sample(
    cfg: &PipelineConfig,
    root: &Path,
    pairs: &[StitchedPair],
    pool: &[String],
    out: &Path,
    force: bool,
) -> Result<()> {
    let members = resolve_pool(pool, pairs)?;
    let src = FrameSource {
        root,
        pairs: &members,
    };
    let summary = export_patches(
        &src,
        &cfg.sample_params(),
        out,
        &patch_header(&cfg.digest(), cfg.seed),
        force,
    )?;
    log::info!(
        "{} patch(es) from {} frame load(s) in {}",
        summary.patches,
        summary.frames_opened,
        out.display()
    );
    Ok(())
}

pub fn sample(cfg: &mut PipelineConfig, a: SampleArgs, force: bool) -> Result<()> {
    let s = &mut cfg.sample;
    if let Some(v) = a.n {
        s.n = v;
    }
    if let Some(v) = a.size {
        s.patch_px = v;
    }
    if let Some(v) = a.block {
        s.block = v;
    }
    if let Some(v) = a.workers {
        s.workers = v;
    }
    cfg.validate()?;
    let pool = read_pool_file(
        &std::fs::read_to_string(&a.pool)
            .with_context(|| format!("reading {}", a.pool.display()))?,
    );
    let (root, pairs) = load_pairs(&a.pairs)?;
    run_sample(cfg, &root, &pairs, &pool, &a.out, force)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of predicted masks (8-bit PNG, value / 255 is the road score)
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth masks (non-zero is road)
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = roadweave::metrics::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_gray(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec(
        (h as usize, w as usize),
        img.into_raw(),
    )?)
}

pub fn eval(cfg: &mut PipelineConfig, a: EvalArgs, force: bool) -> Result<()> {
    cfg.validate()?;
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        bail!("--threshold must lie in (0, 1)");
    }
    let mut names: Vec<String> = std::fs::read_dir(&a.pred)
        .with_context(|| format!("reading {}", a.pred.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no PNG predictions in {}", a.pred.display());
    }
    let mut text = String::from("image,dice_loss,road_iou,background_iou,miou\n");
    let mut total = ConfusionCounts::default();
    let mut dice_sum = 0.0;
    for n in &names {
        let pred = load_gray(&a.pred.join(n))?.mapv(|v| f64::from(v) / 255.0);
        let gt = load_gray(&a.gt.join(n))?.mapv(|v| u8::from(v != 0));
        let pair = SoftMaskPair::new(pred.view(), gt.view()).with_context(|| n.clone())?;
        let loss = dice_loss(&pair);
        let c = confusion(threshold(pred.view(), a.threshold).view(), gt.view())?;
        text.push_str(&format!(
            "{n},{loss},{},{},{}\n",
            c.road.iou(),
            c.background.iou(),
            miou(&c)
        ));
        total = total.merge(&c);
        dice_sum += loss;
    }
    text.push_str(&format!(
        "ALL,{},{},{},{}\n",
        dice_sum / names.len() as f64,
        total.road.iou(),
        total.background.iou(),
        miou(&total)
    ));
    emit(a.out.as_deref(), &text, force)
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    #[arg(long)]
    pub osm: Option<PathBuf>,
    #[arg(long)]
    pub tile_cache: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Tile URL template; without it only cached tiles are used
    #[arg(long)]
    pub template: Option<String>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub target_density: Option<f64>,
    #[arg(long)]
    pub n: Option<u64>,
}

/// Layout under `--out`: `extracts/`, `pairs/`, `density.csv`, `pool.txt`,
/// `pool.json`, `patches/`.
pub fn pipeline(cfg: &mut PipelineConfig, a: PipelineArgs, force: bool) -> Result<()> {
    if let Some(v) = a.scale {
        cfg.curate.scale = v;
    }
    if let Some(v) = a.target_density {
        cfg.curate.target_density = v;
    }
    if let Some(v) = a.n {
        cfg.sample.n = v;
    }
    cfg.validate()?;
    let osm = a
        .osm
        .or_else(|| cfg.paths.osm.clone())
        .context("--osm is required")?;
    let cache = a
        .tile_cache
        .or_else(|| cfg.paths.tile_cache.clone())
        .context("--tile-cache is required")?;
    let out = a
        .out
        .or_else(|| cfg.paths.out.clone())
        .context("--out is required")?;

    let extracts = run_extract(cfg, &osm, &out.join("extracts"), &[], force)?;
    let fetcher = make_fetcher(cfg, &cache, a.template)?;
    let pairs_dir = out.join("pairs");
    let store = open_store(cfg, &pairs_dir, force)?;
    let pairs = stitch_all(&store, &fetcher, extracts.into_iter().map(Ok))?;

    let bins = density_histogram(&density_records(&pairs), cfg.curate.bin_width_pp)?;
    put(
        &out.join("density.csv"),
        histogram_table(&bins).as_bytes(),
        force,
    )?;
    let pool = run_select(
        cfg,
        &pairs,
        &out.join("pool.txt"),
        Some(&out.join("pool.json")),
        force,
    )?;
    run_sample(cfg, &pairs_dir, &pairs, &pool, &out.join("patches"), force)?;
    println!("{}", out.display());
    Ok(())
}
