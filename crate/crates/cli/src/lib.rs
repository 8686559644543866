//! Command-line workflows and the puzzle session service.

pub mod server;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cbisl::checkpoint::write_quadro_checkpoint;
use cbisl::data::{ingest_label_maps, load_blm_dir, read_segment_map, synth_dataset, write_blm_dir, SceneGrammar, SCENE_CLASSES};
use cbisl::eval::{run_eval, MaskSpec};
use cbisl::nn::gradient_check;
use cbisl::quadro::{format_sig, train_quadro_with_progress};
use cbisl::*;
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(name = "cbisl", version, about = "Context-based labeling of occluded segment blocks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic layered street scenes as a BLM directory.
    Synth(SynthArgs),
    /// Pool a directory of `.seg` label maps into a BLM directory.
    Ingest(IngestArgs),
    /// Pool a single `.seg` label map into a BLM file.
    Extract(ExtractArgs),
    /// Train one raster-order model.
    Train(TrainArgs),
    /// Train the four-directional ensemble.
    TrainQuadro(TrainArgs),
    /// Fill the Unknown cells of a BLM.
    Infill(InfillArgs),
    /// Per-cell probability of one class over the Unknown cells of a BLM.
    Heatmap(HeatmapArgs),
    /// Top-N accuracy of every direction and the ensemble on a test directory.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of a random model.
    Gradcheck(GradcheckArgs),
    /// Serve puzzle sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub rows: usize,
    #[arg(long, default_value_t = 16)]
    pub cols: usize,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Directory with `.seg` files and `classes.txt`.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub rows: usize,
    #[arg(long)]
    pub cols: usize,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub rows: usize,
    #[arg(long)]
    pub cols: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// BLM directory of fully known grids.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Plain SGD instead of Adam.
    #[arg(long)]
    pub sgd: bool,
    #[arg(long)]
    pub no_shuffle: bool,
    #[arg(long, default_value_t = 6)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub features: usize,
    #[arg(long, default_value_t = 7)]
    pub first_kernel: usize,
    #[arg(long, default_value_t = 3)]
    pub hidden_kernel: usize,
    #[arg(long, default_value_t = 64)]
    pub head: usize,
    /// Chance of occluding each training sample with a random rectangle.
    #[arg(long, default_value_t = 0.0)]
    pub occlusion: f64,
    /// Largest occluding rectangle as HxW; defaults to the full grid.
    #[arg(long, value_parser = parse_dims)]
    pub occlusion_max: Option<(usize, usize)>,
    /// Held-out BLM directory scored in bits/dim after training.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct InfillArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// CSV of the distribution at every filled cell.
    #[arg(long)]
    pub dists: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Class index.
    #[arg(long)]
    pub class: usize,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub pgm: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Four-directional checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// BLM directory of fully known test grids.
    #[arg(long)]
    pub data: PathBuf,
    /// Mask size as HxW.
    #[arg(long, value_parser = parse_dims, default_value = "6x6")]
    pub mask: (usize, usize),
    /// Fixed mask corner as TOP,LEFT; random positions otherwise.
    #[arg(long, value_parser = parse_corner)]
    pub at: Option<(usize, usize)>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    pub rows: usize,
    #[arg(long, default_value_t = 4)]
    pub cols: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub features: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Four-directional checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// BLM directory the puzzles are drawn from.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Size of random puzzle masks as HxW.
    #[arg(long, value_parser = parse_dims, default_value = "4x4")]
    pub mask: (usize, usize),
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    if h == 0 || w == 0 {
        return Err("sizes must be at least 1".into());
    }
    Ok((h, w))
}

fn parse_corner(s: &str) -> Result<(usize, usize), String> {
    let (t, l) = s.split_once(',').ok_or_else(|| format!("expected TOP,LEFT, got {s:?}"))?;
    Ok((
        t.trim().parse().map_err(|_| format!("bad top in {s:?}"))?,
        l.trim().parse().map_err(|_| format!("bad left in {s:?}"))?,
    ))
}

/// Parses `argv` and runs the subcommand. Returns 0 on success, 1 on usage
/// errors and 2 on runtime errors.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Ingest(a) => ingest(a),
        Command::Extract(a) => extract(a),
        Command::Train(a) => train_single(a),
        Command::TrainQuadro(a) => train_four(a),
        Command::Infill(a) => infill(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Serve(a) => serve(a),
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let defaults = SceneGrammar::default();
    let grammar = if (a.rows, a.cols) == (defaults.rows, defaults.cols) {
        SceneGrammar { seed: a.seed, ..defaults }
    } else {
        scaled_grammar(a.rows, a.cols, a.seed)
    };
    let data = synth_dataset(&grammar, a.n)?;
    write_blm_dir(&a.out, data.items(), &SCENE_CLASSES)?;
    println!("wrote {} grids of {}x{} to {}", data.len(), a.rows, a.cols, a.out.display());
    Ok(())
}

/// Band boundaries of the default 16-row grammar stretched to `rows`.
fn scaled_grammar(rows: usize, cols: usize, seed: u64) -> SceneGrammar {
    let d = SceneGrammar::default();
    let scale = |x: usize| ((x * rows + d.rows / 2) / d.rows).max(1);
    let range = |r: &std::ops::RangeInclusive<usize>| scale(*r.start())..=scale(*r.end());
    let mut g = SceneGrammar {
        rows,
        cols,
        sky_tree: range(&d.sky_tree),
        tree_sidewalk: range(&d.tree_sidewalk),
        sidewalk_road: range(&d.sidewalk_road),
        seed,
        ..d
    };
    // Keep the three boundaries strictly increasing on small grids.
    if *g.tree_sidewalk.start() <= *g.sky_tree.end() {
        g.tree_sidewalk = g.sky_tree.end() + 1..=(*g.tree_sidewalk.end()).max(g.sky_tree.end() + 1);
    }
    if *g.sidewalk_road.start() <= *g.tree_sidewalk.end() {
        g.sidewalk_road = g.tree_sidewalk.end() + 1..=(*g.sidewalk_road.end()).max(g.tree_sidewalk.end() + 1);
    }
    g
}

fn ingest(a: IngestArgs) -> anyhow::Result<()> {
    let ingested = ingest_label_maps(&a.input, a.rows, a.cols)?;
    for (path, err) in &ingested.skipped {
        eprintln!("skipped {}: {err}", path.display());
    }
    write_blm_dir(&a.out, ingested.dataset.items(), &ingested.class_names)?;
    println!(
        "ingested {} label maps ({} skipped) into {}",
        ingested.dataset.len(),
        ingested.skipped.len(),
        a.out.display()
    );
    Ok(())
}

fn extract(a: ExtractArgs) -> anyhow::Result<()> {
    let map = read_segment_map(&a.input)?;
    let blm = extract_blm(&map, a.rows, a.cols)?;
    write_blm(&blm, &a.out)?;
    Ok(())
}

fn load_dataset(dir: &Path) -> anyhow::Result<(Vec<Blm>, Option<Vec<String>>)> {
    let (data, names) = load_blm_dir(dir).with_context(|| format!("loading {}", dir.display()))?;
    Ok((data.into_items(), names))
}

fn train_settings(a: &TrainArgs, data: &[Blm]) -> anyhow::Result<(TrainConfig, ModelConfig)> {
    let first = data.first().context("empty dataset")?;
    let occlusion = (a.occlusion > 0.0).then(|| {
        let (h, w) = a.occlusion_max.unwrap_or((first.rows(), first.cols()));
        Occlusion { probability: a.occlusion, max_height: h, max_width: w }
    });
    let train = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        optimizer: if a.sgd { Optimizer::Sgd } else { Optimizer::adam() },
        seed: a.seed,
        shuffle: !a.no_shuffle,
        occlusion,
    };
    let model = ModelConfig {
        num_classes: first.num_classes(),
        num_layers: a.layers,
        features: a.features,
        first_kernel: a.first_kernel,
        hidden_kernel: a.hidden_kernel,
        head_channels: a.head,
    };
    train.validate()?;
    model.validate()?;
    Ok((train, model))
}

fn train_single(a: TrainArgs) -> anyhow::Result<()> {
    let (data, _) = load_dataset(&a.data)?;
    let (config, model_config) = train_settings(&a, &data)?;
    let quiet = a.quiet;
    let out = train_with_progress::<f64>(&config, model_config, &data, |epoch, loss| {
        if !quiet {
            eprintln!("epoch {} loss {:.6} bits/dim {:.6}", epoch + 1, loss, loss / std::f64::consts::LN_2);
        }
    })?;
    let meta = TrainMeta { seed: config.seed, epochs: config.epochs, final_loss: out.final_loss() };
    save_checkpoint(&out.params, &meta, &a.out)?;
    if let Some(dir) = &a.test_data {
        let (test, _) = load_dataset(dir)?;
        println!("test bits/dim {:.6}", out.params.nll_bits_per_dim(&test)?);
    }
    Ok(())
}

fn train_four(a: TrainArgs) -> anyhow::Result<()> {
    let (data, _) = load_dataset(&a.data)?;
    let (config, model_config) = train_settings(&a, &data)?;
    let quiet = a.quiet;
    let out = train_quadro_with_progress::<f64>(&config, model_config, &data, |k, epoch, loss| {
        if !quiet {
            eprintln!("direction {} epoch {} loss {:.6} bits/dim {:.6}", k, epoch + 1, loss, loss / std::f64::consts::LN_2);
        }
    })?;
    let metas = std::array::from_fn(|k| TrainMeta {
        seed: config.seed.wrapping_add(k as u64),
        epochs: config.epochs,
        final_loss: *out.loss_curves[k].last().expect("at least one epoch"),
    });
    let mut file = std::io::BufWriter::new(std::fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    write_quadro_checkpoint(&mut file, &out.params, &metas)?;
    std::io::Write::flush(&mut file)?;
    if let Some(dir) = &a.test_data {
        let (test, _) = load_dataset(dir)?;
        let subs = out.params.sub_model_bits_per_dim(&test)?;
        for (k, b) in subs.iter().enumerate() {
            println!("direction {k} test bits/dim {b:.6}");
        }
    }
    Ok(())
}

/// Distributions from either checkpoint kind.
struct Filled {
    filled: Blm,
    dists: std::collections::BTreeMap<(usize, usize), Distribution>,
}

fn fill(model: &Path, blm: &Blm) -> anyhow::Result<Filled> {
    match load_any_checkpoint::<f64>(model).with_context(|| format!("loading {}", model.display()))? {
        Checkpoint::Single(params, _) => {
            let out = params.infill_directional(blm)?;
            Ok(Filled { filled: out.filled, dists: out.dists })
        }
        Checkpoint::Quadro(q, _) => {
            let out = q.ensemble_infill(blm)?;
            Ok(Filled { filled: out.filled, dists: out.dists })
        }
    }
}

/// `row,col,p0,...` with one line per filled cell in raster order.
pub fn format_dists(dists: &std::collections::BTreeMap<(usize, usize), Distribution>, num_classes: usize) -> String {
    let mut out = String::from("row,col");
    for k in 0..num_classes {
        let _ = write!(out, ",p{k}");
    }
    out.push('\n');
    for (&(r, c), d) in dists {
        let _ = write!(out, "{r},{c}");
        for &p in d.probs() {
            let _ = write!(out, ",{}", format_sig(p, 9));
        }
        out.push('\n');
    }
    out
}

fn infill(a: InfillArgs) -> anyhow::Result<()> {
    let blm = read_blm(&a.input)?;
    let out = fill(&a.model, &blm)?;
    write_blm(&out.filled, &a.out)?;
    if let Some(path) = &a.dists {
        std::fs::write(path, format_dists(&out.dists, blm.num_classes())).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn heatmap(a: HeatmapArgs) -> anyhow::Result<()> {
    let blm = read_blm(&a.input)?;
    if a.class >= blm.num_classes() {
        bail!("class {} is outside the vocabulary of {} classes", a.class, blm.num_classes());
    }
    let out = fill(&a.model, &blm)?;
    let map = ProbabilityMap::from_dists(blm.rows(), blm.cols(), &out.dists, ClassId(a.class));
    let csv = map.to_csv();
    match &a.csv {
        Some(path) => std::fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?,
        None if a.pgm.is_none() => print!("{csv}"),
        None => {}
    }
    if let Some(path) = &a.pgm {
        std::fs::write(path, map.to_pgm()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn load_quadro(path: &Path) -> anyhow::Result<Quadro> {
    match load_any_checkpoint::<f64>(path).with_context(|| format!("loading {}", path.display()))? {
        Checkpoint::Quadro(q, _) => Ok(q),
        Checkpoint::Single(..) => bail!("{} holds a single-direction model; a four-directional checkpoint is required", path.display()),
    }
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let quadro = load_quadro(&a.model)?;
    let (data, _) = load_dataset(&a.data)?;
    let (height, width) = a.mask;
    let mask = match a.at {
        Some((top, left)) => MaskSpec::Fixed(MaskRegion::new(top, left, height, width)),
        None => MaskSpec::Random { height, width },
    };
    let name = a.data.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into());
    let report = run_eval(&quadro, &data, mask, a.seed, &name)?;
    print!("{}", report.to_table());
    if let Some(path) = &a.csv {
        std::fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let config = ModelConfig {
        num_classes: a.classes,
        num_layers: a.layers,
        features: a.features,
        first_kernel: 3,
        hidden_kernel: 3,
        head_channels: 2 * a.features,
    };
    let model = Model::init(config, a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed ^ 0x9e37_79b9);
    let batch: Vec<Blm> = (0..2)
        .map(|_| {
            let classes: Vec<usize> = (0..a.rows * a.cols).map(|_| rng.gen_range(0..a.classes)).collect();
            Blm::from_classes(a.rows, a.cols, a.classes, &classes)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Blm> = batch.iter().collect();
    let (_, grad) = model.loss_and_grad(&refs)?;
    let mut probe = model.clone();
    let report = gradient_check(
        |theta| {
            probe.set_flat(theta).expect("same length");
            probe.loss(&refs).expect("valid batch")
        },
        &model.to_flat(),
        &grad.to_flat(),
        a.step,
    );
    println!(
        "checked {} parameters: max relative error {:.3e} at index {} (analytic {:.6e}, numeric {:.6e})",
        report.checked, report.max_relative_error, report.worst_index, report.worst_analytic, report.worst_numeric
    );
    if report.max_relative_error > a.tolerance {
        bail!("max relative error {:.3e} exceeds {:.1e}", report.max_relative_error, a.tolerance);
    }
    Ok(())
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let quadro = load_quadro(&a.model)?;
    let (data, names) = load_dataset(&a.data)?;
    let names = names.unwrap_or_else(|| (0..quadro.num_classes()).map(|k| format!("class{k}")).collect());
    let state = server::AppState::new(quadro, data, names, a.mask)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr).await.with_context(|| format!("binding {}", a.addr))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, server::router(state)).await?;
        anyhow::Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_and_corners_parse() {
        assert_eq!(parse_dims("6x4"), Ok((6, 4)));
        assert_eq!(parse_dims("3X3"), Ok((3, 3)));
        assert!(parse_dims("0x3").is_err());
        assert!(parse_dims("6").is_err());
        assert_eq!(parse_corner("2,5"), Ok((2, 5)));
        assert!(parse_corner("2;5").is_err());
    }

    #[test]
    fn scaled_grammar_is_valid_for_small_and_large_grids() {
        for rows in 5..=40 {
            let g = scaled_grammar(rows, 8, 0);
            assert!(g.validate().is_ok(), "rows {rows}: {g:?}");
        }
    }

    #[test]
    fn dists_csv_layout() {
        let mut dists = std::collections::BTreeMap::new();
        dists.insert((1, 2), Distribution::new(vec![0.25, 0.75]).unwrap());
        assert_eq!(format_dists(&dists, 2), "row,col,p0,p1\n1,2,0.25,0.75\n");
    }
}
