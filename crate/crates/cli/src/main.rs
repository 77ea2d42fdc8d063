use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use radkd::ablation::{ablation_csv, ablation_row, render_ablation_table, run_ablation, AblationRow, ABLATION_ROWS};
use radkd::config::RunConfig;
use radkd::dataset::{prepare_cloud, PreparedDataset};
use radkd::eval::{build_eval_sets, evaluate_dbs, EvalOptions};
use radkd::geometry::GridSpec;
use radkd::io;
use radkd::model::PlaceModel;
use radkd::registry::Strategies;
use radkd::retrieval::{recall_csv, render_recall_table, DescriptorDb};
use radkd::synthworld::generate_dataset;
use radkd::training::{RetrievalPair, TrainConfig, Trainer};

#[derive(Parser, Debug)]
#[command(name = "radkd", version, about = "Radar place recognition with LiDAR-teacher distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the root seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Compute device. Only `cpu` is available.
    #[arg(long, default_value = "cpu")]
    device: String,
}

#[derive(Args, Debug, Clone)]
struct DataArg {
    /// Dataset root holding `frames.csv` and `splits/`.
    #[arg(long, env = "RADKD_DATA_ROOT")]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SensorArg {
    Radar,
    Lidar,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PairArg {
    L2l,
    R2r,
    R2l,
}

impl PairArg {
    fn pair(self) -> RetrievalPair {
        match self {
            PairArg::L2l => RetrievalPair::L2L,
            PairArg::R2r => RetrievalPair::R2R,
            PairArg::R2l => RetrievalPair::R2L,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rasterize a point-cloud file, or every frame of a dataset, into BEV images.
    Prep {
        #[command(flatten)]
        common: Common,
        /// A point-cloud file or a dataset root.
        #[arg(long)]
        input: PathBuf,
        /// Sensor of a single input file; selects its outlier-removal settings.
        #[arg(long, value_enum, default_value = "lidar")]
        sensor: SensorArg,
        /// Grid preset overriding the configured grid (`paper` or `desk`).
        #[arg(long)]
        grid: Option<String>,
    },
    /// Generate a synthetic paired radar / LiDAR dataset.
    SynthGen {
        #[command(flatten)]
        common: Common,
    },
    /// Train the LiDAR teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Distill a radar student for radar-to-radar retrieval.
    TrainR2r {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Distill a radar student for radar-to-LiDAR retrieval.
    TrainR2l {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Report Recall@N for a checkpoint, or for saved descriptor databases.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, conflicts_with_all = ["db", "queries"])]
        checkpoint: Option<PathBuf>,
        /// Retrieval to evaluate; defaults to the checkpoint's training mode.
        #[arg(long, value_enum)]
        mode: Option<PairArg>,
        #[arg(long, requires = "queries")]
        db: Option<PathBuf>,
        #[arg(long, requires = "db")]
        queries: Option<PathBuf>,
        /// Allow query frames that also appear in the database.
        #[arg(long)]
        allow_overlap: bool,
    },
    /// Train and evaluate the a0–a3 / b0–b3 distillation ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Teacher checkpoint; trained first when omitted.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Comma-separated subset of rows.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<String>,
    },
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        if self.device != "cpu" {
            bail!("device `{}` is not available; only `cpu` is supported", self.device);
        }
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.apply_seed(s);
        }
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(cfg)
    }
}

fn data_root(arg: &DataArg, cfg: &RunConfig) -> Result<PathBuf> {
    arg.data
        .clone()
        .or_else(|| cfg.data.root.clone())
        .context("no dataset root: pass --data, set RADKD_DATA_ROOT, or set data.root in the config")
}

fn load_data(arg: &DataArg, cfg: &RunConfig) -> Result<PreparedDataset> {
    let root = data_root(arg, cfg)?;
    let prep = cfg.prep.resolve()?;
    PreparedDataset::load(&root, &prep).with_context(|| format!("loading dataset {}", root.display()))
}

fn load_model(path: &Path) -> Result<(PlaceModel, serde_json::Value)> {
    PlaceModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn train(name: &str, tc: &TrainConfig, data: &PreparedDataset, teacher: Option<&PlaceModel>, cfg: &RunConfig, out: &Path) -> Result<PlaceModel> {
    let strategies = Strategies::builtin();
    let mut trainer = Trainer::new(tc.clone(), &strategies, data, teacher)?;
    let metrics_path = out.join(format!("{name}_metrics.csv"));
    let mut log = fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    trainer.train(Some(&mut log))?;
    let pair = trainer.mode().retrieval();
    let model = trainer.into_student();
    let meta = serde_json::json!({
        "mode": tc.mode,
        "retrieval": pair.label(),
        "seed": tc.seed,
        "train": tc,
        "prep": cfg.prep.resolve()?,
    });
    model.save(&out.join(format!("{name}.ckpt")), meta)?;
    report(&model, data, pair, &cfg.eval, out, name)?;
    Ok(model)
}

fn report(model: &PlaceModel, data: &PreparedDataset, pair: RetrievalPair, opts: &EvalOptions, out: &Path, name: &str) -> Result<()> {
    let (db, q) = build_eval_sets(model, data, pair)?;
    db.save(&out.join(format!("{name}_database.rkdb")))?;
    q.save(&out.join(format!("{name}_queries.rkdb")))?;
    let r = evaluate_dbs(&db, &q, opts)?;
    let rows = vec![(pair.label().to_string(), r)];
    print!("{}", render_recall_table(&rows));
    write(&out.join(format!("{name}_eval.csv")), &recall_csv(&rows))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prep { common, input, sensor, grid } => {
            let cfg = common.load()?;
            let mut prep = cfg.prep.resolve()?;
            if let Some(name) = grid {
                prep.grid = GridSpec::preset(&name).with_context(|| format!("unknown grid preset '{name}'"))?;
            }
            if input.is_dir() {
                let ds = PreparedDataset::load(&input, &prep)?;
                for sub in ["radar", "lidar"] {
                    fs::create_dir_all(common.out.join(sub))?;
                }
                for f in ds.frames() {
                    io::write_bev(&common.out.join(format!("radar/{:06}.bev", f.id)), &f.radar)?;
                    io::write_bev(&common.out.join(format!("lidar/{:06}.bev", f.id)), &f.lidar)?;
                }
                println!("prepared {} frames at {}x{}", ds.frames().len(), prep.grid.height, prep.grid.width);
            } else {
                let cloud = io::read_point_cloud(&input)?;
                let ror = match sensor {
                    SensorArg::Radar => prep.radar_ror,
                    SensorArg::Lidar => prep.lidar_ror,
                };
                let bev = prepare_cloud(&cloud, &prep.grid, ror)?;
                let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("cloud");
                io::write_bev(&common.out.join(format!("{stem}.bev")), &bev)?;
                io::write_pgm(&common.out.join(format!("{stem}.pgm")), &bev)?;
                println!("{stem}: {} points -> {}x{} BEV", cloud.len(), bev.height(), bev.width());
            }
        }
        Command::SynthGen { common } => {
            let cfg = common.load()?;
            let ds = generate_dataset(cfg.seed, &cfg.synth)?;
            io::write_synth_dataset(&common.out, &ds)?;
            println!("wrote {} frames ({} places) to {}", ds.frames.len(), cfg.synth.places, common.out.display());
        }
        Command::TrainTeacher { common, data } => {
            let cfg = common.load()?;
            let ds = load_data(&data, &cfg)?;
            train("teacher", &cfg.teacher, &ds, None, &cfg, &common.out)?;
        }
        Command::TrainR2r { common, data, teacher } => {
            let cfg = common.load()?;
            let ds = load_data(&data, &cfg)?;
            let (t, _) = load_model(&teacher)?;
            train("r2r", &cfg.r2r, &ds, Some(&t), &cfg, &common.out)?;
        }
        Command::TrainR2l { common, data, teacher } => {
            let cfg = common.load()?;
            let ds = load_data(&data, &cfg)?;
            let (t, _) = load_model(&teacher)?;
            train("r2l", &cfg.r2l, &ds, Some(&t), &cfg, &common.out)?;
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            mode,
            db,
            queries,
            allow_overlap,
        } => {
            let cfg = common.load()?;
            let opts = EvalOptions {
                allow_overlap: allow_overlap || cfg.eval.allow_overlap,
                ..cfg.eval.clone()
            };
            let (label, dbs) = match (checkpoint, db, queries) {
                (Some(ckpt), _, _) => {
                    let (model, meta) = load_model(&ckpt)?;
                    let pair = match (mode, meta["retrieval"].as_str()) {
                        (Some(m), _) => m.pair(),
                        (None, Some("R2R")) => RetrievalPair::R2R,
                        (None, Some("R2L")) => RetrievalPair::R2L,
                        _ => RetrievalPair::L2L,
                    };
                    let ds = load_data(&data, &cfg)?;
                    (pair.label().to_string(), build_eval_sets(&model, &ds, pair)?)
                }
                (None, Some(d), Some(q)) => {
                    let d = DescriptorDb::load(&d).with_context(|| format!("loading {}", d.display()))?;
                    let q = DescriptorDb::load(&q).with_context(|| format!("loading {}", q.display()))?;
                    let label = format!("{}2{}", initial(&q), initial(&d));
                    (label, (d, q))
                }
                _ => bail!("eval needs --checkpoint, or both --db and --queries"),
            };
            let r = evaluate_dbs(&dbs.0, &dbs.1, &opts)?;
            let rows = vec![(label, r)];
            print!("{}", render_recall_table(&rows));
            write(&common.out.join("eval.csv"), &recall_csv(&rows))?;
        }
        Command::Ablate {
            common,
            data,
            teacher,
            rows,
        } => {
            let cfg = common.load()?;
            let ds = load_data(&data, &cfg)?;
            let rows: Vec<AblationRow> = if rows.is_empty() {
                ABLATION_ROWS.to_vec()
            } else {
                rows.iter().map(|r| ablation_row(r.trim())).collect::<radkd::Result<_>>()?
            };
            let teacher = match teacher {
                Some(p) => load_model(&p)?.0,
                None => train("teacher", &cfg.teacher, &ds, None, &cfg, &common.out)?,
            };
            let results = run_ablation(
                &rows,
                &cfg.ablation_seeds(),
                &cfg.r2r,
                &Strategies::builtin(),
                &ds,
                &teacher,
                &cfg.eval,
            )?;
            let table = render_ablation_table(&results, &cfg.eval.cutoffs);
            print!("{table}");
            write(&common.out.join("ablation.txt"), &table)?;
            write(&common.out.join("ablation.csv"), &ablation_csv(&results, &cfg.eval.cutoffs))?;
        }
    }
    Ok(())
}

fn initial(db: &DescriptorDb) -> char {
    match db.modality() {
        radkd::retrieval::Modality::Radar => 'R',
        radkd::retrieval::Modality::Lidar => 'L',
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
