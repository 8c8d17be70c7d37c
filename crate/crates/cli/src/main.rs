use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lesionkit_cli::analyze::{
    self, ContrastOptions, CooccurOptions, DoseOptions, HumanMapOptions, LikelihoodOptions, ResidualizeOptions,
    VisibleOptions,
};
use lesionkit_cli::config::SweepConfig;
use lesionkit_cli::store::LoadedStores;
use lesionkit_cli::synth::{cmd_synth, SynthConfig};
use lesionkit_cli::{report, sweep, CliError, CliResult};
use lesionkit_stats::{DepthConfig, DoseProxy, DoseScope};

#[derive(Parser)]
#[command(name = "lesionkit", version, about = "Weight-lesion sweeps and symptom-profile analyses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) the lesion grid described by a config file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's store path.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Overrides the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Run one analysis over one or more stores.
    Analyze {
        #[command(subcommand)]
        analysis: Analysis,
    },
    /// Stitch analysis outputs into a markdown report.
    Report {
        #[arg(long)]
        store: Vec<PathBuf>,
        #[arg(long)]
        analyses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic store with a planted FFN effect.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        models: usize,
        #[arg(long, default_value_t = 6)]
        layers: usize,
        #[arg(long, default_value_t = 20)]
        prompts: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1")]
        severities: Vec<f64>,
        #[arg(long, default_value_t = 5.0)]
        shift_pp: f64,
    },
}

#[derive(Args)]
struct Common {
    /// Record store directory; repeat to merge stores.
    #[arg(long, required = true)]
    store: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ContrastArgs {
    #[arg(long, default_value_t = 5000)]
    n_resamples: usize,
    #[arg(long, default_value_t = 5000)]
    n_flips: usize,
    #[arg(long, default_value_t = 5000)]
    n_perm: usize,
    /// Restrict to one severity.
    #[arg(long)]
    severity: Option<f64>,
}

impl ContrastArgs {
    fn options(&self, burden_adjust: bool) -> ContrastOptions {
        ContrastOptions {
            n_resamples: self.n_resamples,
            n_flips: self.n_flips,
            n_perm: self.n_perm,
            burden_adjust,
            severity: self.severity,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProxyArg {
    Kl,
    Residual,
    Joint,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    SameLayer,
    SameModel,
    Any,
}

#[derive(Subcommand)]
enum Analysis {
    ProfileContrast {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        contrast: ContrastArgs,
        #[arg(long)]
        burden_adjust: bool,
    },
    Cooccur {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50_000)]
        n_perm: usize,
        /// CSV of 0/1 symptom columns to compare against.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    Depth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.75)]
        severity_min: f64,
        #[arg(long, default_value_t = 10)]
        n_bins: usize,
        #[arg(long, default_value_t = 5000)]
        n_perm: usize,
    },
    MatchVisible {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        contrast: ContrastArgs,
        /// Surface features to match on; defaults to all.
        #[arg(long, value_delimiter = ',')]
        vars: Vec<String>,
    },
    MatchDose {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "kl")]
        proxy: ProxyArg,
        #[arg(long, value_enum, default_value = "same-layer")]
        scope: ScopeArg,
    },
    MapHuman {
        #[command(flatten)]
        common: Common,
        /// CSV with `group`, `cluster` and 0/1 symptom columns.
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = 5000)]
        n_boot: usize,
        #[arg(long, default_value_t = 10_000)]
        n_perm: usize,
    },
    EffectSize {
        #[command(flatten)]
        common: Common,
    },
    Residualize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        contrast: ContrastArgs,
        #[arg(long, value_delimiter = ',')]
        features: Vec<String>,
    },
    Likelihood {
        /// Sweep config naming the model.
        #[arg(long)]
        config: PathBuf,
        /// CSV with `population`, `prompt` and `response` columns.
        #[arg(long)]
        texts: PathBuf,
        /// `layer:component:severity[:strategy]`.
        #[arg(long)]
        lesion: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5000)]
        n_resamples: usize,
    },
}

fn analyze(a: Analysis) -> CliResult<PathBuf> {
    let load = |c: &Common| LoadedStores::load(&c.store);
    let (out, out_dir) = match a {
        Analysis::ProfileContrast { common, contrast, burden_adjust } => {
            let s = load(&common)?;
            (analyze::profile_contrast(&s, &contrast.options(burden_adjust), common.seed)?, common.out)
        }
        Analysis::Cooccur { common, n_perm, reference } => {
            let s = load(&common)?;
            (analyze::cooccur(&s, &CooccurOptions { n_perm, reference }, common.seed)?, common.out)
        }
        Analysis::Depth { common, severity_min, n_bins, n_perm } => {
            let s = load(&common)?;
            let cfg = DepthConfig { severity_min, n_bins, n_perm, seed: common.seed };
            (analyze::depth(&s, &cfg)?, common.out)
        }
        Analysis::MatchVisible { common, contrast, vars } => {
            let s = load(&common)?;
            let mut opts = VisibleOptions { contrast: contrast.options(false), ..Default::default() };
            if !vars.is_empty() {
                opts.vars = vars;
            }
            (analyze::match_visible(&s, &opts, common.seed)?, common.out)
        }
        Analysis::MatchDose { common, proxy, scope } => {
            let s = load(&common)?;
            let opts = DoseOptions {
                proxy: match proxy {
                    ProxyArg::Kl => DoseProxy::Kl,
                    ProxyArg::Residual => DoseProxy::Residual,
                    ProxyArg::Joint => DoseProxy::Joint,
                },
                scope: match scope {
                    ScopeArg::SameLayer => DoseScope::SameLayer,
                    ScopeArg::SameModel => DoseScope::SameModel,
                    ScopeArg::Any => DoseScope::Any,
                },
            };
            (analyze::match_dose(&s, &opts)?, common.out)
        }
        Analysis::MapHuman { common, reference, n_boot, n_perm } => {
            let s = load(&common)?;
            let opts = HumanMapOptions { n_boot, n_perm, ..HumanMapOptions::new(reference) };
            (analyze::map_human(&s, &opts, common.seed)?, common.out)
        }
        Analysis::EffectSize { common } => {
            let s = load(&common)?;
            (analyze::effect_size(&s)?, common.out)
        }
        Analysis::Residualize { common, contrast, features } => {
            let s = load(&common)?;
            let mut opts = ResidualizeOptions { contrast: contrast.options(false), ..Default::default() };
            if !features.is_empty() {
                opts.features = features;
            }
            (analyze::residualize(&s, &opts, common.seed)?, common.out)
        }
        Analysis::Likelihood { config, texts, lesion, out, seed, n_resamples } => {
            let cfg = SweepConfig::load(&config)?;
            let opts = LikelihoodOptions { lesion, n_resamples, ..Default::default() };
            (analyze::likelihood(&cfg, &texts, &opts, seed)?, out)
        }
    };
    out.write(&out_dir)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Sweep { config, store, seed, jobs } => {
            let mut cfg = SweepConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.base_seed = s;
            }
            let store = store
                .or_else(|| cfg.store.clone())
                .ok_or_else(|| CliError::Usage("no store path: pass --store or set `store` in the config".into()))?;
            let jobs = jobs.or(cfg.jobs).unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            if jobs == 0 {
                return Err(CliError::Usage("--jobs must be at least 1".into()));
            }
            let summary = sweep::cmd_sweep(&cfg, &store, jobs)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Analyze { analysis } => {
            let path = analyze(analysis)?;
            println!("wrote {}", path.display());
        }
        Command::Report { store, analyses, out } => {
            let s = report::cmd_report(&store, &analyses, &out)?;
            println!("wrote {} ({} sections present, {} absent)", s.path.display(), s.present.len(), s.absent.len());
        }
        Command::Synth { out, seed, models, layers, prompts, severities, shift_pp } => {
            let cfg = SynthConfig {
                n_models: models,
                n_layers: layers,
                severities,
                n_prompts: prompts,
                shift_pp,
                seed,
                intact: true,
            };
            let n = cmd_synth(&cfg, &out)?;
            println!("wrote {n} records to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lesionkit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
