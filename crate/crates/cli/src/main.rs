use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fitnet::checkpoint::{Checkpoint, MAGIC};
use fitnet::config::RunConfig;
use fitnet::datagen::{generate, read_corpus_dir, write_corpus, GenConfig};
use fitnet::evaluation::{reports_csv, run_comparison};
use fitnet::features::UserContext;
use fitnet::model::{parse_methods, Method};
use fitnet::retrieval::{retrieve_top_k, with_clicks, RetrievalIndex};
use fitnet::training::train_methods;
use fitnet::FitError;

#[derive(Parser)]
#[command(name = "fitnet", version, about = "Itinerary-aware matching: generate data, train, evaluate, retrieve")]
struct Cli {
    /// Worker threads for parallel sections [default: available cores]
    #[arg(long, global = true, env = "FITNET_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus (train/test/items plus manifest)
    GenData(GenArgs),
    /// Train the configured methods and write one checkpoint
    Train(TrainArgs),
    /// Compare methods on the test split
    Eval(EvalArgs),
    /// Top-k items for one user
    Retrieve(RetrieveArgs),
    /// Describe a checkpoint file
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// TOML file with generator settings; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    cities: Option<usize>,
    #[arg(long)]
    categories: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory written by gen-data
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write
    #[arg(long)]
    out: PathBuf,
    /// TOML run configuration ([model], [train], [sampling], methods)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds model init, shuffling and negative sampling
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated learned methods [default: fitnet,fitnet-minus,avgpool]
    #[arg(long)]
    methods: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus directory written by gen-data
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "3,10,20,50")]
    ks: Vec<usize>,
    /// Comma-separated methods [default: trained methods plus orderdest2i]
    #[arg(long)]
    methods: Option<String>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    user: u32,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value = "fitnet")]
    method: Method,
    /// Item ids clicked since the context was recorded
    #[arg(long, value_delimiter = ',')]
    click: Vec<u32>,
}

#[derive(Args)]
struct InspectArgs {
    ckpt: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = cli.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli.command, threads) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &FitError) -> u8 {
    match e {
        FitError::Config(_) | FitError::InvalidArgument(_) => 1,
        FitError::Divergence { .. } => 3,
        _ => 2,
    }
}

fn show_config(title: &str, body: &str) {
    eprintln!("# effective {title} configuration");
    eprint!("{body}");
    if !body.ends_with('\n') {
        eprintln!();
    }
}

fn run(command: Command, threads: usize) -> fitnet::Result<()> {
    match command {
        Command::GenData(a) => gen_data(a, threads),
        Command::Train(a) => train(a, threads),
        Command::Eval(a) => eval(a, threads),
        Command::Retrieve(a) => retrieve(a, threads),
        Command::Inspect(a) => inspect(&a.ckpt),
    }
}

fn gen_data(a: GenArgs, threads: usize) -> fitnet::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?).map_err(|e| FitError::config(e.to_string()))?,
        None => GenConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(n) = a.users {
        cfg.n_users = n;
    }
    if let Some(n) = a.items {
        cfg.n_items = n;
    }
    if let Some(n) = a.cities {
        cfg.n_cities = n;
    }
    if let Some(n) = a.categories {
        cfg.n_categories = n;
    }
    cfg.validate()?;
    show_config("gen-data", &format!("out = {:?}\nthreads = {threads}\n{}", a.out, toml::to_string(&cfg).map_err(|e| FitError::config(e.to_string()))?));
    let corpus = generate(&cfg)?;
    let manifest = write_corpus(&a.out, &corpus, &cfg)?;
    println!(
        "wrote {} train and {} test instances over {} items to {}",
        manifest.train_instances,
        manifest.test_instances,
        manifest.items,
        a.out.display()
    );
    for (file, hash) in &manifest.sha256 {
        println!("{hash}  {file}");
    }
    Ok(())
}

fn train(a: TrainArgs, threads: usize) -> fitnet::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .with_seed(a.seed);
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(m) = &a.methods {
        cfg.methods = parse_methods(m)?;
    }
    cfg.train.checkpoint = Some(a.out.clone());
    cfg.validate()?;
    show_config(
        "train",
        &format!("data = {:?}\nthreads = {threads}\n{}", a.data, cfg.to_toml()?),
    );
    let corpus = read_corpus_dir(&a.data)?;
    let ckpt = train_methods(&corpus.train, &corpus.pool, &cfg, |m, e, loss| {
        eprintln!("{m} epoch {} loss {loss:.6}", e + 1);
    })?;
    ckpt.save(&a.out)?;
    for m in &ckpt.models {
        println!(
            "{}\tepochs {}\tfinal loss {:.6}\tfingerprint {}",
            m.method,
            m.loss_history.len(),
            m.final_loss().unwrap_or(f64::NAN),
            m.model.fingerprint()
        );
    }
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs, threads: usize) -> fitnet::Result<()> {
    if a.ks.is_empty() || a.ks.contains(&0) {
        return Err(FitError::invalid("--ks needs positive cutoffs"));
    }
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let methods = match &a.methods {
        Some(m) => parse_methods(m)?,
        None => {
            let mut m: Vec<Method> = Method::ALL
                .into_iter()
                .filter(|m| ckpt.methods().contains(m) || *m == Method::OrderDest2i)
                .collect();
            m.sort();
            m
        }
    };
    show_config(
        "eval",
        &format!(
            "ckpt = {:?}\ncorpus = {:?}\nks = {:?}\nmethods = {:?}\nthreads = {threads}\n",
            a.ckpt,
            a.corpus,
            a.ks,
            methods.iter().map(|m| m.name()).collect::<Vec<_>>()
        ),
    );
    let corpus = read_corpus_dir(&a.corpus)?;
    let reports = run_comparison(&ckpt, &corpus.train, &corpus.test, &corpus.pool, &methods, &a.ks)?;
    print!("{}", reports_csv(&reports));
    println!();
    for r in &reports {
        println!("{r}");
    }
    Ok(())
}

fn find_user(corpus: &fitnet::datagen::Corpus, id: u32) -> fitnet::Result<UserContext> {
    corpus
        .test
        .iter()
        .chain(&corpus.train)
        .find(|i| i.user.user_id == id)
        .map(|i| i.user.clone())
        .ok_or_else(|| FitError::Data(format!("user {id} is not in the corpus")))
}

fn retrieve(a: RetrieveArgs, threads: usize) -> fitnet::Result<()> {
    show_config(
        "retrieve",
        &format!(
            "ckpt = {:?}\ncorpus = {:?}\nuser = {}\nk = {}\nmethod = \"{}\"\nclick = {:?}\nthreads = {threads}\n",
            a.ckpt, a.corpus, a.user, a.k, a.method, a.click
        ),
    );
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let trained = ckpt.model(a.method)?;
    let corpus = read_corpus_dir(&a.corpus)?;
    let user = with_clicks(&find_user(&corpus, a.user)?, &corpus.pool, &a.click)?;
    let index = RetrievalIndex::build(&corpus.pool, &trained.model, &ckpt.vocabularies)?;
    let top = retrieve_top_k(&trained.model, &ckpt.vocabularies, &index, &user, a.k)?;
    println!("rank\titem\tscore\tcity\tcategory");
    for (r, (id, score)) in top.iter().enumerate() {
        let it = corpus.pool.get(*id).expect("index items come from the pool");
        println!("{}\t{id}\t{score:.6}\t{}\t{}", r + 1, it.dest_city_id, it.category_id);
    }
    Ok(())
}

fn inspect(path: &Path) -> fitnet::Result<()> {
    show_config("inspect", &format!("ckpt = {path:?}\n"));
    let ckpt = Checkpoint::load(path)?;
    println!("format {}", String::from_utf8_lossy(MAGIC));
    println!("sampling setting {} ratio {}", ckpt.sampling.setting as u8, ckpt.sampling.ratio);
    let vocab: Vec<String> = ckpt
        .vocabularies
        .iter()
        .map(|v| format!("{}={}", v.feature_name(), v.len()))
        .collect();
    println!("vocabularies {}", vocab.join(" "));
    let mut total = 0;
    for m in &ckpt.models {
        let count: usize = m.model.params().iter().map(|(_, _, t)| t.data().len()).sum();
        total += count;
        println!(
            "model {} epochs {} final_loss {:.6} parameters {count}",
            m.method,
            m.loss_history.len(),
            m.final_loss().unwrap_or(f64::NAN)
        );
        for (_, name, t) in m.model.params().iter() {
            println!("  {}/{name} {:?}", m.method, t.shape());
        }
    }
    println!("total parameters {total}");
    Ok(())
}
