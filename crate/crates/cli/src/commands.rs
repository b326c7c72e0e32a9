use std::fs::File;
use std::io::{self, Write};
use std::str::FromStr;

use kvshare::inference::{generate as run_generate, GenRequest, Sampler};
use kvshare::toolkit::{
    convert_pretrained, detokenize, eval_perplexity, load_pretokenized, parse_pairs, plan_report, run_bench,
    tokenize, tokenize_file, write_bench_csv, Checkpoint, TokenStream, BYTE_VOCAB,
};
use kvshare::training::{train as run_train, TrainSchedule, TrainerOptions};
use kvshare::{Error, Iterations, KVTopology, Model, ModelConfig, Partitioning, Positioning, Result};

use crate::args::*;

fn topology(args: &TopoArgs, default_layers: usize) -> Result<KVTopology> {
    let layers = args.layers.unwrap_or(default_layers);
    if let Some(map) = &args.kv_map {
        let ids = parse_ids(map)?;
        if ids.len() != layers {
            return Err(Error::Config(format!("--kv-map has {} entries, expected {layers}", ids.len())));
        }
        return KVTopology::custom_one_based(&ids);
    }
    let pick = |flag: &Option<String>, pos: Option<&String>, name: &str| -> Result<Option<String>> {
        match (flag, pos) {
            (Some(a), Some(b)) if !a.eq_ignore_ascii_case(b) => {
                Err(Error::Config(format!("{name} given twice: `{a}` and `{b}`")))
            }
            (Some(a), _) => Ok(Some(a.clone())),
            (None, b) => Ok(b.cloned()),
        }
    };
    let p = pick(&args.partitioning, args.spec.first(), "partitioning")?;
    let q = pick(&args.positioning, args.spec.get(1), "positioning")?;
    let p = p.map_or(Ok(Partitioning::Pizza), |s| Partitioning::from_str(&s))?;
    let q = q.map_or(Ok(Positioning::Bottom), |s| Positioning::from_str(&s))?;
    KVTopology::build(p, q, layers, args.kv_layers.unwrap_or(layers))
}

fn parse_ids(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("`{}` is not a token id", s.trim())))
        })
        .collect()
}

fn model_config(args: &ModelArgs, layers: Option<usize>) -> Result<ModelConfig> {
    let mut cfg = match args.model.as_str() {
        "tiny" => {
            let mut c = ModelConfig::tiny(layers.unwrap_or(4), args.hidden, args.vocab_size.unwrap_or(BYTE_VOCAB));
            c.max_len = args.max_len;
            c
        }
        name => ModelConfig::by_name(name)?,
    };
    if let Some(l) = layers {
        cfg.n_layers = l;
    }
    if let Some(v) = args.vocab_size {
        cfg.vocab_size = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn iterations(a: IterArgs) -> Iterations {
    Iterations::new(a.m, a.b)
}

fn load_corpus(args: &CorpusArgs) -> Result<TokenStream> {
    match args.format {
        TokenFormat::Bytes => tokenize_file(&args.corpus),
        TokenFormat::U16 => load_pretokenized(&args.corpus, 16, args.vocab),
        TokenFormat::U32 => load_pretokenized(&args.corpus, 32, args.vocab),
    }
}

fn load_model(path: &std::path::Path) -> Result<Model<f32>> {
    Checkpoint::load(path)?.to_model()
}

pub fn plan(a: PlanArgs) -> Result<()> {
    let mut cfg = ModelConfig::by_name(&a.model)?;
    let topo = topology(&a.topo, cfg.n_layers)?;
    cfg.n_layers = topo.n_layers();
    print!("{}", plan_report(&topo, &cfg, a.seq_len, a.bytes)?);
    Ok(())
}

pub fn init(a: InitArgs) -> Result<()> {
    let cfg = model_config(&a.model, a.topo.layers)?;
    let topo = topology(&a.topo, cfg.n_layers)?;
    let model = Model::<f32>::init(cfg, topo, a.seed)?;
    Checkpoint::from_model(&model, 0).save(&a.out)?;
    println!("wrote {} ({} parameters, {})", a.out.display(), model.weights.n_params(), model.topology.name());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let stream = load_corpus(&a.corpus)?;
    let mut model = match &a.from {
        Some(path) => load_model(path)?,
        None => {
            let mut margs = a.model.clone();
            margs.vocab_size = margs.vocab_size.or(Some(stream.vocab_size()));
            let cfg = model_config(&margs, a.topo.layers)?;
            let topo = topology(&a.topo, cfg.n_layers)?;
            Model::init(cfg, topo, a.seed)?
        }
    };
    let batch_tokens = a.batch_tokens.unwrap_or(8 * a.seq_len);
    let mut schedule = match (&a.preset, a.steps) {
        (Some(name), _) => {
            let mut s = TrainSchedule::preset(name)?;
            if let Some(bt) = a.batch_tokens {
                s.batch_tokens = bt;
            }
            s
        }
        (None, steps) => TrainSchedule::for_steps(steps.unwrap_or(200), a.lr, batch_tokens),
    };
    schedule.m = a.m.unwrap_or(schedule.m);
    schedule.b = a.b.unwrap_or(schedule.b);
    let opts = TrainerOptions {
        seq_len: a.seq_len,
        seed: a.seed,
        metrics_csv: a.metrics.clone(),
        checkpoint_dir: Some(a.checkpoint_dir.clone()),
        checkpoint_every: a.checkpoint_every,
        log_every: a.log_every,
    };
    let reports = run_train(&mut model, stream.ids(), &schedule, &opts)?;
    let last = reports.last().expect("at least one step");
    println!(
        "trained {} steps on {} tokens, final loss {:.4}, checkpoint {}",
        reports.len(),
        stream.len(),
        last.loss,
        a.checkpoint_dir.join("final.ckpt").display()
    );
    Ok(())
}

pub fn eval_ppl(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let stream = load_corpus(&a.corpus)?;
    let window = a.window.min(model.config.max_len);
    let ppl = eval_perplexity(&model, stream.ids(), window, a.stride.unwrap_or(window), iterations(a.iters))?;
    println!("perplexity {ppl:.4} tokens {} window {window}", stream.len());
    Ok(())
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let mut prompt = match (&a.prompt, &a.prompt_ids) {
        (_, Some(ids)) => parse_ids(ids)?,
        (Some(text), None) => tokenize(text.as_bytes()).into_ids(),
        (None, None) => vec![0],
    };
    if let Some(x) = a.x {
        if prompt.is_empty() {
            return Err(Error::Data("prompt is empty".into()));
        }
        prompt = prompt.iter().cycle().take(x).copied().collect();
    }
    if let Some(&bad) = prompt.iter().find(|&&t| t >= model.config.vocab_size) {
        return Err(Error::Data(format!("prompt token {bad} is outside the vocabulary of {}", model.config.vocab_size)));
    }
    let req = GenRequest {
        prompt,
        gen_len: a.y,
        sampler: Sampler::from_str(&a.sampler)?,
        seed: a.seed,
    };
    let g = run_generate(&model, &req, iterations(a.iters))?;
    let ids: Vec<String> = g.tokens.iter().map(usize::to_string).collect();
    println!("tokens {}", ids.join(","));
    if model.config.vocab_size == BYTE_VOCAB {
        let text = detokenize(&g.tokens)?;
        println!("text {:?}", String::from_utf8_lossy(&text));
    }
    println!(
        "prefill_secs {:.6} decode_secs {:.6} tokens_per_sec {:.2}",
        g.prefill_secs,
        g.decode_secs,
        g.tokens_per_sec()
    );
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let pairs = parse_pairs(&a.pairs)?;
    let rows = run_bench(&model, &pairs, a.reps, iterations(a.iters), a.seed)?;
    match &a.out {
        Some(path) => write_bench_csv(&rows, File::create(path)?)?,
        None => write_bench_csv(&rows, io::stdout().lock())?,
    }
    io::stdout().flush()?;
    Ok(())
}

pub fn convert(a: ConvertArgs) -> Result<()> {
    let src = Checkpoint::load(&a.checkpoint)?;
    let topo = topology(&a.topo, src.config.n_layers)?;
    let out = convert_pretrained(&src, &topo)?;
    out.save(&a.out)?;
    println!("wrote {} ({}, {} K/V blobs)", a.out.display(), topo.name(), out.kv_blob_count());
    Ok(())
}
