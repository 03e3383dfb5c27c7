use std::fs;
use std::path::{Path, PathBuf};

use mdmask::data::{generate_with, DomainDataset, Family, GenParams, Suite};
use mdmask::mask::{Granularity, MaskTransformConfig, Surrogate, Variant};
use mdmask::metrics::{self, analyze_masks, count_domain_bits, OverheadReport, ScoreSpec};
use mdmask::net::{add_domain, ArchSpec, BaseModel, DomainParams};
use mdmask::store;
use mdmask::train::{self, BaseConfig, EpochStats, Protocol, Schedule, TrainConfig};

use crate::args::{
    AddDomainArgs, Command, DataArgs, EvalArgs, GenDataArgs, InspectArgs, PretrainArgs, ScheduleArgs, ScoreArgs,
};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::AddDomain(a) => add_domain_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Score(a) => score(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn parse<T: std::str::FromStr<Err = mdmask::Error>>(s: &str) -> Result<T> {
    s.parse().map_err(CliError::from)
}

fn load_data(a: &DataArgs) -> Result<DomainDataset> {
    match (&a.data, &a.suite) {
        (Some(dir), _) => {
            if !dir.is_dir() {
                return Err(usage(format!("dataset directory {} does not exist", dir.display())));
            }
            Ok(DomainDataset::load_dir(dir)?)
        }
        (None, Some(name)) => {
            let suite = Suite::stock(name)?.scaled(a.scale);
            let domain = a.domain.as_deref().unwrap_or_default();
            let spec = if domain == "base" {
                &suite.base
            } else {
                suite.domain(domain).ok_or_else(|| usage(format!("suite {name} has no domain {domain:?}")))?
            };
            eprintln!("generating {} ({} classes, seed {})", spec.name, spec.num_classes, spec.seed);
            Ok(spec.generate()?)
        }
        (None, None) => Err(usage("a dataset is required: pass --data DIR or --suite NAME --domain NAME")),
    }
}

fn schedule(a: &ScheduleArgs) -> Result<Schedule> {
    let preset = Schedule::preset(&a.schedule)
        .ok_or_else(|| usage(format!("unknown schedule {:?} (expected desk, bench1 or decathlon)", a.schedule)))?;
    let epochs = a.epochs.unwrap_or(preset.epochs);
    // Keep the preset's decay point proportionally when only the length changes.
    let decay = a.decay_epoch.unwrap_or(preset.decay_epoch * epochs / preset.epochs);
    Ok(Schedule::new(epochs, decay, preset.decay_factor)?)
}

fn progress(s: &EpochStats) {
    eprintln!(
        "epoch {:>3}  loss {:.4}  train acc {:.4}  lr {:.2e}/{:.2e}",
        s.epoch + 1,
        s.loss,
        s.accuracy,
        s.lr[0],
        s.lr[1]
    );
}

fn arch(spec: &str) -> Result<ArchSpec> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(mdmask::Error::Io { path: path.into(), source: e }))?;
        return Ok(ArchSpec::parse(&text)?);
    }
    Ok(ArchSpec::resolve(spec)?)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let params = GenParams { noise: a.noise };
    let mut made: Vec<(DomainDataset, PathBuf)> = Vec::new();
    if let Some(name) = &a.suite {
        let suite = Suite::stock(name)?.scaled(a.scale);
        for spec in std::iter::once(&suite.base).chain(&suite.domains) {
            let dir = a.out.join(if std::ptr::eq(spec, &suite.base) { "base" } else { spec.name.as_str() });
            made.push((spec.generate_with(params)?, dir));
        }
    } else {
        let family: Family = parse(a.family.as_deref().expect("clap requires family or suite"))?;
        let scale = |n: usize| ((n as f32 * a.scale).round() as usize).max(1);
        let ds = generate_with(&family, a.classes, scale(a.train_size), scale(a.test_size), a.seed, params)?;
        made.push((ds, a.out.clone()));
    }
    println!("name\tclasses\ttrain\ttest\tseed\tpath");
    for (ds, dir) in made {
        ds.save_dir(&dir)?;
        println!("{}\t{}\t{}\t{}\t{}\t{}", ds.name, ds.num_classes, ds.train.len(), ds.test.len(), ds.seed, dir.display());
    }
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    if let Some(init) = &a.init {
        require_file(init, "initial checkpoint")?;
    }
    let data = load_data(&a.data)?;
    let cfg = BaseConfig { schedule: schedule(&a.schedule)?, batch_size: a.schedule.batch_size, lr: a.lr, flip: a.schedule.flip };
    let seed = a.schedule.seed;
    let (model, report) = match &a.init {
        Some(init) => {
            let start = store::load_backbone(init)?;
            eprintln!("finetuning {} on {} ({} classes)", init.display(), data.name, data.num_classes);
            train::finetune(&start.backbone, &data, &cfg, seed)?
        }
        None => {
            let mut model = BaseModel::build(arch(&a.arch)?, data.num_classes, seed)?;
            eprintln!(
                "pretraining {} ({} parameters) on {} ({} classes)",
                model.backbone.arch().name,
                model.param_count(),
                data.name,
                data.num_classes
            );
            let r = train::train_base_observed(&mut model, &data, &cfg, seed, &mut progress)?;
            (model, r)
        }
    };
    store::save_backbone(&model, &a.out)?;
    println!("dataset\tclasses\ttrain_accuracy\ttest_accuracy\tdigest");
    println!(
        "{}\t{}\t{:.4}\t{:.4}\t{:016x}",
        data.name,
        data.num_classes,
        report.final_train_accuracy().unwrap_or(f32::NAN),
        report.test_accuracy,
        model.backbone.digest()
    );
    eprintln!("wrote {} in {:.1?}", a.out.display(), report.wall_time);
    Ok(())
}

fn add_domain_cmd(a: AddDomainArgs) -> Result<()> {
    require_file(&a.backbone, "backbone checkpoint")?;
    if let Some(paths) = &a.resume {
        for p in paths {
            require_file(p, "resume file")?;
        }
    }
    let config = MaskTransformConfig {
        variant: parse::<Variant>(&a.variant)?,
        surrogate: parse::<Surrogate>(&a.surrogate)?,
        granularity: parse::<Granularity>(&a.granularity)?,
    };
    let protocol: Protocol = parse(&a.protocol)?;
    let cfg = TrainConfig {
        schedule: schedule(&a.schedule)?,
        batch_size: a.schedule.batch_size,
        adam_lr: a.adam_lr,
        sgd_lr: a.sgd_lr,
        protocol,
        flip: a.schedule.flip,
    };
    cfg.validate()?;
    let data = load_data(&a.data)?;
    let model = store::load_backbone(&a.backbone)?;
    let backbone = &model.backbone;
    let before = backbone.digest();
    let mut domain: DomainParams = match &a.resume {
        Some(paths) => {
            let mut d = store::load_domain(&paths[0], backbone)?;
            store::load_real_masks(&mut d, &paths[1])?;
            if d.config != config {
                eprintln!("note: resuming with the stored transform config {:?}", d.config);
            }
            d
        }
        None => {
            let id = a.id.clone().unwrap_or_else(|| data.name.clone());
            add_domain(backbone, id, data.num_classes, config, a.schedule.seed)?
        }
    };
    eprintln!(
        "training domain {} ({}, {protocol}) on {} examples",
        domain.id,
        domain.config.variant,
        data.train.len()
    );
    let report = train::train_domain_observed(backbone, &mut domain, &data, &cfg, a.schedule.seed, &mut progress)?;
    let unchanged = backbone.digest() == before;
    eprintln!("backbone digest {before:016x} {}", if unchanged { "unchanged" } else { "CHANGED" });
    store::save_domain(&domain, &a.out)?;
    if let Some(path) = &a.resume_out {
        store::save_real_masks(&domain, path)?;
    }
    let bits = count_domain_bits(&domain);
    let ratio = metrics::overhead(backbone.param_count() as u64, bits, 2);
    println!("domain\tvariant\tprotocol\ttest_accuracy\tdomain_bits\toverhead\tbackbone_unchanged");
    println!(
        "{}\t{}\t{protocol}\t{:.4}\t{bits}\t{ratio:.6}\t{unchanged}",
        domain.id, domain.config.variant, report.test_accuracy
    );
    eprintln!("wrote {} in {:.1?}", a.out.display(), report.wall_time);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    require_file(&a.backbone, "backbone checkpoint")?;
    if let Some(d) = &a.delta {
        require_file(d, "delta")?;
    }
    let data = load_data(&a.data)?;
    let model = store::load_backbone(&a.backbone)?;
    let (name, acc) = match &a.delta {
        Some(path) => {
            let domain = store::load_domain(path, &model.backbone)?;
            if domain.num_classes() != data.num_classes {
                return Err(mdmask::Error::ClassMismatch { domain: domain.num_classes(), dataset: data.num_classes }.into());
            }
            (domain.id.clone(), train::evaluate_domain(&model.backbone, &domain, &data.test)?)
        }
        None => {
            if model.num_classes() != data.num_classes {
                return Err(mdmask::Error::ClassMismatch { domain: model.num_classes(), dataset: data.num_classes }.into());
            }
            (data.name.clone(), train::evaluate_base(&model, &data.test)?)
        }
    };
    println!("domain\taccuracy\terror");
    println!("{name}\t{acc:.4}\t{:.4}", 1.0 - acc);
    Ok(())
}

/// Reads a two-column TSV `domain<TAB><column>` with a header row.
fn read_column(path: &Path, column: &str) -> Result<Vec<(String, f32)>> {
    require_file(path, "table")?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(mdmask::Error::Io { path: path.into(), source: e }))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().unwrap_or_default();
    if header.split('\t').collect::<Vec<_>>() != ["domain", column] {
        return Err(usage(format!("{}: expected header `domain<TAB>{column}`", path.display())));
    }
    lines
        .map(|l| {
            let (name, v) = l.split_once('\t').ok_or_else(|| usage(format!("{}: bad row {l:?}", path.display())))?;
            let v: f32 = v.trim().parse().map_err(|_| usage(format!("{}: bad number in {l:?}", path.display())))?;
            Ok((name.to_string(), v))
        })
        .collect()
}

fn score(a: ScoreArgs) -> Result<()> {
    let baselines = read_column(&a.baselines, "e_max")?;
    let backbone = match &a.backbone {
        Some(p) => {
            require_file(p, "backbone checkpoint")?;
            Some(store::load_backbone(p)?.backbone)
        }
        None => None,
    };
    let mut domains = Vec::new();
    for path in &a.deltas {
        require_file(path, "delta")?;
        let bb = backbone.as_ref().ok_or_else(|| usage("--backbone is required with deltas"))?;
        domains.push(store::load_domain(path, bb)?);
    }
    let errors: Vec<(String, f32)> = match &a.errors {
        Some(path) => read_column(path, "error")?,
        None => {
            if domains.is_empty() {
                return Err(usage("pass deltas (with --backbone and --data-root) or --errors FILE"));
            }
            let root = a.data_root.as_ref().ok_or_else(|| usage("--data-root is required to evaluate deltas"))?;
            let bb = backbone.as_ref().expect("checked above");
            let mut out = Vec::new();
            for d in &domains {
                let dir = root.join(&d.id);
                if !dir.is_dir() {
                    return Err(usage(format!("no dataset for domain {} at {}", d.id, dir.display())));
                }
                let data = DomainDataset::load_dir(&dir)?;
                let acc = train::evaluate_domain(bb, d, &data.test)?;
                eprintln!("{}: accuracy {acc:.4}", d.id);
                out.push((d.id.clone(), 1.0 - acc));
            }
            out
        }
    };
    let mut e_max = Vec::with_capacity(errors.len());
    for (name, _) in &errors {
        let b = baselines
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| usage(format!("no baseline for domain {name:?}")))?;
        e_max.push(b.1);
    }
    let spec = if a.calibrate { ScoreSpec::calibrate(&e_max, 0.0)? } else { ScoreSpec::new(e_max)? };
    let ratio = match &backbone {
        Some(bb) if !domains.is_empty() => Some(OverheadReport::new(bb, &domains.iter().collect::<Vec<_>>()).ratio as f32),
        _ => None,
    };
    let names: Vec<String> = errors.iter().map(|(n, _)| n.clone()).collect();
    let accuracies: Vec<f32> = errors.iter().map(|(_, e)| 1.0 - e).collect();
    print!("{}", metrics::score_table(&names, &accuracies, &spec, ratio)?);
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    require_file(&a.delta, "delta")?;
    let bytes = fs::read(&a.delta).map_err(|e| CliError::Runtime(mdmask::Error::Io { path: a.delta.clone(), source: e }))?;
    let (domain, layout) = store::decode_with_layout(&bytes)?;
    eprintln!(
        "domain {}  variant {}  surrogate {}  granularity {}  classes {}  backbone {:016x}",
        domain.id,
        domain.config.variant,
        domain.config.surrogate,
        domain.config.granularity,
        domain.num_classes(),
        domain.backbone_digest
    );
    eprintln!(
        "bytes: header {}  payload {}  classifier {}  footer {}  domain bits {}",
        layout.header,
        layout.payload,
        layout.classifier,
        layout.footer,
        count_domain_bits(&domain)
    );
    print!("{}", analyze_masks(&domain)?.to_tsv());
    Ok(())
}
