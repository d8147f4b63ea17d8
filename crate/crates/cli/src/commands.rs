use std::fs;
use std::io::Write;
use std::path::Path;

use rbnn::accelsim::{cost, simulate, SimConfig, REPORT_SCHEMA_VERSION};
use rbnn::container::{self, Container};
use rbnn::dataset::{load_csv, load_mnist_split, Normalization};
use rbnn::fixed::FixedPointFormat;
use rbnn::netgraph::{arch1, arch2, argmax, reference_forward, Model, Parallelism, ARCH1_PARALLELISM};
use rbnn::train::{export as export_state, gradcheck as run_gradcheck, predict, train_loop, GradcheckConfig};
use rbnn::train::{Dataset, ParamState, TrainConfig};
use rbnn::{Error, Result};
use serde_json::{json, Value};

use crate::{ExportArgs, GradcheckArgs, InferArgs, InputArgs, ReportArgs, SimArgs, TrainArgs};

const ARCH1_WIDTHS: [usize; 5] = [784, 256, 256, 256, 10];

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Integrity(_) => 3,
        Error::Numeric(_) => 4,
        _ => 2,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_widths(arch: &str) -> Result<Vec<usize>> {
    if arch == "arch1" {
        return Ok(ARCH1_WIDTHS.to_vec());
    }
    arch.split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .map_err(|_| Error::Input(format!("bad architecture {arch:?}: expected arch1 or comma-separated widths")))
        })
        .collect()
}

/// One split of a dataset path: MNIST directories yield the requested split,
/// anything else is read as CSV.
fn load_dataset(path: &Path, train: bool, classes: Option<usize>, format: FixedPointFormat) -> Result<Dataset> {
    if path.is_dir() {
        load_mnist_split(path, train, format)
    } else {
        load_csv(path, classes, Normalization::Identity, format)
    }
}

fn default_parallelism(widths: &[usize]) -> Vec<Parallelism> {
    if widths == ARCH1_WIDTHS {
        ARCH1_PARALLELISM.to_vec()
    } else {
        widths.windows(2).map(|p| Parallelism::new(1, p[0].min(64))).collect()
    }
}

fn load_checkpoint(path: &Path) -> Result<ParamState> {
    match container::load(path)? {
        Container::Checkpoint(s) => Ok(s),
        Container::Model(_) => Err(Error::Input(format!("{}: is a model, expected a checkpoint", path.display()))),
    }
}

fn load_model(path: &Path) -> Result<Model> {
    match container::load(path)? {
        Container::Model(m) => Ok(m),
        Container::Checkpoint(_) => Err(Error::Input(format!("{}: is a checkpoint, expected a model", path.display()))),
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let format = FixedPointFormat::default();
    let state = match &a.resume {
        Some(p) => {
            let mut s = load_checkpoint(p)?;
            s.config.epochs = a.epochs;
            s
        }
        None => {
            let cfg = TrainConfig {
                learning_rate: a.lr,
                epochs: a.epochs,
                batch_size: a.batch_size,
                seed: a.seed,
                levels: a.levels,
                ..Default::default()
            };
            ParamState::seeded(&parse_widths(&a.arch)?, &cfg)?
        }
    };
    state.config.validate()?;
    let classes = *state.widths.last().expect("validated widths");
    let mut train = load_dataset(&a.dataset, true, Some(classes), format)?;
    if let Some(n) = a.limit {
        train = train.head(n);
    }
    let eval = match &a.test {
        Some(p) => load_dataset(p, false, Some(classes), format)?,
        None if a.dataset.is_dir() => load_dataset(&a.dataset, false, Some(classes), format)?,
        None => train.clone(),
    };
    let mut curve = match &a.curve {
        Some(p) => Some(fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut curve_err = None;
    let parallelism = default_parallelism(&state.widths);
    let outcome = train_loop(state, &train, &eval, &parallelism, format, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  accuracy {:.2}%",
            r.epoch,
            r.train_loss,
            100.0 * r.test_accuracy
        );
        if let (Some(f), None) = (curve.as_mut(), curve_err.as_ref()) {
            let line = serde_json::to_string(r).expect("record serializes");
            if let Err(e) = writeln!(f, "{line}") {
                curve_err = Some(e);
            }
        }
    })?;
    if let (Some(e), Some(p)) = (curve_err, &a.curve) {
        return Err(Error::io(p, e));
    }
    container::save(&a.out, &Container::Checkpoint(outcome.state))?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

pub fn export(a: ExportArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let layers = state.widths.len() - 1;
    let parallelism = match (&a.pe, &a.simd) {
        (None, None) => default_parallelism(&state.widths),
        (pe, simd) => {
            let defaults = default_parallelism(&state.widths);
            let pick = |v: &Option<Vec<usize>>, what: &str| -> Result<Option<Vec<usize>>> {
                match v {
                    Some(v) if v.len() != layers => Err(Error::Input(format!(
                        "--{what} has {} entries, network has {layers} layers",
                        v.len()
                    ))),
                    other => Ok(other.clone()),
                }
            };
            let pe = pick(pe, "pe")?;
            let simd = pick(simd, "simd")?;
            (0..layers)
                .map(|l| {
                    Parallelism::new(
                        pe.as_ref().map_or(defaults[l].pe, |v| v[l]),
                        simd.as_ref().map_or(defaults[l].simd, |v| v[l]),
                    )
                })
                .collect()
        }
    };
    let report = export_state(&state, &a.name, &parallelism, FixedPointFormat::default())?;
    report.model.validate()?;
    for w in &report.diagnostics.warnings {
        eprintln!("warning: {w}");
    }
    for (l, j) in &report.diagnostics.negative_alpha {
        eprintln!("note: layer {l} neuron {j} has a negative folded scale; its threshold comparison is inverted");
    }
    for (i, ok) in report.diagnostics.superincreasing.iter().enumerate() {
        if !ok {
            eprintln!("note: activation {i} scales are not superincreasing; greedy encoding may not be optimal");
        }
    }
    container::save(&a.out, &Container::Model(report.model))?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn load_inputs(model: &Model, a: &InputArgs) -> Result<Dataset> {
    let classes = model.num_classes()?;
    let mut data = load_dataset(&a.input, false, Some(classes), model.format)?;
    if data.dim() != model.input.len() {
        return Err(Error::Shape(format!(
            "{} has {} features per row, model expects {}",
            a.input.display(),
            data.dim(),
            model.input.len()
        )));
    }
    if let Some(n) = a.limit {
        data = data.head(n);
    }
    Ok(data)
}

fn row(data: &Dataset, i: usize) -> Result<Vec<f64>> {
    if i >= data.len() {
        return Err(Error::Input(format!("index {i} out of range for {} rows", data.len())));
    }
    Ok(data.features.row(i).to_vec())
}

fn summarize(data: &Dataset, pred: &[usize], a: &InputArgs) -> Result<()> {
    if let Some(p) = &a.predictions {
        let text: String = pred.iter().map(|c| format!("{c}\n")).collect();
        write_file(p, text.as_bytes())?;
    }
    let correct = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    println!("samples: {}", data.len());
    println!("accuracy: {:.2}%", 100.0 * correct as f64 / data.len().max(1) as f64);
    Ok(())
}

pub fn infer(a: InferArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let data = load_inputs(&model, &a.input)?;
    if let Some(i) = a.input.index {
        println!("{}", argmax(&reference_forward(&model, &row(&data, i)?)?));
        return Ok(());
    }
    let pred = predict(&model, &data.features)?;
    summarize(&data, &pred, &a.input)
}

pub fn sim(a: SimArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let data = load_inputs(&model, &a.input)?;
    let cfg = SimConfig {
        clock_mhz: a.clock,
        overhead_cycles: a.overhead_cycles,
    };
    let rows: Vec<usize> = match a.input.index {
        Some(i) => {
            row(&data, i)?;
            vec![i]
        }
        None => (0..data.len()).collect(),
    };
    let results = rbnn::pool::map_ordered(&rows, rbnn::pool::worker_threads(), |&i| {
        let (scores, report) = simulate(&model, &data.features.row(i).to_vec(), &cfg)?;
        Ok((argmax(&scores), report))
    })?;
    let report = match results.first() {
        Some((_, r)) => r.clone(),
        None => rbnn::accelsim::performance(&model, &cfg)?,
    };
    if let Some(p) = &a.report {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        write_file(p, text.as_bytes())?;
    }
    let pred: Vec<usize> = results.into_iter().map(|(c, _)| c).collect();
    if a.input.index.is_some() {
        println!("{}", pred[0]);
        return Ok(());
    }
    summarize(&data, &pred, &a.input)?;
    println!(
        "initiation interval: {} cycles, throughput: {:.0} per second",
        report.initiation_interval, report.throughput_per_second
    );
    Ok(())
}

fn report_model(a: &ReportArgs) -> Result<Model> {
    match (&a.model, a.arch.as_deref()) {
        (Some(p), _) => load_model(p),
        (None, Some("arch1")) => arch1(a.levels),
        (None, Some("arch2")) => arch2(a.levels),
        (None, Some(other)) => Err(Error::Input(format!("unknown architecture {other:?}; expected arch1 or arch2"))),
        (None, None) => Err(Error::Input("this analysis needs --model or --arch".into())),
    }
}

pub fn report(a: ReportArgs) -> Result<()> {
    let chosen = [a.widen.is_some(), a.xnor_overhead, a.utilization.is_some()];
    if chosen.iter().filter(|&&c| c).count() != 1 {
        return Err(Error::Input(
            "choose exactly one of --widen, --xnor-overhead, --utilization".into(),
        ));
    }
    let out: Value = if a.xnor_overhead {
        let bits = a.bits.unwrap_or(FixedPointFormat::default().total_bits);
        let ratio = cost::xnornet_overhead(a.kernel, a.height, a.filters, u64::from(bits))?;
        json!({
            "schema_version": REPORT_SCHEMA_VERSION,
            "analysis": "xnornet_overhead",
            "kernel": a.kernel,
            "height": a.height,
            "filters": a.filters,
            "bits": bits,
            "ratio": ratio,
        })
    } else {
        let model = report_model(&a)?;
        if let Some(w) = a.widen {
            let base = cost::op_count(&model)?;
            let ratio = cost::widen_cost(&model, w)?;
            json!({
                "schema_version": REPORT_SCHEMA_VERSION,
                "analysis": "widen_cost",
                "model": model.name,
                "levels": model.levels,
                "widen": w,
                "base_ops": base,
                "ratio": ratio,
            })
        } else {
            let util = a.utilization.clone().unwrap_or_default();
            let bits = a.bits.unwrap_or(model.format.total_bits);
            let overhead = cost::network_overhead(&model, &util, bits)?;
            json!({
                "schema_version": REPORT_SCHEMA_VERSION,
                "analysis": "network_overhead",
                "model": model.name,
                "levels": model.levels,
                "bits": bits,
                "utilization": util,
                "overhead": overhead,
            })
        }
    };
    let text = serde_json::to_string_pretty(&out).expect("json value serializes");
    match &a.out {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = GradcheckConfig {
        points: a.points,
        levels: a.levels,
        epsilon: a.epsilon,
        seed: a.seed,
        ..Default::default()
    };
    let r = run_gradcheck(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
    if !(r.max_relative_error < a.tolerance) {
        return Err(Error::Numeric(format!(
            "max relative error {:e} exceeds tolerance {:e}",
            r.max_relative_error, a.tolerance
        )));
    }
    Ok(())
}
