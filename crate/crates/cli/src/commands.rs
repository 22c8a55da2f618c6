use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ltm_core::metrics::{self, Observable, Statistic, ERROR_CSV_HEADER};
use ltm_core::ordering::{fill_in_csv, fill_in_stats, OrderingKind};
use ltm_core::samplers::{hmc_run, imh_run, ChainMeta, ChainRecord, CHAIN_CSV_HEADER};
use ltm_core::training::{train_with, EpochRow, TrainRecord};
use ltm_core::transport::{MapInit, TriangularMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::config::RunConfig;
use crate::{CliError, SamplerArg};

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Creates the output directory and echoes the effective configuration into it.
fn prepare_out(config: &RunConfig) -> Result<PathBuf, CliError> {
    let out = config.out.clone();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    write_file(&out.join("config.toml"), &config.to_toml())?;
    Ok(out)
}

fn new_map(config: &RunConfig, ordering: OrderingKind, nbhd_order: u8) -> Result<TriangularMap, CliError> {
    let spec = config.map_spec(ordering, nbhd_order)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    Ok(TriangularMap::new(spec, MapInit::NearIdentity, &mut rng)?)
}

fn save_map(map: &TriangularMap, path: &Path) -> Result<(), CliError> {
    let file = File::create(path).map_err(io_err(path))?;
    map.save(BufWriter::new(file))?;
    Ok(())
}

fn log_epoch(label: &str, row: &EpochRow) {
    if let Some(ess) = row.ess {
        eprintln!("{label}epoch {} loss {:.5} ess {:.4}", row.epoch, row.loss, ess);
    }
}

pub fn train(config: &RunConfig) -> Result<(), CliError> {
    let action = config.action()?;
    let mut map = new_map(config, config.map.ordering, config.map.nbhd_order)?;
    let out = prepare_out(config)?;
    let every = config.train.checkpoint_every;
    let record = train_with(&mut map, &action, &config.train, |row, map| {
        log_epoch("", row);
        if every > 0 && row.epoch % every == 0 {
            let path = out.join(format!("map_epoch{}.ltm", row.epoch));
            map.save(BufWriter::new(File::create(path)?))?;
        }
        Ok(())
    })?;
    write_file(&out.join("train.csv"), &record.to_csv())?;
    save_map(&map, &out.join("map.ltm"))
}

pub const SWEEP_CSV_HEADER: &str = "ordering,nbhd_order,epoch,ess";

fn sweep_rows(ordering: OrderingKind, order: u8, record: &TrainRecord) -> String {
    let mut s = String::new();
    let evaluated = record.initial_ess.map(|e| (0, e)).into_iter();
    for (epoch, ess) in evaluated.chain(record.rows.iter().filter_map(|r| r.ess.map(|e| (r.epoch, e)))) {
        s.push_str(&format!("{ordering},{order},{epoch},{ess}\n"));
    }
    s
}

pub fn sweep(config: &RunConfig) -> Result<(), CliError> {
    if config.sweep.orderings.is_empty() || config.sweep.nbhd_orders.is_empty() {
        return Err(CliError::Usage(
            "sweep needs at least one ordering and one neighborhood order".into(),
        ));
    }
    let action = config.action()?;
    let out = prepare_out(config)?;
    let mut summary = format!("{SWEEP_CSV_HEADER}\n");
    let mut failures = String::from("ordering,nbhd_order,error\n");
    let mut failed = 0;
    let cells = config.sweep.orderings.len() * config.sweep.nbhd_orders.len();
    for &ordering in &config.sweep.orderings {
        for &order in &config.sweep.nbhd_orders {
            let label = format!("[{ordering} p{order}] ");
            let result = new_map(config, ordering, order).and_then(|mut map| {
                let record = train_with(&mut map, &action, &config.train, |row, _| {
                    log_epoch(&label, row);
                    Ok(())
                })?;
                Ok((map, record))
            });
            match result {
                Ok((map, record)) => {
                    let dir = out.join("sweep").join(format!("{ordering}_p{order}"));
                    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                    write_file(&dir.join("train.csv"), &record.to_csv())?;
                    save_map(&map, &dir.join("map.ltm"))?;
                    summary.push_str(&sweep_rows(ordering, order, &record));
                }
                Err(e) => {
                    eprintln!("{label}failed: {e}");
                    failures.push_str(&format!("{ordering},{order},\"{}\"\n", e.to_string().replace('"', "'")));
                    failed += 1;
                }
            }
        }
    }
    write_file(&out.join("sweep_ess.csv"), &summary)?;
    if failed > 0 {
        write_file(&out.join("sweep_failures.csv"), &failures)?;
    }
    if failed == cells {
        return Err(CliError::Runtime("every sweep cell failed".into()));
    }
    Ok(())
}

fn sidecar(chain: &Path) -> PathBuf {
    chain.with_extension("json")
}

fn write_chain(chain: &ChainRecord, path: &Path) -> Result<(), CliError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    chain.write_csv(&mut w)?;
    w.flush().map_err(io_err(path))?;
    let meta = serde_json::to_string_pretty(&chain.meta).expect("metadata serializes");
    write_file(&sidecar(path), &(meta + "\n"))
}

pub fn sample(config: &RunConfig, sampler: SamplerArg, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let action = config.action()?;
    let chain = match sampler {
        SamplerArg::Hmc => {
            let out = prepare_out(config)?;
            let chain = hmc_run(&config.hmc, &action, None)?;
            (chain, out.join("chain_hmc.csv"))
        }
        SamplerArg::Imh => {
            let path = checkpoint.ok_or_else(|| CliError::Usage("imh needs --checkpoint".into()))?;
            let file = File::open(path).map_err(io_err(path))?;
            let map = TriangularMap::load(std::io::BufReader::new(file))
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let spec = map.spec();
            if spec.extent != config.extent()? || spec.dim != config.lattice.dim {
                return Err(CliError::Data(format!(
                    "checkpoint {} is for L = {}, D = {} but the configuration asks for L = {}, D = {}",
                    path.display(),
                    spec.extent,
                    spec.dim,
                    config.extent()?,
                    config.lattice.dim
                )));
            }
            let out = prepare_out(config)?;
            let chain = imh_run(&config.imh, &map, &action)?;
            (chain, out.join("chain_imh.csv"))
        }
    };
    let (chain, path) = chain;
    eprintln!(
        "{} kept {} steps, acceptance {:.4}, tuned {:.4}",
        chain.meta.sampler.name(),
        chain.len(),
        chain.meta.acceptance,
        chain.meta.tuned
    );
    write_chain(&chain, &path)
}

#[derive(Debug, Deserialize)]
struct ChainRow {
    #[allow(dead_code)]
    step: usize,
    #[allow(dead_code)]
    accepted: u8,
    action: f64,
    magnetization: f64,
}

/// Action and magnetization columns of a chain file plus its metadata.
struct LoadedChain {
    meta: ChainMeta,
    action: Vec<f64>,
    magnetization: Vec<f64>,
}

fn load_chain(path: &Path) -> Result<LoadedChain, CliError> {
    let meta_path = sidecar(path);
    let meta_text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: ChainMeta =
        serde_json::from_str(&meta_text).map_err(|e| CliError::Data(format!("{}: {e}", meta_path.display())))?;
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if headers != CHAIN_CSV_HEADER {
        return Err(CliError::Data(format!(
            "{}: header `{headers}` should be `{CHAIN_CSV_HEADER}`",
            path.display()
        )));
    }
    let mut action = Vec::new();
    let mut magnetization = Vec::new();
    for (i, row) in reader.deserialize::<ChainRow>().enumerate() {
        // row 1 is the header
        let row = row.map_err(|e| CliError::Data(format!("{}: row {}: {e}", path.display(), i + 2)))?;
        action.push(row.action);
        magnetization.push(row.magnetization);
    }
    Ok(LoadedChain {
        meta,
        action,
        magnetization,
    })
}

pub fn compare(config: &RunConfig, chains: &[PathBuf]) -> Result<(), CliError> {
    let loaded = chains.iter().map(|p| load_chain(p)).collect::<Result<Vec<_>, _>>()?;
    let out = prepare_out(config)?;
    let boot = config.bootstrap();
    let mut csv = format!("{ERROR_CSV_HEADER}\n");
    for (chain, path) in loaded.iter().zip(chains) {
        let sizes: Vec<usize> = config
            .compare
            .sizes
            .iter()
            .copied()
            .filter(|&m| m <= chain.action.len())
            .collect();
        if sizes.is_empty() {
            return Err(CliError::Data(format!(
                "{} holds {} samples, fewer than every requested size",
                path.display(),
                chain.action.len()
            )));
        }
        let n = chain.meta.n_sites;
        let energy: Vec<f64> = chain.action.iter().map(|s| s / n as f64).collect();
        for (observable, series, statistic) in [
            (Observable::Energy, &energy, Statistic::Mean),
            (
                Observable::Susceptibility,
                &chain.magnetization,
                Statistic::Susceptibility { n_sites: n },
            ),
        ] {
            let rows = metrics::error_vs_samples(series, statistic, &sizes, &boot)?;
            let reference = metrics::reference_errors(&rows);
            for (row, err_ref) in rows.iter().zip(reference) {
                csv.push_str(&format!(
                    "{},{},{},{},{observable},{},{err_ref}\n",
                    row.m,
                    row.estimate,
                    row.err_lo,
                    row.err_hi,
                    chain.meta.sampler.name()
                ));
            }
        }
    }
    write_file(&out.join("errors.csv"), &csv)
}

pub fn fillin(config: &RunConfig) -> Result<(), CliError> {
    if config.fillin.orderings.is_empty() || config.fillin.sizes.is_empty() {
        return Err(CliError::Usage(
            "fill-in needs at least one ordering and one size".into(),
        ));
    }
    let rows = fill_in_stats(&config.fillin.orderings, &config.fillin.sizes)?;
    let out = prepare_out(config)?;
    write_file(&out.join("fillin.csv"), &fill_in_csv(&rows))
}
