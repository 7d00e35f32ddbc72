//! The subcommands as library functions.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ttt_omics_cluster::{build_knn, evaluate, leiden_cluster, Graph, LeidenParams, MetricReport, Partition};
use ttt_omics_core::embedding::{load_protein_map, sort_features, sort_proteins, GeneOrderTable};
use ttt_omics_core::model::FeatureSet;
use ttt_omics_core::training::{embed_all, run_stage, write_loss_csv, EpochLoss, TrainingData};
use ttt_omics_core::{checkpoint, FusionModel, Stage};
use ttt_omics_data::{
    clr_normalize, generate_synthetic, load_matrix, read_dense_csv, read_labels, rna_normalize, select_hvg,
    write_dense_csv, write_labels, ExpressionMatrix, GeneLengthTable, Modality, SynthParams,
};

use crate::config::{Layout, PipelineConfig};
use crate::{CliError, Result};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn require(path: PathBuf, what: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingInput {
            what,
            path,
            reason: "no such file or directory".into(),
        })
    }
}

/// Configured path, or the synthetic default when one was generated.
fn optional_input(configured: &Option<PathBuf>, fallback: PathBuf, what: &'static str) -> Result<Option<PathBuf>> {
    match configured {
        Some(p) => require(p.clone(), what).map(Some),
        None => Ok(fallback.exists().then_some(fallback)),
    }
}

fn required_input(configured: &Option<PathBuf>, fallback: PathBuf, what: &'static str) -> Result<PathBuf> {
    require(configured.clone().unwrap_or(fallback), what)
}

/// Files written by [`cmd_synth`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthFiles {
    pub rna: PathBuf,
    pub adt: PathBuf,
    pub labels: PathBuf,
    pub gene_order: PathBuf,
    pub protein_map: PathBuf,
}

impl SynthFiles {
    pub fn under(layout: &Layout) -> Self {
        let d = layout.synth_dir();
        SynthFiles {
            rna: d.join("rna.csv"),
            adt: d.join("adt.csv"),
            labels: d.join("labels.csv"),
            gene_order: d.join("gene_order.tsv"),
            protein_map: d.join("protein_map.tsv"),
        }
    }
}

pub fn cmd_synth(cfg: &PipelineConfig) -> Result<SynthFiles> {
    let s = &cfg.synth;
    let ds = generate_synthetic(&SynthParams {
        n_cells: s.n_cells,
        n_genes: s.n_genes,
        n_proteins: s.n_proteins,
        n_classes: s.n_classes,
        separation: s.separation,
        seed: s.seed,
    })?;
    let files = SynthFiles::under(&cfg.layout());
    create_dir(&cfg.layout().synth_dir())?;
    write_dense_csv(&ds.rna, &files.rna)?;
    write_dense_csv(&ds.adt, &files.adt)?;
    write_labels(&ds.labels, &files.labels)?;
    let mut order = String::from("gene_symbol\tchromosome\tstart_position\n");
    for (g, c, p) in &ds.gene_positions {
        order.push_str(&format!("{g}\t{c}\t{p}\n"));
    }
    write_file(&files.gene_order, order)?;
    let mut map = String::from("protein\tgene_symbol\n");
    for (p, g) in &ds.protein_genes {
        map.push_str(&format!("{p}\t{g}\n"));
    }
    write_file(&files.protein_map, map)?;
    log::info!("wrote synthetic data for {} cells to {}", s.n_cells, cfg.layout().synth_dir().display());
    Ok(files)
}

/// Feature names and sequence orderings shared by every later stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub rna: FeatureSet,
    pub adt: FeatureSet,
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    command: &'static str,
    version: &'static str,
    config_sha256: String,
    config: &'a PipelineConfig,
    inputs: Vec<(&'static str, String)>,
    rna_normalization: &'static str,
    n_cells: usize,
    n_genes_in: usize,
    n_genes_kept: usize,
    n_proteins: usize,
    dropped_cells: Vec<String>,
    dropped_genes: Vec<String>,
    unpaired_cells: usize,
    unmapped_genes: usize,
    unmapped_proteins: usize,
}

/// Rows of `m` rearranged to `ids`.
fn reorder_cells(m: &ExpressionMatrix, ids: &[String]) -> ExpressionMatrix {
    let pos: HashMap<&str, usize> = m.cell_ids().iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let keep: Vec<usize> = ids.iter().map(|c| pos[c.as_str()]).collect();
    m.select_cells(&keep)
}

pub fn cmd_preprocess(cfg: &PipelineConfig) -> Result<FeatureManifest> {
    let layout = cfg.layout();
    let synth = SynthFiles::under(&layout);
    let d = &cfg.data;
    let rna_path = required_input(&d.rna, synth.rna.clone(), "RNA matrix")?;
    let adt_path = required_input(&d.adt, synth.adt.clone(), "ADT matrix")?;
    let order_path = optional_input(&d.gene_order, synth.gene_order.clone(), "gene order table")?;
    let map_path = optional_input(&d.protein_map, synth.protein_map.clone(), "protein map")?;
    let lengths_path = optional_input(&d.gene_lengths, PathBuf::new(), "gene length table")?;

    let rna = load_matrix(&rna_path, Modality::Rna)?;
    let adt = load_matrix(&adt_path, Modality::Adt)?;
    let adt_ids: BTreeSet<&str> = adt.cell_ids().iter().map(String::as_str).collect();
    let paired: Vec<usize> = (0..rna.n_cells())
        .filter(|&i| adt_ids.contains(rna.cell_ids()[i].as_str()))
        .collect();
    let unpaired = rna.n_cells() + adt.n_cells() - 2 * paired.len();
    if paired.is_empty() {
        return Err(CliError::Join("RNA and ADT matrices share no cell ids".into()));
    }
    if unpaired > 0 {
        log::warn!("{unpaired} cells are present in only one modality and were skipped");
    }
    let rna = rna.select_cells(&paired);

    let lengths = lengths_path.as_deref().map(GeneLengthTable::load).transpose()?;
    let norm = rna_normalize(&rna, lengths.as_ref(), d.log1p)?;
    if !norm.dropped_cells.is_empty() {
        log::warn!("dropped {} cells with zero RNA counts", norm.dropped_cells.len());
    }
    if !norm.dropped_genes.is_empty() {
        log::warn!("dropped {} genes without a length entry", norm.dropped_genes.len());
    }
    let (rna_out, _) = select_hvg(&norm.matrix, d.n_top_genes)?;
    let adt = reorder_cells(&adt, rna_out.cell_ids());
    let adt_out = clr_normalize(&adt, d.clr_pseudocount)?;

    let table = match &order_path {
        Some(p) => GeneOrderTable::load(p)?,
        None => GeneOrderTable::default(),
    };
    let pmap = match &map_path {
        Some(p) => load_protein_map(p)?,
        None => HashMap::new(),
    };
    let mode = cfg.model.order();
    let rna_names = rna_out.feature_names().to_vec();
    let adt_names = adt_out.feature_names().to_vec();
    let rna_order = sort_features(&rna_names, &table, mode)?;
    let adt_order = sort_proteins(&adt_names, &pmap, &table, mode)?;
    let manifest = FeatureManifest {
        rna: FeatureSet::new(rna_names, rna_order)?,
        adt: FeatureSet::new(adt_names, adt_order)?,
    };

    create_dir(&layout.prep_dir())?;
    write_dense_csv(&rna_out, &layout.prep_rna())?;
    write_dense_csv(&adt_out, &layout.prep_adt())?;
    write_file(&layout.features(), to_json(&manifest)?)?;
    let show = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
    let prov = Provenance {
        command: "preprocess",
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: cfg.hash(),
        config: cfg,
        inputs: vec![
            ("rna", rna_path.display().to_string()),
            ("adt", adt_path.display().to_string()),
            ("gene_order", show(&order_path)),
            ("protein_map", show(&map_path)),
            ("gene_lengths", show(&lengths_path)),
        ],
        rna_normalization: if lengths.is_some() { "rpkm" } else { "cpm" },
        n_cells: rna_out.n_cells(),
        n_genes_in: rna.n_features(),
        n_genes_kept: rna_out.n_features(),
        n_proteins: adt_out.n_features(),
        dropped_cells: norm.dropped_cells,
        dropped_genes: norm.dropped_genes,
        unpaired_cells: unpaired,
        unmapped_genes: manifest.rna.ordering.unmapped_count(),
        unmapped_proteins: manifest.adt.ordering.unmapped_count(),
    };
    write_file(&layout.provenance(), to_json(&prov)?)?;
    log::info!(
        "preprocessed {} cells, {} genes, {} proteins into {}",
        prov.n_cells,
        prov.n_genes_kept,
        prov.n_proteins,
        layout.prep_dir().display()
    );
    Ok(manifest)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Config(e.to_string()))
}

fn read_manifest(layout: &Layout) -> Result<FeatureManifest> {
    let path = require(layout.features(), "feature manifest (run preprocess first)")?;
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Cell ids plus dense rows in manifest feature order.
struct Rows {
    cell_ids: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn read_prepared(path: PathBuf, modality: Modality, names: &[String]) -> Result<Rows> {
    let path = require(path, "preprocessed matrix (run preprocess first)")?;
    let m = read_dense_csv(&path, modality, true)?;
    if m.feature_names() != names {
        return Err(CliError::Config(format!(
            "{} does not match the feature manifest",
            path.display()
        )));
    }
    Ok(Rows {
        cell_ids: m.cell_ids().to_vec(),
        rows: m.to_dense(),
    })
}

/// RNA-only rows for stage 3, aligned to the model's genes.
fn transfer_rows(cfg: &PipelineConfig, model: &FusionModel) -> Result<Rows> {
    let layout = cfg.layout();
    let Some(path) = &cfg.data.transfer_rna else {
        return read_prepared(layout.prep_rna(), Modality::Rna, &model.rna.names);
    };
    let path = require(path.clone(), "transfer RNA matrix")?;
    let raw = load_matrix(&path, Modality::Rna)?;
    let lengths = cfg
        .data
        .gene_lengths
        .as_deref()
        .map(GeneLengthTable::load)
        .transpose()?;
    let norm = rna_normalize(&raw, lengths.as_ref(), cfg.data.log1p)?;
    let (aligned, missing) = norm.matrix.align_features(&model.rna.names)?;
    if !missing.is_empty() {
        log::warn!("{} model genes are absent from {} and read as 0", missing.len(), path.display());
    }
    Ok(Rows {
        cell_ids: aligned.cell_ids().to_vec(),
        rows: aligned.to_dense(),
    })
}

fn label_path(cfg: &PipelineConfig) -> Result<PathBuf> {
    required_input(&cfg.data.labels, SynthFiles::under(&cfg.layout()).labels, "labels file")
}

/// Class index per cell and the sorted class names.
fn attach_labels(cfg: &PipelineConfig, cell_ids: &[String]) -> Result<(Vec<usize>, Vec<String>)> {
    let records = read_labels(&label_path(cfg)?)?;
    let by_cell: HashMap<&str, &str> = records
        .iter()
        .map(|r| (r.cell_id.as_str(), r.cell_type.as_str()))
        .collect();
    let mut missing = Vec::new();
    let types: Vec<&str> = cell_ids
        .iter()
        .map(|c| {
            by_cell.get(c.as_str()).copied().unwrap_or_else(|| {
                missing.push(c.as_str());
                ""
            })
        })
        .collect();
    if !missing.is_empty() {
        return Err(join_error(&missing));
    }
    let classes: Vec<String> = types.iter().copied().collect::<BTreeSet<_>>().into_iter().map(String::from).collect();
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    Ok((types.iter().map(|t| index[t]).collect(), classes))
}

fn join_error(missing: &[&str]) -> CliError {
    let shown: Vec<&str> = missing.iter().take(10).copied().collect();
    let more = if missing.len() > shown.len() { ", ..." } else { "" };
    CliError::Join(format!(
        "no label for {} cells: {}{more}",
        missing.len(),
        shown.join(", ")
    ))
}

fn load_checkpoint(path: &Path, what: &'static str) -> Result<FusionModel> {
    let path = require(path.to_owned(), what)?;
    Ok(checkpoint::load(&path)?)
}

/// Paired data for stages 1 and 2, or RNA-only data for stage 3.
fn stage_data(cfg: &PipelineConfig, model: &FusionModel, stage: Stage, labelled: bool) -> Result<(Vec<String>, TrainingData)> {
    let layout = cfg.layout();
    let mut data = TrainingData::default();
    let cell_ids = if stage == Stage::Transfer {
        let r = transfer_rows(cfg, model)?;
        data.rna = r.rows;
        r.cell_ids
    } else {
        let r = read_prepared(layout.prep_rna(), Modality::Rna, &model.rna.names)?;
        let a = read_prepared(layout.prep_adt(), Modality::Adt, &model.adt.names)?;
        if a.cell_ids != r.cell_ids {
            return Err(CliError::Join("preprocessed RNA and ADT list different cells".into()));
        }
        data.rna = r.rows;
        data.adt = Some(a.rows);
        r.cell_ids
    };
    if labelled {
        let (labels, classes) = attach_labels(cfg, &cell_ids)?;
        data.labels = Some(labels);
        data.class_names = classes;
    }
    Ok((cell_ids, data))
}

/// What `train` produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_trace: PathBuf,
    pub trace: Vec<EpochLoss>,
}

pub fn cmd_train(cfg: &PipelineConfig, stage: Stage) -> Result<TrainOutcome> {
    let layout = cfg.layout();
    let mut model = match stage {
        Stage::Pretrain => {
            let m = read_manifest(&layout)?;
            FusionModel::new(cfg.model.clone(), m.rna, m.adt)?
        }
        Stage::Finetune => load_checkpoint(&layout.checkpoint(Stage::Pretrain), "stage-1 checkpoint")?,
        Stage::Transfer => load_checkpoint(&layout.checkpoint(Stage::Finetune), "stage-2 checkpoint")?,
    };
    if stage != Stage::Pretrain && model.config != cfg.model {
        log::warn!("[model] settings differ from the checkpoint; the checkpoint's settings are used");
    }
    let (_, data) = stage_data(cfg, &model, stage, stage != Stage::Pretrain)?;
    let trace = run_stage(&mut model, &data, stage, cfg.train.stage(stage))?;
    let ckpt = layout.checkpoint(stage);
    create_dir(ckpt.parent().expect("checkpoint has a parent"))?;
    checkpoint::save(&model, &ckpt)?;
    let loss = layout.loss_trace(stage);
    write_loss_csv(&loss, &trace)?;
    log::info!("stage {stage}: {} epochs, checkpoint {}", trace.len(), ckpt.display());
    Ok(TrainOutcome {
        checkpoint: ckpt,
        loss_trace: loss,
        trace,
    })
}

/// Latest fine-tuned checkpoint under the output directory.
fn default_checkpoint(layout: &Layout) -> Result<PathBuf> {
    [Stage::Transfer, Stage::Finetune]
        .iter()
        .map(|&s| layout.checkpoint(s))
        .find(|p| p.exists())
        .ok_or_else(|| CliError::MissingInput {
            what: "stage-2 or stage-3 checkpoint",
            path: layout.checkpoint(Stage::Finetune),
            reason: "run train --stage 2 first".into(),
        })
}

pub fn cmd_embed(cfg: &PipelineConfig, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let layout = cfg.layout();
    let ckpt = match checkpoint {
        Some(p) => p.to_owned(),
        None => default_checkpoint(&layout)?,
    };
    let model = load_checkpoint(&ckpt, "checkpoint")?;
    let stage = match model.stage {
        Some(s @ (Stage::Finetune | Stage::Transfer)) => s,
        _ => {
            return Err(CliError::Config(format!(
                "{} is not a stage-2 or stage-3 checkpoint",
                ckpt.display()
            )))
        }
    };
    let (cell_ids, data) = stage_data(cfg, &model, stage, false)?;
    let emb = embed_all(&model, &data, stage)?;
    let out = layout.embeddings();
    write_file(&out, embeddings_csv(&cell_ids, &emb))?;
    log::info!("wrote {} embeddings of width {} to {}", emb.len(), model.config.d, out.display());
    Ok(out)
}

fn embeddings_csv(cell_ids: &[String], emb: &[Vec<f64>]) -> String {
    let d = emb.first().map_or(0, Vec::len);
    let mut out = String::from("cell_id");
    for j in 0..d {
        out.push_str(&format!(",e{j}"));
    }
    out.push('\n');
    for (c, row) in cell_ids.iter().zip(emb) {
        out.push_str(c);
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn read_embeddings(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let path = require(path.to_owned(), "embeddings file")?;
    let bad = |line: usize, m: String| CliError::Data(ttt_omics_data::DataError::Parse {
        path: path.clone(),
        line,
        message: m,
    });
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| bad(1, e.to_string()))?;
    let width = rdr.headers().map_err(|e| bad(1, e.to_string()))?.len();
    if width < 2 {
        return Err(bad(1, "expected cell_id followed by embedding columns".into()));
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(i + 2, e.to_string()))?;
        ids.push(rec[0].to_owned());
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad(i + 2, format!("bad value {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((ids, rows))
}

/// Metrics plus the predicted cluster of each cell.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub cell_ids: Vec<String>,
    pub clusters: Partition,
}

pub fn cmd_evaluate(cfg: &PipelineConfig, embeddings: Option<&Path>) -> Result<Evaluation> {
    let layout = cfg.layout();
    let path = embeddings.map_or_else(|| layout.embeddings(), Path::to_path_buf);
    let (ids, points) = read_embeddings(&path)?;
    let (truth, _) = attach_labels(cfg, &ids)?;
    let ev = cluster_and_score(cfg, ids, &points, &truth)?;
    write_file(&layout.metrics(), ev.report.to_json())?;
    let mut csv = String::from("cell_id,cluster\n");
    for (c, k) in ev.cell_ids.iter().zip(ev.clusters.assignment()) {
        csv.push_str(&format!("{c},{k}\n"));
    }
    write_file(&layout.clusters(), csv)?;
    log::info!(
        "{} clusters; ARI {:.4}, NMI {:.4}",
        ev.clusters.n_communities(),
        ev.report.ari,
        ev.report.nmi
    );
    Ok(ev)
}

/// kNN graph, Leiden and the metric battery against `truth`.
pub fn cluster_and_score(cfg: &PipelineConfig, cell_ids: Vec<String>, points: &[Vec<f64>], truth: &[usize]) -> Result<Evaluation> {
    let knn = build_knn(points, cfg.eval.k)?;
    let graph = Graph::from_knn(&knn);
    let params = LeidenParams {
        resolution: cfg.eval.resolution,
        randomness: cfg.eval.randomness,
        seed: cfg.eval.seed,
        max_iterations: cfg.eval.max_iterations,
    };
    let pred = leiden_cluster(&graph, &params)?.partition;
    let truth = Partition::from_labels(truth);
    let report = evaluate(points, &truth, &pred)?;
    Ok(Evaluation {
        report,
        cell_ids,
        clusters: pred,
    })
}
