use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal, Poisson};

use crate::{DataError, ExpressionMatrix, LabelRecord, Modality, Result};

/// Knobs for [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub n_cells: usize,
    pub n_genes: usize,
    pub n_proteins: usize,
    pub n_classes: usize,
    /// Scale of the between-class shift in log-mean space.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_cells: 300,
            n_genes: 50,
            n_proteins: 10,
            n_classes: 3,
            separation: 5.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub rna: ExpressionMatrix,
    pub adt: ExpressionMatrix,
    pub labels: Vec<LabelRecord>,
    /// `(gene, chromosome, start)` for every generated gene.
    pub gene_positions: Vec<(String, String, u64)>,
    /// `(protein, source gene)`.
    pub protein_genes: Vec<(String, String)>,
}

// Negative binomial dispersion for all features.
const DISPERSION: f64 = 4.0;

/// Paired RNA/ADT counts with class-dependent mean profiles.
///
/// Each feature has a base log-mean; each class adds an offset of
/// `0.2 · separation · N(0, 1)`. Counts are negative binomial via
/// Gamma-Poisson, scaled per cell by a log-normal size factor.
pub fn generate_synthetic(p: &SynthParams) -> Result<SyntheticDataset> {
    if p.n_cells == 0 || p.n_genes == 0 || p.n_proteins == 0 || p.n_classes == 0 {
        return Err(DataError::contract("generate_synthetic", "all extents must be at least 1"));
    }
    if !(p.separation >= 0.0) || !p.separation.is_finite() {
        return Err(DataError::contract("generate_synthetic", "separation must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();

    let profiles = |rng: &mut ChaCha8Rng, n: usize, base_mean: f64| -> Vec<Vec<f64>> {
        let base: Vec<f64> = (0..n).map(|_| base_mean + std_normal.sample(rng)).collect();
        (0..p.n_classes)
            .map(|_| {
                base.iter()
                    .map(|b| b + 0.2 * p.separation * std_normal.sample(rng))
                    .collect()
            })
            .collect()
    };
    let rna_profiles = profiles(&mut rng, p.n_genes, 2f64.ln());
    let adt_profiles = profiles(&mut rng, p.n_proteins, 20f64.ln());

    let mut classes: Vec<usize> = (0..p.n_cells).map(|i| i % p.n_classes).collect();
    classes.shuffle(&mut rng);

    let size = LogNormal::new(0.0, 0.3).unwrap();
    let width = p.n_cells.to_string().len().max(4);
    let cell_ids: Vec<String> = (0..p.n_cells).map(|i| format!("cell{i:0width$}")).collect();
    let mut rna_rows = Vec::with_capacity(p.n_cells);
    let mut adt_rows = Vec::with_capacity(p.n_cells);
    for &k in &classes {
        let s = size.sample(&mut rng);
        rna_rows.push(sample_counts(&mut rng, &rna_profiles[k], s));
        adt_rows.push(sample_counts(&mut rng, &adt_profiles[k], s));
    }

    let gene_names: Vec<String> = (0..p.n_genes).map(|j| format!("GENE{j}")).collect();
    let protein_names: Vec<String> = (0..p.n_proteins).map(|j| format!("PROT{j}")).collect();

    // Genes spread over a few chromosomes at random start positions.
    let n_chrom = p.n_genes.div_ceil(10).clamp(1, 22);
    let gene_positions = gene_names
        .iter()
        .map(|g| {
            let chr = format!("chr{}", rng.random_range(1..=n_chrom));
            (g.clone(), chr, rng.random_range(1..250_000_000u64))
        })
        .collect();
    let protein_genes = protein_names
        .iter()
        .enumerate()
        .map(|(j, prot)| (prot.clone(), gene_names[j % p.n_genes].clone()))
        .collect();

    let rna = ExpressionMatrix::from_dense(Modality::Rna, cell_ids.clone(), gene_names, &rna_rows, false, false)?;
    let adt = ExpressionMatrix::from_dense(Modality::Adt, cell_ids.clone(), protein_names, &adt_rows, false, false)?;
    let labels = cell_ids
        .into_iter()
        .zip(&classes)
        .map(|(cell_id, &k)| LabelRecord {
            cell_id,
            cell_type: format!("type{k}"),
        })
        .collect();
    Ok(SyntheticDataset {
        rna,
        adt,
        labels,
        gene_positions,
        protein_genes,
    })
}

fn sample_counts(rng: &mut ChaCha8Rng, log_means: &[f64], size_factor: f64) -> Vec<f64> {
    log_means
        .iter()
        .map(|&lm| {
            let mu = size_factor * lm.exp();
            let rate = Gamma::new(DISPERSION, mu / DISPERSION).unwrap().sample(rng);
            if rate <= 0.0 {
                0.0
            } else {
                Poisson::new(rate).unwrap().sample(rng)
            }
        })
        .collect()
}
