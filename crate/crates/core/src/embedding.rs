//! Input layer: genome-order feature sorting, token construction and
//! random masking.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ttt_omics_autodiff::{Tape, Var};

use crate::{CoreError, Result};

/// Genome position of every known gene symbol.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeneOrderTable {
    /// `(symbol, chromosome, start)` sorted by genome position.
    entries: Vec<(String, String, u64)>,
    rank: HashMap<String, usize>,
}

/// Sort key: chr1..chr22, chrX, chrY, chrM, then anything else by name.
fn chromosome_key(chrom: &str) -> (u32, &str) {
    let bare = chrom.strip_prefix("chr").unwrap_or(chrom);
    match bare {
        "X" => (23, ""),
        "Y" => (24, ""),
        "M" | "MT" => (25, ""),
        _ => match bare.parse::<u32>() {
            Ok(n) if (1..=22).contains(&n) => (n, ""),
            _ => (26, chrom),
        },
    }
}

impl GeneOrderTable {
    pub fn from_entries(entries: Vec<(String, String, u64)>) -> Result<Self> {
        let mut entries = entries;
        let mut seen = HashMap::new();
        for (g, _, _) in &entries {
            if seen.insert(g.clone(), ()).is_some() {
                return Err(CoreError::Config(format!("gene order table lists {g} twice")));
            }
        }
        entries.sort_by(|a, b| {
            chromosome_key(&a.1)
                .cmp(&chromosome_key(&b.1))
                .then(a.2.cmp(&b.2))
                .then_with(|| a.0.cmp(&b.0))
        });
        let rank = entries.iter().enumerate().map(|(i, e)| (e.0.clone(), i)).collect();
        Ok(GeneOrderTable { entries, rank })
    }

    /// Read a `gene_symbol<TAB>chromosome<TAB>start_position` file with a
    /// header row.
    pub fn load(path: &Path) -> Result<Self> {
        let rows = read_tsv(path, &["gene_symbol", "chromosome", "start_position"])?;
        let mut entries = Vec::with_capacity(rows.len());
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (line, cols) in rows {
            let start: u64 = cols[2]
                .trim()
                .parse()
                .map_err(|_| CoreError::parse(path, line, format!("bad start position {:?}", cols[2])))?;
            if let Some(first) = seen.insert(cols[0].clone(), line) {
                return Err(CoreError::parse(
                    path,
                    line,
                    format!("duplicate gene symbol {} (first on line {first})", cols[0]),
                ));
            }
            entries.push((cols[0].clone(), cols[1].clone(), start));
        }
        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rank(&self, symbol: &str) -> Option<usize> {
        self.rank.get(symbol).copied()
    }

    pub fn entries(&self) -> &[(String, String, u64)] {
        &self.entries
    }
}

/// Tab-separated rows after a required header; returns `(line, columns)`.
fn read_tsv(path: &Path, header: &[&str]) -> Result<Vec<(usize, Vec<String>)>> {
    let f = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(path, e))?;
        let cols: Vec<String> = line.split('\t').map(|s| s.trim_end_matches('\r').to_owned()).collect();
        if i == 0 {
            if cols.len() < header.len() || cols.iter().zip(header).any(|(a, b)| a != b) {
                return Err(CoreError::parse(path, 1, format!("header must be {}", header.join("<TAB>"))));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if cols.len() < header.len() {
            return Err(CoreError::parse(
                path,
                i + 1,
                format!("expected {} tab-separated columns", header.len()),
            ));
        }
        out.push((i + 1, cols));
    }
    Ok(out)
}

/// Read a `protein<TAB>gene_symbol` map.
pub fn load_protein_map(path: &Path) -> Result<HashMap<String, String>> {
    let rows = read_tsv(path, &["protein", "gene_symbol"])?;
    let mut map = HashMap::new();
    for (line, cols) in rows {
        if map.insert(cols[0].clone(), cols[1].clone()).is_some() {
            return Err(CoreError::parse(path, line, format!("protein {} mapped twice", cols[0])));
        }
    }
    Ok(map)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OrderMode {
    #[default]
    GenomeOrder,
    Reverse,
    Shuffled {
        seed: u64,
    },
}

/// Position of every input feature in the token sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureOrdering {
    /// `order[pos]` is the input feature placed at sequence position `pos`.
    order: Vec<usize>,
    /// Features without a genome position; they lead the genome order.
    unmapped_count: usize,
}

impl FeatureOrdering {
    pub fn identity(n: usize) -> Self {
        FeatureOrdering {
            order: (0..n).collect(),
            unmapped_count: n,
        }
    }

    pub fn from_order(order: Vec<usize>, unmapped_count: usize) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || std::mem::replace(&mut seen[i], true) {
                return Err(CoreError::contract("FeatureOrdering", "order is not a permutation"));
            }
        }
        Ok(FeatureOrdering { order, unmapped_count })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn unmapped_count(&self) -> usize {
        self.unmapped_count
    }

    /// `permutation()[input]` is the sequence position of that input.
    pub fn permutation(&self) -> Vec<usize> {
        let mut p = vec![0; self.order.len()];
        for (pos, &i) in self.order.iter().enumerate() {
            p[i] = pos;
        }
        p
    }

    /// Input values rearranged into sequence order.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        self.order.iter().map(|&i| values[i]).collect()
    }

    fn with_mode(mut self, mode: OrderMode) -> Self {
        match mode {
            OrderMode::GenomeOrder => {}
            OrderMode::Reverse => self.order.reverse(),
            OrderMode::Shuffled { seed } => self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
        }
        self
    }
}

fn order_by_rank(ranks: &[Option<usize>]) -> FeatureOrdering {
    let mut order: Vec<usize> = (0..ranks.len()).collect();
    // Stable: unmapped first in input order, then by rank with input order
    // breaking ties.
    order.sort_by(|&a, &b| match (ranks[a], ranks[b]) {
        (None, None) => Ordering::Equal,
        (None, Some(_)) => Ordering::Less,
        (Some(_), None) => Ordering::Greater,
        (Some(x), Some(y)) => x.cmp(&y),
    });
    let unmapped_count = ranks.iter().filter(|r| r.is_none()).count();
    FeatureOrdering { order, unmapped_count }
}

/// Order genes by genome position; unknown symbols go first.
pub fn sort_features(names: &[String], table: &GeneOrderTable, mode: OrderMode) -> Result<FeatureOrdering> {
    if names.is_empty() {
        return Err(CoreError::contract("sort_features", "no features to sort"));
    }
    let ranks: Vec<Option<usize>> = names.iter().map(|n| table.rank(n)).collect();
    Ok(order_by_rank(&ranks).with_mode(mode))
}

/// Order proteins by the genome position of their source gene.
pub fn sort_proteins(
    names: &[String],
    protein_to_gene: &HashMap<String, String>,
    table: &GeneOrderTable,
    mode: OrderMode,
) -> Result<FeatureOrdering> {
    if names.is_empty() {
        return Err(CoreError::contract("sort_proteins", "no proteins to sort"));
    }
    let ranks: Vec<Option<usize>> = names
        .iter()
        .map(|p| protein_to_gene.get(p).and_then(|g| table.rank(g)))
        .collect();
    Ok(order_by_rank(&ranks).with_mode(mode))
}

/// Token rows of one cell, in sequence order.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub expression: Var,
    pub symbol: Var,
    pub combined: Var,
}

/// Expression embedding (value times a learned direction per position)
/// plus the symbol embedding of that position.
///
/// `expr_row` is in input feature order; `expr_table` and `sym_table` are
/// `n×d` and indexed by sequence position.
pub fn build_tokens(
    tape: &mut Tape,
    expr_row: &[f64],
    ordering: &FeatureOrdering,
    expr_table: Var,
    sym_table: Var,
) -> Result<TokenSequence> {
    let n = ordering.len();
    if expr_row.len() != n {
        return Err(CoreError::contract(
            "build_tokens",
            format!("{} values for {n} features", expr_row.len()),
        ));
    }
    for t in [expr_table, sym_table] {
        let s = tape.shape(t);
        if s.as_matrix().map(|m| m.0) != Some(n) {
            return Err(CoreError::contract("build_tokens", format!("embedding table {s} has wrong rows for {n} features")));
        }
    }
    let sorted = ordering.apply(expr_row);
    let expression = tape.scale_rows(expr_table, &sorted)?;
    let combined = tape.add(expression, sym_table)?;
    Ok(TokenSequence {
        expression,
        symbol: sym_table,
        combined,
    })
}

/// Which sequence positions are hidden from the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    masked: Vec<usize>,
    n: usize,
}

impl MaskPlan {
    /// `floor(ratio · n)` positions drawn without replacement under `seed`.
    pub fn new(n: usize, ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(CoreError::contract("apply_mask", format!("mask ratio {ratio} must be in [0, 1)")));
        }
        let count = (ratio * n as f64).floor() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut masked = rand::seq::index::sample(&mut rng, n, count).into_vec();
        masked.sort_unstable();
        Ok(MaskPlan { masked, n })
    }

    pub fn none(n: usize) -> Self {
        MaskPlan { masked: Vec::new(), n }
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn visible(&self) -> Vec<usize> {
        let mut is_masked = vec![false; self.n];
        self.masked.iter().for_each(|&i| is_masked[i] = true);
        (0..self.n).filter(|&i| !is_masked[i]).collect()
    }
}

/// What the decoder needs to put masked positions back.
#[derive(Clone, Debug)]
pub struct MaskRecord {
    pub n: usize,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    /// Symbol embeddings of the masked positions (`|masked|×d`), if any.
    pub masked_symbols: Option<Var>,
}

/// Keep the unmasked token rows, in order.
pub fn apply_mask(tape: &mut Tape, tokens: &TokenSequence, plan: &MaskPlan) -> Result<(Var, MaskRecord)> {
    let rows = tape.shape(tokens.combined).rows();
    if rows != plan.n {
        return Err(CoreError::contract(
            "apply_mask",
            format!("plan covers {} positions, sequence has {rows}", plan.n),
        ));
    }
    let visible = plan.visible();
    if visible.is_empty() {
        return Err(CoreError::contract("apply_mask", "every position is masked"));
    }
    let vis = if plan.masked.is_empty() {
        tokens.combined
    } else {
        tape.gather_rows(tokens.combined, &visible)?
    };
    let masked_symbols = if plan.masked.is_empty() {
        None
    } else {
        Some(tape.gather_rows(tokens.symbol, &plan.masked)?)
    };
    Ok((
        vis,
        MaskRecord {
            n: plan.n,
            visible,
            masked: plan.masked.clone(),
            masked_symbols,
        },
    ))
}
