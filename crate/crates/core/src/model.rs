//! The fusion network: per-modality encoders, cross-modal fusion with a
//! learnable residual weight, masked decoders and the classification head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ttt_omics_autodiff::{Tape, Var};

use crate::embedding::{apply_mask, build_tokens, FeatureOrdering, MaskPlan, MaskRecord, OrderMode};
use crate::params::{ParamId, ParamStore, Session};
use crate::ttt::{ttt_block_forward, TttBlockIds, TttBlockVars};
use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    FusionTtt,
    Attention,
    ElementAdd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderChoice {
    #[default]
    GenomeOrder,
    Reverse,
    Shuffled,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Last,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
}

/// Training stage: masked pretraining, paired fine-tuning, RNA-only transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    Pretrain = 1,
    Finetune = 2,
    Transfer = 3,
}

impl TryFrom<u8> for Stage {
    type Error = CoreError;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::Pretrain),
            2 => Ok(Stage::Finetune),
            3 => Ok(Stage::Transfer),
            _ => Err(CoreError::Config(format!("stage must be 1, 2 or 3, got {v}"))),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s as u8
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Rna,
    Adt,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Rna => "rna",
            Modality::Adt => "adt",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Rna => Modality::Adt,
            Modality::Adt => Modality::Rna,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n_blocks_encoder: usize,
    pub n_blocks_decoder: usize,
    pub n_blocks_fusion: usize,
    pub mask_ratio: f64,
    pub fusion_mode: FusionMode,
    pub order_mode: OrderChoice,
    /// Seed of the permutation when `order_mode = "shuffled"`.
    pub order_seed: u64,
    pub lambda_init: f64,
    /// Initial inner learning rate; `None` means `1/d`.
    pub eta_init: Option<f64>,
    pub learn_eta: bool,
    pub activation: Activation,
    pub pooling: Pooling,
    pub rms_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            n_blocks_encoder: 2,
            n_blocks_decoder: 2,
            n_blocks_fusion: 1,
            mask_ratio: 0.15,
            fusion_mode: FusionMode::FusionTtt,
            order_mode: OrderChoice::GenomeOrder,
            order_seed: 0,
            lambda_init: 0.5,
            eta_init: None,
            learn_eta: true,
            activation: Activation::Gelu,
            pooling: Pooling::Mean,
            rms_eps: 1e-6,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.d == 0 {
            return bad("d must be at least 1".into());
        }
        if self.n_blocks_encoder == 0 || self.n_blocks_decoder == 0 || self.n_blocks_fusion == 0 {
            return bad("block counts must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio must be in [0, 1), got {}", self.mask_ratio));
        }
        if !self.lambda_init.is_finite() {
            return bad("lambda_init must be finite".into());
        }
        if let Some(eta) = self.eta_init {
            if !(eta > 0.0 && eta.is_finite()) {
                return bad(format!("eta_init must be positive, got {eta}"));
            }
        }
        if !(self.rms_eps > 0.0) {
            return bad("rms_eps must be positive".into());
        }
        Ok(())
    }

    pub fn eta(&self) -> f64 {
        self.eta_init.unwrap_or(1.0 / self.d as f64)
    }

    pub fn order(&self) -> OrderMode {
        match self.order_mode {
            OrderChoice::GenomeOrder => OrderMode::GenomeOrder,
            OrderChoice::Reverse => OrderMode::Reverse,
            OrderChoice::Shuffled => OrderMode::Shuffled { seed: self.order_seed },
        }
    }
}

/// Fusion parameters bound on a tape.
#[derive(Clone, Debug)]
pub enum FusionVars {
    Ttt(Vec<TttBlockVars>),
    Attention { wq: Var, wk: Var, wv: Var },
    ElementAdd,
}

/// Stack of TTT blocks.
pub fn encode_modality(tape: &mut Tape, x: Var, blocks: &[TttBlockVars], eps: f64) -> Result<Var> {
    blocks.iter().try_fold(x, |h, b| ttt_block_forward(tape, h, b, eps))
}

/// Run the blocks over `[first; second]` and keep the rows of `second`.
pub fn fusion_ttt(tape: &mut Tape, first: Var, second: Var, blocks: &[TttBlockVars], eps: f64) -> Result<Var> {
    let n1 = tape.shape(first).rows();
    let n2 = tape.shape(second).rows();
    let joint = tape.concat_rows(first, second)?;
    let out = encode_modality(tape, joint, blocks, eps)?;
    Ok(tape.slice_rows(out, n1, n2)?)
}

/// `target + λ · fused`.
pub fn fuse_with_residual(tape: &mut Tape, target: Var, fused: Var, lambda: Var) -> Result<Var> {
    let scaled = tape.mul_scalar(fused, lambda)?;
    Ok(tape.add(target, scaled)?)
}

/// Cross-modal fusion in any of the three modes, returning rows aligned
/// with `second`. Element addition needs equal lengths here.
pub fn fusion_variant(tape: &mut Tape, first: Var, second: Var, vars: &FusionVars, eps: f64) -> Result<Var> {
    match vars {
        FusionVars::Ttt(blocks) => fusion_ttt(tape, first, second, blocks, eps),
        FusionVars::Attention { wq, wk, wv } => {
            let d = tape.shape(second).last();
            let q = tape.matmul(second, *wq)?;
            let k = tape.matmul(first, *wk)?;
            let v = tape.matmul(first, *wv)?;
            let kt = tape.transpose(k)?;
            let s = tape.matmul(q, kt)?;
            let s = tape.scale(s, 1.0 / (d as f64).sqrt())?;
            let a = tape.softmax_rows(s)?;
            Ok(tape.matmul(a, v)?)
        }
        FusionVars::ElementAdd => {
            let (s1, s2) = (tape.shape(first), tape.shape(second));
            if s1 != s2 {
                return Err(CoreError::contract(
                    "fusion_variant",
                    format!("element_add needs equal shapes, got {s1} and {s2}"),
                ));
            }
            Ok(tape.add(first, second)?)
        }
    }
}

/// Element addition for sequences of different length: the mean row of
/// `first` is added to every row of `second`.
pub fn pooled_element_add(tape: &mut Tape, first: Var, second: Var) -> Result<Var> {
    let n2 = tape.shape(second).rows();
    let m = tape.mean_rows(first)?;
    let b = tape.gather_rows(m, &vec![0; n2])?;
    Ok(tape.add(b, second)?)
}

/// Decoder parameters bound on a tape.
#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub mask: Var,
    pub blocks: Vec<TttBlockVars>,
    pub readout_w: Var,
    pub readout_b: Var,
}

/// Put masked positions back (symbol embedding plus the mask vector),
/// run the decoder blocks and read one scalar per position. Returns an
/// `n×1` reconstruction in sequence order.
pub fn decode_modality(tape: &mut Tape, d_in: Var, record: &MaskRecord, p: &DecoderVars, eps: f64) -> Result<Var> {
    let n_vis = tape.shape(d_in).rows();
    if n_vis != record.visible.len() || record.visible.len() + record.masked.len() != record.n {
        return Err(CoreError::contract(
            "decode_modality",
            format!(
                "{n_vis} decoder rows, record has {} visible + {} masked of {}",
                record.visible.len(),
                record.masked.len(),
                record.n
            ),
        ));
    }
    let full = match record.masked_symbols {
        None => d_in,
        Some(sym) => {
            let filler = tape.add_row(sym, p.mask)?;
            let stacked = tape.concat_rows(d_in, filler)?;
            let mut index = vec![0; record.n];
            for (i, &pos) in record.visible.iter().enumerate() {
                index[pos] = i;
            }
            for (j, &pos) in record.masked.iter().enumerate() {
                index[pos] = n_vis + j;
            }
            tape.gather_rows(stacked, &index)?
        }
    };
    let h = encode_modality(tape, full, &p.blocks, eps)?;
    let r = tape.matmul(h, p.readout_w)?;
    Ok(tape.add_row(r, p.readout_b)?)
}

/// Per-modality tensors of one forward pass.
#[derive(Clone, Debug)]
pub struct FusionOutputs {
    pub e_rna: Var,
    pub e_adt: Option<Var>,
    pub ft_rna: Var,
    pub ft_adt: Option<Var>,
}

/// Fixed-width cell embedding (`1×d`) for stages 2 and 3.
pub fn cell_representation(tape: &mut Tape, out: &FusionOutputs, stage: Stage, pooling: Pooling) -> Result<Var> {
    if stage == Stage::Pretrain {
        return Err(CoreError::contract("cell_representation", "stage 1 has no cell embedding"));
    }
    let seq = match (stage, out.ft_adt) {
        (Stage::Finetune, Some(adt)) => tape.concat_rows(out.ft_rna, adt)?,
        (Stage::Finetune, None) => {
            return Err(CoreError::contract("cell_representation", "stage 2 needs both modalities"));
        }
        _ => out.ft_rna,
    };
    match pooling {
        Pooling::Mean => Ok(tape.mean_rows(seq)?),
        Pooling::Last => {
            let n = tape.shape(seq).rows();
            Ok(tape.slice_rows(seq, n - 1, 1)?)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FusionIds {
    Ttt(Vec<TttBlockIds>),
    Attention { wq: ParamId, wk: ParamId, wv: ParamId },
    ElementAdd,
}

/// Parameters of one modality branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalityIds {
    pub expr: ParamId,
    pub sym: ParamId,
    pub mask: ParamId,
    pub lambda: ParamId,
    pub encoder: Vec<TttBlockIds>,
    /// Fusion whose output is aligned with this modality.
    pub fusion: FusionIds,
    pub decoder: Vec<TttBlockIds>,
    pub readout_w: ParamId,
    pub readout_b: ParamId,
}

impl ModalityIds {
    fn create(store: &mut ParamStore, m: Modality, n: usize, c: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let t = m.tag();
        let d = c.d;
        let b = 1.0 / (d as f64).sqrt();
        let expr = store.add_uniform(&format!("embed.{t}.expr"), &[n, d], b, rng)?;
        let sym = store.add_uniform(&format!("embed.{t}.sym"), &[n, d], b, rng)?;
        let mask = store.add_uniform(&format!("embed.{t}.mask"), &[d], b, rng)?;
        let lambda = store.add(format!("lambda.{t}"), &[], vec![c.lambda_init])?;
        let encoder = (0..c.n_blocks_encoder)
            .map(|i| TttBlockIds::create(store, &format!("enc.{t}.{i}"), d, c.eta(), rng))
            .collect::<Result<_>>()?;
        let fusion = match c.fusion_mode {
            FusionMode::FusionTtt => FusionIds::Ttt(
                (0..c.n_blocks_fusion)
                    .map(|i| TttBlockIds::create(store, &format!("fusion.{t}.{i}"), d, c.eta(), rng))
                    .collect::<Result<_>>()?,
            ),
            FusionMode::Attention => FusionIds::Attention {
                wq: store.add_uniform(&format!("fusion.{t}.attn.wq"), &[d, d], b, rng)?,
                wk: store.add_uniform(&format!("fusion.{t}.attn.wk"), &[d, d], b, rng)?,
                wv: store.add_uniform(&format!("fusion.{t}.attn.wv"), &[d, d], b, rng)?,
            },
            FusionMode::ElementAdd => FusionIds::ElementAdd,
        };
        let decoder = (0..c.n_blocks_decoder)
            .map(|i| TttBlockIds::create(store, &format!("dec.{t}.{i}"), d, c.eta(), rng))
            .collect::<Result<_>>()?;
        let readout_w = store.add_uniform(&format!("dec.{t}.readout.w"), &[d, 1], b, rng)?;
        let readout_b = store.add_filled(&format!("dec.{t}.readout.b"), &[1], 0.0)?;
        Ok(ModalityIds {
            expr,
            sym,
            mask,
            lambda,
            encoder,
            fusion,
            decoder,
            readout_w,
            readout_b,
        })
    }

    fn find(store: &ParamStore, m: Modality, c: &ModelConfig) -> Result<Self> {
        let t = m.tag();
        let f = |name: String| {
            store
                .find(&name)
                .ok_or_else(|| CoreError::Config(format!("missing parameter {name}")))
        };
        let blocks = |kind: &str, count: usize| -> Result<Vec<TttBlockIds>> {
            (0..count)
                .map(|i| TttBlockIds::find(store, &format!("{kind}.{t}.{i}")))
                .collect()
        };
        let fusion = match c.fusion_mode {
            FusionMode::FusionTtt => FusionIds::Ttt(blocks("fusion", c.n_blocks_fusion)?),
            FusionMode::Attention => FusionIds::Attention {
                wq: f(format!("fusion.{t}.attn.wq"))?,
                wk: f(format!("fusion.{t}.attn.wk"))?,
                wv: f(format!("fusion.{t}.attn.wv"))?,
            },
            FusionMode::ElementAdd => FusionIds::ElementAdd,
        };
        Ok(ModalityIds {
            expr: f(format!("embed.{t}.expr"))?,
            sym: f(format!("embed.{t}.sym"))?,
            mask: f(format!("embed.{t}.mask"))?,
            lambda: f(format!("lambda.{t}"))?,
            encoder: blocks("enc", c.n_blocks_encoder)?,
            fusion,
            decoder: blocks("dec", c.n_blocks_decoder)?,
            readout_w: f(format!("dec.{t}.readout.w"))?,
            readout_b: f(format!("dec.{t}.readout.b"))?,
        })
    }

    fn bind_fusion(&self, s: &mut Session) -> FusionVars {
        match &self.fusion {
            FusionIds::Ttt(b) => FusionVars::Ttt(b.iter().map(|b| b.bind(s)).collect()),
            FusionIds::Attention { wq, wk, wv } => FusionVars::Attention {
                wq: s.param(*wq),
                wk: s.param(*wk),
                wv: s.param(*wv),
            },
            FusionIds::ElementAdd => FusionVars::ElementAdd,
        }
    }

    fn bind_decoder(&self, s: &mut Session) -> DecoderVars {
        DecoderVars {
            mask: s.param(self.mask),
            blocks: self.decoder.iter().map(|b| b.bind(s)).collect(),
            readout_w: s.param(self.readout_w),
            readout_b: s.param(self.readout_b),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadIds {
    pub w: ParamId,
    pub b: ParamId,
}

/// Input features of one modality: names in input order and their
/// sequence ordering.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub names: Vec<String>,
    pub ordering: FeatureOrdering,
}

impl FeatureSet {
    pub fn new(names: Vec<String>, ordering: FeatureOrdering) -> Result<Self> {
        if names.len() != ordering.len() || names.is_empty() {
            return Err(CoreError::contract(
                "FeatureSet",
                format!("{} names for an ordering of {}", names.len(), ordering.len()),
            ));
        }
        Ok(FeatureSet { names, ordering })
    }
}

/// A cell's expression rows in input feature order.
#[derive(Clone, Copy, Debug)]
pub struct CellInput<'a> {
    pub rna: &'a [f64],
    pub adt: Option<&'a [f64]>,
}

/// Everything a training step needs from one cell's forward pass.
#[derive(Clone, Debug)]
pub struct CellForward {
    pub outputs: FusionOutputs,
    /// `(reconstruction n×1, target in sequence order)` per modality in stage 1.
    pub recon_rna: Option<(Var, Vec<f64>)>,
    pub recon_adt: Option<(Var, Vec<f64>)>,
    pub embedding: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub rna: FeatureSet,
    pub adt: FeatureSet,
    pub class_names: Vec<String>,
    /// Last completed training stage.
    pub stage: Option<Stage>,
    rna_ids: ModalityIds,
    adt_ids: ModalityIds,
    head: Option<HeadIds>,
}

impl FusionModel {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig, rna: FeatureSet, adt: FeatureSet) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let rna_ids = ModalityIds::create(&mut store, Modality::Rna, rna.names.len(), &config, &mut rng)?;
        let adt_ids = ModalityIds::create(&mut store, Modality::Adt, adt.names.len(), &config, &mut rng)?;
        Ok(FusionModel {
            config,
            store,
            rna,
            adt,
            class_names: Vec::new(),
            stage: None,
            rna_ids,
            adt_ids,
            head: None,
        })
    }

    /// Rebuild from stored parameters, resolving every handle by name.
    pub fn from_parts(
        config: ModelConfig,
        store: ParamStore,
        rna: FeatureSet,
        adt: FeatureSet,
        class_names: Vec<String>,
        stage: Option<Stage>,
    ) -> Result<Self> {
        config.validate()?;
        let rna_ids = ModalityIds::find(&store, Modality::Rna, &config)?;
        let adt_ids = ModalityIds::find(&store, Modality::Adt, &config)?;
        let head = match (store.find("head.w"), store.find("head.b")) {
            (Some(w), Some(b)) => Some(HeadIds { w, b }),
            (None, None) => None,
            _ => return Err(CoreError::Config("classification head is incomplete".into())),
        };
        let expect = |m: Modality, ids: &ModalityIds, n: usize| -> Result<()> {
            let got = store.shape(ids.expr).dims()[0];
            if got != n {
                return Err(CoreError::Config(format!("{} embedding has {got} rows for {n} features", m.tag())));
            }
            Ok(())
        };
        expect(Modality::Rna, &rna_ids, rna.names.len())?;
        expect(Modality::Adt, &adt_ids, adt.names.len())?;
        if let Some(h) = head {
            if store.shape(h.b).numel() != class_names.len() {
                return Err(CoreError::Config("head width differs from the number of classes".into()));
            }
        }
        Ok(FusionModel {
            config,
            store,
            rna,
            adt,
            class_names,
            stage,
            rna_ids,
            adt_ids,
            head,
        })
    }

    pub fn ids(&self, m: Modality) -> &ModalityIds {
        match m {
            Modality::Rna => &self.rna_ids,
            Modality::Adt => &self.adt_ids,
        }
    }

    pub fn head(&self) -> Option<HeadIds> {
        self.head
    }

    /// Add a zero-bias linear head for `class_names`, or check the existing
    /// one matches.
    pub fn ensure_head(&mut self, class_names: &[String]) -> Result<HeadIds> {
        if class_names.len() < 2 {
            return Err(CoreError::contract("classification_head", "need at least 2 classes"));
        }
        if let Some(h) = self.head {
            if self.class_names != class_names {
                return Err(CoreError::Config(format!(
                    "model was trained on classes {:?}, data has {:?}",
                    self.class_names, class_names
                )));
            }
            return Ok(h);
        }
        let d = self.config.d;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x4845_4144);
        let b = 1.0 / (d as f64).sqrt();
        let h = HeadIds {
            w: self.store.add_uniform("head.w", &[d, class_names.len()], b, &mut rng)?,
            b: self.store.add_filled("head.b", &[class_names.len()], 0.0)?,
        };
        self.head = Some(h);
        self.class_names = class_names.to_vec();
        Ok(h)
    }

    fn features(&self, m: Modality) -> &FeatureSet {
        match m {
            Modality::Rna => &self.rna,
            Modality::Adt => &self.adt,
        }
    }

    /// Tokens, masking and encoder for one modality.
    fn encode(&self, s: &mut Session, m: Modality, row: &[f64], plan: Option<&MaskPlan>) -> Result<(Var, MaskRecord, Vec<f64>)> {
        let fs = self.features(m);
        if row.len() != fs.names.len() {
            return Err(CoreError::contract(
                "forward",
                format!("{} row has {} values for {} features", m.tag(), row.len(), fs.names.len()),
            ));
        }
        let ids = self.ids(m);
        let expr = s.param(ids.expr);
        let sym = s.param(ids.sym);
        let tokens = build_tokens(&mut s.tape, row, &fs.ordering, expr, sym)?;
        let none = MaskPlan::none(row.len());
        let (vis, rec) = apply_mask(&mut s.tape, &tokens, plan.unwrap_or(&none))?;
        let blocks: Vec<TttBlockVars> = ids.encoder.iter().map(|b| b.bind(s)).collect();
        let e = encode_modality(&mut s.tape, vis, &blocks, self.config.rms_eps)?;
        Ok((e, rec, fs.ordering.apply(row)))
    }

    /// Fused representation aligned with `target`.
    fn fuse(&self, s: &mut Session, target: Modality, e_target: Var, e_other: Var) -> Result<Var> {
        let ids = self.ids(target);
        let fused = match self.config.fusion_mode {
            FusionMode::ElementAdd => pooled_element_add(&mut s.tape, e_other, e_target)?,
            _ => {
                let vars = ids.bind_fusion(s);
                fusion_variant(&mut s.tape, e_other, e_target, &vars, self.config.rms_eps)?
            }
        };
        let lambda = s.param(ids.lambda);
        fuse_with_residual(&mut s.tape, e_target, fused, lambda)
    }

    /// One cell through the stage's topology. `mask_seed` drives the
    /// stage-1 masks of both modalities.
    pub fn forward_cell(&self, s: &mut Session, cell: CellInput, stage: Stage, mask_seed: u64) -> Result<CellForward> {
        let eps = self.config.rms_eps;
        if stage == Stage::Transfer {
            let (e_rna, _, _) = self.encode(s, Modality::Rna, cell.rna, None)?;
            let outputs = FusionOutputs {
                e_rna,
                e_adt: None,
                ft_rna: e_rna,
                ft_adt: None,
            };
            let embedding = cell_representation(&mut s.tape, &outputs, stage, self.config.pooling)?;
            return Ok(CellForward {
                outputs,
                recon_rna: None,
                recon_adt: None,
                embedding: Some(embedding),
            });
        }
        let adt_row = cell
            .adt
            .ok_or_else(|| CoreError::contract("forward", format!("stage {stage} needs both modalities")))?;
        let plans = if stage == Stage::Pretrain {
            let r = self.config.mask_ratio;
            Some((
                MaskPlan::new(cell.rna.len(), r, mask_seed)?,
                MaskPlan::new(adt_row.len(), r, mask_seed ^ 0xA5A5_A5A5_A5A5_A5A5)?,
            ))
        } else {
            None
        };
        let (e_rna, rec_rna, x_rna) = self.encode(s, Modality::Rna, cell.rna, plans.as_ref().map(|p| &p.0))?;
        let (e_adt, rec_adt, x_adt) = self.encode(s, Modality::Adt, adt_row, plans.as_ref().map(|p| &p.1))?;
        let ft_rna = self.fuse(s, Modality::Rna, e_rna, e_adt)?;
        let ft_adt = self.fuse(s, Modality::Adt, e_adt, e_rna)?;
        let outputs = FusionOutputs {
            e_rna,
            e_adt: Some(e_adt),
            ft_rna,
            ft_adt: Some(ft_adt),
        };
        if stage == Stage::Finetune {
            let embedding = cell_representation(&mut s.tape, &outputs, stage, self.config.pooling)?;
            return Ok(CellForward {
                outputs,
                recon_rna: None,
                recon_adt: None,
                embedding: Some(embedding),
            });
        }
        let mut decode = |m: Modality, e: Var, ft: Var, rec: &MaskRecord| -> Result<Var> {
            let d_in = s.tape.add(e, ft)?;
            let p = self.ids(m).bind_decoder(s);
            decode_modality(&mut s.tape, d_in, rec, &p, eps)
        };
        let r_rna = decode(Modality::Rna, e_rna, ft_rna, &rec_rna)?;
        let r_adt = decode(Modality::Adt, e_adt, ft_adt, &rec_adt)?;
        Ok(CellForward {
            outputs,
            recon_rna: Some((r_rna, x_rna)),
            recon_adt: Some((r_adt, x_adt)),
            embedding: None,
        })
    }

    /// Class probabilities (`1×C`) from a cell embedding.
    pub fn classify(&self, s: &mut Session, embedding: Var) -> Result<Var> {
        let h = self
            .head
            .ok_or_else(|| CoreError::Config("model has no classification head".into()))?;
        let w = s.param(h.w);
        let b = s.param(h.b);
        classification_head(&mut s.tape, embedding, w, b)
    }

    /// Cell embedding values without recording gradients for later use.
    pub fn embed_cell(&self, cell: CellInput, stage: Stage) -> Result<Vec<f64>> {
        let mut s = Session::new(&self.store);
        let f = self.forward_cell(&mut s, cell, stage, 0)?;
        let e = f
            .embedding
            .ok_or_else(|| CoreError::contract("cell_representation", "stage 1 has no cell embedding"))?;
        Ok(s.tape.value(e).to_vec())
    }
}

/// Softmax of `embedding · w + b`.
pub fn classification_head(tape: &mut Tape, embedding: Var, w: Var, b: Var) -> Result<Var> {
    let logits = tape.matmul(embedding, w)?;
    let logits = tape.add_row(logits, b)?;
    Ok(tape.softmax_rows(logits)?)
}

/// Deterministic per-(seed, epoch, cell) mask seed.
pub fn mask_seed(seed: u64, epoch: usize, cell: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | cell as u64);
    rng.random()
}
