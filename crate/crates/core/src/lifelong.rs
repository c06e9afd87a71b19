//! Sequential multi-domain training with condensed replay and style
//! rehearsal.
//!
//! Per task: train the domain's style model, run joint steps that mix the
//! current batch, its transfer into a previous domain's style, a replay batch
//! and the replay batch in the current style, capture snapshots, then
//! condense a budgeted memory for the domain.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::condense::{
    condense_update, init_synthetic, mask_face_roi, select_kcenter, snapshot_schedule, CondenseConfig, CondenseStep,
    Roi, SyntheticSample,
};
use crate::data::{stack_images, Domain, Sample, Split, TaskStream};
use crate::error::{Error, Result};
use crate::graph::{BackwardMode, Graph, NodeId};
use crate::metrics::{aggregate_report, evaluate_domain, Aggregate, MetricsRecord};
use crate::model::{ModelParams, PerceptualExtractor, Snapshot, StyleModel};
use crate::objectives::{id_loss, LossBreakdown, LossTerm};
use crate::optim::{add_weight_decay, clip_global_norm, SgdMomentum};
use crate::style::{channel_stats, sample_style_stats, train_style_model, transfer_batch, StyleStats, StyleTrainConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Weight of the style-transferred terms.
    pub gamma: f64,
    /// Weight of the replay terms.
    pub lambda: f64,
    /// Gradient-matching weight in the condensation loss.
    pub alpha: f64,
    /// Perceptual weight in the style reconstruction loss.
    pub beta: f64,
    /// Model learning rate. 0.008 at ResNet-50 scale; the small network needs more.
    pub lr: f64,
    /// Synthetic-pixel learning rate.
    pub eta_s: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling for model updates; 0 disables clipping.
    pub grad_clip: f64,
    pub weight_decay: f64,
    /// Steps of linear learning-rate warmup at the start of every task.
    pub warmup_steps: usize,
    pub steps_per_task: usize,
    /// Identities per batch.
    pub p_ids: usize,
    /// Instances per identity.
    pub k_instances: usize,
    pub snapshots: usize,
    /// Default memory budget per identity.
    pub budget: usize,
    /// Budget adjustment ratio.
    pub ratio: f64,
    pub condense_epochs: usize,
    pub condense_real_batch: usize,
    pub mask_sigma: f64,
    /// When false, memory holds masked k-center picks with no pixel updates.
    pub condense: bool,
    pub style_steps: usize,
    pub style_lr: f64,
    pub style_batch: usize,
    /// Spread added to the augmentation statistics during style training.
    pub style_jitter: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gamma: 4.5,
            lambda: 1.0,
            alpha: 0.01,
            beta: 0.01,
            lr: 0.02,
            eta_s: 0.002,
            momentum: 0.9,
            grad_clip: 2.0,
            weight_decay: 5e-4,
            warmup_steps: 20,
            steps_per_task: 200,
            p_ids: 8,
            k_instances: 4,
            snapshots: 4,
            budget: 2,
            ratio: 0.5,
            condense_epochs: 3,
            condense_real_batch: 4,
            mask_sigma: 2.0,
            condense: true,
            style_steps: 150,
            style_lr: 0.01,
            style_batch: 4,
            style_jitter: 0.25,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lr", self.lr),
            ("eta_s", self.eta_s),
            ("style_lr", self.style_lr),
            ("style_jitter", self.style_jitter),
            ("grad_clip", self.grad_clip),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid("run_config", format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::invalid("run_config", format!("ratio must lie in (0, 1), got {}", self.ratio)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("run_config", "momentum must lie in [0, 1)"));
        }
        let positive = [
            ("steps_per_task", self.steps_per_task),
            ("p_ids", self.p_ids),
            ("k_instances", self.k_instances),
            ("snapshots", self.snapshots),
            ("budget", self.budget),
            ("condense_real_batch", self.condense_real_batch),
            ("style_batch", self.style_batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid("run_config", format!("{name} must be positive")));
            }
        }
        if self.snapshots > self.steps_per_task {
            return Err(Error::invalid("run_config", "more snapshots than training steps"));
        }
        if self.mask_sigma.is_nan() || self.mask_sigma <= 0.0 {
            return Err(Error::invalid("run_config", "mask_sigma must be positive"));
        }
        Ok(())
    }

    pub fn condense_config(&self, seed: u64) -> CondenseConfig {
        CondenseConfig {
            alpha: self.alpha,
            eta_s: self.eta_s,
            momentum: self.momentum,
            epochs: self.condense_epochs,
            real_batch: self.condense_real_batch,
            seed,
        }
    }

    pub fn style_config(&self, seed: u64) -> StyleTrainConfig {
        StyleTrainConfig {
            beta: self.beta,
            lr: self.style_lr,
            momentum: self.momentum,
            steps: self.style_steps,
            batch: self.style_batch,
            stats_jitter: self.style_jitter,
            seed,
        }
    }
}

/// Per-domain outcome that drives budget allocation.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainRecord {
    pub domain: usize,
    pub perf: f64,
    pub budget: usize,
    pub reduced: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DomainHistory {
    pub records: Vec<DomainRecord>,
}

/// Budget for the next domain: the default for the first domain; reduced by
/// `ratio` when the model does better than on every earlier domain; raised
/// by `1/ratio` (capped at `cap`) when it does worse than on all of them and
/// some earlier domain had its budget reduced.
pub fn allocate_budget(history: &DomainHistory, current_perf: f64, default: usize, ratio: f64, cap: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&current_perf) {
        return Err(Error::invalid("allocate_budget", format!("performance {current_perf} outside [0, 1]")));
    }
    if history.records.is_empty() {
        return Ok(default);
    }
    let best = history.records.iter().map(|r| r.perf).fold(f64::NEG_INFINITY, f64::max);
    let worst = history.records.iter().map(|r| r.perf).fold(f64::INFINITY, f64::min);
    if current_perf > best {
        Ok(((default as f64 * ratio).round() as usize).max(1))
    } else if current_perf < worst && history.records.iter().any(|r| r.reduced) {
        Ok(((default as f64 / ratio).round() as usize).min(cap).max(1))
    } else {
        Ok(default)
    }
}

/// Applies [`allocate_budget`] to a scripted sequence of performances.
pub fn scripted_budgets(perfs: &[f64], default: usize, ratio: f64, cap: usize) -> Result<Vec<usize>> {
    let mut history = DomainHistory::default();
    let mut out = Vec::with_capacity(perfs.len());
    for (d, &p) in perfs.iter().enumerate() {
        let b = allocate_budget(&history, p, default, ratio, cap)?;
        history.records.push(DomainRecord {
            domain: d,
            perf: p,
            budget: b,
            reduced: b < default,
        });
        out.push(b);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayMemory {
    pub entries: Vec<SyntheticSample>,
    /// Samples per identity, by domain.
    pub budgets: BTreeMap<usize, usize>,
}

impl ReplayMemory {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, domain: usize, budget: usize, entries: Vec<SyntheticSample>) -> Result<()> {
        if self.budgets.contains_key(&domain) {
            return Err(Error::invalid("replay_memory", format!("domain {domain} already stored")));
        }
        if let Some(e) = entries.iter().find(|e| e.domain != domain || !e.masked) {
            return Err(Error::invalid(
                "replay_memory",
                format!("entry from domain {} (masked: {}) inserted as domain {domain}", e.domain, e.masked),
            ));
        }
        self.budgets.insert(domain, budget);
        self.entries.extend(entries);
        Ok(())
    }

    pub fn domain_entries(&self, domain: usize) -> impl Iterator<Item = &SyntheticSample> {
        self.entries.iter().filter(move |e| e.domain == domain)
    }
}

pub const MEMORY_MANIFEST: &str = "memory.csv";
pub const MEMORY_HEADER: &str = "entry,domain,identity,source,budget,masked,update_steps,l2_drift";

impl ReplayMemory {
    /// Writes `memory.csv` plus `entries/<k>.t64` (current pixels) and
    /// `entries/<k>.init.t64` (masked initialisation).
    pub fn save(&self, dir: &Path) -> Result<()> {
        let entries = dir.join("entries");
        fs::create_dir_all(&entries).map_err(|e| Error::io(&entries, e))?;
        let mut text = String::from(MEMORY_HEADER);
        text.push('\n');
        for (k, e) in self.entries.iter().enumerate() {
            checkpoint::save_tensor(&entries.join(format!("{k}.t64")), &e.pixels)?;
            checkpoint::save_tensor(&entries.join(format!("{k}.init.t64")), &e.initial)?;
            let budget = self.budgets.get(&e.domain).copied().unwrap_or(0);
            text.push_str(&format!(
                "{k},{},{},{},{budget},{},{},{}\n",
                e.domain, e.identity, e.source, e.masked, e.update_steps, e.l2_drift
            ));
        }
        let path = dir.join(MEMORY_MANIFEST);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<ReplayMemory> {
        let path = dir.join(MEMORY_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |line: usize, msg: String| Error::Manifest {
            path: path.clone(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == MEMORY_HEADER => {}
            _ => return Err(bad(1, format!("expected header {MEMORY_HEADER:?}"))),
        }
        let mut memory = ReplayMemory::default();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 8 {
                return Err(bad(lineno, format!("expected 8 fields, found {}", f.len())));
            }
            let num = |k: usize| f[k].parse::<usize>().map_err(|e| bad(lineno, format!("field {k}: {e}")));
            let k = num(0)?;
            let domain = num(1)?;
            let entry = SyntheticSample {
                pixels: checkpoint::load_tensor(&dir.join("entries").join(format!("{k}.t64")))?,
                initial: checkpoint::load_tensor(&dir.join("entries").join(format!("{k}.init.t64")))?,
                identity: num(2)?,
                domain,
                source: num(3)?,
                masked: f[5].parse().map_err(|e| bad(lineno, format!("masked: {e}")))?,
                update_steps: num(6)?,
                l2_drift: f[7].parse().map_err(|e| bad(lineno, format!("l2_drift: {e}")))?,
            };
            memory.budgets.insert(domain, num(4)?);
            memory.entries.push(entry);
        }
        Ok(memory)
    }
}

/// Entry indices: uniform without replacement when `count` fits, otherwise
/// uniform with replacement.
pub fn memory_sample_batch(memory: &ReplayMemory, count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if memory.is_empty() {
        return Err(Error::invalid("memory_sample_batch", "memory is empty"));
    }
    if count == 0 {
        return Err(Error::invalid("memory_sample_batch", "count must be positive"));
    }
    let n = memory.len();
    if count <= n {
        Ok(index::sample(rng, n, count).into_vec())
    } else {
        Ok((0..count).map(|_| rng.gen_range(0..n)).collect())
    }
}

/// Maps global identity ids onto classifier columns in arrival order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelMap {
    classes: BTreeMap<usize, usize>,
}

impl LabelMap {
    pub fn register(&mut self, identities: &[usize]) -> usize {
        let mut added = 0;
        for &id in identities {
            let next = self.classes.len();
            if let std::collections::btree_map::Entry::Vacant(e) = self.classes.entry(id) {
                e.insert(next);
                added += 1;
            }
        }
        added
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class(&self, identity: usize) -> Result<usize> {
        self.classes
            .get(&identity)
            .copied()
            .ok_or_else(|| Error::invalid("label_map", format!("identity {identity} is not covered by the classifier head")))
    }

    pub fn classes(&self, identities: impl IntoIterator<Item = usize>) -> Result<Vec<usize>> {
        identities.into_iter().map(|i| self.class(i)).collect()
    }

    /// Identity to classifier column.
    pub fn as_map(&self) -> &BTreeMap<usize, usize> {
        &self.classes
    }
}

/// Everything a joint step reads besides the model.
pub struct StepContext<'a> {
    pub labels: &'a LabelMap,
    pub memory: &'a ReplayMemory,
    /// Style statistics of each stored domain, computed from its memory entries.
    pub memory_stats: &'a BTreeMap<usize, StyleStats>,
    pub previous_styles: &'a [StyleModel],
    pub current_style: Option<&'a StyleModel>,
    /// Current-domain training samples, for source statistics.
    pub domain_train: &'a [&'a Sample],
}

const COMPONENTS: [&str; 4] = ["current", "current_styled", "replay", "replay_styled"];

fn add_weighted(g: &mut Graph, total: NodeId, term: NodeId, weight: f64) -> Result<NodeId> {
    let w = g.scale(term, weight);
    g.add(total, w)
}

fn regularize(grads: &mut [Tensor], model: &ModelParams, config: &RunConfig) {
    if config.weight_decay > 0.0 {
        add_weight_decay(grads, model.params().entries().iter().map(|(_, t)| t), config.weight_decay);
    }
    if config.grad_clip > 0.0 {
        clip_global_norm(grads, config.grad_clip);
    }
}

/// One optimisation step on `L(B_t) + γ L(B'_t) + λ (L(B_m) + γ L(B'_m))`.
/// Terms whose inputs do not exist yet (no earlier style, empty memory) or
/// whose weight is zero are left out and reported as 0.
pub fn joint_step(
    model: &mut ModelParams,
    opt: &mut SgdMomentum,
    batch: &[&Sample],
    ctx: &StepContext<'_>,
    config: &RunConfig,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    let images = stack_images(batch.iter().copied())?;
    let labels = ctx.labels.classes(batch.iter().map(|s| s.identity))?;
    if let Some(&c) = labels.iter().find(|&&c| c >= model.class_count()) {
        return Err(Error::LabelOutOfRange {
            label: c,
            classes: model.class_count(),
        });
    }
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let mut values = [0.0; 4];

    let loss_of = |g: &mut Graph, images: Tensor, labels: &[usize]| -> Result<NodeId> {
        let x = g.constant(images);
        id_loss(g, model, &p, x, labels)?.total(g)
    };

    let current = loss_of(&mut g, images.clone(), &labels)?;
    values[0] = g.value(current).item();
    let mut total = current;

    if config.gamma > 0.0 && !ctx.previous_styles.is_empty() {
        let style = &ctx.previous_styles[rng.gen_range(0..ctx.previous_styles.len())];
        let stats = sample_style_stats(ctx.domain_train, config.style_batch.min(ctx.domain_train.len()), rng)?;
        let styled = transfer_batch(&images, style, &stats)?;
        let node = loss_of(&mut g, styled, &labels)?;
        values[1] = g.value(node).item();
        total = add_weighted(&mut g, total, node, config.gamma)?;
    }

    if config.lambda > 0.0 && !ctx.memory.is_empty() {
        let count = (config.p_ids * config.k_instances / 2).clamp(1, ctx.memory.len());
        let picks = memory_sample_batch(ctx.memory, count, rng)?;
        let entries: Vec<&SyntheticSample> = picks.iter().map(|&i| &ctx.memory.entries[i]).collect();
        let mem_labels = ctx.labels.classes(entries.iter().map(|e| e.identity))?;
        let mem_images = Tensor::stack_outer(
            &entries
                .iter()
                .map(|e| {
                    let mut shape = vec![1];
                    shape.extend_from_slice(e.pixels.shape());
                    e.pixels.reshape(&shape)
                })
                .collect::<Result<Vec<_>>>()?,
        )?;
        let replay = loss_of(&mut g, mem_images.clone(), &mem_labels)?;
        values[2] = g.value(replay).item();
        let mut replay_total = replay;
        if config.gamma > 0.0 {
            if let Some(style) = ctx.current_style {
                let parts = entries
                    .iter()
                    .enumerate()
                    .map(|(i, e)| {
                        let stats = ctx
                            .memory_stats
                            .get(&e.domain)
                            .ok_or_else(|| Error::invalid("joint_step", format!("no statistics for domain {}", e.domain)))?;
                        transfer_batch(&mem_images.slice_outer(i), style, stats)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let node = loss_of(&mut g, Tensor::stack_outer(&parts)?, &mem_labels)?;
                values[3] = g.value(node).item();
                replay_total = add_weighted(&mut g, replay_total, node, config.gamma)?;
            }
        }
        total = add_weighted(&mut g, total, replay_total, config.lambda)?;
    }

    let mut grads = g.backward(total, &p.leaves(), BackwardMode::Values)?.values();
    regularize(&mut grads, model, config);
    let weights = [1.0, config.gamma, config.lambda, config.lambda * config.gamma];
    let breakdown = LossBreakdown::new(
        g.value(total).item(),
        COMPONENTS
            .iter()
            .zip(weights)
            .zip(values)
            .map(|((name, weight), value)| LossTerm {
                name: name.to_string(),
                weight,
                value,
            })
            .collect(),
    );
    opt.step(model.params_mut().tensors_mut(), &grads)?;
    Ok(breakdown)
}

/// `p` identities × `k` instances from the domain's train split; instances
/// are drawn with replacement only when an identity has fewer than `k`.
pub fn sample_pk_batch<'a>(
    by_identity: &BTreeMap<usize, Vec<&'a Sample>>,
    p: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Vec<&'a Sample> {
    let ids: Vec<usize> = by_identity.keys().copied().collect();
    let mut chosen = index::sample(rng, ids.len(), p.min(ids.len())).into_vec();
    chosen.sort_unstable();
    let mut out = Vec::with_capacity(p * k);
    for i in chosen {
        let pool = &by_identity[&ids[i]];
        if pool.len() >= k {
            let mut picks = index::sample(rng, pool.len(), k).into_vec();
            picks.sort_unstable();
            out.extend(picks.into_iter().map(|j| pool[j]));
        } else {
            out.extend((0..k).map(|_| pool[rng.gen_range(0..pool.len())]));
        }
    }
    out
}

/// `lr · step / warmup` during warmup, `lr` afterwards (steps count from 1).
pub fn warmup_lr(lr: f64, step: usize, warmup: usize) -> f64 {
    if step >= warmup {
        lr
    } else {
        lr * step as f64 / warmup as f64
    }
}

/// Trains a freshly initialised model on a small labelled image set (for
/// example a replay memory), `p_ids` identities per batch with every image of
/// each chosen identity. Labels are class indices below `class_count`.
pub fn train_on_set(set: &[(&Tensor, usize)], class_count: usize, steps: usize, config: &RunConfig) -> Result<ModelParams> {
    if set.is_empty() {
        return Err(Error::invalid("train_on_set", "empty training set"));
    }
    let mut by_class: BTreeMap<usize, Vec<&Tensor>> = BTreeMap::new();
    for &(img, c) in set {
        if c >= class_count {
            return Err(Error::LabelOutOfRange { label: c, classes: class_count });
        }
        by_class.entry(c).or_default().push(img);
    }
    let classes: Vec<usize> = by_class.keys().copied().collect();
    let mut rng = stream_rng(config.seed, 0, RNG_TRAIN);
    let mut model = ModelParams::init(rng.gen(), class_count)?;
    let mut opt = SgdMomentum::new(config.lr, config.momentum)?;
    for step in 1..=steps {
        opt.lr = warmup_lr(config.lr, step, config.warmup_steps);
        let mut chosen = index::sample(&mut rng, classes.len(), config.p_ids.min(classes.len())).into_vec();
        chosen.sort_unstable();
        let mut parts = Vec::new();
        let mut labels = Vec::new();
        for i in chosen {
            for img in &by_class[&classes[i]] {
                let mut shape = vec![1];
                shape.extend_from_slice(img.shape());
                parts.push(img.reshape(&shape)?);
                labels.push(classes[i]);
            }
        }
        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let x = g.constant(Tensor::stack_outer(&parts)?);
        let total = id_loss(&mut g, &model, &p, x, &labels)?.total(&mut g)?;
        let mut grads = g.backward(total, &p.leaves(), BackwardMode::Values)?.values();
        regularize(&mut grads, &model, config);
        opt.step(model.params_mut().tensors_mut(), &grads)?;
    }
    Ok(model)
}

/// Independent random streams per (task, purpose), so that enabling one
/// component never shifts another component's draws.
fn stream_rng(seed: u64, task: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task as u64 * 16 + purpose);
    rng
}

const RNG_TRAIN: u64 = 1;
const RNG_STYLE: u64 = 2;
const RNG_CONDENSE: u64 = 3;
const RNG_HEAD: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskTrace {
    pub steps: Vec<LossBreakdown>,
    pub snapshots: Vec<Snapshot>,
}

/// Mutable state carried across tasks.
#[derive(Clone, Debug)]
pub struct Learner {
    pub config: RunConfig,
    pub model: Option<ModelParams>,
    pub labels: LabelMap,
    pub memory: ReplayMemory,
    pub history: DomainHistory,
    /// Style models of completed domains, in training order.
    pub styles: Vec<StyleModel>,
    pub xi: PerceptualExtractor,
    tasks_started: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinishReport {
    pub domain: usize,
    pub perf: f64,
    pub budget: usize,
    pub condense_trace: Vec<CondenseStep>,
}

impl Learner {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let xi = PerceptualExtractor::new(config.seed ^ 0x5eed_0fc0_ffee);
        Ok(Learner {
            config,
            model: None,
            labels: LabelMap::default(),
            memory: ReplayMemory::default(),
            history: DomainHistory::default(),
            styles: Vec::new(),
            xi,
            tasks_started: 0,
        })
    }

    pub fn model(&self) -> Result<&ModelParams> {
        self.model.as_ref().ok_or_else(|| Error::invalid("learner", "no task trained yet"))
    }

    /// Registers the domain's identities and grows (or creates) the head.
    pub fn begin_task(&mut self, domain: &Domain) -> Result<()> {
        let task = self.tasks_started;
        let ids: Vec<usize> = domain.train_by_identity().keys().copied().collect();
        if ids.is_empty() {
            return Err(Error::invalid("begin_task", format!("domain {} has no training samples", domain.id)));
        }
        let added = self.labels.register(&ids);
        let head_seed = stream_rng(self.config.seed, task, RNG_HEAD).gen();
        self.model = Some(match self.model.take() {
            None => ModelParams::init(head_seed, self.labels.len())?,
            Some(m) if added > 0 => m.expand_head(added, head_seed)?,
            Some(m) => m,
        });
        self.tasks_started += 1;
        Ok(())
    }

    /// Trains the current domain's style model. Skipped (returns `None`)
    /// when style terms carry no weight.
    pub fn train_current_style(&self, domain: &Domain) -> Result<Option<StyleModel>> {
        if self.config.gamma == 0.0 {
            return Ok(None);
        }
        let train: Vec<&Sample> = domain.split(Split::Train).collect();
        let seed = stream_rng(self.config.seed, self.tasks_started - 1, RNG_STYLE).gen();
        let (model, _) = train_style_model(domain.id, &train, &self.xi, &self.config.style_config(seed))?;
        Ok(Some(model))
    }

    fn memory_stats(&self) -> Result<BTreeMap<usize, StyleStats>> {
        self.memory
            .budgets
            .keys()
            .map(|&d| Ok((d, channel_stats(self.memory.domain_entries(d).map(|e| &e.pixels))?)))
            .collect()
    }

    /// Runs the configured joint steps on one domain and captures snapshots.
    pub fn train_task(&mut self, domain: &Domain, current_style: Option<&StyleModel>) -> Result<TaskTrace> {
        let cfg = self.config.clone();
        let task = self.tasks_started.checked_sub(1).ok_or_else(|| Error::invalid("train_task", "begin_task not called"))?;
        let schedule = snapshot_schedule(cfg.steps_per_task, cfg.snapshots)?;
        let by_identity = domain.train_by_identity();
        let train: Vec<&Sample> = domain.split(Split::Train).collect();
        let memory_stats = self.memory_stats()?;
        let mut model = self.model()?.clone();
        let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum)?;
        let mut rng = stream_rng(cfg.seed, task, RNG_TRAIN);
        let ctx = StepContext {
            labels: &self.labels,
            memory: &self.memory,
            memory_stats: &memory_stats,
            previous_styles: &self.styles,
            current_style,
            domain_train: &train,
        };
        let mut steps = Vec::with_capacity(cfg.steps_per_task);
        let mut snapshots = Vec::with_capacity(schedule.len());
        for step in 1..=cfg.steps_per_task {
            opt.lr = warmup_lr(cfg.lr, step, cfg.warmup_steps);
            let batch = sample_pk_batch(&by_identity, cfg.p_ids, cfg.k_instances, &mut rng);
            steps.push(joint_step(&mut model, &mut opt, &batch, &ctx, &cfg, &mut rng)?);
            if schedule.contains(&step) {
                snapshots.push(Snapshot {
                    stage: step,
                    params: model.clone(),
                });
            }
        }
        if !model.params().is_finite() {
            return Err(Error::invalid("train_task", "parameters diverged"));
        }
        self.model = Some(model);
        Ok(TaskTrace { steps, snapshots })
    }

    /// Evaluates the domain, allocates its budget, builds and stores its
    /// memory, and stores its style model.
    pub fn finish_task(&mut self, domain: &Domain, snapshots: &[Snapshot], style: Option<StyleModel>) -> Result<FinishReport> {
        let cfg = self.config.clone();
        let task = self.tasks_started - 1;
        let model = self.model()?.clone();
        let perf = evaluate_domain(&model, domain, task + 1)?.map;
        let train: Vec<&Sample> = domain.split(Split::Train).collect();
        let cap = domain.train_by_identity().values().map(Vec::len).min().unwrap_or(1);
        let budget = allocate_budget(&self.history, perf, cfg.budget, cfg.ratio, cap)?.min(cap);
        let roi = Roi::face();
        let mut condense_trace = Vec::new();
        let entries = if cfg.condense {
            let mut syn = init_synthetic(&train, &model, budget, roi, cfg.mask_sigma)?;
            let seed = stream_rng(cfg.seed, task, RNG_CONDENSE).gen();
            condense_trace = condense_update(&mut syn, &train, snapshots, self.labels.as_map(), &cfg.condense_config(seed))?;
            syn
        } else {
            select_kcenter(&train, &model, budget)?
                .into_iter()
                .map(|s| {
                    let masked = mask_face_roi(&s.image, roi, cfg.mask_sigma)?;
                    Ok(SyntheticSample {
                        pixels: masked.clone(),
                        initial: masked,
                        identity: s.identity,
                        domain: s.domain,
                        source: s.id,
                        masked: true,
                        update_steps: 0,
                        l2_drift: 0.0,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        };
        self.memory.insert(domain.id, budget, entries)?;
        self.history.records.push(DomainRecord {
            domain: domain.id,
            perf,
            budget,
            reduced: budget < cfg.budget,
        });
        if let Some(s) = style {
            self.styles.push(s);
        }
        Ok(FinishReport {
            domain: domain.id,
            perf,
            budget,
            condense_trace,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub records: Vec<MetricsRecord>,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub aggregate: Aggregate,
    pub finished: Vec<FinishReport>,
    pub task_traces: Vec<TaskTrace>,
    pub memory_sizes: Vec<usize>,
    /// Model parameters after each task.
    pub stage_models: Vec<ModelParams>,
    pub learner: Learner,
}

/// Trains the stream's domains in order, evaluating every domain (seen and
/// unseen) after each task. Stage `t` is the state after `t` tasks.
pub fn run_sequence(stream: &TaskStream, config: &RunConfig) -> Result<RunReport> {
    let mut learner = Learner::new(config.clone())?;
    let mut records = Vec::new();
    let mut finished = Vec::new();
    let mut task_traces = Vec::new();
    let mut memory_sizes = Vec::new();
    let mut stage_models = Vec::new();
    for (t, domain) in stream.domains.iter().enumerate() {
        learner.begin_task(domain)?;
        let style = learner.train_current_style(domain)?;
        let trace = learner.train_task(domain, style.as_ref())?;
        finished.push(learner.finish_task(domain, &trace.snapshots, style)?);
        memory_sizes.push(learner.memory.len());
        let model = learner.model()?;
        for d in stream.all_domains() {
            records.push(evaluate_domain(model, d, t + 1)?);
        }
        stage_models.push(model.clone());
        task_traces.push(trace);
    }
    let seen: Vec<usize> = stream.domains.iter().map(|d| d.id).collect();
    let unseen: Vec<usize> = stream.unseen.iter().map(|d| d.id).collect();
    let aggregate = aggregate_report(&records, &seen, &unseen)?;
    Ok(RunReport {
        records,
        seen,
        unseen,
        aggregate,
        finished,
        task_traces,
        memory_sizes,
        stage_models,
        learner,
    })
}
