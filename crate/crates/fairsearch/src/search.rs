//! The bilevel alternating search loop and the supervised retraining loop,
//! plus per-epoch metrics records and their CSV encoding.
//!
//! Each step pair runs (1) an architecture step — mode-dependent loss on an
//! arch-stream batch, backprop to the alpha matrices only, Adam update — and
//! (2) a weight step — the same-mode loss on a weight-stream batch, backprop
//! to the network weights only, SGD update at the cosine-annealed rate. The
//! inner optimization is approximated by the current weights (first order,
//! no unrolled term).

use std::sync::Arc;
use std::time::Instant;

use crate::config::Mode;
use crate::data::{
    evaluate, AugmentConfig, ChannelStats, EvalMetrics, LabeledDataset, SearchStreams, StreamHalf,
};
use crate::error::{Error, Result};
use crate::losses::{
    barlow_twins_from_embeddings, mean_zero_one_loss, total_arch_loss_on_tape, LossConfig,
};
use crate::optim::{cosine_lr, Adam, OptimConfig, SgdMomentum};
use crate::search_space::{ArchParams, CellKind, CellSpec, Gating};
use crate::supernet::{ArchVars, Head, Network, ParamStore};
use crate::tensor::{Element, Tape, Tensor, Var};

/// One row of the per-epoch metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub mode: String,
    pub train_loss: f64,
    pub val_loss: f64,
    pub zero_one_loss: f64,
    pub lr: f64,
    pub balanced_acc: f64,
    pub overall_acc: f64,
    pub per_class_acc: Vec<f64>,
    pub wall_ms: u64,
}

/// Fixed-order CSV with a config-hash comment line and mandatory header.
pub fn metrics_csv(records: &[MetricsRecord], num_classes: usize, config_hash: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!("# config_hash {config_hash}\n"));
    out.push_str("epoch,mode,train_loss,val_loss,zero_one_loss,lr,balanced_acc,overall_acc");
    for c in 0..num_classes {
        out.push_str(&format!(",per_class_acc_{c}"));
    }
    out.push_str(",wall_ms\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.mode, r.train_loss, r.val_loss, r.zero_one_loss, r.lr, r.balanced_acc,
            r.overall_acc
        ));
        for c in 0..num_classes {
            let v = r.per_class_acc.get(c).copied().unwrap_or(f64::NAN);
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{}\n", r.wall_ms));
    }
    out
}

/// Mutable optimizer state carried across a search run (checkpointable).
pub struct SearchState<T: Element> {
    pub sgd: SgdMomentum<T>,
    pub adam_normal: Adam,
    pub adam_reduce: Adam,
}

impl<T: Element> SearchState<T> {
    pub fn new(store: &ParamStore<T>, arch: &ArchParams, optim: &OptimConfig) -> Self {
        let len = CellSpec::NUM_EDGES * arch.num_ops();
        SearchState {
            sgd: SgdMomentum::new(store, optim.w_momentum, optim.w_weight_decay),
            adam_normal: Adam::new(len, optim.alpha_lr, optim.alpha_weight_decay),
            adam_reduce: Adam::new(len, optim.alpha_lr, optim.alpha_weight_decay),
        }
    }
}

/// Everything one search run needs, borrowed together.
pub struct SearchSession<'a, T: Element> {
    pub net: &'a Network,
    pub store: &'a mut ParamStore<T>,
    pub arch: &'a mut ArchParams,
    pub streams: &'a SearchStreams,
    /// Normalization statistics of the training data; also used for test
    /// evaluation.
    pub stats: ChannelStats,
    /// Optional held-out set evaluated each epoch.
    pub test: Option<&'a LabeledDataset>,
    pub mode: Mode,
    pub optim: &'a OptimConfig,
    pub loss_cfg: &'a LossConfig,
    pub augment: &'a AugmentConfig,
    /// Record wall-clock time per epoch. Off for byte-reproducible runs.
    pub record_wall_time: bool,
}

fn grads_for_store<T: Element>(
    store: &ParamStore<T>,
    binding: &crate::supernet::Binding,
    grads: &mut crate::tensor::Gradients<T>,
) -> Vec<Option<Vec<T>>> {
    store
        .ids()
        .map(|id| grads.take(binding.var(id)))
        .collect()
}

impl<'a, T: Element> SearchSession<'a, T> {
    fn supervised_loss(
        &self,
        tape: &mut Tape<T>,
        binding: &crate::supernet::Binding,
        arch_vars: &ArchVars,
        stream: &StreamHalf,
        batch: &[usize],
        gating: Gating,
    ) -> Result<Var> {
        let images = tape.leaf(stream.images::<T>(batch, &self.stats), false);
        let labels = stream.labels(batch);
        let logits = self.net.forward(
            tape,
            binding,
            images,
            Some((arch_vars, gating)),
            Head::Classifier,
        )?;
        tape.cross_entropy(logits, &labels)
    }

    fn self_supervised_loss(
        &self,
        tape: &mut Tape<T>,
        binding: &crate::supernet::Binding,
        arch_vars: &ArchVars,
        stream: &StreamHalf,
        batch: &[usize],
        epoch: usize,
        gating: Gating,
    ) -> Result<Var> {
        let (view_a, view_b) = stream.augmented_pair::<T>(batch, &self.stats, self.augment, epoch);
        let va = tape.leaf(view_a, false);
        let vb = tape.leaf(view_b, false);
        let za = self
            .net
            .forward(tape, binding, va, Some((arch_vars, gating)), Head::Projector)?;
        let zb = self
            .net
            .forward(tape, binding, vb, Some((arch_vars, gating)), Head::Projector)?;
        barlow_twins_from_embeddings(tape, za, zb, self.loss_cfg)
    }

    fn mode_loss(
        &self,
        tape: &mut Tape<T>,
        binding: &crate::supernet::Binding,
        arch_vars: &ArchVars,
        stream: &StreamHalf,
        batch: &[usize],
        epoch: usize,
    ) -> Result<Var> {
        let gating = self.mode.gating();
        match self.mode {
            Mode::Darts | Mode::Fairdarts => {
                self.supervised_loss(tape, binding, arch_vars, stream, batch, gating)
            }
            Mode::Ssf => {
                self.self_supervised_loss(tape, binding, arch_vars, stream, batch, epoch, gating)
            }
        }
    }

    /// One architecture step: mode loss on an arch-stream batch (plus the
    /// zero-one term when active), gradients to alpha only, Adam update.
    /// Returns the base loss value (without the zero-one term).
    pub fn arch_step(&mut self, batch: &[usize], epoch: usize, state: &mut SearchState<T>) -> Result<f64> {
        let mut tape = Tape::new();
        let binding = self.store.bind(&mut tape, false);
        let normal = tape.leaf(self.arch.matrix_tensor::<T>(CellKind::Normal), true);
        let reduce = tape.leaf(self.arch.matrix_tensor::<T>(CellKind::Reduce), true);
        let arch_vars = ArchVars { normal, reduce };
        let base = self.mode_loss(&mut tape, &binding, &arch_vars, &self.streams.arch, batch, epoch)?;
        let total = total_arch_loss_on_tape(
            &mut tape,
            base,
            &[normal, reduce],
            self.loss_cfg,
            epoch,
            self.mode.gating(),
        )?;
        let base_value = tape.scalar_value(base).to_f64();
        let mut grads = tape.backward(total)?;
        for (var, kind, adam) in [
            (normal, CellKind::Normal, &mut state.adam_normal),
            (reduce, CellKind::Reduce, &mut state.adam_reduce),
        ] {
            let g: Vec<f64> = grads
                .take(var)
                .expect("alpha leaf gradient populated")
                .iter()
                .map(|v| v.to_f64())
                .collect();
            adam.step(self.arch.matrix_mut(kind), &g);
        }
        self.arch.check_finite()?;
        Ok(base_value)
    }

    /// One weight step: mode loss on a weight-stream batch, gradients to the
    /// network weights only, SGD update at `lr`.
    pub fn weight_step(
        &mut self,
        batch: &[usize],
        epoch: usize,
        lr: f64,
        state: &mut SearchState<T>,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let binding = self.store.bind(&mut tape, true);
        let normal = tape.leaf(self.arch.matrix_tensor::<T>(CellKind::Normal), false);
        let reduce = tape.leaf(self.arch.matrix_tensor::<T>(CellKind::Reduce), false);
        let arch_vars = ArchVars { normal, reduce };
        let loss = self.mode_loss(&mut tape, &binding, &arch_vars, &self.streams.weight, batch, epoch)?;
        let value = tape.scalar_value(loss).to_f64();
        let mut grads = tape.backward(loss)?;
        let per_param = grads_for_store(self.store, &binding, &mut grads);
        state.sgd.step(self.store, &per_param, lr);
        Ok(value)
    }

    fn eval_supervised(&mut self) -> Result<Option<EvalMetrics>> {
        let Some(test) = self.test else {
            return Ok(None);
        };
        let gating = self.mode.gating();
        let net = self.net;
        let store = &*self.store;
        let arch = &*self.arch;
        let metrics = evaluate::<T, _>(test, &self.stats, self.optim.batch_size, |images| {
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape, false);
            let normal = tape.leaf(arch.matrix_tensor::<T>(CellKind::Normal), false);
            let reduce = tape.leaf(arch.matrix_tensor::<T>(CellKind::Reduce), false);
            let arch_vars = ArchVars { normal, reduce };
            let img = tape_leaf(&mut tape, images);
            let logits = net.forward(
                &mut tape,
                &binding,
                img,
                Some((&arch_vars, gating)),
                Head::Classifier,
            )?;
            Ok(tape.value(logits))
        })?;
        Ok(Some(metrics))
    }
}

fn tape_leaf<T: Element>(tape: &mut Tape<T>, t: &Tensor<T>) -> Var {
    tape.leaf(t.clone(), false)
}

/// Run the bilevel alternating search from `start_epoch` (exclusive of any
/// epochs already completed) to `total_epochs`. `on_epoch_end` runs after
/// each epoch's metrics are recorded (checkpointing hook); returning
/// `ControlFlow::Break` stops the loop early.
pub fn bilevel_search<T: Element, F>(
    session: &mut SearchSession<'_, T>,
    state: &mut SearchState<T>,
    start_epoch: usize,
    total_epochs: usize,
    mut on_epoch_end: F,
) -> Result<Vec<MetricsRecord>>
where
    F: FnMut(
        usize,
        &SearchSession<'_, T>,
        &SearchState<T>,
        &MetricsRecord,
    ) -> Result<std::ops::ControlFlow<()>>,
{
    if session.streams.weight.is_empty() || session.streams.arch.is_empty() {
        return Err(Error::InvalidArg(
            "bilevel search requires non-empty weight and arch streams".into(),
        ));
    }
    if session.mode == Mode::Ssf && session.streams.label_reads() != 0 {
        return Err(Error::InvalidArg(
            "label reads recorded before a label-free search".into(),
        ));
    }
    let mut records = Vec::new();
    for epoch in start_epoch..total_epochs {
        let started = Instant::now();
        let lr = cosine_lr(
            epoch,
            session.optim.search_epochs,
            session.optim.w_lr,
            session.optim.w_lr_min,
        );
        let weight_batches = session
            .streams
            .weight
            .epoch_batches(epoch, session.optim.batch_size);
        let arch_batches = session
            .streams
            .arch
            .epoch_batches(epoch, session.optim.batch_size);
        let mut train_loss_sum = 0.0;
        let mut val_loss_sum = 0.0;
        let mut arch_steps = 0usize;
        let mut weight_steps = 0usize;
        // The correlation loss needs at least 2 samples; skip stray
        // singleton batches in self-supervised mode.
        let ssf = session.mode == Mode::Ssf;
        let usable = move |batch: &[usize]| !ssf || batch.len() >= 2;
        for (step, weight_batch) in weight_batches.iter().enumerate() {
            let arch_batch = &arch_batches[step % arch_batches.len()];
            if usable(arch_batch) {
                val_loss_sum += session.arch_step(arch_batch, epoch, state)?;
                arch_steps += 1;
            }
            if usable(weight_batch) {
                train_loss_sum += session.weight_step(weight_batch, epoch, lr, state)?;
                weight_steps += 1;
            }
        }
        if arch_steps == 0 || weight_steps == 0 {
            return Err(Error::InvalidArg(
                "no usable batches in a search epoch".into(),
            ));
        }
        let zero_one = match session.mode.gating() {
            Gating::Sigmoid => mean_zero_one_loss(session.arch),
            Gating::Softmax => 0.0,
        };
        let eval = session.eval_supervised()?;
        let (balanced, overall, per_class) = match &eval {
            Some(m) => (m.balanced, m.overall, m.per_class.clone()),
            None => (
                f64::NAN,
                f64::NAN,
                vec![f64::NAN; session.net.cfg.num_classes],
            ),
        };
        let record = MetricsRecord {
            epoch,
            mode: session.mode.label().to_string(),
            train_loss: train_loss_sum / weight_steps as f64,
            val_loss: val_loss_sum / arch_steps as f64,
            zero_one_loss: zero_one,
            lr,
            balanced_acc: balanced,
            overall_acc: overall,
            per_class_acc: per_class,
            wall_ms: if session.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        let flow = on_epoch_end(epoch, session, state, &record)?;
        records.push(record);
        if flow.is_break() {
            break;
        }
    }
    if session.mode == Mode::Ssf && session.streams.label_reads() != 0 {
        return Err(Error::InvalidArg(format!(
            "self-supervised search read labels {} times",
            session.streams.label_reads()
        )));
    }
    Ok(records)
}

/// Supervised training of a discrete child (or any network without gates):
/// cross-entropy, SGD with momentum, cosine annealing over `total_epochs`.
#[allow(clippy::too_many_arguments)]
pub fn train_supervised<T: Element, F>(
    net: &Network,
    store: &mut ParamStore<T>,
    train: &Arc<LabeledDataset>,
    stats: &ChannelStats,
    test: Option<&LabeledDataset>,
    optim: &OptimConfig,
    seed: u64,
    start_epoch: usize,
    total_epochs: usize,
    sgd: &mut SgdMomentum<T>,
    record_wall_time: bool,
    mut on_epoch_end: F,
) -> Result<Vec<MetricsRecord>>
where
    F: FnMut(usize, &ParamStore<T>, &SgdMomentum<T>, &MetricsRecord) -> Result<()>,
{
    if train.is_empty() {
        return Err(Error::InvalidArg("training dataset is empty".into()));
    }
    let stream = crate::data::full_stream(Arc::clone(train), seed);
    let mut records = Vec::new();
    for epoch in start_epoch..total_epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch, total_epochs, optim.w_lr, optim.w_lr_min);
        let mut loss_sum = 0.0;
        let batches = stream.epoch_batches(epoch, optim.batch_size);
        for batch in &batches {
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape, true);
            let images = tape.leaf(stream.images::<T>(batch, stats), false);
            let labels = stream.labels(batch);
            let logits = net.forward(&mut tape, &binding, images, None, Head::Classifier)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            loss_sum += tape.scalar_value(loss).to_f64();
            let mut grads = tape.backward(loss)?;
            let per_param = grads_for_store(store, &binding, &mut grads);
            sgd.step(store, &per_param, lr);
        }
        let eval = match test {
            Some(t) => Some(evaluate::<T, _>(t, stats, optim.batch_size, |images| {
                let mut tape = Tape::new();
                let binding = store.bind(&mut tape, false);
                let img = tape_leaf(&mut tape, images);
                let logits = net.forward(&mut tape, &binding, img, None, Head::Classifier)?;
                Ok(tape.value(logits))
            })?),
            None => None,
        };
        let (balanced, overall, per_class) = match &eval {
            Some(m) => (m.balanced, m.overall, m.per_class.clone()),
            None => (f64::NAN, f64::NAN, vec![f64::NAN; net.cfg.num_classes]),
        };
        let record = MetricsRecord {
            epoch,
            mode: "retrain".into(),
            train_loss: loss_sum / batches.len() as f64,
            val_loss: f64::NAN,
            zero_one_loss: 0.0,
            lr,
            balanced_acc: balanced,
            overall_acc: overall,
            per_class_acc: per_class,
            wall_ms: if record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        on_epoch_end(epoch, store, sgd, &record)?;
        records.push(record);
    }
    Ok(records)
}
