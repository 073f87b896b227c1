"""Bi-level meta-learning engine.

One meta-batch is recorded on a fresh tape in a fixed phase order:

  A. bind model parameters (and similarity masks) as tape leaves
  B. task representations and the relation matrix, when enabled
  C. inner adaptation of every task on its meta-data support set
  D. per-task query losses, plus the weighted consistency term
  E. one backward pass over the averaged objective
  F. one optimizer step on the underlying arrays

Phases B and C commute (the matrix reads base extractor features, never
adapted ones); the order is fixed so trajectories survive refactors.
Task heads are re-initialized to zero at the start of every meta-batch
by the training loop: head i belongs to batch slot i, and a fresh batch
carries fresh tasks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from . import relation as rel
from . import tasks as tk


class MetaLearnError(Exception):
    pass


METHODS = ("maml", "metasgd", "anil")
OPTIMIZERS = ("sgd", "adam")
MATRIX_MODES = ("learned", "fixed")


@dataclass
class MetaConfig:
    """Engine settings; defaults follow the regression protocol."""

    alpha: float = 0.05
    beta: float = 0.1
    lam: float = 0.6
    method: str = "maml"
    second_order: bool = True
    inner_steps: int = 1
    batch_tasks: int = 4
    epochs: int = 20
    batches_per_epoch: int = 100
    seed: int = 0
    trlearner: bool = True
    sim_heads: int = 4
    matrix_mode: str = "learned"
    matrix_grad_to_extractor: bool = True
    metadata_strategy: str = "uniform"
    metadata_samples: object = None
    momentum: float = 0.8
    weight_decay: float = 0.7e-5
    optimizer: str = "sgd"
    hidden: tuple = (40, 40)
    log_matrix_every: int = 0
    val_tasks: int = 20
    eval_inner_steps: object = None
    freeze_inner_rates: bool = False
    timing: bool = False

    def __post_init__(self):
        bad = []
        # alpha/beta 0 is allowed: degenerate rates are used as probes.
        if self.alpha < 0:
            bad.append(f"alpha={self.alpha}")
        if self.beta < 0:
            bad.append(f"beta={self.beta}")
        if self.lam < 0:
            bad.append(f"lam={self.lam}")
        if self.method not in METHODS:
            bad.append(f"method={self.method!r}")
        if self.inner_steps < 1:
            bad.append(f"inner_steps={self.inner_steps}")
        if self.batch_tasks < 1:
            bad.append(f"batch_tasks={self.batch_tasks}")
        if self.trlearner and self.batch_tasks < 2:
            bad.append("trlearner needs batch_tasks >= 2")
        if self.sim_heads < 1:
            bad.append(f"sim_heads={self.sim_heads}")
        if self.epochs < 0:
            bad.append(f"epochs={self.epochs}")
        if self.batches_per_epoch < 1:
            bad.append(f"batches_per_epoch={self.batches_per_epoch}")
        if self.optimizer not in OPTIMIZERS:
            bad.append(f"optimizer={self.optimizer!r}")
        if self.matrix_mode not in MATRIX_MODES:
            bad.append(f"matrix_mode={self.matrix_mode!r}")
        if self.val_tasks < 0:
            bad.append(f"val_tasks={self.val_tasks}")
        if self.eval_inner_steps is not None and self.eval_inner_steps < 0:
            bad.append(f"eval_inner_steps={self.eval_inner_steps}")
        if bad:
            raise MetaLearnError("invalid config: " + ", ".join(bad))


class AdaptedModel:
    """Task-specialized parameters, still connected to the base leaves."""

    __slots__ = ("mv", "task_index", "extractor", "head")

    def __init__(self, mv: nn.ModelVars, task_index: int, extractor: list, head: list):
        self.mv = mv
        self.task_index = task_index
        self.extractor = extractor
        self.head = head

    def predict(self, x: ad.Var) -> ad.Var:
        feats = nn.forward_features_with(self.mv, self.extractor, x)
        return nn.head_apply(self.head, feats)


def task_loss(predictions: ad.Var, targets: ad.Var) -> ad.Var:
    """Mean squared error over a (n, 1) prediction/target batch."""
    if predictions.shape != targets.shape:
        raise MetaLearnError(f"prediction shape {predictions.shape} != target shape {targets.shape}")
    if predictions.array.size == 0:
        raise MetaLearnError("empty batch has no loss")
    return ad.mean(ad.square(ad.sub(predictions, targets)))


def _inner_rates(mv: nn.ModelVars, config: MetaConfig, head_only: bool):
    if config.method != "metasgd":
        return None
    if mv.rates is None:
        raise MetaLearnError("metasgd requires inner rates; call model.enable_inner_rates(alpha)")
    if head_only:
        return mv.head_rate_params()
    return mv.extractor_rate_params() + mv.head_rate_params()


def _adapt(loss_fn, params, rates, steps, config, task_index):
    cur = list(params)
    for _ in range(steps):
        loss = loss_fn(cur)
        if not np.all(np.isfinite(loss.array)):
            raise MetaLearnError(f"non-finite inner loss for task {task_index}")
        gs = ad.grad(loss, cur)
        cur = ad.grad_through_update(
            loss_fn, cur, inner_grads=gs, alpha=config.alpha,
            first_order=not config.second_order, rates=rates,
        )
    return cur


def inner_adapt(mv: nn.ModelVars, i: int, metadata, config: MetaConfig) -> AdaptedModel:
    """One (or few) gradient steps on task i's meta-data support set.

    maml/metasgd adapt extractor and head; anil adapts the head only and
    reads the extractor frozen.  In second-order mode the returned
    parameters keep the inner-gradient path alive for the outer backward.
    """
    tape = mv.tape
    x = tape.constant(metadata.support_x)
    y = tape.constant(metadata.support_y)
    ext = mv.extractor_params()
    head = mv.head_params(i)

    if config.method == "anil":
        def loss_fn(params):
            feats = nn.forward_features_with(mv, ext, x)
            return task_loss(nn.head_apply(params, feats), y)

        adapted = _adapt(loss_fn, head, _inner_rates(mv, config, head_only=True),
                         config.inner_steps, config, i)
        return AdaptedModel(mv, i, ext, adapted)

    n_ext = len(ext)

    def loss_fn(params):
        feats = nn.forward_features_with(mv, params[:n_ext], x)
        return task_loss(nn.head_apply(params[n_ext:], feats), y)

    adapted = _adapt(loss_fn, ext + head, _inner_rates(mv, config, head_only=False),
                     config.inner_steps, config, i)
    return AdaptedModel(mv, i, adapted[:n_ext], adapted[n_ext:])


def _scale_rows(weight: ad.Var, rows: ad.Var) -> ad.Var:
    return ad.mul(ad.broadcast_to(ad.reshape(weight, (1, 1)), rows.shape), rows)


def trlearner_loss(adapted_models: list, matrix: rel.RelationMatrix, i: int, metadata) -> ad.Var:
    """Consistency of task i's targets with its peers' weighted prediction.

    The peer ensemble averages every other task's adapted model over the
    clamped relation weights; task i's own model is excluded, so this
    term carries no gradient into head i.
    """
    n = len(adapted_models)
    if n < 2:
        raise MetaLearnError(f"consistency term needs at least 2 tasks, got {n}")
    tape = adapted_models[i].mv.tape
    x = tape.constant(metadata.query_x)
    y = tape.constant(metadata.query_y)
    num = None
    den = None
    for p in range(n):
        if p == i:
            continue
        w = matrix.weight_var(i, p)
        term = _scale_rows(w, adapted_models[p].predict(x))
        num = term if num is None else ad.add(num, term)
        den = w if den is None else ad.add(den, w)
    blended = ad.div(num, ad.broadcast_to(ad.reshape(den, (1, 1)), num.shape))
    return task_loss(blended, y)


# ---------------------------------------------------------------------------
# Outer loop


class SGDMomentum:
    """Gradient descent with classical momentum and coupled weight decay."""

    def __init__(self, named_params, lr, momentum=0.8, weight_decay=0.7e-5):
        self.params = list(named_params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {name: np.zeros_like(arr) for name, arr in self.params}

    def step(self, grads: dict) -> None:
        for name, arr in self.params:
            v = self.velocity[name]
            v *= self.momentum
            v += grads[name] + self.weight_decay * arr
            arr -= self.lr * v


class Adam:
    def __init__(self, named_params, lr, beta1=0.8, beta2=0.999, eps=1e-8, weight_decay=0.7e-5):
        self.params = list(named_params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {name: np.zeros_like(arr) for name, arr in self.params}
        self.v = {name: np.zeros_like(arr) for name, arr in self.params}

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, arr in self.params:
            g = grads[name] + self.weight_decay * arr
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            arr -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def trainable_params(model: nn.MetaModel, layer, config: MetaConfig) -> list:
    pairs = []
    for name, arr in model.named_params():
        if name.startswith("lr.") and config.freeze_inner_rates:
            continue
        pairs.append((name, arr))
    if config.trlearner and config.matrix_mode == "learned":
        if layer is None:
            raise MetaLearnError("trlearner in learned mode needs a similarity layer")
        pairs.append(("omega", layer.omega))
    return pairs


def make_optimizer(model: nn.MetaModel, layer, config: MetaConfig):
    pairs = trainable_params(model, layer, config)
    if config.optimizer == "adam":
        return Adam(pairs, config.beta, beta1=config.momentum, weight_decay=config.weight_decay)
    return SGDMomentum(pairs, config.beta, config.momentum, config.weight_decay)


def _bound_grad_vars(mv: nn.ModelVars, omega_var, config: MetaConfig):
    """(name, Var) pairs mirroring trainable_params naming."""
    pairs = []
    for li, (w, b) in enumerate(mv.extractor):
        pairs.append((f"g{li}.w", w))
        pairs.append((f"g{li}.b", b))
    for hi, (w, b) in enumerate(mv.heads):
        pairs.append((f"h{hi}.w", w))
        pairs.append((f"h{hi}.b", b))
    if mv.rates is not None:
        for li, (w, b) in enumerate(mv.rates["extractor"]):
            pairs.append((f"lr.g{li}.w", w))
            pairs.append((f"lr.g{li}.b", b))
        pairs.append(("lr.h.w", mv.rates["head"][0]))
        pairs.append(("lr.h.b", mv.rates["head"][1]))
    if omega_var is not None and config.matrix_mode == "learned":
        pairs.append(("omega", omega_var))
    return pairs


def _record_batch(model: nn.MetaModel, layer, batch: tk.TaskBatch, config: MetaConfig):
    """Phases A-D: record the averaged outer objective for one meta-batch."""
    n = len(batch)
    tape = ad.Tape()
    mv = nn.bind(model, tape)

    matrix = None
    omega_var = None
    if config.trlearner:
        reps = [rel.task_representation(mv, md) for md in batch.metadata]
        if config.matrix_mode == "fixed":
            omega_var = tape.constant(layer.omega)
            reps = [ad.detach(z) for z in reps]
        else:
            omega_var = rel.bind_layer(layer, tape)
            if not config.matrix_grad_to_extractor:
                reps = [ad.detach(z) for z in reps]
        matrix = rel.build_matrix(omega_var, reps)

    adapted = [inner_adapt(mv, i, batch.metadata[i], config) for i in range(n)]

    query_losses = []
    tr_losses = [] if matrix is not None else None
    total = None
    for i in range(n):
        md = batch.metadata[i]
        x = tape.constant(md.query_x)
        y = tape.constant(md.query_y)
        lq = task_loss(adapted[i].predict(x), y)
        query_losses.append(float(lq.array))
        term = lq
        if matrix is not None:
            ltr = trlearner_loss(adapted, matrix, i, md)
            tr_losses.append(float(ltr.array))
            term = ad.add(lq, ad.smul(ltr, config.lam))
        total = term if total is None else ad.add(total, term)
    objective = ad.smul(total, 1.0 / n)
    return mv, omega_var, matrix, objective, query_losses, tr_losses


def batch_objective(model: nn.MetaModel, layer, batch: tk.TaskBatch, config: MetaConfig) -> float:
    """Outer objective value at the current parameters; records no update."""
    return float(_record_batch(model, layer, batch, config)[3].array)


def outer_step(model: nn.MetaModel, layer, batch: tk.TaskBatch, config: MetaConfig, optimizer) -> dict:
    """Record one meta-batch (phases A-E) and apply one optimizer step (F)."""
    mv, omega_var, matrix, objective, query_losses, tr_losses = _record_batch(
        model, layer, batch, config
    )

    if not np.all(np.isfinite(objective.array)):
        raise MetaLearnError(
            f"non-finite outer objective (query losses {query_losses}, "
            f"consistency {tr_losses}, lam {config.lam})"
        )

    grads = ad.backward(objective)
    updates = {name: grads[var.index].array for name, var in _bound_grad_vars(mv, omega_var, config)}
    optimizer.step(updates)

    return {
        "objective": float(objective.array),
        "query_mse": float(np.mean(query_losses)),
        "per_task": query_losses,
        "trlearner": tr_losses,
        "matrix": matrix.values() if matrix is not None else None,
        "matrix_normalized": rel.export_normalized(matrix) if matrix is not None else None,
    }


# ---------------------------------------------------------------------------
# Training and evaluation


def adapted_query_mse(model: nn.MetaModel, task: tk.TaskInstance, config: MetaConfig) -> float:
    """Adapt a fresh zero head on the task's support set, score its query set.

    Training heads belong to training batch slots, so evaluation always
    starts from a zero head (matching how heads begin every meta-batch).
    Updates here never flow back, so the first-order graph suffices.
    """
    tape = ad.Tape()
    mv = nn.bind(model, tape)
    d = model.feature_width
    head = [tape.leaf(np.zeros((d, 1))), tape.leaf(np.zeros(1))]
    ext = mv.extractor_params()
    x = tape.constant(task.support_x)
    y = tape.constant(task.support_y)
    steps = config.inner_steps if config.eval_inner_steps is None else config.eval_inner_steps

    if config.method == "anil":
        def loss_fn(params):
            feats = nn.forward_features_with(mv, ext, x)
            return task_loss(nn.head_apply(params, feats), y)

        params, n_ext = head, 0
    else:
        def loss_fn(params):
            feats = nn.forward_features_with(mv, params[:len(ext)], x)
            return task_loss(nn.head_apply(params[len(ext):], feats), y)

        params, n_ext = ext + head, len(ext)

    rates = _inner_rates(mv, config, head_only=config.method == "anil")
    cur = list(params)
    for _ in range(steps):
        loss = loss_fn(cur)
        if not np.all(np.isfinite(loss.array)):
            raise MetaLearnError("non-finite adaptation loss at evaluation")
        gs = ad.grad(loss, cur)
        cur = ad.grad_through_update(loss_fn, cur, inner_grads=gs, alpha=config.alpha,
                                     first_order=True, rates=rates)

    qx = tape.constant(task.query_x)
    qy = tape.constant(task.query_y)
    feats = nn.forward_features_with(mv, cur[:n_ext] if n_ext else ext, qx)
    pred = nn.head_apply(cur[n_ext:], feats)
    return float(task_loss(pred, qy).array)


def summarize(values: list) -> tuple:
    """Mean and normal-approximation 95% CI half-width (0 for one value)."""
    if not values:
        raise MetaLearnError("nothing to summarize")
    mean = float(np.mean(values))
    if len(values) > 1:
        ci = float(1.96 * np.std(values, ddof=1) / np.sqrt(len(values)))
    else:
        ci = 0.0
    return mean, ci


def evaluate(model: nn.MetaModel, eval_tasks: list, config: MetaConfig) -> dict:
    """Per-task adapted query MSE, aggregated as mean and 95% CI half-width."""
    if not eval_tasks:
        raise MetaLearnError("no evaluation tasks given")
    per_task = [adapted_query_mse(model, t, config) for t in eval_tasks]
    mean, ci = summarize(per_task)
    return {"mean": mean, "ci95": ci, "per_task": per_task}


def train(model: nn.MetaModel, layer, source: tk.TaskSource, config: MetaConfig) -> list:
    """Meta-train in place; returns one log record per epoch."""
    if config.method == "metasgd" and model.inner_rates is None:
        model.enable_inner_rates(config.alpha)
    optimizer = make_optimizer(model, layer, config)
    records = []
    for epoch in range(config.epochs):
        batch_mse = []
        batch_tr = []
        last_matrix = None
        for b in range(config.batches_per_epoch):
            model.zero_heads()
            tasks = source.train_batch(epoch, b, config.batch_tasks)
            batch = tk.make_task_batch(
                tasks, config.metadata_strategy, config.metadata_samples,
                seed=(config.seed, 4, epoch, b),
            )
            metrics = outer_step(model, layer, batch, config, optimizer)
            batch_mse.append(metrics["query_mse"])
            if metrics["trlearner"] is not None:
                batch_tr.append(float(np.mean(metrics["trlearner"])))
            if metrics["matrix_normalized"] is not None:
                last_matrix = metrics["matrix_normalized"]
        record = {
            "epoch": epoch,
            "train_mse": float(np.mean(batch_mse)),
            "trlearner_mse": float(np.mean(batch_tr)) if batch_tr else None,
        }
        if config.val_tasks > 0:
            val_tasks = [source.val_task(i) for i in range(config.val_tasks)]
            record["val_mse"] = evaluate(model, val_tasks, config)["mean"]
        else:
            record["val_mse"] = None
        if (config.log_matrix_every > 0 and last_matrix is not None
                and (epoch + 1) % config.log_matrix_every == 0):
            record["matrix"] = [[float(v) for v in row] for row in last_matrix]
        records.append(record)
    return records
