"""Training loop for no adaptation, DANN, L-DANN and L-WASS.

Every random choice (batch order, target cycling, critic batches,
interpolation weights, head initialisation) comes from its own PCG64 stream
derived from ``config.seed``, so two runs with the same config are
bit-identical and severing the adversarial path reproduces the no-adaptation
trajectory exactly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, NumericError
from .data import Dataset, rng_for, split_indices
from .heads import DomainHead, critic_estimate, critic_loss, gradient_penalty, interpolate, \
    ldann_loss, lwass_feature_loss
from .nn import Model, OptimizerState, sgd_step, softmax_cross_entropy

log = logging.getLogger(__name__)

METHODS = ("none", "dann", "l-dann", "l-wass")
DIVERGENCE_LIMIT = 1e6
DIVERGENCE_PATIENCE = 3


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, term: str, value: float):
        super().__init__(f"training diverged at epoch {epoch}: {term} = {value}")
        self.epoch = epoch
        self.term = term
        self.value = value


@dataclass
class TrainConfig:
    method: str = "none"
    epochs: int = 100
    batch_size: int = 32
    n_critic: int = 5
    lr_critic: float = 0.001   # alpha_1: domain heads / critics
    lr_main: float = 0.001     # alpha_2: feature extractor and label classifier
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lam: float = 10.0          # gradient penalty coefficient
    beta: float = 1.0          # weight of the critic distance in the feature loss
    reduction: int = 16
    grl_scale: float = 1.0
    seed: int = 0
    selection_window: int = 30
    alg1_literal: bool = False
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.n_critic < 1 or self.reduction < 1:
            raise ValueError("epochs, batch_size, n_critic and reduction must be >= 1")
        if not 1 <= self.selection_window <= self.epochs:
            raise ValueError(f"selection_window must lie in [1, epochs={self.epochs}]")
        for name in ("lr_critic", "lr_main", "momentum", "weight_decay", "lam", "beta",
                     "grl_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float
    target_acc: float | None = None
    domain_acc: float | None = None
    w1: list[float] = field(default_factory=list)


@dataclass
class Metrics:
    precision: float
    recall: float
    f1: float
    accuracy: float
    confusion: np.ndarray

    def as_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "accuracy": self.accuracy, "confusion": self.confusion.tolist()}


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord]
    selected_epoch: int
    heads: list[DomainHead]
    critic_updates: list[int]
    main_updates: int


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def metrics_from_confusion(confusion, positive_class: int = 1) -> Metrics:
    """Percent metrics from a confusion matrix indexed [true, predicted].

    Binary problems report the positive class; more classes are macro-averaged.
    """
    c = np.asarray(confusion, dtype=np.int64)
    total = c.sum()
    if total == 0:
        raise ValueError("no predictions to score")
    tp = np.diag(c).astype(np.float64)
    pred = c.sum(axis=0)
    true = c.sum(axis=1)
    prec = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    rec = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    if len(c) == 2:
        p, r = prec[positive_class], rec[positive_class]
        f = f1_score(p, r)
    else:
        p, r = prec.mean(), rec.mean()
        f = float(np.mean([f1_score(a, b) for a, b in zip(prec, rec)]))
    return Metrics(100 * float(p), 100 * float(r), 100 * float(f), 100 * float(tp.sum() / total), c)


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    c = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(c, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return c


def evaluate(model: Model, dataset: Dataset, positive_class: int = 1) -> Metrics:
    if dataset.labels is None:
        raise ValueError("evaluate needs a labelled dataset")
    pred = model.predict(dataset.samples)
    n = max(model.n_classes, int(dataset.labels.max()) + 1)
    return metrics_from_confusion(confusion_matrix(dataset.labels, pred, n), positive_class)


def select_model(history, window: int) -> int:
    """Epoch with the best validation accuracy among the last ``window``; later wins ties."""
    if window < 1 or len(history) < window:
        raise ValueError(f"history of {len(history)} epochs is shorter than window {window}")
    tail = history[-window:]
    best = max(range(window), key=lambda i: (_val_acc(tail[i]), i))
    rec = tail[best]
    return rec.epoch if isinstance(rec, EpochRecord) else len(history) - window + best + 1


def _val_acc(rec) -> float:
    return rec.val_acc if isinstance(rec, EpochRecord) else float(rec)


class _Cycler:
    """Endless reshuffled pass over ``n`` indices."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            step = min(k, self.n - self.pos)
            out.append(self.order[self.pos:self.pos + step])
            self.pos += step
            k -= step
        return np.concatenate(out)


def _accuracy(pred, labels) -> float:
    return 100.0 * float(np.mean(pred == labels))


def build_heads(model: Model, config: TrainConfig, n_domains: int = 2) -> list[DomainHead]:
    """One head per tap (DANN: final tap only); empty for no adaptation."""
    if config.method == "none":
        return []
    layers, widths = model.tap_layers, model.tap_widths
    if not layers:
        raise ValueError(f"method {config.method!r} needs at least one tapped layer")
    if config.method == "dann":
        layers, widths = layers[-1:], widths[-1:]
    rng = rng_for(config.seed + 3)
    mode = "wass" if config.method == "l-wass" else "dann"
    return [DomainHead(w, None if mode == "wass" else n_domains, config.reduction, mode,
                       layer=i, seed=rng) for i, w in zip(layers, widths)]


def _select_taps(taps, heads):
    by_layer = {t.layer: t.z for t in taps}
    return [by_layer[h.layer] for h in heads]


class Trainer:
    def __init__(self, config: TrainConfig, source: Dataset, target: Dataset, model: Model,
                 target_eval: Dataset | None = None):
        if len(source) == 0 or len(target) == 0:
            raise ValueError("source and target must be non-empty")
        if source.labels is None:
            raise ValueError("source domain must be labelled")
        self.config = config
        self.model = model
        train_idx, val_idx = split_indices(source, [1 - config.val_fraction, config.val_fraction],
                                           config.seed)
        self.train_set = source.subset(train_idx)
        self.val_set = source.subset(val_idx)
        self.target = target.unlabeled()
        self.target_eval = target_eval if target_eval is not None else (
            target if target.labels is not None else None)
        self.heads = build_heads(model, config)
        c = config
        self.opt_main = OptimizerState.for_params(model.parameters(), c.lr_main, c.momentum,
                                                  c.weight_decay)
        self.opt_heads = OptimizerState.for_params(self.head_params(), c.lr_critic, c.momentum,
                                                   c.weight_decay)
        self.rng_source = rng_for(c.seed)
        self.target_stream = _Cycler(len(target), rng_for(c.seed + 1))
        self.rng_critic = rng_for(c.seed + 2)
        self.rng_eps = rng_for(c.seed + 4)
        # fixed target slice for held-out domain diagnostics
        self.target_probe = self.target.samples[rng_for(c.seed + 5).permutation(len(target))
                                                [:len(self.val_set)]]
        self.critic_updates = [0] * len(self.heads)
        self.main_updates = 0
        self.history: list[EpochRecord] = []
        self._bad_steps = 0

    def head_params(self):
        return [p for h in self.heads for p in h.params]

    # --- one update ------------------------------------------------------

    def _guard(self, epoch: int, term: str, value: float) -> bool:
        """Return True when the step is usable; raise after repeated failures."""
        if np.isfinite(value) and abs(value) <= DIVERGENCE_LIMIT:
            self._bad_steps = 0
            return True
        self._bad_steps += 1
        log.warning("epoch %d: %s = %s", epoch, term, value)
        if self._bad_steps >= DIVERGENCE_PATIENCE:
            raise DivergenceError(epoch, term, value)
        return False

    def _main_step(self, xs, ys, xt) -> tuple[Graph, ad.Node, str]:
        c, model = self.config, self.model
        g = Graph()
        logits, taps_s = model.forward(g, g.constant(xs))
        loss = softmax_cross_entropy(logits, ys)
        if c.method == "none":
            return g, loss, "task loss"
        _, taps_t = model.forward(g, g.constant(xt))
        zs, zt = _select_taps(taps_s, self.heads), _select_taps(taps_t, self.heads)
        if c.method in ("dann", "l-dann"):
            joint = [ad.concat([a, b]) for a, b in zip(zs, zt)]
            labels = np.concatenate([np.zeros(len(xs), np.int64), np.ones(len(xt), np.int64)])
            return g, ad.add(loss, ldann_loss(joint, self.heads, labels, c.grl_scale)), \
                "task + domain loss"
        if c.alg1_literal:
            eps = self.rng_eps.uniform(size=len(xs))
            for a, b, head in zip(zs, zt, self.heads):
                gp = gradient_penalty(head.frozen_critic, interpolate(a, b, eps), c.lam)
                loss = ad.subtract(loss, gp)
            return g, loss, "task - gradient penalty"
        return g, ad.add(loss, lwass_feature_loss(zs, zt, self.heads, c.beta)), \
            "task + critic distance"

    def _critic_round(self, epoch: int) -> None:
        """One critic iteration for every layer on a fresh batch pair."""
        c, m = self.config, self.config.batch_size
        xs = self.train_set.samples[self.rng_critic.choice(len(self.train_set), min(m, len(self.train_set)),
                                                           replace=False)]
        xt = self.target.samples[self.target_stream.take(len(xs))]
        feats = Graph()
        _, taps_s = self.model.forward(feats, feats.constant(xs), update_stats=False)
        _, taps_t = self.model.forward(feats, feats.constant(xt), update_stats=False)
        zs_vals = [z.value for z in _select_taps(taps_s, self.heads)]
        zt_vals = [z.value for z in _select_taps(taps_t, self.heads)]
        g = Graph()
        total = None
        for head, a, b in zip(self.heads, zs_vals, zt_vals):
            zs, zt = g.constant(a), g.constant(b)
            eps = self.rng_eps.uniform(size=len(a))
            term = critic_loss(head.critic, zs, zt, interpolate(zs, zt, eps), c.lam,
                               literal=c.alg1_literal)
            total = term if total is None else ad.add(total, term)
        value = float(total.value.reshape(()))
        if not self._guard(epoch, "critic loss", value):
            return
        grads = ad.backward(g, total)
        sgd_step(self.head_params(), [grads.for_param(g, p) for p in self.head_params()],
                 self.opt_heads)
        for j in range(len(self.heads)):
            self.critic_updates[j] += 1

    def step(self, epoch: int, xs, ys, xt) -> float | None:
        c = self.config
        try:
            if c.method == "l-wass":
                for _ in range(c.n_critic):
                    self._critic_round(epoch)
            g, loss, term = self._main_step(xs, ys, xt)
            value = float(loss.value.reshape(()))
        except NumericError as e:
            self._guard(epoch, str(e), float("nan"))
            return None
        if not self._guard(epoch, term, value):
            return None
        try:
            grads = ad.backward(g, loss)
        except NumericError as e:
            self._guard(epoch, f"gradient of {term}: {e}", float("nan"))
            return None
        params = self.model.parameters()
        sgd_step(params, [grads.for_param(g, p) for p in params], self.opt_main)
        if c.method in ("dann", "l-dann"):
            hp = self.head_params()
            sgd_step(hp, [grads.for_param(g, p) for p in hp], self.opt_heads)
        self.main_updates += 1
        return value

    # --- diagnostics -----------------------------------------------------

    def record(self, epoch: int, losses: list[float]) -> EpochRecord:
        model = self.model
        val_acc = _accuracy(model.predict(self.val_set.samples), self.val_set.labels)
        target_acc = None
        if self.target_eval is not None:
            target_acc = _accuracy(model.predict(self.target_eval.samples), self.target_eval.labels)
        rec = EpochRecord(epoch, float(np.mean(losses)) if losses else float("nan"), val_acc,
                          target_acc)
        if not self.heads:
            return rec
        g = Graph()
        _, taps_s = model.forward(g, g.constant(self.val_set.samples), training=False)
        _, taps_t = model.forward(g, g.constant(self.target_probe), training=False)
        zs, zt = _select_taps(taps_s, self.heads), _select_taps(taps_t, self.heads)
        if self.config.method == "l-wass":
            rec.w1 = [float(critic_estimate(h.frozen_critic, a, b).value[0])
                      for h, a, b in zip(self.heads, zs, zt)]
        else:
            accs = []
            for h, a, b in zip(self.heads, zs, zt):
                pa = h.forward(g, a, frozen=True).value.argmax(axis=1)
                pb = h.forward(g, b, frozen=True).value.argmax(axis=1)
                accs.append(50.0 * (np.mean(pa == 0) + np.mean(pb == 1)))
            rec.domain_acc = float(np.mean(accs))
        return rec

    # --- loop ------------------------------------------------------------

    def run(self) -> TrainResult:
        c = self.config
        history = self.history
        best: tuple[float, dict] | None = None
        first_kept = c.epochs - c.selection_window + 1
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for epoch in range(1, c.epochs + 1):
                order = self.rng_source.permutation(len(self.train_set))
                losses = []
                for lo in range(0, len(order), c.batch_size):
                    idx = order[lo:lo + c.batch_size]
                    xt = self.target.samples[self.target_stream.take(len(idx))]
                    loss = self.step(epoch, self.train_set.samples[idx],
                                     self.train_set.labels[idx], xt)
                    if loss is not None:
                        losses.append(loss)
                try:
                    rec = self.record(epoch, losses)
                except NumericError as e:
                    raise DivergenceError(epoch, "epoch diagnostics", float("nan")) from e
                history.append(rec)
                log.info("epoch %d loss %.4f val %.1f", epoch, rec.train_loss, rec.val_acc)
                if epoch >= first_kept and (best is None or rec.val_acc >= best[0]):
                    best = (rec.val_acc, self.model.state_dict())
        selected = select_model(history, c.selection_window)
        snapshot = self.model.clone()
        snapshot.load_state_dict(best[1])
        return TrainResult(snapshot, history, selected, self.heads, self.critic_updates,
                           self.main_updates)


def train(config: TrainConfig, source: Dataset, target: Dataset, model: Model,
          target_eval: Dataset | None = None) -> TrainResult:
    """Train ``model`` in place and return the selected snapshot plus history."""
    return Trainer(config, source, target, model, target_eval).run()


def estimate_w1(samples_a, samples_b, steps: int = 2000, lam: float = 10.0, lr: float = 0.01,
                batch_size: int = 256, hidden: int = 16, seed: int = 0) -> float:
    """Fit a gradient-penalised critic and return mean D(a) - mean D(b)."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"sample widths differ: {a.shape[1]} vs {b.shape[1]}")
    rng = rng_for(seed)
    head = DomainHead(a.shape[1], mode="wass", reduction=1, hidden=hidden, seed=rng, bias=True)
    opt = OptimizerState.for_params(head.params, lr, 0.9, 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps):
            xa = a[rng.integers(len(a), size=batch_size)]
            xb = b[rng.integers(len(b), size=batch_size)]
            g = Graph()
            za, zb = g.constant(xa), g.constant(xb)
            try:
                loss = critic_loss(head.critic, za, zb,
                                   interpolate(za, zb, rng.uniform(size=batch_size)), lam)
                grads = ad.backward(g, loss)
            except NumericError as e:
                raise DivergenceError(step, "critic loss", float("nan")) from e
            sgd_step(head.params, [grads.for_param(g, p) for p in head.params], opt)
        g = Graph()
        est = critic_estimate(head.frozen_critic, g.constant(a), g.constant(b))
    return float(est.value[0])
