"""Incremental training protocol, open-set decisions, metrics and sweeps.

A task stream orders generators by release date: the first task holds the
real class plus one seeded-random generator, later tasks introduce blocks
of L new generators, and designated holdout classes never train (they only
measure unseen detection).  Each task registers its classes, grows anchors
and classifier rows, minimizes the composite objective with replay and
latent mixing, admits exemplars to the memory bank, and appends a metric
record evaluated over the cumulative test set.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from modelattrib import data_io, losses
from modelattrib.data_io import Manifest, ManifestClass, ManifestError, load_split
from modelattrib.diffcore import (
    LinearClassifier,
    Parameter,
    ProjectionHead,
    adam_step,
    softmax,
)
from modelattrib.hierarchy import AnchorSet, Taxonomy, compute_prototypes
from modelattrib.losses import LossWeights
from modelattrib.memory_bank import MemoryBank, sample_mix_pairs

logger = logging.getLogger(__name__)

__all__ = [
    "UNSEEN",
    "TrainConfig",
    "Task",
    "TaskStream",
    "MetricRecord",
    "ProtocolState",
    "build_stream_ep1",
    "train_task",
    "run_ep1",
    "resume_ep1",
    "train_static_ep2",
    "decide",
    "decide_batch",
    "evaluate",
    "calibrate_tau",
    "choose_tau",
    "default_tau_grid",
    "run_component_ablation",
    "run_budget_sweep",
    "run_tau_sweep_eval",
    "run_L_sweep",
]

UNSEEN = -1  # decision value for "from a generator never seen in training"


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the reference operating point."""

    lr: float = 1e-3
    epochs: int = 4
    batch_size: int = 512
    alpha1: float = 0.2
    alpha2: float = 0.5
    alpha3: float = 0.5
    alpha4: float = 1.0
    tau: float = 0.65
    bank_budget: int = 150
    L: int = 4
    hidden_dim: int = 512
    latent_dim: int = 256
    seed: int = 0
    use_bank: bool = True
    calibrate_each_task: bool = False

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        doc = json.loads(Path(path).read_text())
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def weights(self) -> LossWeights:
        return LossWeights(self.alpha1, self.alpha2, self.alpha3, self.alpha4)


@dataclass
class Task:
    index: int
    classes: list[ManifestClass]


@dataclass
class TaskStream:
    tasks: list[Task]
    holdout: list[ManifestClass]

    def seen_through(self, t: int) -> list[ManifestClass]:
        out: list[ManifestClass] = []
        for task in self.tasks[: t + 1]:
            out.extend(task.classes)
        return out


@dataclass
class MetricRecord:
    task_index: int
    avg_acc: float
    auth_acc: float
    unseen_acc: float | None
    per_class_acc: dict[int, float]

    def as_dict(self) -> dict:
        return {
            "task_index": self.task_index,
            "avg_acc": self.avg_acc,
            "auth_acc": self.auth_acc,
            "unseen_acc": self.unseen_acc,
            "per_class_acc": {str(k): v for k, v in self.per_class_acc.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricRecord":
        return cls(
            task_index=d["task_index"],
            avg_acc=d["avg_acc"],
            auth_acc=d["auth_acc"],
            unseen_acc=d["unseen_acc"],
            per_class_acc={int(k): v for k, v in d["per_class_acc"].items()},
        )


class ProtocolState:
    """Everything the incremental driver owns: model, bank, threshold, history."""

    def __init__(
        self,
        config: TrainConfig,
        taxonomy: Taxonomy,
        head: ProjectionHead,
        classifier: LinearClassifier,
        anchors: AnchorSet,
        bank: MemoryBank,
        tau: float,
        rng: np.random.Generator,
        history: list[MetricRecord],
    ):
        self.config = config
        self.taxonomy = taxonomy
        self.head = head
        self.classifier = classifier
        self.anchors = anchors
        self.bank = bank
        self.tau = tau
        self.rng = rng
        self.history = history

    @classmethod
    def fresh(
        cls, config: TrainConfig, feature_dim: int, rng: np.random.Generator | None = None
    ) -> "ProtocolState":
        if rng is None:
            rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])
        head = ProjectionHead.seeded(feature_dim, config.hidden_dim, config.latent_dim, rng)
        return cls(
            config=config,
            taxonomy=Taxonomy(),
            head=head,
            classifier=LinearClassifier(config.latent_dim),
            anchors=AnchorSet(config.latent_dim),
            bank=MemoryBank(budget=config.bank_budget, feature_dim=feature_dim),
            tau=config.tau,
            rng=rng,
            history=[],
        )

    def parameters(self) -> list[Parameter]:
        return (
            self.head.parameters()
            + self.classifier.parameters()
            + self.anchors.parameters()
        )

    @classmethod
    def _restore(cls, meta, taxonomy_dict, config_dict, params, bank, rng_state, history):
        config = TrainConfig(**config_dict)
        taxonomy = Taxonomy.from_dict(taxonomy_dict)
        layer_count = sum(1 for name in params if name.startswith("head.w"))
        layers = []
        for i in range(layer_count):
            layers.append(
                (
                    _param_from(params, f"head.w{i}"),
                    _param_from(params, f"head.b{i}"),
                )
            )
        head = ProjectionHead(layers)
        classifier = LinearClassifier(config.latent_dim)
        classifier.weight = _param_from(params, "clf.weight")
        classifier.bias = _param_from(params, "clf.bias")
        anchors = AnchorSet(config.latent_dim)
        anchors.fine = _param_from(params, "anchors.fine")
        anchors.coarse = _param_from(params, "anchors.coarse")
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = rng_state
        return cls(
            config=config,
            taxonomy=taxonomy,
            head=head,
            classifier=classifier,
            anchors=anchors,
            bank=bank,
            tau=meta["tau"],
            rng=rng,
            history=[MetricRecord.from_dict(m) for m in history],
        )


def _param_from(params: dict, name: str) -> Parameter:
    if name not in params:
        raise data_io.FormatError(f"checkpoint is missing parameter {name!r}")
    entry = params[name]
    p = Parameter(entry["values"], name=name)
    p.adam_m = entry["adam_m"].copy()
    p.adam_v = entry["adam_v"].copy()
    p.step_count = int(entry["step_count"])
    return p


# ---------------------------------------------------------------------------
# stream construction
# ---------------------------------------------------------------------------


def build_stream_ep1(
    manifest: Manifest, L: int, seed: int | np.random.SeedSequence
) -> TaskStream:
    """Temporally ordered task stream: T0 = real + one seeded-random generator,
    then consecutive blocks of L generators in release order.

    Holdout classes come from the manifest roles; when none are designated,
    the two latest-released generators are withheld.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    gens = manifest.generators()
    holdout = manifest.holdout()
    if not holdout:
        if len(gens) < 3:
            raise ManifestError("need at least 3 generators to withhold a default holdout")
        holdout = gens[-2:]
        gens = gens[:-2]
    if not gens:
        raise ManifestError("no trainable generator classes in the manifest")
    rng = np.random.default_rng(seed)
    first = gens[int(rng.integers(len(gens)))]
    rest = [g for g in gens if g is not first]
    tasks = [Task(0, [manifest.real(), first])]
    for start in range(0, len(rest), L):
        tasks.append(Task(len(tasks), rest[start : start + L]))
    return TaskStream(tasks=tasks, holdout=holdout)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _load_task_features(
    state: ProtocolState, task: Task
) -> tuple[np.ndarray, np.ndarray, dict[int, np.ndarray]]:
    """Register task classes and return (features, labels, per-class features)."""
    new_models = [(c.name, c.family, c.release_date) for c in task.classes]
    state.taxonomy.register_classes(new_models)
    per_class: dict[int, np.ndarray] = {}
    for c in task.classes:
        cid = state.taxonomy.class_id(c.name)
        if c.role == "real":
            state.taxonomy.mark_real(cid)
        feats = load_split(c, "train")
        if feats.shape[1] != state.head.input_dim:
            raise ValueError(
                f"class {c.name!r}: feature dim {feats.shape[1]} does not match "
                f"head input dim {state.head.input_dim}"
            )
        per_class[cid] = feats
    labels = np.concatenate(
        [np.full(arr.shape[0], cid, dtype=np.intp) for cid, arr in per_class.items()]
    )
    feats = np.concatenate(list(per_class.values())).astype(np.float64)
    return feats, labels, per_class


def _train_step(
    state: ProtocolState,
    x_cur: np.ndarray,
    y_cur: np.ndarray,
    weights: LossWeights,
) -> losses.LossBreakdown:
    cfg = state.config
    replaying = cfg.use_bank and len(state.bank.entries) > 0
    if replaying:
        x_rep, y_rep = state.bank.sample_replay(x_cur.shape[0], state.rng)
        x_all = np.concatenate([x_cur, x_rep.astype(np.float64)])
        y_all = np.concatenate([y_cur, y_rep])
    else:
        x_all, y_all = x_cur, y_cur

    z_all = state.head.forward(x_all)
    n_cur = x_cur.shape[0]
    from modelattrib.diffcore import take_rows  # local to keep import block tight

    z_cur = take_rows(z_all, np.arange(n_cur))
    l_cls = losses.loss_cls(state.classifier.forward(z_cur), y_cur)

    if replaying:
        z_rep = take_rows(z_all, np.arange(n_cur, x_all.shape[0]))
        l_rep = losses.loss_cls(state.classifier.forward(z_rep), y_all[n_cur:])
    else:
        l_rep = 0.0

    protos = compute_prototypes(z_all, y_all, state.taxonomy)
    l1 = losses.loss_fine(protos, state.anchors)
    l2 = losses.loss_coarse(protos, state.anchors)

    counts = np.bincount(y_all)
    cross_pairs = int(y_all.size**2 - np.sum(counts.astype(np.int64) ** 2))
    n_pairs = min(n_cur, cross_pairs)
    idx_a, idx_b, betas = sample_mix_pairs(y_all, n_pairs, state.rng)
    if idx_a.size:
        z_mix = losses.mix_latent_pairs(z_all, idx_a, idx_b, betas)
        l_u = losses.loss_unseen(state.classifier.forward(z_mix), cfg.tau)
    else:
        logger.debug("mixing skipped: fewer than two classes in the pool")
        l_u = 0.0

    total, breakdown = losses.total_loss(l_cls, l1, l2, l_u, l_rep, weights)
    params = state.parameters()
    for p in params:
        p.zero_grad()
    total.backward()
    adam_step(params, lr=cfg.lr)
    state.anchors.renormalize()
    return breakdown


def train_task(
    state: ProtocolState,
    stream: TaskStream,
    t: int,
    log_file: IO[str] | None = None,
) -> ProtocolState:
    """Train one task end to end and append its metric record."""
    if t != len(state.history):
        raise RuntimeError(
            f"task index {t} out of order, {len(state.history)} tasks already trained"
        )
    task = stream.tasks[t]
    cfg = state.config
    n_fams_before = state.taxonomy.n_families
    feats, labels, per_class = _load_task_features(state, task)
    n_new_fams = state.taxonomy.n_families - n_fams_before
    state.anchors.grow(len(task.classes), n_new_fams, state.rng)
    state.classifier.grow(len(task.classes), state.rng)

    weights = cfg.weights()
    n = feats.shape[0]
    for epoch in range(cfg.epochs):
        order = state.rng.permutation(n)
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            batch = order[start : start + cfg.batch_size]
            breakdown = _train_step(state, feats[batch], labels[batch], weights)
            if log_file is not None:
                rec = {"task": t, "epoch": epoch, "step": step, **breakdown.as_dict()}
                log_file.write(json.dumps(rec) + "\n")

    if cfg.use_bank:
        for cid, class_feats in per_class.items():
            state.bank.admit_class(cid, class_feats)

    if cfg.calibrate_each_task:
        state.tau = calibrate_tau(state, stream.seen_through(t), default_tau_grid())[0]

    record = evaluate(state, stream.seen_through(t), stream.holdout, task_index=t)
    state.history.append(record)
    return state


def run_ep1(
    manifest: Manifest,
    config: TrainConfig,
    until_task: int | None = None,
    log_file: IO[str] | None = None,
) -> ProtocolState:
    """Train the full EP1 stream (or stop after ``until_task``)."""
    ss = np.random.SeedSequence(config.seed)
    stream_seed, state_seed = ss.spawn(2)
    stream = build_stream_ep1(manifest, config.L, stream_seed)
    dim = read_feature_dim(manifest)
    state = ProtocolState.fresh(config, dim, rng=np.random.default_rng(state_seed))
    last = len(stream.tasks) - 1 if until_task is None else until_task
    for t in range(last + 1):
        train_task(state, stream, t, log_file=log_file)
    return state


def resume_ep1(
    state: ProtocolState, manifest: Manifest, log_file: IO[str] | None = None
) -> ProtocolState:
    """Continue a loaded state through the remaining tasks of its stream."""
    stream_seed = np.random.SeedSequence(state.config.seed).spawn(2)[0]
    stream = build_stream_ep1(manifest, state.config.L, stream_seed)
    for t in range(len(state.history), len(stream.tasks)):
        train_task(state, stream, t, log_file=log_file)
    return state


def train_static_ep2(
    manifest: Manifest, config: TrainConfig, log_file: IO[str] | None = None
) -> tuple[ProtocolState, MetricRecord]:
    """Joint training over all non-holdout classes as a single task."""
    entries = [manifest.real()] + manifest.generators()
    stream = TaskStream(tasks=[Task(0, entries)], holdout=manifest.holdout())
    dim = read_feature_dim(manifest)
    state = ProtocolState.fresh(config, dim)
    train_task(state, stream, 0, log_file=log_file)
    return state, state.history[0]


def read_feature_dim(manifest: Manifest) -> int:
    first = manifest.classes[0]
    path = first.train if first.train is not None else first.test
    return data_io.read_features(path).dim


# ---------------------------------------------------------------------------
# decisions and metrics
# ---------------------------------------------------------------------------


def decide(state: ProtocolState, feature: np.ndarray, tau: float | None = None) -> int:
    """Predicted class id, or UNSEEN when max softmax confidence is below tau.

    Argmax ties resolve to the lowest class id.
    """
    preds, _ = decide_batch(state, np.asarray(feature, dtype=np.float64)[None, :], tau)
    return int(preds[0])


def decide_batch(
    state: ProtocolState, features: np.ndarray, tau: float | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized decisions; returns (predictions, max softmax probabilities)."""
    if state.classifier.num_classes == 0:
        raise RuntimeError("decide requires a model trained on at least one task")
    if tau is None:
        tau = state.tau
    logits = state.classifier.logits(state.head.project(features.astype(np.float64)))
    p = softmax(logits)
    preds = np.argmax(p, axis=1)
    pmax = p[np.arange(p.shape[0]), preds]
    preds = np.where(pmax < tau, UNSEEN, preds)
    return preds.astype(np.int64), pmax


def evaluate(
    state: ProtocolState,
    seen: Sequence[ManifestClass],
    holdout: Sequence[ManifestClass],
    tau: float | None = None,
    task_index: int | None = None,
) -> MetricRecord:
    """Cumulative metrics at one decision threshold.

    A seen-class sample counts as correct only when decided Known with the
    true class (rejecting it is an error).  Authenticity is binary over the
    seen test samples, counting any non-real decision, including Unseen, as
    "generated".  Unseen accuracy is the fraction of holdout samples decided
    Unseen.
    """
    if not seen:
        raise ValueError("evaluate needs at least one seen class")
    real_id = state.taxonomy.real_class
    per_class: dict[int, float] = {}
    auth_correct = 0
    auth_total = 0
    for entry in seen:
        cid = state.taxonomy.class_id(entry.name)
        feats = load_split(entry, "test")
        preds, _ = decide_batch(state, feats, tau)
        per_class[cid] = float(np.mean(preds == cid))
        is_real = cid == real_id
        pred_real = preds == real_id
        auth_correct += int(np.sum(pred_real == is_real))
        auth_total += preds.size
    avg_acc = float(np.mean(list(per_class.values())))
    auth_acc = auth_correct / auth_total

    unseen_acc: float | None = None
    if holdout:
        hits = 0
        total = 0
        for entry in holdout:
            feats = load_split(entry, "test")
            preds, _ = decide_batch(state, feats, tau)
            hits += int(np.sum(preds == UNSEEN))
            total += preds.size
        unseen_acc = hits / total

    return MetricRecord(
        task_index=len(state.history) if task_index is None else task_index,
        avg_acc=avg_acc,
        auth_acc=auth_acc,
        unseen_acc=unseen_acc,
        per_class_acc=per_class,
    )


def default_tau_grid() -> list[float]:
    return [round(0.50 + 0.05 * i, 2) for i in range(10)]  # 0.50 .. 0.95


def choose_tau(
    pmax_seen: np.ndarray, pmax_pseudo: np.ndarray, grid: Sequence[float]
) -> tuple[float, list[dict[str, float]]]:
    """Grid threshold maximizing the harmonic mean of the seen-accept rate
    and the pseudo-unseen-reject rate; ties resolve to the smallest value."""
    if len(grid) == 0:
        raise ValueError("calibration grid is empty")
    if pmax_seen.size == 0 or pmax_pseudo.size == 0:
        raise ValueError("calibration split is empty")
    best_tau = None
    best_h = -1.0
    table = []
    for tau in grid:
        accept = float(np.mean(pmax_seen >= tau))
        reject = float(np.mean(pmax_pseudo < tau))
        h = 0.0 if accept + reject == 0 else 2 * accept * reject / (accept + reject)
        table.append(
            {"tau": tau, "seen_accept": accept, "pseudo_reject": reject, "hmean": h}
        )
        if h > best_h:
            best_h = h
            best_tau = tau
    return float(best_tau), table


def calibrate_tau(
    state: ProtocolState,
    seen: Sequence[ManifestClass],
    grid: Sequence[float],
    rng: np.random.Generator | None = None,
) -> tuple[float, list[dict[str, float]]]:
    """Pick the grid threshold maximizing the harmonic mean of the seen-accept
    rate and the pseudo-unseen-reject rate on the calibration split.

    Ties resolve to the smallest threshold.  Pseudo-unseen samples are convex
    mixes of cross-class calibration latents.
    """
    if rng is None:
        rng = state.rng
    feats_list = []
    labels_list = []
    for entry in seen:
        split = "calib" if entry.calib is not None else "test"
        feats = load_split(entry, split)
        feats_list.append(feats)
        labels_list.append(
            np.full(feats.shape[0], state.taxonomy.class_id(entry.name), dtype=np.intp)
        )
    if not feats_list:
        raise ValueError("calibration split is empty")
    feats = np.concatenate(feats_list).astype(np.float64)
    labels = np.concatenate(labels_list)
    latents = state.head.project(feats)
    _, pmax_seen = _maxprob(state, latents)

    idx_a, idx_b, betas = sample_mix_pairs(labels, labels.size, rng)
    if idx_a.size == 0:
        raise ValueError("calibration needs at least two classes for pseudo-unseen mixes")
    mixed = betas[:, None] * latents[idx_a] + (1.0 - betas[:, None]) * latents[idx_b]
    _, pmax_mix = _maxprob(state, mixed)
    return choose_tau(pmax_seen, pmax_mix, grid)


def _maxprob(state: ProtocolState, latents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = softmax(state.classifier.logits(latents))
    preds = np.argmax(p, axis=1)
    return preds, p[np.arange(p.shape[0]), preds]


# ---------------------------------------------------------------------------
# ablations and sweeps
# ---------------------------------------------------------------------------

ABLATION_TOGGLES = ("replay", "l1", "l2", "lu")


def run_component_ablation(
    manifest: Manifest, config: TrainConfig, toggles: Sequence[str]
) -> list[tuple[str, list[MetricRecord]]]:
    """Cumulative component ablation sharing one stream seed.

    Starts from the pure classification baseline (no bank, all regularizer
    weights zero) and re-enables the requested components one at a time in
    the given order.
    """
    for toggle in toggles:
        if toggle not in ABLATION_TOGGLES:
            raise ValueError(f"unknown ablation toggle {toggle!r}, known: {ABLATION_TOGGLES}")
    baseline = config.replace(use_bank=False, alpha1=0.0, alpha2=0.0, alpha3=0.0, alpha4=0.0)
    rows = [("baseline", baseline)]
    current = baseline
    for toggle in toggles:
        if toggle == "replay":
            current = current.replace(use_bank=True, alpha4=config.alpha4)
        elif toggle == "l1":
            current = current.replace(alpha1=config.alpha1)
        elif toggle == "l2":
            current = current.replace(alpha2=config.alpha2)
        elif toggle == "lu":
            current = current.replace(alpha3=config.alpha3)
        rows.append((f"+{toggle}", current))
    results = []
    for label, cfg in rows:
        state = run_ep1(manifest, cfg)
        results.append((label, state.history))
    return results


def run_budget_sweep(
    manifest: Manifest, config: TrainConfig, budgets: Sequence[int]
) -> list[tuple[int, list[MetricRecord]]]:
    """Full EP1 retrain per memory-bank budget."""
    out = []
    for budget in budgets:
        state = run_ep1(manifest, config.replace(bank_budget=budget))
        out.append((budget, state.history))
    return out


def run_tau_sweep_eval(
    state: ProtocolState, manifest: Manifest, grid: Sequence[float]
) -> list[tuple[float, float, float]]:
    """Evaluate one trained model across decision thresholds.

    Only the inference threshold varies, so seen accuracy is exactly
    non-increasing and unseen accuracy exactly non-decreasing in tau.
    """
    stream_seed = np.random.SeedSequence(state.config.seed).spawn(2)[0]
    stream = build_stream_ep1(manifest, state.config.L, stream_seed)
    seen = stream.seen_through(len(state.history) - 1)
    rows = []
    for tau in grid:
        rec = evaluate(state, seen, stream.holdout, tau=tau)
        rows.append((tau, rec.avg_acc, rec.unseen_acc))
    return rows


def run_L_sweep(
    manifest: Manifest, config: TrainConfig, values: Sequence[int]
) -> list[tuple[int, list[MetricRecord]]]:
    """Full EP1 retrain per task granularity L."""
    out = []
    for L in values:
        state = run_ep1(manifest, config.replace(L=L))
        out.append((L, state.history))
    return out
