"""Task-by-task training with rehearsal, distillation and an EMA teacher."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .autodiff import ComputationTape, ConfigError, Tensor, backward
from .backbone import BackboneConfig, backbone_forward, backbone_init
from .data import (
    MEMORY_MODES,
    DomainDataset,
    RehearsalMemory,
    StreamRecorder,
    TaskStream,
    batches,
    memory_update,
)
from .ema import ModelPair, ema_update, snapshot_teacher
from .heads import LinearHead, MslHead, expand
from .losses import ce_loss, distillation_loss, total_loss
from .metrics import AccuracyMatrix, average_accuracy, backward_transfer, evaluate_accuracy, exact_mean
from .model import Model, model_scores

log = logging.getLogger(__name__)

# head type, distillation with an EMA teacher, rehearsal memory
METHODS = {
    "msl_mov": ("msl", True, True),
    "msl": ("msl", False, True),
    "erm": ("linear", False, True),
    "finetune_no_memory": ("linear", False, False),
    "linear_head": ("linear", True, True),
}


@dataclass(frozen=True)
class TrainConfig:
    epochs_per_domain: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    lam: float = 1e-3
    tau: float = 2.0
    gamma: float = 0.96
    seed: int = 0
    repetitions: int = 5
    head: str = "msl"
    distill: bool = True
    use_memory: bool = True
    memory_capacity: int = 5
    memory_mode: str = "per_domain"
    rank: Optional[int] = None
    hidden_dims: tuple = (64,)
    feature_dim: int = 32
    activation: str = "relu"
    expansion_init: str = "uniform"
    bias_init: str = "zero"

    @classmethod
    def for_method(cls, method: str, **overrides) -> "TrainConfig":
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
        head, distill, use_memory = METHODS[method]
        return cls(head=head, distill=distill, use_memory=use_memory, **overrides)

    def validate(self) -> None:
        positive = ("epochs_per_domain", "batch_size", "repetitions", "feature_dim")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.lam < 0 or not self.tau > 0 or not 0 <= self.gamma <= 1:
            raise ConfigError("need lam >= 0, tau > 0 and 0 <= gamma <= 1")
        if self.head not in ("msl", "linear"):
            raise ConfigError(f"head must be 'msl' or 'linear', got {self.head!r}")
        if self.memory_capacity < 0 or self.memory_mode not in MEMORY_MODES:
            raise ConfigError("memory_capacity must be >= 0 with a known memory_mode")
        if self.expansion_init not in ("uniform", "zero"):
            raise ConfigError(f"expansion_init must be 'uniform' or 'zero', got {self.expansion_init!r}")
        if self.bias_init not in ("zero", "class_mean"):
            raise ConfigError(f"bias_init must be 'zero' or 'class_mean', got {self.bias_init!r}")
        if self.rank is not None and not 1 <= self.rank <= self.feature_dim:
            raise ConfigError(f"rank must lie in [1, feature_dim], got {self.rank}")


def derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


def build_model(config: TrainConfig, input_dim: int, seed: int) -> Model:
    backbone = backbone_init(BackboneConfig(
        input_dim=input_dim,
        feature_dim=config.feature_dim,
        hidden_dims=tuple(config.hidden_dims),
        activation=config.activation,
        seed=seed,
    ))
    if config.head == "msl":
        head = MslHead(config.feature_dim, config.rank)
    else:
        head = LinearHead(config.feature_dim)
    return Model(backbone, head)


def sgd_step(params, learning_rate: float) -> None:
    """p <- p - lr * grad(p), then clear the gradient."""
    for p in params:
        if p.grad is None:
            raise RuntimeError("sgd_step called on a parameter without a gradient")
    for p in params:
        p.values -= learning_rate * p.grad
        p.grad = None


@dataclass
class ExperimentState:
    pair: ModelPair
    memory: RehearsalMemory
    dataset: DomainDataset
    stream: TaskStream
    config: TrainConfig
    repetition: int = 0
    next_task: int = 0
    matrices: dict = field(default_factory=dict)
    losses: list = field(default_factory=list)
    recorder: Optional[StreamRecorder] = None

    @property
    def model(self) -> Model:
        return self.pair.current


def train_step(state: ExperimentState, features: np.ndarray, labels: np.ndarray) -> float:
    """One SGD step on CE (+ lambda * distillation), then the EMA update."""
    cfg = state.config
    cur, old = state.pair.current, state.pair.old
    with ComputationTape() as tape:
        scores = cur.scores(Tensor(features))
        ce = ce_loss(scores, labels)
        dis = None
        if old is not None:
            dis = distillation_loss(scores, model_scores(old, features), cfg.tau)
        loss = total_loss(ce, dis, cfg.lam)
    params = cur.parameters()
    backward(loss, tape, params)
    sgd_step(params, cfg.learning_rate)
    if old is not None:
        ema_update(state.pair)
    return loss.item()


def _class_means(model: Model, dataset: DomainDataset, classes) -> np.ndarray:
    feats = []
    for c in classes:
        idx = dataset.train_indices([c])
        h = backbone_forward(model.backbone, Tensor(dataset.X_train[idx])).values
        feats.append(h.mean(axis=0))
    return np.array(feats)


def evaluate_task_row(state: ExperimentState, checkpoint: int) -> None:
    """Record a[t][checkpoint] for every task learned so far."""
    ds, model = state.dataset, state.model
    seen = ds.train_domains
    groups = {"seen": seen}
    for k in sorted(set(ds.domain_test.tolist())):
        groups[f"domain_{k}"] = [k]
    if ds.unseen_domain is not None:
        groups["unseen"] = [ds.unseen_domain]
    q = state.stream.q
    for name, domains in groups.items():
        mat = state.matrices.setdefault(name, AccuracyMatrix(q))
        for t in range(checkpoint + 1):
            idx = np.flatnonzero(np.isin(ds.y_test, state.stream.tasks[t]) & np.isin(ds.domain_test, domains))
            if idx.size:
                mat.record(t, checkpoint, evaluate_accuracy(model, ds.X_test[idx], ds.y_test[idx]))


def run_task(state: ExperimentState, task_index: int) -> ExperimentState:
    """Expand the head, train over each domain in turn, update memory, evaluate."""
    if task_index != state.next_task:
        raise RuntimeError(f"expected task {state.next_task}, got {task_index}")
    cfg, ds = state.config, state.dataset
    seed, rep = cfg.seed, state.repetition
    classes = state.stream.tasks[task_index]
    cur = state.pair.current

    if task_index > 0 and cfg.distill:
        state.pair.old = snapshot_teacher(cur)
    init = "uniform" if task_index == 0 else cfg.expansion_init
    bias = _class_means(cur, ds, classes) if cfg.bias_init == "class_mean" and cfg.head == "msl" else None
    expand(cur.head, len(classes), derive_seed(seed, rep, task_index, 1), init, bias)

    memory = state.memory if cfg.use_memory else None
    domain_order = np.random.default_rng([seed, rep, task_index, 2]).permutation(ds.train_domains)
    for k in domain_order:
        current = ds.train_indices(classes, int(k))
        for epoch in range(cfg.epochs_per_domain):
            for batch in batches(ds, current, memory, cfg.batch_size, [seed, rep, task_index, int(k)], epoch):
                if state.recorder is not None:
                    state.recorder.on_batch(batch)
                state.losses.append(train_step(state, batch.features, batch.labels))

    if cfg.use_memory:
        memory_update(state.memory, ds, classes)
        if state.recorder is not None:
            state.recorder.on_memory(state.memory)
    state.pair.old = None
    evaluate_task_row(state, task_index)
    state.next_task += 1
    return state


def new_state(dataset: DomainDataset, stream: TaskStream, config: TrainConfig, repetition: int = 0,
              recorder: Optional[StreamRecorder] = None) -> ExperimentState:
    """Fresh model and memory; ``dataset`` must already use task-ordered labels."""
    config.validate()
    model = build_model(config, dataset.d, derive_seed(config.seed, repetition, 0))
    memory = RehearsalMemory(config.memory_capacity if config.use_memory else 0, config.seed, config.memory_mode)
    return ExperimentState(ModelPair(model, None, config.gamma), memory, dataset, stream, config,
                           repetition=repetition, recorder=recorder)


def ordered_stream(dataset: DomainDataset, stream: TaskStream):
    """Relabel classes so that task 1 holds 0..k1-1, task 2 the next ids, and so on."""
    order = stream.class_order
    relabeled = dataset.relabel(order)
    tasks, start = [], 0
    for t in stream.tasks:
        tasks.append(tuple(range(start, start + len(t))))
        start += len(t)
    return relabeled, TaskStream(tuple(tasks))


def run_repetition(dataset: DomainDataset, stream: TaskStream, config: TrainConfig, repetition: int,
                   recorder: Optional[StreamRecorder] = None) -> ExperimentState:
    ds, tasks = ordered_stream(dataset, stream)
    state = new_state(ds, tasks, config, repetition, recorder)
    for t in range(tasks.q):
        run_task(state, t)
    return state


def summarize(matrices: dict) -> dict:
    out = {}
    for name, mat in matrices.items():
        out[name] = {"A": average_accuracy(mat), "BW": backward_transfer(mat)}
    return out


@dataclass
class ExperimentReport:
    config: dict
    tasks: list
    repetitions: list
    averaged: dict
    matrices_mean: dict
    source_domains: list
    unseen_domain: Optional[int]
    wall_clock_seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def run_experiment(dataset: DomainDataset, stream: TaskStream, config: TrainConfig,
                   recorder: Optional[StreamRecorder] = None) -> ExperimentReport:
    """Run ``config.repetitions`` domain-order permutations and average the metrics."""
    config.validate()
    start = time.perf_counter()
    reps = []
    for rep in range(config.repetitions):
        state = run_repetition(dataset, stream, config, rep, recorder)
        reps.append({
            "matrices": {k: m.to_rows() for k, m in state.matrices.items()},
            "metrics": summarize(state.matrices),
            "final_loss": state.losses[-1] if state.losses else None,
        })
        log.debug("repetition %d done: %s", rep, reps[-1]["metrics"])
    names = list(reps[0]["metrics"])
    averaged = {
        name: {key: exact_mean([r["metrics"][name][key] for r in reps]) for key in ("A", "BW")}
        for name in names
    }
    mean_mats = {}
    for name in names:
        stack = np.array([AccuracyMatrix.from_rows(r["matrices"][name]).values for r in reps])
        mean_mats[name] = AccuracyMatrix.from_rows(np.mean(stack, axis=0).tolist()).to_rows()
    return ExperimentReport(
        config=asdict(config),
        tasks=[list(t) for t in stream.tasks],
        repetitions=reps,
        averaged=averaged,
        matrices_mean=mean_mats,
        source_domains=list(dataset.source_domains),
        unseen_domain=dataset.unseen_domain,
        wall_clock_seconds=time.perf_counter() - start,
    )

