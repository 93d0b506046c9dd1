"""Mini-batch BPR + contrastive training and evaluation of a trained model."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .autodiff import NumericalError, Tape, backward
from .data import Dataset
from .evaluation import EvalReport, ctr_report, smv, stratified_eval
from .metapath import MetaPathSubgraph, build_subgraph, parse_metapath
from .model import HiCON, ITEM_PATHS, ModelConfig, ModelParams, PREDICT_MODES, USER_PATHS
from .objective import DEFAULT_TAU, total_loss
from .rng import substream

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "bpr", "cl_user", "cl_item", "total", "val_auc")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    dim: int = 64
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 1024
    lam: float = 0.05
    tau: float = DEFAULT_TAU
    seed: int = 0
    user_paths: tuple[str, ...] = USER_PATHS
    item_paths: tuple[str, ...] = ITEM_PATHS
    predict_mode: str = "full"
    disable_low: bool = False
    disable_high: bool = False
    disable_cl: bool = False
    recursive_depth: int | None = None
    pooling: str = "mean"
    patience: int | None = None  # early stopping on validation AUC
    eval_every: int = 1

    def __post_init__(self):
        self.user_paths = tuple(self.user_paths)
        self.item_paths = tuple(self.item_paths)
        for name in ("dim", "epochs", "batch_size", "eval_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or self.lam < 0 or self.tau <= 0:
            raise ValueError("lr and lambda must be >= 0 and tau > 0")
        if self.predict_mode not in PREDICT_MODES:
            raise ValueError(f"unknown prediction mode {self.predict_mode!r}")
        if self.disable_low and self.disable_high:
            raise ValueError("disable_low and disable_high cannot both be set")
        if self.recursive_depth is not None and self.recursive_depth < 1:
            raise ValueError("recursive_depth must be >= 1")
        no_high = self.disable_high or self.recursive_depth
        if no_high and self.predict_mode == "high_only":
            raise ValueError("high_only prediction needs the high-order encoder")
        if self.predict_mode == "low_only" and self.disable_low and not self.recursive_depth:
            raise ValueError("low_only prediction with the low-order encoder disabled")
        for p in (*self.user_paths, *self.item_paths):
            parse_metapath(p)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.dim, self.user_paths, self.item_paths, self.pooling,
                           self.disable_low, self.disable_high, self.recursive_depth)

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.disable_cl else self.lam

    def to_dict(self) -> dict:
        d = asdict(self)
        d["user_paths"], d["item_paths"] = list(self.user_paths), list(self.item_paths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def sample_batch(pos_sets: Sequence[np.ndarray], n_items: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform non-interacted negative per positive: ``(n, 3)`` rows ``user, pos, neg``.

    Users whose positives cover the catalog are skipped.
    """
    users, items = [], []
    for u, pos in enumerate(pos_sets):
        if len(pos) == 0:
            continue
        if len(pos) >= n_items:
            log.warning("user %d interacted with the whole catalog; skipped", u)
            continue
        users.append(np.full(len(pos), u, dtype=np.int64))
        items.append(np.asarray(pos, dtype=np.int64))
    if not users:
        return np.zeros((0, 3), dtype=np.int64)
    users, items = np.concatenate(users), np.concatenate(items)
    keys = np.sort(users * n_items + items)
    neg = rng.integers(0, n_items, size=users.size)
    while True:
        probe = users * n_items + neg
        at = np.minimum(np.searchsorted(keys, probe), keys.size - 1)
        bad = keys[at] == probe
        if not bad.any():
            break
        neg[bad] = rng.integers(0, n_items, size=int(bad.sum()))
    return np.stack([users, items, neg], axis=1)


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    config: TrainConfig
    model: HiCON
    params: ModelParams
    log: list[dict] = field(default_factory=list)
    best_epoch: int | None = None

    def log_tsv(self) -> str:
        lines = ["\t".join(LOG_COLUMNS)]
        for row in self.log:
            lines.append("\t".join("" if row[c] is None else repr(row[c]) if isinstance(row[c], float)
                                   else str(row[c]) for c in LOG_COLUMNS))
        return "\n".join(lines) + "\n"


def build_model(config: TrainConfig, dataset: Dataset,
                subgraphs: dict[str, MetaPathSubgraph] | None = None) -> HiCON:
    graph = dataset.unified()
    mc = config.model_config()
    if subgraphs is None:
        subgraphs = {n: build_subgraph(graph, parse_metapath(n)) for n in mc.metapaths}
    return HiCON(graph, mc, subgraphs)


def split_scores(model: HiCON, params: ModelParams, rows: np.ndarray, mode: str) -> np.ndarray:
    return model.score_pairs(params, rows[:, 0], rows[:, 1], mode)


def train(config: TrainConfig, dataset: Dataset, model: HiCON | None = None,
          params: ModelParams | None = None) -> TrainResult:
    model = model or build_model(config, dataset)
    params = params.copy() if params is not None else model.init_params(substream(config.seed, "init"))
    pos_sets = dataset.train_positive_sets()
    sampler = substream(config.seed, "sampling")
    opt = Adam(config.lr)
    lam = config.effective_lambda
    val = dataset.splits["val"]
    has_val = val.size and (val[:, 2] == 1).any() and (val[:, 2] == 0).any()
    result = TrainResult(config, model, params)
    best_auc, best_params, stale = -np.inf, None, 0

    for epoch in range(1, config.epochs + 1):
        triples = sample_batch(pos_sets, dataset.item_count, sampler)
        triples = triples[sampler.permutation(len(triples))]
        sums = dict(bpr=0.0, cl_user=0.0, cl_item=0.0, total=0.0)
        for b, lo in enumerate(range(0, len(triples), config.batch_size)):
            batch = triples[lo:lo + config.batch_size]
            tape = Tape()
            named = params.named()
            leaves = {k: tape.leaf(v, k) for k, v in named.items()}
            try:
                reps = model.forward(leaves)
                br = total_loss(reps, batch, lam, config.tau, config.predict_mode)
                grads = backward(tape, br.total)
            except NumericalError as exc:
                raise TrainingError(f"non-finite values at epoch {epoch}, batch {b}: {exc}") from exc
            vals = br.values()
            if not np.isfinite(vals["total"]):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            for k in sums:
                sums[k] += vals[k]
            opt.step(named, {k: grads[leaves[k]] for k in named})
        row = dict(epoch=epoch, **sums, val_auc=None)
        if has_val and (epoch % config.eval_every == 0 or epoch == config.epochs):
            scores = split_scores(model, params, val, config.predict_mode)
            row["val_auc"] = ctr_report(scores, val[:, 2]).auc
        result.log.append(row)
        if config.patience and row["val_auc"] is not None:
            if row["val_auc"] > best_auc:
                best_auc, best_params, stale, result.best_epoch = row["val_auc"], params.copy(), 0, epoch
            else:
                stale += 1
                if stale >= config.patience:
                    log.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                    break
    if best_params is not None:
        result.params = best_params
    return result


def evaluate(model: HiCON, params: ModelParams, dataset: Dataset, split: str = "test",
             mode: str | None = None, band_edges: Sequence[float] | None = None,
             epoch: int | None = None) -> EvalReport:
    """CTR report on a split plus SMV of the final representations.

    ``smv`` covers users and items together, ``smv_users`` the users alone.
    """
    mode = mode or "full"
    rows = dataset.splits[split]
    reps = model.represent(params)
    scores = reps.score(rows[:, 0], rows[:, 1], mode).value
    report = ctr_report(scores, rows[:, 2], epoch=epoch)
    report.smv = smv(node_representations(reps, mode))
    report.smv_users = smv(node_representations(reps, mode, "users"))
    if band_edges is not None:
        counts = np.bincount(dataset.positives("train")[:, 0], minlength=dataset.user_count)
        report.strata = stratified_eval(rows, scores, counts, band_edges)
    return report


def node_representations(reps, mode: str = "full", nodes: str = "all") -> np.ndarray:
    """Scoring-space representations of users, items or both (users first)."""
    if nodes not in ("all", "users", "items"):
        raise ValueError(f"unknown node set {nodes!r}")
    if mode == "low_only" or reps.user_high is None:
        u, i = reps.user_low.value, reps.item_low.value
    elif mode == "high_only":
        u, i = reps.user_high.value, reps.item_high.value
    else:
        u, i = reps.user_final(), reps.item_final()
    return u if nodes == "users" else i if nodes == "items" else np.concatenate([u, i])


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
