"""Shallow knowledge graph embedding models: TransE, DistMult, ComplEx.

Training uses multiclass negative log-likelihood over ``eta`` corruptions per
positive, sparse L2 on the rows touched by a batch, and Adam. Everything is
plain numpy with hand-written gradients so runs are bitwise reproducible.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .store import TripleStore

log = logging.getLogger(__name__)

MODEL_KINDS = ("transe", "distmult", "complex")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class EarlyStopping:
    patience: int = 5
    check_interval: int = 10


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters for a single training run.

    The defaults form the desk-scale profile; see :data:`PROFILES` for the
    larger reproduction settings.
    """

    model: str = "transe"
    k: int = 32
    eta: int = 10
    lr: float = 1e-3
    l2: float = 1e-4
    max_epochs: int = 200
    batch_size: int = 512
    early_stopping: EarlyStopping | None = None
    seed: int = 0

    def __post_init__(self):
        kind = self.model.lower()
        if kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model!r}; expected one of {MODEL_KINDS}")
        object.__setattr__(self, "model", kind)
        if isinstance(self.early_stopping, dict):
            object.__setattr__(self, "early_stopping", EarlyStopping(**self.early_stopping))
        if self.k < 1 or self.eta < 1 or not self.lr > 0 or self.l2 < 0:
            raise ValueError("require k >= 1, eta >= 1, lr > 0, l2 >= 0")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("require batch_size >= 1, max_epochs >= 0")

    @property
    def width(self) -> int:
        """Stored vector length (ComplEx keeps interleaved real/imaginary parts)."""
        return 2 * self.k if self.model == "complex" else self.k

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


PROFILES = {
    "desk": ModelConfig(),
    "paper-fb15k237": ModelConfig(model="transe", k=400, eta=30, lr=1e-4, l2=1e-4,
                                  max_epochs=4000, early_stopping=EarlyStopping(5, 100), seed=0),
    "paper-wn18rr": ModelConfig(model="transe", k=350, eta=30, lr=1e-4, l2=1e-4,
                                max_epochs=4000, early_stopping=EarlyStopping(5, 100), seed=0),
}


# --------------------------------------------------------------------------- scoring

def _score_and_grads(kind: str, s: np.ndarray, p: np.ndarray, o: np.ndarray, grads: bool = True):
    """Scores of broadcast row stacks and their partial derivatives.

    Returns ``(f, df_ds, df_dp, df_do)`` with ``f`` of shape ``s.shape[:-1]``.
    """
    if kind == "transe":
        x = s + p - o
        norm = np.sqrt(np.sum(x * x, axis=-1))
        f = -norm
        if not grads:
            return f, None, None, None
        u = x / np.maximum(norm, 1e-12)[..., None]
        return f, -u, -u, u
    if kind == "distmult":
        f = np.sum(s * p * o, axis=-1)
        if not grads:
            return f, None, None, None
        return f, p * o, s * o, s * p
    if kind == "complex":
        sr, si = s[..., 0::2], s[..., 1::2]
        pr, pi = p[..., 0::2], p[..., 1::2]
        or_, oi = o[..., 0::2], o[..., 1::2]
        f = np.sum(sr * pr * or_ + si * pr * oi + sr * pi * oi - si * pi * or_, axis=-1)
        if not grads:
            return f, None, None, None
        ds = _interleave(pr * or_ + pi * oi, pr * oi - pi * or_)
        dp = _interleave(sr * or_ + si * oi, sr * oi - si * or_)
        do = _interleave(sr * pr - si * pi, si * pr + sr * pi)
        return f, ds, dp, do
    raise ValueError(kind)


def _interleave(re: np.ndarray, im: np.ndarray) -> np.ndarray:
    out = np.empty(re.shape[:-1] + (2 * re.shape[-1],), dtype=re.dtype)
    out[..., 0::2] = re
    out[..., 1::2] = im
    return out


@dataclass(eq=False)
class EmbeddingModel:
    """Entity and relation tables plus the scoring family.

    Instances are treated as read-only once training finishes; the
    :attr:`fingerprint` is cached on first access.
    """

    config: ModelConfig
    entity_emb: np.ndarray
    relation_emb: np.ndarray
    trained_epochs: int = 0
    calibrator: object | None = None
    _fingerprint: str | None = field(default=None, repr=False)

    @property
    def num_entities(self) -> int:
        return self.entity_emb.shape[0]

    @property
    def num_relations(self) -> int:
        return self.relation_emb.shape[0]

    @property
    def fingerprint(self) -> str:
        if self._fingerprint is None:
            h = hashlib.blake2b(digest_size=16)
            h.update(self.config.model.encode())
            h.update(np.ascontiguousarray(self.entity_emb).tobytes())
            h.update(np.ascontiguousarray(self.relation_emb).tobytes())
            self._fingerprint = h.hexdigest()
        return self._fingerprint

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.config, self.entity_emb.copy(), self.relation_emb.copy(),
                              self.trained_epochs, self.calibrator)

    def score(self, triple) -> float:
        s, p, o = (int(x) for x in triple)
        f, *_ = _score_and_grads(self.config.model, self.entity_emb[s], self.relation_emb[p],
                                 self.entity_emb[o], grads=False)
        return float(f)

    def score_triples(self, triples) -> np.ndarray:
        t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        f, *_ = _score_and_grads(self.config.model, self.entity_emb[t[:, 0]],
                                 self.relation_emb[t[:, 1]], self.entity_emb[t[:, 2]], grads=False)
        return f

    def score_objects(self, s: int, p: int) -> np.ndarray:
        """Scores of ``(s, p, x)`` for every entity ``x``."""
        f, *_ = _score_and_grads(self.config.model, self.entity_emb[s][None], self.relation_emb[p][None],
                                 self.entity_emb, grads=False)
        return f

    def score_subjects(self, p: int, o: int) -> np.ndarray:
        """Scores of ``(x, p, o)`` for every entity ``x``."""
        f, *_ = _score_and_grads(self.config.model, self.entity_emb, self.relation_emb[p][None],
                                 self.entity_emb[o][None], grads=False)
        return f


def score(model: EmbeddingModel, triple) -> float:
    return model.score(triple)


def init_model(config: ModelConfig, num_entities: int, num_relations: int) -> EmbeddingModel:
    """Uniform initialisation in ``[-6/sqrt(k), 6/sqrt(k)]`` from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    bound = 6.0 / math.sqrt(config.k)
    ent = rng.uniform(-bound, bound, size=(num_entities, config.width))
    rel = rng.uniform(-bound, bound, size=(num_relations, config.width))
    return EmbeddingModel(config, ent, rel)


# --------------------------------------------------------------------------- loss

def multiclass_nll(kind: str, entity_emb: np.ndarray, relation_emb: np.ndarray,
                   positives: np.ndarray, negatives: np.ndarray, mask: np.ndarray | None = None,
                   l2: float = 0.0):
    """Loss and gradients for one batch.

    Parameters
    ----------
    positives : (B, 3) int array
    negatives : (B, eta, 3) int array
        Corruptions of each positive.
    mask : (B, eta) bool array, optional
        False marks corruptions that collide with their positive; these are
        dropped from the softmax denominator.
    l2 : float
        Weight of the squared-norm penalty on the unique rows in the batch.

    Returns
    -------
    loss : float
        Mean over positives of ``-log softmax`` of the positive score, plus
        the L2 term.
    grad_ent, grad_rel : ndarray
        Dense gradients with the shapes of the tables.
    """
    B = positives.shape[0]
    trip = np.concatenate([positives[:, None, :], negatives], axis=1)  # (B, 1+eta, 3)
    s_idx, p_idx, o_idx = trip[..., 0], trip[..., 1], trip[..., 2]
    f, ds, dp, do = _score_and_grads(kind, entity_emb[s_idx], relation_emb[p_idx], entity_emb[o_idx])

    valid = np.ones(f.shape, dtype=bool)
    if mask is not None:
        valid[:, 1:] = mask
    fm = np.where(valid, f, -np.inf)
    mx = fm.max(axis=1, keepdims=True)
    ex = np.where(valid, np.exp(fm - mx), 0.0)
    z = ex.sum(axis=1, keepdims=True)
    logz = np.log(z[:, 0]) + mx[:, 0]
    loss = float(np.mean(logz - f[:, 0]))

    g = ex / z
    g[:, 0] -= 1.0
    g /= B

    grad_ent = np.zeros_like(entity_emb)
    grad_rel = np.zeros_like(relation_emb)
    w = entity_emb.shape[1]
    np.add.at(grad_ent, s_idx.ravel(), (g[..., None] * ds).reshape(-1, w))
    np.add.at(grad_ent, o_idx.ravel(), (g[..., None] * do).reshape(-1, w))
    np.add.at(grad_rel, p_idx.ravel(), (g[..., None] * dp).reshape(-1, w))

    if l2:
        ents = np.unique(np.concatenate([s_idx.ravel(), o_idx.ravel()]))
        rels = np.unique(p_idx.ravel())
        loss += l2 * float(np.sum(entity_emb[ents] ** 2) + np.sum(relation_emb[rels] ** 2))
        grad_ent[ents] += 2.0 * l2 * entity_emb[ents]
        grad_rel[rels] += 2.0 * l2 * relation_emb[rels]
    return loss, grad_ent, grad_rel


def corrupt(positives: np.ndarray, eta: int, num_entities: int, rng: np.random.Generator):
    """Corrupt subject or object (equal odds) uniformly over all entities.

    Returns the ``(B, eta, 3)`` corruptions and a mask that is False where
    the replacement equals the original entity.
    """
    B = positives.shape[0]
    neg = np.repeat(positives[:, None, :], eta, axis=1)
    side = rng.integers(0, 2, size=(B, eta)) * 2  # column 0 or 2
    repl = rng.integers(0, num_entities, size=(B, eta))
    rows, cols = np.indices((B, eta))
    original = neg[rows, cols, side]
    neg[rows, cols, side] = repl
    return neg, repl != original


# --------------------------------------------------------------------------- training

class Adam:
    def __init__(self, shapes: Sequence[tuple], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for x, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            x -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Trainer:
    """Epoch-at-a-time trainer; keeps optimiser and sampler state between calls.

    ``model`` is updated in place by :meth:`fit_epoch`; take :meth:`snapshot`
    copies to keep checkpoints.
    """

    def __init__(self, store: TripleStore, config: ModelConfig):
        if len(store.train) == 0:
            raise TrainingError("empty train split")
        self.store = store
        self.config = config
        self.model = init_model(config, store.num_entities, store.num_relations)
        self.optimizer = Adam([self.model.entity_emb.shape, self.model.relation_emb.shape], config.lr)
        # Sampling stream is separate from the initialisation stream.
        self.rng = np.random.default_rng([config.seed, 1])
        self.epoch = 0

    def fit_epoch(self) -> float:
        cfg = self.config
        train = self.store.train
        order = self.rng.permutation(len(train))
        total, n = 0.0, 0
        m = self.model
        for b, start in enumerate(range(0, len(train), cfg.batch_size)):
            pos = train[order[start:start + cfg.batch_size]]
            neg, mask = corrupt(pos, cfg.eta, m.num_entities, self.rng)
            loss, ge, gr = multiclass_nll(cfg.model, m.entity_emb, m.relation_emb, pos, neg, mask, cfg.l2)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {self.epoch + 1}, batch {b}")
            self.optimizer.step([m.entity_emb, m.relation_emb], [ge, gr])
            total += loss * len(pos)
            n += len(pos)
        if not (np.isfinite(m.entity_emb).all() and np.isfinite(m.relation_emb).all()):
            raise TrainingError(f"non-finite parameters after epoch {self.epoch + 1}")
        self.epoch += 1
        m.trained_epochs = self.epoch
        m._fingerprint = None
        return total / n

    def snapshot(self) -> EmbeddingModel:
        return self.model.copy()


@dataclass
class TrainLogRow:
    epoch: int
    loss: float
    val_mrr: float | None = None


def train(store: TripleStore, config: ModelConfig,
          callback: Callable[[int, float, Trainer], None] | None = None,
          history: list | None = None) -> EmbeddingModel:
    """Train a model, optionally with early stopping on filtered validation MRR.

    Parameters
    ----------
    callback : callable, optional
        Called as ``callback(epoch, loss, trainer)`` after every epoch.
    history : list, optional
        Receives one :class:`TrainLogRow` per epoch.

    Returns
    -------
    EmbeddingModel
        With early stopping, the parameters from the best validation check.
    """
    es = config.early_stopping
    if es is not None and len(store.valid) == 0:
        raise TrainingError("early stopping needs a validation split")
    trainer = Trainer(store, config)
    best_mrr, best, bad = -1.0, None, 0
    for epoch in range(1, config.max_epochs + 1):
        loss = trainer.fit_epoch()
        row = TrainLogRow(epoch, loss)
        if es is not None and epoch % es.check_interval == 0:
            mrr = rank_filtered(trainer.model, store, store.valid).mrr
            row.val_mrr = mrr
            log.info("epoch %d loss %.5f val_mrr %.4f", epoch, loss, mrr)
            if mrr > best_mrr:
                best_mrr, best, bad = mrr, trainer.snapshot(), 0
            else:
                bad += 1
                if bad >= es.patience:
                    log.info("early stop at epoch %d (best val_mrr %.4f)", epoch, best_mrr)
                    if history is not None:
                        history.append(row)
                    break
        if history is not None:
            history.append(row)
        if callback is not None:
            callback(epoch, loss, trainer)
    return best if best is not None else trainer.model


# --------------------------------------------------------------------------- ranking

@dataclass
class RankReport:
    ranks: np.ndarray
    mrr: float
    hits_at_1: float
    hits_at_10: float

    @classmethod
    def from_ranks(cls, ranks) -> "RankReport":
        ranks = np.asarray(ranks, dtype=np.int64)
        if len(ranks) == 0:
            return cls(ranks, float("nan"), float("nan"), float("nan"))
        return cls(ranks, float(np.mean(1.0 / ranks)), float(np.mean(ranks <= 1)),
                   float(np.mean(ranks <= 10)))

    def hits_at(self, n: int) -> float:
        return float(np.mean(self.ranks <= n))


def _filter_maps(store: TripleStore):
    cache = getattr(store, "_rank_filter", None)
    if cache is None:
        objs: dict = {}
        subs: dict = {}
        for s, p, o in store.known_triples():
            objs.setdefault((s, p), []).append(o)
            subs.setdefault((p, o), []).append(s)
        cache = ({k: np.array(v) for k, v in objs.items()}, {k: np.array(v) for k, v in subs.items()})
        store._rank_filter = cache
    return cache


def rank_filtered(model: EmbeddingModel, store: TripleStore, triples, side: str = "both") -> RankReport:
    """Filtered ranks: 1 + number of non-known corruptions scoring strictly higher.

    ``side`` is ``"subject"``, ``"object"`` or ``"both"``; with ``"both"`` the
    report holds the object-side and subject-side rank of each triple.
    """
    if side not in ("subject", "object", "both"):
        raise ValueError(f"bad side {side!r}")
    objs, subs = _filter_maps(store)
    ranks = []
    for s, p, o in np.asarray(triples, dtype=np.int64).reshape(-1, 3).tolist():
        if side in ("object", "both"):
            f = model.score_objects(s, p)
            mask = f > f[o]
            known = objs.get((s, p))
            if known is not None:
                mask[known] = False
            ranks.append(1 + int(mask.sum()))
        if side in ("subject", "both"):
            f = model.score_subjects(p, o)
            mask = f > f[s]
            known = subs.get((p, o))
            if known is not None:
                mask[known] = False
            ranks.append(1 + int(mask.sum()))
    return RankReport.from_ranks(ranks)


# --------------------------------------------------------------------------- snapshots

SNAPSHOT_MAGIC = b"KGEX-SNAPSHOT\n"
SNAPSHOT_VERSION = 1


def save_snapshot(model: EmbeddingModel, path) -> None:
    """Write header JSON followed by the raw little-endian float64 tables."""
    ent = np.ascontiguousarray(model.entity_emb, dtype="<f8")
    rel = np.ascontiguousarray(model.relation_emb, dtype="<f8")
    header = {
        "version": SNAPSHOT_VERSION,
        "config": model.config.to_dict(),
        "num_entities": ent.shape[0],
        "num_relations": rel.shape[0],
        "width": ent.shape[1],
        "trained_epochs": model.trained_epochs,
        "calibrator": model.calibrator.to_dict() if model.calibrator is not None else None,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        fh.write(ent.tobytes())
        fh.write(rel.tobytes())


def load_snapshot(path) -> EmbeddingModel:
    from .calibration import Calibrator

    with open(path, "rb") as fh:
        if fh.read(len(SNAPSHOT_MAGIC)) != SNAPSHOT_MAGIC:
            raise ValueError(f"{path}: not a model snapshot")
        n = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(n))
        if header["version"] != SNAPSHOT_VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {header['version']}")
        e, r, w = header["num_entities"], header["num_relations"], header["width"]
        ent = np.frombuffer(fh.read(8 * e * w), dtype="<f8").reshape(e, w).astype(np.float64)
        rel = np.frombuffer(fh.read(8 * r * w), dtype="<f8").reshape(r, w).astype(np.float64)
    cal = header.get("calibrator")
    return EmbeddingModel(ModelConfig.from_dict(header["config"]), ent, rel, header["trained_epochs"],
                          Calibrator.from_dict(cal) if cal else None)


def with_config(config: ModelConfig, **overrides) -> ModelConfig:
    return replace(config, **{k: v for k, v in overrides.items() if v is not None})
