"""Policy / action-value approximators, the joint fitting loss, and Adam.

Two backends share one flat parameter vector representation:

* ``mlp``: shared ReLU trunk with a policy-logit head and an action-value head.
* ``tabular``: one row of (logits, q) per distinct feature vector, grown on demand.

The loss for a batch is the mean over samples of the cross-entropy between
the target policy and the masked softmax of the logits, plus the squared
error between q at the taken action and the return target.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from klent.regopt import masked_log_softmax

# ---------------------------------------------------------------------------
# parameters


@dataclass
class MLPLayout:
    sizes: tuple[int, ...]  # input dim followed by hidden widths
    num_actions: int

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            out += [(f"W{i}", (a, b)), (f"b{i}", (b,))]
        h = self.sizes[-1]
        out += [("Wp", (h, self.num_actions)), ("bp", (self.num_actions,))]
        out += [("Wq", (h, self.num_actions)), ("bq", (self.num_actions,))]
        return out

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes())

    def to_json(self) -> dict:
        return {"kind": "mlp", "sizes": list(self.sizes), "num_actions": self.num_actions}


@dataclass
class TabularLayout:
    feature_dim: int
    num_actions: int
    keys: list[bytes] = field(default_factory=list)
    index: dict[bytes, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.index) != len(self.keys):
            self.index = {k: i for i, k in enumerate(self.keys)}

    @property
    def size(self) -> int:
        return len(self.keys) * 2 * self.num_actions

    def to_json(self) -> dict:
        return {
            "kind": "tabular",
            "feature_dim": self.feature_dim,
            "num_actions": self.num_actions,
            "keys": [k.hex() for k in self.keys],
        }


Layout = MLPLayout | TabularLayout


@dataclass
class Parameters:
    layout: Layout
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.layout.size,):
            raise ValueError(f"theta has shape {self.theta.shape}, layout expects ({self.layout.size},)")

    @property
    def kind(self) -> str:
        return "mlp" if isinstance(self.layout, MLPLayout) else "tabular"

    @property
    def num_actions(self) -> int:
        return self.layout.num_actions

    @property
    def feature_dim(self) -> int:
        return self.layout.sizes[0] if isinstance(self.layout, MLPLayout) else self.layout.feature_dim

    def copy(self) -> "Parameters":
        layout = self.layout
        if isinstance(layout, TabularLayout):
            layout = TabularLayout(layout.feature_dim, layout.num_actions, list(layout.keys), dict(layout.index))
        return Parameters(layout, self.theta.copy())


def layout_from_json(d: dict) -> Layout:
    if d["kind"] == "mlp":
        return MLPLayout(tuple(d["sizes"]), d["num_actions"])
    if d["kind"] == "tabular":
        return TabularLayout(d["feature_dim"], d["num_actions"], [bytes.fromhex(k) for k in d["keys"]])
    raise ValueError(f"unknown layout kind {d['kind']!r}")


def init_mlp(feature_dim: int, num_actions: int, hidden=(128, 128), seed: int = 0, zero: bool = False) -> Parameters:
    """Fan-in scaled uniform weights, zero biases."""
    layout = MLPLayout((feature_dim, *hidden), num_actions)
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in layout.shapes():
        if name.startswith("b") or zero:
            chunks.append(np.zeros(shape))
        else:
            bound = 1.0 / np.sqrt(shape[0])
            chunks.append(rng.uniform(-bound, bound, size=shape))
    return Parameters(layout, np.concatenate([c.ravel() for c in chunks]))


def init_tabular(feature_dim: int, num_actions: int) -> Parameters:
    return Parameters(TabularLayout(feature_dim, num_actions), np.zeros(0))


def unpack(params: Parameters) -> dict[str, np.ndarray]:
    """Views into theta keyed by layer name (MLP only)."""
    out, offset = {}, 0
    for name, shape in params.layout.shapes():
        n = int(np.prod(shape))
        out[name] = params.theta[offset : offset + n].reshape(shape)
        offset += n
    return out


def tabular_rows(params: Parameters) -> np.ndarray:
    return params.theta.reshape(len(params.layout.keys), 2 * params.num_actions)


def feature_key(x: np.ndarray) -> bytes:
    return np.ascontiguousarray(x, dtype=np.float64).tobytes()


def expand_tabular(params: Parameters, X: np.ndarray) -> tuple[Parameters, int]:
    """Add zero rows for unseen feature vectors.  Returns (params, rows added)."""
    layout = params.layout
    new_keys = []
    seen = set()
    for x in np.atleast_2d(X):
        k = feature_key(x)
        if k not in layout.index and k not in seen:
            seen.add(k)
            new_keys.append(k)
    if not new_keys:
        return params, 0
    keys = list(layout.keys) + new_keys
    grown = TabularLayout(layout.feature_dim, layout.num_actions, keys)
    theta = np.concatenate([params.theta, np.zeros(len(new_keys) * 2 * layout.num_actions)])
    return Parameters(grown, theta), len(new_keys)


# ---------------------------------------------------------------------------
# forward / loss / gradient


@dataclass
class NetOutput:
    policy_logits: np.ndarray
    q: np.ndarray

    def policy(self, mask) -> np.ndarray:
        return np.exp(masked_log_softmax(self.policy_logits, mask))


def _tabular_lookup(params: Parameters, X: np.ndarray) -> np.ndarray:
    index = params.layout.index
    return np.array([index.get(feature_key(x), -1) for x in X], dtype=np.int64)


def _mlp_trunk(p: dict, X: np.ndarray, n_hidden: int):
    acts = [X]
    h = X
    for i in range(n_hidden):
        h = np.maximum(h @ p[f"W{i}"] + p[f"b{i}"], 0.0)
        acts.append(h)
    return acts


def forward_batch(params: Parameters, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits and q for each row of X, both shaped (B, num_actions)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != params.feature_dim:
        raise ValueError(f"feature length {X.shape[1]} does not match layout ({params.feature_dim})")
    A = params.num_actions
    if params.kind == "tabular":
        rows = _tabular_lookup(params, X)
        out = np.zeros((X.shape[0], 2 * A))
        hit = rows >= 0
        if hit.any():
            out[hit] = tabular_rows(params)[rows[hit]]
        return out[:, :A], out[:, A:]
    p = unpack(params)
    h = _mlp_trunk(p, X, len(params.layout.sizes) - 1)[-1]
    return h @ p["Wp"] + p["bp"], h @ p["Wq"] + p["bq"]


def forward(params: Parameters, features: np.ndarray, mask=None) -> NetOutput:
    logits, q = forward_batch(params, np.asarray(features)[None, :])
    return NetOutput(logits[0], q[0])


@dataclass
class SampleRecord:
    features: np.ndarray
    mask: np.ndarray
    action: int
    target_policy: np.ndarray
    g_lambda: float
    key: bytes = b""
    version: int = 0  # parameter version that generated the sample


@dataclass
class TrainBatch:
    X: np.ndarray  # (B, D)
    masks: np.ndarray  # (B, A) bool
    actions: np.ndarray  # (B,)
    targets: np.ndarray  # (B, A) target policies
    returns: np.ndarray  # (B,)

    def __post_init__(self):
        if len(self.actions) == 0:
            raise ValueError("empty batch")

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def from_records(cls, records: list[SampleRecord]) -> "TrainBatch":
        return cls(
            np.stack([r.features for r in records]).astype(np.float64),
            np.stack([r.mask for r in records]).astype(bool),
            np.array([r.action for r in records], dtype=np.int64),
            np.stack([r.target_policy for r in records]).astype(np.float64),
            np.array([r.g_lambda for r in records], dtype=np.float64),
        )

    def subset(self, idx) -> "TrainBatch":
        return TrainBatch(self.X[idx], self.masks[idx], self.actions[idx], self.targets[idx], self.returns[idx])


def _head_terms(logits, q, batch: TrainBatch):
    logp = masked_log_softmax(logits, batch.masks)
    ce = -np.sum(np.where(batch.masks, batch.targets * np.where(batch.masks, logp, 0.0), 0.0), axis=1)
    rows = np.arange(len(batch))
    err = q[rows, batch.actions] - batch.returns
    per_sample = ce + err**2
    bad = ~np.isfinite(per_sample)
    if bad.any():
        raise FloatingPointError(f"non-finite loss at batch index {int(np.flatnonzero(bad)[0])}")
    return logp, err, per_sample


def loss(params: Parameters, batch: TrainBatch) -> float:
    logits, q = forward_batch(params, batch.X)
    return float(_head_terms(logits, q, batch)[2].mean())


def loss_and_grad(params: Parameters, batch: TrainBatch) -> tuple[float, np.ndarray]:
    B = len(batch)
    rows = np.arange(B)
    if params.kind == "tabular":
        idx = _tabular_lookup(params, batch.X)
        if (idx < 0).any():
            raise KeyError("batch holds states without a table row; call expand_tabular first")
        table = tabular_rows(params)
        A = params.num_actions
        logits, q = table[idx, :A], table[idx, A:]
    else:
        p = unpack(params)
        n_hidden = len(params.layout.sizes) - 1
        acts = _mlp_trunk(p, batch.X, n_hidden)
        h = acts[-1]
        logits = h @ p["Wp"] + p["bp"]
        q = h @ p["Wq"] + p["bq"]

    logp, err, per_sample = _head_terms(logits, q, batch)
    probs = np.where(batch.masks, np.exp(logp), 0.0)
    mass = np.where(batch.masks, batch.targets, 0.0).sum(axis=1, keepdims=True)
    d_logits = np.where(batch.masks, probs * mass - batch.targets, 0.0) / B
    d_q = np.zeros_like(q)
    d_q[rows, batch.actions] = 2.0 * err / B

    if params.kind == "tabular":
        grad = np.zeros_like(tabular_rows(params))
        np.add.at(grad, idx, np.concatenate([d_logits, d_q], axis=1))
        return float(per_sample.mean()), grad.ravel()

    grads = {
        "Wp": h.T @ d_logits,
        "bp": d_logits.sum(axis=0),
        "Wq": h.T @ d_q,
        "bq": d_q.sum(axis=0),
    }
    d_h = d_logits @ p["Wp"].T + d_q @ p["Wq"].T
    for i in range(n_hidden - 1, -1, -1):
        d_a = d_h * (acts[i + 1] > 0)
        grads[f"W{i}"] = acts[i].T @ d_a
        grads[f"b{i}"] = d_a.sum(axis=0)
        if i:
            d_h = d_a @ p[f"W{i}"].T
    flat = np.concatenate([grads[name].ravel() for name, _ in params.layout.shapes()])
    if not np.all(np.isfinite(flat)):
        raise FloatingPointError("non-finite gradient")
    return float(per_sample.mean()), flat


def gradient(params: Parameters, batch: TrainBatch) -> np.ndarray:
    return loss_and_grad(params, batch)[1]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Parameters, lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        n = params.theta.size
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)

    def resized(self, n: int) -> "AdamState":
        """Zero-extend the moment vectors (tabular rows added at the end)."""
        extra = n - self.m.size
        if extra < 0:
            raise ValueError("optimizer state cannot shrink")
        if extra == 0:
            return self
        return replace(self, m=np.concatenate([self.m, np.zeros(extra)]), v=np.concatenate([self.v, np.zeros(extra)]))


def optimizer_step(params: Parameters, grads: np.ndarray, opt: AdamState) -> tuple[Parameters, AdamState]:
    """One Adam step.

    Tabular parameters use the lazy (sparse) variant: coordinates whose
    gradient is exactly zero keep their moments and value, so table entries
    absent from the batch do not keep drifting on stale momentum.
    """
    if grads.shape != params.theta.shape or opt.m.shape != params.theta.shape:
        raise ValueError("parameter, gradient and optimizer shapes disagree")
    step = opt.step + 1
    m = opt.beta1 * opt.m + (1.0 - opt.beta1) * grads
    v = opt.beta2 * opt.v + (1.0 - opt.beta2) * grads * grads
    m_hat = m / (1.0 - opt.beta1**step)
    v_hat = v / (1.0 - opt.beta2**step)
    delta = opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    if params.kind == "tabular":
        touched = grads != 0.0
        m = np.where(touched, m, opt.m)
        v = np.where(touched, v, opt.v)
        delta = np.where(touched, delta, 0.0)
    theta = params.theta - delta
    return Parameters(params.layout, theta), replace(opt, m=m, v=v, step=step)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"KLENTCK\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: Parameters
    optimizer: AdamState | None = None
    iteration: int = 0
    config_hash: str = ""
    extra: dict = field(default_factory=dict)


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write ``ckpt``; see docs/formats.md for the byte layout."""
    opt = ckpt.optimizer
    header = {
        "layout": ckpt.params.layout.to_json(),
        "num_params": int(ckpt.params.theta.size),
        "iteration": int(ckpt.iteration),
        "config_hash": ckpt.config_hash,
        "optimizer": None
        if opt is None
        else {"step": opt.step, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps},
        "extra": ckpt.extra,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(ckpt.params.theta.astype("<f8").tobytes())
        if opt is not None:
            fh.write(opt.m.astype("<f8").tobytes())
            fh.write(opt.v.astype("<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(data) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(data[16 : 16 + hlen])
        n = header["num_params"]
        body = np.frombuffer(data, dtype="<f8", offset=16 + hlen)
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    expected = n * (3 if header["optimizer"] else 1)
    if body.size != expected:
        raise CheckpointError(f"{path}: expected {expected} floats, found {body.size}")
    params = Parameters(layout_from_json(header["layout"]), body[:n].astype(np.float64))
    opt = None
    if header["optimizer"]:
        o = header["optimizer"]
        opt = AdamState(
            body[n : 2 * n].astype(np.float64), body[2 * n :].astype(np.float64), o["step"], o["lr"], o["beta1"], o["beta2"], o["eps"]
        )
    return Checkpoint(params, opt, header["iteration"], header["config_hash"], header.get("extra", {}))
