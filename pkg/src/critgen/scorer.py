"""Trajectory-pair criticality scorer.

A small polyline encoder (shared per-segment linear layer, ReLU, max-pool
per trajectory) feeds an MLP decoder with two sigmoid heads for the
collision-closeness and behavior-deviation values. Training minimizes MSE on
the *sum* of the two heads so both measures carry equal weight. All math is
hand-rolled numpy with explicit gradients, deterministic per seed.

Features live in a frame centered on the candidate's first point and aligned
to its initial heading, which makes predictions rigid-motion invariant.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scenario import HORIZON, Trajectory, derive_motion
from .synth import rng_from

FEAT_DIM = 8
ENC_DIM = 64
HID_DIM = 64
POS_SCALE = 30.0
LEN_SCALE = 3.0

ARCH_SPEC = (
    f"segfeat{FEAT_DIM}(mid/dir/len/t/role/bias, pos/{POS_SCALE}, len/{LEN_SCALE})"
    f"|enc{ENC_DIM}+relu+maxpool|mlp{2 * ENC_DIM}-{HID_DIM}-2|sigmoid"
)
ARCH_HASH = hashlib.sha256(ARCH_SPEC.encode()).hexdigest()[:16]
MODEL_VERSION = 1

PARAM_SHAPES = {
    "W_enc": (FEAT_DIM, ENC_DIM),
    "b_enc": (ENC_DIM,),
    "W1": (2 * ENC_DIM, HID_DIM),
    "b1": (HID_DIM,),
    "W2": (HID_DIM, 2),
    "b2": (2,),
}


@dataclass
class ScorerModel:
    params: dict[str, np.ndarray]
    seed: int
    arch_hash: str = ARCH_HASH
    train_loss: float = math.nan
    val_loss: float = math.nan


@dataclass(frozen=True)
class CorpusTriple:
    scenario_id: str
    candidate_index: int
    ego_prev: Trajectory
    candidate: Trajectory
    f_coll: float
    f_diff: float


# ---------------------------------------------------------------------------
# features


def candidate_frame(candidate: Trajectory) -> tuple[float, float, float]:
    """(x, y, heading) of the frame anchored at the candidate's start."""
    h, _ = derive_motion(candidate.points)
    return float(candidate.points[0, 0]), float(candidate.points[0, 1]), float(h[0])


SEG_STRIDE = 2      # trajectory points per polyline segment (0.2 s spans)


def segment_features(traj: Trajectory, role: float, frame: tuple[float, float, float]) -> np.ndarray:
    """(n_segments, 8) features in the given frame; segments span SEG_STRIDE steps."""
    fx, fy, fh = frame
    c, s = math.cos(fh), math.sin(fh)
    pts = traj.points[::SEG_STRIDE]
    if len(pts) < 2:
        pts = traj.points[[0, -1]]
    p = pts - (fx, fy)
    local = np.column_stack([p[:, 0] * c + p[:, 1] * s, -p[:, 0] * s + p[:, 1] * c])
    a = local[:-1]
    b = local[1:]
    mid = 0.5 * (a + b)
    d = b - a
    ln = np.hypot(d[:, 0], d[:, 1])
    safe = np.where(ln > 1e-12, ln, 1.0)
    t_abs = (traj.start_time_index + SEG_STRIDE * np.arange(len(a)) + SEG_STRIDE / 2) / HORIZON
    return np.column_stack([
        mid / POS_SCALE,
        d / safe[:, None],
        ln / LEN_SCALE,
        t_abs,
        np.full(len(a), role),
        np.ones(len(a)),
    ])


def pair_features(ego_prev: Trajectory, candidate: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    frame = candidate_frame(candidate)
    return (segment_features(ego_prev, 0.0, frame),
            segment_features(candidate, 1.0, frame))


class Batch:
    """Padded feature tensors for a set of (ego_prev, candidate) pairs.

    `neg` holds an additive 0 / -1e30 pad penalty so max-pooling never picks
    a padded segment row.
    """

    def __init__(self, ego_feats: list[np.ndarray], adv_feats: list[np.ndarray]):
        self.ego, self.ego_neg = _pad(ego_feats)
        self.adv, self.adv_neg = _pad(adv_feats)

    def take(self, idx: np.ndarray) -> "Batch":
        b = object.__new__(Batch)
        b.ego, b.ego_neg = self.ego[idx], self.ego_neg[idx]
        b.adv, b.adv_neg = self.adv[idx], self.adv_neg[idx]
        return b

    def __len__(self) -> int:
        return len(self.ego)


def _pad(feats: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    n = len(feats)
    smax = max(len(f) for f in feats)
    out = np.zeros((n, smax, FEAT_DIM))
    neg = np.full((n, smax, 1), -1e30)
    for i, f in enumerate(feats):
        out[i, : len(f)] = f
        neg[i, : len(f)] = 0.0
    return out, neg


# ---------------------------------------------------------------------------
# forward / backward


class Workspace:
    """Reusable large buffers; avoids per-batch mmap/page-fault churn."""

    def __init__(self):
        self._bufs: dict = {}

    def buf(self, key: str, shape: tuple, dtype=float) -> np.ndarray:
        b = self._bufs.get(key)
        if b is None or b.shape != shape or b.dtype != dtype:
            b = np.empty(shape, dtype)
            self._bufs[key] = b
        return b


def _encode(params, x, neg, work: Workspace | None = None, tag: str = ""):
    n, s, _ = x.shape
    enc = params["W_enc"].shape[1]
    if work is None:
        pre = x @ params["W_enc"]
        act = np.empty_like(pre)
        act_t = np.empty((n, enc, s))
    else:
        pre = np.matmul(x, params["W_enc"], out=work.buf(tag + "pre", (n, s, enc)))
        act = work.buf(tag + "act", (n, s, enc))
        act_t = work.buf(tag + "act_t", (n, enc, s))
    pre += params["b_enc"]
    np.maximum(pre, 0.0, out=act)
    act += neg
    np.copyto(act_t, act.transpose(0, 2, 1))
    arg = act_t.argmax(axis=2)
    pooled = np.take_along_axis(act, arg[:, None, :], axis=1)[:, 0, :]
    return pre, arg, pooled


def forward(params: dict, batch: Batch, work: Workspace | None = None):
    pre_e, arg_e, pool_e = _encode(params, batch.ego, batch.ego_neg, work, "e_")
    pre_a, arg_a, pool_a = _encode(params, batch.adv, batch.adv_neg, work, "a_")
    h = np.concatenate([pool_e, pool_a], axis=1)
    z1 = h @ params["W1"] + params["b1"]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ params["W2"] + params["b2"]
    p = 1.0 / (1.0 + np.exp(-z2))
    cache = (pre_e, arg_e, pre_a, arg_a, h, z1, a1, p)
    return p, cache


def loss_and_grads(params: dict, batch: Batch, y_coll: np.ndarray, y_diff: np.ndarray,
                   per_head: bool = False, work: Workspace | None = None):
    """MSE loss (on the head sum by default) and gradients for every parameter."""
    p, (pre_e, arg_e, pre_a, arg_a, h, z1, a1, _) = forward(params, batch, work)
    n = len(batch)
    if per_head:
        resid = p - np.column_stack([y_coll, y_diff])
        loss = float((resid ** 2).mean())
        g_p = 2.0 * resid / resid.size
    else:
        s = p.sum(axis=1)
        resid = s - (y_coll + y_diff)
        loss = float((resid ** 2).mean())
        g_p = (2.0 * resid / n)[:, None] * np.ones((1, 2))
    g_z2 = g_p * p * (1.0 - p)
    grads = {
        "W2": a1.T @ g_z2,
        "b2": g_z2.sum(axis=0),
    }
    g_a1 = g_z2 @ params["W2"].T
    g_z1 = g_a1 * (z1 > 0.0)
    grads["W1"] = h.T @ g_z1
    grads["b1"] = g_z1.sum(axis=0)
    g_h = g_z1 @ params["W1"].T
    gW, gb = _encode_backward(params, batch.ego, pre_e, arg_e, g_h[:, :ENC_DIM])
    gW2_, gb2_ = _encode_backward(params, batch.adv, pre_a, arg_a, g_h[:, ENC_DIM:])
    grads["W_enc"] = gW + gW2_
    grads["b_enc"] = gb + gb2_
    return loss, grads


def _encode_backward(params, x, pre, arg, g_pool):
    # max-pool routes each unit's gradient to one segment row; gather those
    # rows instead of scattering into a (B, S, ENC) zero tensor
    g_rows = g_pool * (np.take_along_axis(pre, arg[:, None, :], axis=1)[:, 0, :] > 0.0)
    x_sel = np.take_along_axis(x, arg[:, :, None], axis=1)      # (B, ENC, FEAT)
    gW = np.einsum("bkf,bk->fk", x_sel, g_rows)
    return gW, g_rows.sum(axis=0)


def init_params(seed: int) -> dict[str, np.ndarray]:
    rng = rng_from("scorer-init", seed)
    return {
        "W_enc": rng.normal(0.0, math.sqrt(2.0 / FEAT_DIM), PARAM_SHAPES["W_enc"]),
        "b_enc": np.zeros(ENC_DIM),
        "W1": rng.normal(0.0, math.sqrt(2.0 / (2 * ENC_DIM)), PARAM_SHAPES["W1"]),
        "b1": np.zeros(HID_DIM),
        "W2": rng.normal(0.0, math.sqrt(2.0 / HID_DIM), PARAM_SHAPES["W2"]),
        "b2": np.zeros(2),
    }


class Adam:
    def __init__(self, params: dict, lr: float = 2e-3, b1: float = 0.9,
                 b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


# ---------------------------------------------------------------------------
# training


def split_corpus(corpus: list[CorpusTriple], val_fraction: float = 0.2,
                 ) -> tuple[list[int], list[int]]:
    """Deterministic train/val index split, by scenario when enough exist."""
    ids = sorted({t.scenario_id for t in corpus})
    stride = max(int(round(1.0 / max(val_fraction, 1e-9))), 2)
    if len(ids) >= stride:
        val_ids = set(ids[stride - 1::stride])
        val = [i for i, t in enumerate(corpus) if t.scenario_id in val_ids]
        train = [i for i, t in enumerate(corpus) if t.scenario_id not in val_ids]
    else:
        val = list(range(stride - 1, len(corpus), stride))
        train = [i for i in range(len(corpus)) if (i + 1) % stride != 0]
    return train, val


def train_scorer(corpus: list[CorpusTriple], seed: int, *, epochs: int = 300,
                 batch_size: int = 256, lr: float = 2e-3, min_corpus: int = 500,
                 per_head_loss: bool = False) -> ScorerModel:
    """Mini-batch gradient descent on the head-sum MSE; deterministic per seed."""
    if len(corpus) < min_corpus:
        raise ValueError(f"corpus too small: {len(corpus)} < {min_corpus}")
    feats = [pair_features(t.ego_prev, t.candidate) for t in corpus]
    batch_all = Batch([f[0] for f in feats], [f[1] for f in feats])
    y_coll = np.asarray([t.f_coll for t in corpus])
    y_diff = np.asarray([t.f_diff for t in corpus])

    train_idx, val_idx = split_corpus(corpus)
    tr = np.asarray(train_idx, dtype=int)
    va = np.asarray(val_idx, dtype=int) if val_idx else tr

    params = init_params(seed)
    opt = Adam(params, lr=lr)
    rng = rng_from("scorer-train", seed)
    work = Workspace()
    for _ in range(epochs):
        order = rng.permutation(len(tr))
        for k in range(0, len(tr), batch_size):
            idx = tr[order[k: k + batch_size]]
            _, grads = loss_and_grads(params, batch_all.take(idx), y_coll[idx],
                                      y_diff[idx], per_head_loss, work)
            opt.step(params, grads)

    def sum_mse(idx: np.ndarray) -> float:
        tot, cnt = 0.0, 0
        for k in range(0, len(idx), 1024):
            sub = idx[k: k + 1024]
            p, _ = forward(params, batch_all.take(sub))
            tot += float(((p.sum(axis=1) - (y_coll[sub] + y_diff[sub])) ** 2).sum())
            cnt += len(sub)
        return tot / max(cnt, 1)

    return ScorerModel(params=params, seed=seed, train_loss=sum_mse(tr), val_loss=sum_mse(va))


def predict_batch(model: ScorerModel, pairs: list[tuple[Trajectory, Trajectory]]) -> np.ndarray:
    """(n, 2) predicted (f_coll, f_diff), each in [0, 1]."""
    out = np.empty((len(pairs), 2))
    for k in range(0, len(pairs), 512):
        chunk = pairs[k: k + 512]
        feats = [pair_features(e, c) for e, c in chunk]
        batch = Batch([f[0] for f in feats], [f[1] for f in feats])
        p, _ = forward(model.params, batch)
        out[k: k + len(chunk)] = p
    return out


def encode_pooled(params: dict, feats: list[np.ndarray]) -> np.ndarray:
    """Encoder + max-pool only; one pooled vector per polyline."""
    x, neg = _pad(feats)
    _, _, pooled = _encode(params, x, neg)
    return pooled


def decode_pairs(params: dict, pool_ego: np.ndarray, pool_adv: np.ndarray) -> np.ndarray:
    """Decoder over already-pooled polyline encodings (row-aligned pairs)."""
    h = np.concatenate([pool_ego, pool_adv], axis=1)
    a1 = np.maximum(h @ params["W1"] + params["b1"], 0.0)
    return 1.0 / (1.0 + np.exp(-(a1 @ params["W2"] + params["b2"])))


def score_candidates(model: ScorerModel, entries: list[Trajectory],
                     candidates: list[Trajectory]) -> np.ndarray:
    """(n_candidates, n_entries, 2) predictions, sharing encoder work.

    Ego features depend only on the reference frame, which is identical for
    candidates that start with the same pose, so pooled ego encodings are
    cached per frame.
    """
    frames = [candidate_frame(c) for c in candidates]
    pool_adv = encode_pooled(model.params,
                             [segment_features(c, 1.0, f) for c, f in zip(candidates, frames)])
    ego_cache: dict[tuple, np.ndarray] = {}
    for f in frames:
        if f not in ego_cache:
            pooled = encode_pooled(model.params,
                                   [segment_features(e, 0.0, f) for e in entries])
            ego_cache[f] = pooled
    out = np.empty((len(candidates), len(entries), 2))
    for i, f in enumerate(frames):
        pe = ego_cache[f]
        pa = np.repeat(pool_adv[i: i + 1], len(entries), axis=0)
        out[i] = decode_pairs(model.params, pe, pa)
    return out


def predict_score(model: ScorerModel, ego_prev: Trajectory, candidate: Trajectory):
    from .criticality import CritScore

    p = predict_batch(model, [(ego_prev, candidate)])[0]
    return CritScore(float(p[0]), float(p[1]))


# ---------------------------------------------------------------------------
# persistence


def save_model(model: ScorerModel, path: str | Path) -> None:
    doc = {
        "version": MODEL_VERSION,
        "arch_hash": model.arch_hash,
        "arch_spec": ARCH_SPEC,
        "seed": model.seed,
        "train_loss": model.train_loss,
        "val_loss": model.val_loss,
        "params": {k: v.tolist() for k, v in sorted(model.params.items())},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_model(path: str | Path) -> ScorerModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')}")
    if doc.get("arch_hash") != ARCH_HASH:
        raise ValueError("model architecture hash mismatch")
    params = {k: np.asarray(v, dtype=float) for k, v in doc["params"].items()}
    for k, shape in PARAM_SHAPES.items():
        if params.get(k) is None or params[k].shape != shape:
            raise ValueError(f"bad parameter {k}")
    return ScorerModel(params=params, seed=int(doc["seed"]),
                       train_loss=float(doc["train_loss"]), val_loss=float(doc["val_loss"]))


def write_corpus(corpus: list[CorpusTriple], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in corpus:
            fh.write(json.dumps({
                "scenario_id": t.scenario_id,
                "candidate_index": t.candidate_index,
                "ego_prev": [[float(x), float(y)] for x, y in t.ego_prev.points],
                "candidate": [[float(x), float(y)] for x, y in t.candidate.points],
                "f_coll": t.f_coll,
                "f_diff": t.f_diff,
            }, sort_keys=True, separators=(",", ":")) + "\n")


def read_corpus(path: str | Path) -> list[CorpusTriple]:
    from .scenario import HISTORY_END

    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        out.append(CorpusTriple(
            scenario_id=d["scenario_id"],
            candidate_index=int(d["candidate_index"]),
            ego_prev=Trajectory(np.asarray(d["ego_prev"], dtype=float)),
            candidate=Trajectory(np.asarray(d["candidate"], dtype=float),
                                 start_time_index=HISTORY_END),
            f_coll=float(d["f_coll"]),
            f_diff=float(d["f_diff"]),
        ))
    return out
