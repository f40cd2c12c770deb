"""HFD-TM forward pass and the flat recurrent baselines.

Parameters are plain ``dict[str, Tensor]``; weight matrices are stored
input-major so that a batch of row vectors is transformed by ``x @ W``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autograd import ShapeError, Tape, Tensor
from .dataio import CorridorTopology

RESIDUAL_WEIGHT = 0.3
N_HOURS = 24
MODEL_KINDS = ("hfdtm", "flat_hfdtm", "gru", "lstm")


@dataclass(frozen=True)
class ModelDims:
    n_movements: int
    n_corridor: int
    hidden: int = 64
    embed: int = 64
    mlp_hidden: int = 64

    @classmethod
    def for_topology(cls, topology: CorridorTopology, **kw) -> "ModelDims":
        return cls(topology.n_movements, topology.n_corridor, **kw)


@dataclass
class ForwardOutputs:
    y_hat: Tensor  # (B, N), masked
    y_c: Tensor | None = None  # (B, N_c), corridor encoder output


# -- recurrent cells ----------------------------------------------------


def gru_encode(tape: Tape, X: np.ndarray, p: dict[str, Tensor], prefix: str) -> Tensor:
    """Run a single-layer GRU over ``X`` (B, T, D); return the last hidden state.

    Gate columns are ordered reset, update, candidate::

        r = sigmoid(x Wx_r + bx_r + h Wh_r + bh_r)
        z = sigmoid(x Wx_z + bx_z + h Wh_z + bh_z)
        n = tanh(x Wx_n + bx_n + r * (h Wh_n + bh_n))
        h' = (1 - z) * n + z * h
    """
    wx, wh, bx, bh = (p[f"{prefix}.{k}"] for k in ("wx", "wh", "bx", "bh"))
    if X.ndim != 3 or X.shape[2] != wx.shape[0]:
        raise ShapeError(f"GRU expects (B, T, {wx.shape[0]}), got {X.shape}")
    H = wh.shape[0]
    rz, cand = slice(0, 2 * H), slice(2 * H, 3 * H)
    h = None
    for t in range(X.shape[1]):
        gx = tape.linear(X[:, t, :], wx, bx)
        if h is None:
            gh = tape.add(np.zeros((X.shape[0], 3 * H)), bh)
        else:
            gh = tape.linear(h, wh, bh)
        gates = tape.sigmoid(tape.add(tape.take(gx, rz), tape.take(gh, rz)))
        r, z = tape.take(gates, slice(0, H)), tape.take(gates, slice(H, 2 * H))
        n = tape.tanh(tape.add(tape.take(gx, cand), tape.mul(r, tape.take(gh, cand))))
        if h is None:
            h = tape.sub(n, tape.mul(z, n))
        else:
            h = tape.add(n, tape.mul(z, tape.sub(h, n)))
    return h


def lstm_encode(tape: Tape, X: np.ndarray, p: dict[str, Tensor], prefix: str) -> Tensor:
    """Single-layer LSTM; gate columns ordered input, forget, output, cell."""
    wx, wh, b = (p[f"{prefix}.{k}"] for k in ("wx", "wh", "b"))
    if X.ndim != 3 or X.shape[2] != wx.shape[0]:
        raise ShapeError(f"LSTM expects (B, T, {wx.shape[0]}), got {X.shape}")
    H = wh.shape[0]
    h = c = None
    for t in range(X.shape[1]):
        g = tape.linear(X[:, t, :], wx, b)
        if h is not None:
            g = tape.add(g, tape.matmul(h, wh))
        ifo = tape.sigmoid(tape.take(g, slice(0, 3 * H)))
        i, f, o = (tape.take(ifo, slice(k * H, (k + 1) * H)) for k in range(3))
        cand = tape.tanh(tape.take(g, slice(3 * H, 4 * H)))
        c = tape.mul(i, cand) if c is None else tape.add(tape.mul(f, c), tape.mul(i, cand))
        h = tape.mul(o, tape.tanh(c))
    return h


# -- HFD-TM stages ------------------------------------------------------


def corridor_encode(tape: Tape, X_c: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    """Corridor GRU over ``X_c`` (B, T, N_c) and linear head -> (B, N_c)."""
    h = gru_encode(tape, X_c, params, "enc")
    return tape.linear(h, params["head.w"], params["head.b"])


def turn_ratio_expand(tape: Tape, y_c: Tensor, hours, params: dict[str, Tensor]) -> Tensor:
    """Linear expansion of the corridor forecast plus an hour-conditioned MLP correction."""
    hours = np.asarray(hours)
    if hours.size and (hours.min() < 0 or hours.max() >= N_HOURS):
        raise ValueError(f"hour index out of range [0, {N_HOURS})")
    base = tape.linear(y_c, params["expand.w"], params["expand.b"])
    e_h = tape.embedding(params["hour_embed"], hours)
    z = tape.concat([y_c, e_h])
    hidden = tape.relu(tape.linear(z, params["mlp.w1"], params["mlp.b1"]))
    delta = tape.linear(hidden, params["mlp.w2"], params["mlp.b2"])
    return tape.add(base, delta)


def refine_and_mask(tape: Tape, y_all: Tensor, x_last: np.ndarray, params: dict[str, Tensor],
                    mask: np.ndarray) -> Tensor:
    x_last = np.asarray(x_last)
    if x_last.shape != y_all.shape:
        raise ShapeError(f"last observation {x_last.shape} does not match prediction {y_all.shape}")
    y_res = tape.add(y_all, RESIDUAL_WEIGHT * x_last)
    hidden = tape.relu(tape.linear(y_res, params["refine.w1"], params["refine.b1"]))
    y_ref = tape.add(tape.linear(hidden, params["refine.w2"], params["refine.b2"]), y_res)
    return tape.mul(y_ref, mask)


def hfd_tm_forward(tape: Tape, X: np.ndarray, hours, topology: CorridorTopology,
                   params: dict[str, Tensor]) -> ForwardOutputs:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != topology.n_movements:
        raise ShapeError(f"expected input (B, T, {topology.n_movements}), got {X.shape}")
    y_c = corridor_encode(tape, X[:, :, topology.corridor_idx], params)
    y_all = turn_ratio_expand(tape, y_c, hours, params)
    y_hat = refine_and_mask(tape, y_all, X[:, -1, :], params, topology.zero_mask)
    return ForwardOutputs(y_hat, y_c)


def flat_hfd_tm_forward(tape: Tape, X: np.ndarray, hours, topology: CorridorTopology,
                        params: dict[str, Tensor]) -> ForwardOutputs:
    """HFD-TM without the corridor decomposition.

    A GRU reads all N streams and its head predicts all N directly; the
    hour-conditioned MLP correction, refinement and mask are unchanged.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != topology.n_movements:
        raise ShapeError(f"expected input (B, T, {topology.n_movements}), got {X.shape}")
    h = gru_encode(tape, X, params, "enc")
    base = tape.linear(h, params["head.w"], params["head.b"])
    hours = np.asarray(hours)
    if hours.size and (hours.min() < 0 or hours.max() >= N_HOURS):
        raise ValueError(f"hour index out of range [0, {N_HOURS})")
    z = tape.concat([base, tape.embedding(params["hour_embed"], hours)])
    hidden = tape.relu(tape.linear(z, params["mlp.w1"], params["mlp.b1"]))
    y_all = tape.add(base, tape.linear(hidden, params["mlp.w2"], params["mlp.b2"]))
    y_hat = refine_and_mask(tape, y_all, X[:, -1, :], params, topology.zero_mask)
    return ForwardOutputs(y_hat, None)


def baseline_forward(tape: Tape, X: np.ndarray, params: dict[str, Tensor], kind: str) -> Tensor:
    """Flat GRU/LSTM over all N streams; last hidden state -> linear head."""
    X = np.asarray(X, dtype=np.float64)
    if kind == "gru":
        h = gru_encode(tape, X, params, "enc")
    elif kind == "lstm":
        h = lstm_encode(tape, X, params, "enc")
    else:
        raise ValueError(f"unknown baseline kind {kind!r}")
    return tape.linear(h, params["head.w"], params["head.b"])


# -- parameters ---------------------------------------------------------


def param_shapes(kind: str, dims: ModelDims) -> dict[str, tuple[int, ...]]:
    N, Nc, H, E, M = dims.n_movements, dims.n_corridor, dims.hidden, dims.embed, dims.mlp_hidden
    if kind == "hfdtm":
        return {
            "enc.wx": (Nc, 3 * H), "enc.wh": (H, 3 * H), "enc.bx": (3 * H,), "enc.bh": (3 * H,),
            "head.w": (H, Nc), "head.b": (Nc,),
            "expand.w": (Nc, N), "expand.b": (N,),
            "hour_embed": (N_HOURS, E),
            "mlp.w1": (Nc + E, M), "mlp.b1": (M,), "mlp.w2": (M, N), "mlp.b2": (N,),
            "refine.w1": (N, N), "refine.b1": (N,), "refine.w2": (N, N), "refine.b2": (N,),
        }
    if kind == "flat_hfdtm":
        return {
            "enc.wx": (N, 3 * H), "enc.wh": (H, 3 * H), "enc.bx": (3 * H,), "enc.bh": (3 * H,),
            "head.w": (H, N), "head.b": (N,),
            "hour_embed": (N_HOURS, E),
            "mlp.w1": (N + E, M), "mlp.b1": (M,), "mlp.w2": (M, N), "mlp.b2": (N,),
            "refine.w1": (N, N), "refine.b1": (N,), "refine.w2": (N, N), "refine.b2": (N,),
        }
    if kind == "gru":
        return {
            "enc.wx": (N, 3 * H), "enc.wh": (H, 3 * H), "enc.bx": (3 * H,), "enc.bh": (3 * H,),
            "head.w": (H, N), "head.b": (N,),
        }
    if kind == "lstm":
        return {
            "enc.wx": (N, 4 * H), "enc.wh": (H, 4 * H), "enc.b": (4 * H,),
            "head.w": (H, N), "head.b": (N,),
        }
    raise ValueError(f"unknown model kind {kind!r}")


def init_params(seed: int, dims: ModelDims, kind: str = "hfdtm") -> dict[str, Tensor]:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, small embedding rows."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(kind, dims).items():
        if len(shape) == 1:
            data = np.zeros(shape)
        elif name == "hour_embed":
            data = rng.uniform(-0.1, 0.1, shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


class Model:
    """A model kind bound to its parameters and corridor topology."""

    def __init__(self, kind: str, dims: ModelDims, topology: CorridorTopology,
                 params: dict[str, Tensor] | None = None, seed: int = 0):
        if kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
        if dims.n_movements != topology.n_movements or dims.n_corridor != topology.n_corridor:
            raise ShapeError("model dims do not match topology")
        self.kind = kind
        self.dims = dims
        self.topology = topology
        self.seed = seed
        self.params = params if params is not None else init_params(seed, dims, kind)
        # fixed buffer: never a parameter, never updated
        self.mask = topology.zero_mask.copy()
        self.mask.flags.writeable = False

    @property
    def hierarchical(self) -> bool:
        return self.kind == "hfdtm"

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, tape: Tape, X: np.ndarray, hours) -> ForwardOutputs:
        if self.kind == "hfdtm":
            return hfd_tm_forward(tape, X, hours, self.topology, self.params)
        if self.kind == "flat_hfdtm":
            return flat_hfd_tm_forward(tape, X, hours, self.topology, self.params)
        return ForwardOutputs(baseline_forward(tape, X, self.params, self.kind))

    def predict(self, X: np.ndarray, hours, batch_size: int = 4096) -> np.ndarray:
        """Normalized predictions without recording a tape."""
        out = []
        for s in range(0, X.shape[0], batch_size):
            out.append(self.forward(Tape(record=False), X[s : s + batch_size], hours[s : s + batch_size]).y_hat.data)
        return np.concatenate(out) if out else np.zeros((0, self.dims.n_movements))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k].data = v.copy()

    def digest(self) -> str:
        h = hashlib.sha256(self.kind.encode())
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        return h.hexdigest()


# -- checkpoints --------------------------------------------------------

CHECKPOINT_FORMAT = "hfdtm-checkpoint/1"


def save_checkpoint(model: Model, path: str | Path, extra: dict | None = None) -> None:
    """JSON checkpoint; floats are written with ``repr`` so they round-trip exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "kind": model.kind,
        "dims": asdict(model.dims),
        "seed": model.seed,
        "topology_digest": model.topology.digest(),
        "extra": extra or {},
        "params": {
            k: {"shape": list(v.shape), "values": v.data.ravel().tolist()}
            for k, v in sorted(model.params.items())
        },
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")))


def load_checkpoint(path: str | Path, topology: CorridorTopology) -> tuple[Model, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc["topology_digest"] != topology.digest():
        raise ValueError(f"{path}: checkpoint was trained on a different topology")
    dims = ModelDims(**doc["dims"])
    if dims.n_movements != topology.n_movements or dims.n_corridor != topology.n_corridor:
        raise ValueError(f"{path}: dimension mismatch with topology")
    expected = param_shapes(doc["kind"], dims)
    params = {}
    for name, shape in expected.items():
        entry = doc["params"].get(name)
        if entry is None or tuple(entry["shape"]) != shape:
            raise ValueError(f"{path}: parameter {name} missing or misshapen")
        params[name] = Tensor(np.array(entry["values"]).reshape(shape), requires_grad=True, name=name)
    return Model(doc["kind"], dims, topology, params, seed=doc["seed"]), doc.get("extra", {})
