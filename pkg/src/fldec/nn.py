"""Small numpy MLP and LSTM classifiers with federated-friendly weight snapshots.

Weights are held as float64 arrays whose values are always representable in
binary32, because the wire format carries float32. Training runs in float64
and rounds the result back to float32 precision, so a model that went over
the wire and came back compares bitwise equal.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .checksum import fnv1a64
from .data import LabeledDataset

WEIGHT_FORMAT_VERSION = 1


class Arch(enum.IntEnum):
    MLP = 1
    LSTM = 2


class ShapeError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class WeightDecodeError(ValueError):
    pass


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


def layer_shapes(arch: Arch, hyper: tuple[int, ...]) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list implied by an architecture descriptor.

    MLP descriptor: layer widths ``(in, h1, ..., out)``.
    LSTM descriptor: ``(n_features, hidden, seq_len, n_classes)``.
    """
    if not hyper or any(int(d) <= 0 for d in hyper):
        raise ValueError(f"descriptor dimensions must be positive, got {hyper}")
    if arch == Arch.MLP:
        if len(hyper) < 2:
            raise ValueError("MLP descriptor needs at least input and output widths")
        out = []
        for i, (a, b) in enumerate(zip(hyper[:-1], hyper[1:])):
            out += [(f"dense{i}.w", (a, b)), (f"dense{i}.b", (b,))]
        return out
    if arch == Arch.LSTM:
        if len(hyper) != 4:
            raise ValueError("LSTM descriptor is (n_features, hidden, seq_len, n_classes)")
        f, h, _, c = hyper
        return [
            ("lstm.wx", (f, 4 * h)),
            ("lstm.wh", (h, 4 * h)),
            ("lstm.b", (4 * h,)),
            ("head.w", (h, c)),
            ("head.b", (c,)),
            ("norm.lo", (f,)),
            ("norm.span", (f,)),
        ]
    raise ValueError(f"unknown architecture {arch!r}")


# min-max input statistics ride along with LSTM weights but are never trained
FROZEN = ("norm.lo", "norm.span")


@dataclass(frozen=True, eq=False)
class ModelWeights:
    arch: Arch
    hyper: tuple[int, ...]
    layers: tuple[tuple[str, np.ndarray], ...]

    def __post_init__(self):
        arch = Arch(self.arch)
        hyper = tuple(int(d) for d in self.hyper)
        expected = layer_shapes(arch, hyper)
        layers = []
        if len(self.layers) != len(expected):
            raise ShapeError(f"expected {len(expected)} tensors, got {len(self.layers)}")
        for (name, arr), (ename, eshape) in zip(self.layers, expected):
            arr = np.array(arr, dtype=np.float64)
            if name != ename or arr.shape != eshape:
                raise ShapeError(f"tensor {name}{arr.shape} does not match expected {ename}{eshape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"tensor {name} has non-finite values")
            arr.setflags(write=False)
            layers.append((name, arr))
        object.__setattr__(self, "arch", arch)
        object.__setattr__(self, "hyper", hyper)
        object.__setattr__(self, "layers", tuple(layers))

    def __getitem__(self, name: str) -> np.ndarray:
        for n, a in self.layers:
            if n == name:
                return a
        raise KeyError(name)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {n: a.copy() for n, a in self.layers}

    def replace(self, params: dict[str, np.ndarray]) -> "ModelWeights":
        return ModelWeights(self.arch, self.hyper, tuple((n, params[n]) for n, _ in self.layers))

    @property
    def n_params(self) -> int:
        return sum(a.size for n, a in self.layers if n not in FROZEN)

    @property
    def n_classes(self) -> int:
        return self.hyper[-1] if self.arch == Arch.MLP else self.hyper[3]

    def same_layout(self, other: "ModelWeights") -> bool:
        return self.arch == other.arch and self.hyper == other.hyper

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelWeights) or not self.same_layout(other):
            return False
        return all(
            n1 == n2 and a1.tobytes() == a2.tobytes()
            for (n1, a1), (n2, a2) in zip(self.layers, other.layers)
        )

    __hash__ = None  # type: ignore[assignment]


def mlp(*widths: int) -> tuple[Arch, tuple[int, ...]]:
    return Arch.MLP, tuple(widths)


def lstm(n_features: int, hidden: int = 32, seq_len: int = 10, n_classes: int = 2):
    return Arch.LSTM, (n_features, hidden, seq_len, n_classes)


def init_model(arch: Arch, hyper, seed: int) -> ModelWeights:
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    layers = []
    for name, shape in layer_shapes(Arch(arch), tuple(hyper)):
        if len(shape) == 1:
            arr = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arr = _f32(rng.uniform(-limit, limit, size=shape))
        layers.append((name, arr))
    return ModelWeights(arch, tuple(hyper), tuple(layers))


# ---------------------------------------------------------------- forward / loss


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _check_input(w: ModelWeights, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if w.arch == Arch.MLP:
        want = (w.hyper[0],)
    else:
        want = (w.hyper[2], w.hyper[0])
    single = x.shape == want
    if single:
        x = x[None]
    if x.shape[1:] != want:
        raise ShapeError(f"expected input of shape {want} (or batched (N, *{want})), got {x.shape}")
    return x, single


def _normalize(p, x):
    span = p["norm.span"]
    return (x - p["norm.lo"]) / np.where(span > 0, span, 1.0)


def _logits(arch: Arch, hyper, p: dict, x: np.ndarray, keep: bool = False):
    if arch == Arch.MLP:
        acts = [x]
        n_layers = len(hyper) - 1
        for i in range(n_layers):
            z = acts[-1] @ p[f"dense{i}.w"] + p[f"dense{i}.b"]
            acts.append(z if i == n_layers - 1 else np.maximum(z, 0.0))
        return acts[-1], acts if keep else None

    xn = _normalize(p, x)
    n, steps, _ = xn.shape
    hid = hyper[1]
    wx, wh, b = p["lstm.wx"], p["lstm.wh"], p["lstm.b"]
    h = np.zeros((n, hid))
    c = np.zeros((n, hid))
    cache = []
    for t in range(steps):
        z = xn[:, t] @ wx + h @ wh + b
        i = _sigmoid(z[:, :hid])
        f = _sigmoid(z[:, hid:2 * hid])
        g = np.tanh(z[:, 2 * hid:3 * hid])
        o = _sigmoid(z[:, 3 * hid:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        if keep:
            cache.append((h_prev, c_prev, i, f, g, o, tc))
    logits = h @ p["head.w"] + p["head.b"]
    return logits, (xn, cache, h) if keep else None


def forward(weights: ModelWeights, x) -> np.ndarray:
    """Class probabilities for one sample (vector out) or a batch (matrix out)."""
    x, single = _check_input(weights, x)
    logits, _ = _logits(weights.arch, weights.hyper, dict(weights.layers), x)
    probs = _softmax(logits)
    return probs[0] if single else probs


def _xent(logits: np.ndarray, y: np.ndarray):
    """Per-sample cross-entropy and dL/dlogits, accurate for saturated logits."""
    n = len(y)
    rows = np.arange(n)
    d = logits - logits[rows, y][:, None]
    dmax = d.max(axis=1)
    other = np.exp(np.minimum(d, 30.0))
    other[rows, y] = 0.0
    s_other = other.sum(axis=1)
    big = dmax > 30.0
    shifted = np.exp(d - dmax[:, None])
    loss = np.where(big, dmax + np.log(shifted.sum(axis=1)), np.log1p(s_other))
    probs = _softmax(logits)
    grad = probs.copy()
    p_other = probs.copy()
    p_other[rows, y] = 0.0
    grad[rows, y] = -p_other.sum(axis=1)
    return loss, grad


def loss_and_grads(arch: Arch, hyper, p: dict, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch and its gradient for every trainable tensor."""
    logits, cache = _logits(arch, hyper, p, x, keep=True)
    losses, dlogits = _xent(logits, y)
    n = len(y)
    dlogits = dlogits / n
    grads = {}
    if arch == Arch.MLP:
        acts = cache
        n_layers = len(hyper) - 1
        delta = dlogits
        for i in reversed(range(n_layers)):
            grads[f"dense{i}.w"] = acts[i].T @ delta
            grads[f"dense{i}.b"] = delta.sum(axis=0)
            if i:
                delta = (delta @ p[f"dense{i}.w"].T) * (acts[i] > 0)
        return float(losses.mean()), grads

    xn, steps, h_last = cache
    hid = hyper[1]
    wh = p["lstm.wh"]
    grads["head.w"] = h_last.T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    dwx = np.zeros_like(p["lstm.wx"])
    dwh = np.zeros_like(wh)
    db = np.zeros_like(p["lstm.b"])
    dh = dlogits @ p["head.w"].T
    dc = np.zeros_like(dh)
    for t in reversed(range(len(steps))):
        h_prev, c_prev, i, f, g, o, tc = steps[t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.empty((n, 4 * hid))
        dz[:, :hid] = dc * g * i * (1.0 - i)
        dz[:, hid:2 * hid] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * hid:3 * hid] = dc * i * (1.0 - g * g)
        dz[:, 3 * hid:] = do * o * (1.0 - o)
        dwx += xn[:, t].T @ dz
        dwh += h_prev.T @ dz
        db += dz.sum(axis=0)
        dh = dz @ wh.T
        dc = dc * f
    grads["lstm.wx"], grads["lstm.wh"], grads["lstm.b"] = dwx, dwh, db
    return float(losses.mean()), grads


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 200
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")


# MLP solver runs 100 iterations (read as epochs); LSTM uses 10 epochs at batch 200.
MLP_TRAIN = TrainConfig(epochs=100, batch_size=200, learning_rate=1e-3)
LSTM_TRAIN = TrainConfig(epochs=10, batch_size=200, learning_rate=1e-3)


@dataclass(frozen=True, eq=False)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    loss: float
    confusion: np.ndarray

    @classmethod
    def from_confusion(cls, confusion, loss: float = 0.0) -> "Metrics":
        cm = np.asarray(confusion, dtype=np.int64)
        total = cm.sum()
        if total == 0:
            raise ValueError("confusion matrix is empty")
        tp = np.diag(cm).astype(np.float64)
        pred = cm.sum(axis=0)
        actual = cm.sum(axis=1)
        prec = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
        rec = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
        denom = prec + rec
        f1 = np.divide(2 * prec * rec, denom, out=np.zeros_like(tp), where=denom > 0)
        return cls(
            accuracy=float(tp.sum() / total),
            precision=float(prec.mean()),
            recall=float(rec.mean()),
            f1=float(f1.mean()),
            loss=float(loss),
            confusion=cm,
        )

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "loss": self.loss,
            "confusion": self.confusion.tolist(),
        }


def fit_normalizer(weights: ModelWeights, x: np.ndarray) -> ModelWeights:
    """Install min-max statistics from ``x`` into an LSTM whose normalizer is unset."""
    p = weights.as_dict()
    flat = np.asarray(x, dtype=np.float64).reshape(-1, weights.hyper[0])
    lo = flat.min(axis=0)
    span = flat.max(axis=0) - lo
    p["norm.lo"] = _f32(lo)
    p["norm.span"] = _f32(np.where(span > 0, span, 1.0))
    return weights.replace(p)


def normalizer_unset(weights: ModelWeights) -> bool:
    return weights.arch == Arch.LSTM and not np.any(weights["norm.span"])


def train(weights: ModelWeights, ds: LabeledDataset, config: TrainConfig):
    """Minibatch cross-entropy training; returns (new weights, metrics on the train set)."""
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    _check_input(weights, ds.x[:1])
    if ds.y.max() >= weights.n_classes:
        raise ValueError(f"labels exceed model class count {weights.n_classes}")
    if normalizer_unset(weights):
        weights = fit_normalizer(weights, ds.x)

    rng = np.random.default_rng(config.seed)
    p = weights.as_dict()
    trainable = [n for n, _ in weights.layers if n not in FROZEN]
    m = {n: np.zeros_like(p[n]) for n in trainable}
    v = {n: np.zeros_like(p[n]) for n in trainable}
    lr = config.learning_rate
    step = 0
    n = len(ds)
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            rows = perm[start:start + config.batch_size]
            loss, grads = loss_and_grads(weights.arch, weights.hyper, p, ds.x[rows], ds.y[rows])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at step {step}")
            step += 1
            if config.optimizer == "sgd":
                for k in trainable:
                    p[k] = p[k] - lr * grads[k]
                continue
            b1, b2 = config.beta1, config.beta2
            for k in trainable:
                g = grads[k]
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mhat = m[k] / (1 - b1 ** step)
                vhat = v[k] / (1 - b2 ** step)
                p[k] = p[k] - lr * mhat / (np.sqrt(vhat) + config.eps)
    for k in trainable:
        if not np.all(np.isfinite(p[k])):
            raise TrainingDiverged(f"tensor {k} became non-finite")
        p[k] = _f32(p[k])
    trained = weights.replace(p)
    return trained, evaluate(trained, ds)


def predict(weights: ModelWeights, x) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(forward(weights, np.asarray(x)), axis=-1)


def evaluate(weights: ModelWeights, ds: LabeledDataset, batch: int = 4096) -> Metrics:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    c = weights.n_classes
    cm = np.zeros((c, c), dtype=np.int64)
    p = dict(weights.layers)
    total_loss = 0.0
    for start in range(0, len(ds), batch):
        xb, _ = _check_input(weights, ds.x[start:start + batch])
        yb = ds.y[start:start + batch]
        logits, _ = _logits(weights.arch, weights.hyper, p, xb)
        losses, _ = _xent(logits, yb)
        total_loss += losses.sum()
        np.add.at(cm, (yb, np.argmax(logits, axis=1)), 1)
    return Metrics.from_confusion(cm, total_loss / len(ds))


def gradient_check(weights: ModelWeights, x, y, step: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    p = weights.as_dict()
    _, grads = loss_and_grads(weights.arch, weights.hyper, p, x, y)
    # the difference quotient runs in extended precision: in float64 its
    # cancellation noise (~1e-11) swamps gradients near 1e-8
    p = {k: v.astype(np.longdouble) for k, v in p.items()}
    x = x.astype(np.longdouble)
    step = np.longdouble(step)
    worst = 0.0
    for name in grads:
        arr = p[name]
        flat = arr.reshape(-1)
        ga = grads[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            lp, _ = _logits(weights.arch, weights.hyper, p, x)
            flat[j] = orig - step
            lm, _ = _logits(weights.arch, weights.hyper, p, x)
            flat[j] = orig
            gn = (_xent(lp, y)[0].mean() - _xent(lm, y)[0].mean()) / (2 * step)
            err = abs(ga[j] - gn) / max(1e-8, abs(ga[j]) + abs(gn))
            worst = max(worst, err)
    return float(worst)


# ---------------------------------------------------------------- serialization


def serialize_weights(w: ModelWeights) -> bytes:
    """Binary weight payload with a trailing FNV-1a-64 checksum.

    Layout: u16 version, u8 arch, u16 descriptor count + u16 dims, u32 tensor
    count, then per tensor: u8 name length, name, u8 rank, u32 dims, float32
    little-endian values. Integers are big-endian.
    """
    if not w.layers:
        raise ValueError("cannot serialize a model without tensors")
    out = bytearray(struct.pack(">HBH", WEIGHT_FORMAT_VERSION, int(w.arch), len(w.hyper)))
    out += struct.pack(f">{len(w.hyper)}H", *w.hyper)
    out += struct.pack(">I", len(w.layers))
    for name, arr in w.layers:
        raw = name.encode("utf-8")
        out += struct.pack(">B", len(raw)) + raw
        out += struct.pack(">B", arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
        out += arr.astype("<f4").tobytes()
    out += struct.pack(">Q", fnv1a64(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightDecodeError(f"truncated weight payload at byte {self.pos} (wanted {n} more)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize_weights(data: bytes) -> ModelWeights:
    if len(data) < 8 + 9:
        raise WeightDecodeError(f"weight payload too short ({len(data)} bytes)")
    body, tail = data[:-8], data[-8:]
    if struct.unpack(">Q", tail)[0] != fnv1a64(body):
        raise WeightDecodeError("weight payload checksum mismatch")
    r = _Reader(body)
    version, arch_id, ndesc = r.unpack(">HBH")
    if version != WEIGHT_FORMAT_VERSION:
        raise WeightDecodeError(f"unsupported weight format version {version}")
    try:
        arch = Arch(arch_id)
    except ValueError:
        raise WeightDecodeError(f"unknown architecture id {arch_id}") from None
    hyper = r.unpack(f">{ndesc}H")
    (count,) = r.unpack(">I")
    layers = []
    for _ in range(count):
        (nlen,) = r.unpack(">B")
        name = r.take(nlen).decode("utf-8", errors="replace")
        (rank,) = r.unpack(">B")
        dims = r.unpack(f">{rank}I")
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float64).reshape(dims)
        layers.append((name, arr))
    if r.pos != len(body):
        raise WeightDecodeError(f"{len(body) - r.pos} trailing bytes in weight payload")
    try:
        return ModelWeights(arch, hyper, tuple(layers))
    except ValueError as exc:
        raise WeightDecodeError(str(exc)) from exc
