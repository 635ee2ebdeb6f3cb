"""Dense NCHW tensor engine with tape-based reverse-mode differentiation.

Values live in numpy arrays; a Tape records primitive applications in
creation order (which is already topological) and replays them backwards
to produce gradients for every watched tensor, including input images.
Precision is a process-global switch: float32 for training runs, float64
for gradient verification.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ConfigError, DataError, NumericError, UsageError

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_state = threading.local()

_dtype = np.float32
_finite_checks = True


def set_precision(mode: str) -> None:
    """Select the global dtype for newly created tensors ("f32" or "f64")."""
    global _dtype
    if mode not in _PRECISIONS:
        raise ConfigError(f"unknown precision {mode!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[mode]


def precision() -> str:
    return "f32" if _dtype == np.float32 else "f64"


def default_dtype():
    return _dtype


def set_finite_checks(enabled: bool) -> None:
    global _finite_checks
    _finite_checks = bool(enabled)


def _check_finite(a: np.ndarray, where: str) -> None:
    # sum() is NaN/Inf-propagating, far cheaper than isfinite().all()
    if _finite_checks and not np.isfinite(a.sum()):
        raise NumericError(f"non-finite values produced by {where}")


class Tensor:
    """A dense array value, optionally tracked by the active tape."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_dtype)
        if arr.ndim > 4:
            raise ConfigError(f"tensor order {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, dtype={self.data.dtype})"


def as_tensor(x, name=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, name=name)


class GradientSet:
    """Gradients produced by one backward traversal, keyed by tensor identity."""

    def __init__(self):
        self._grads: dict[int, tuple[Tensor, np.ndarray]] = {}

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __len__(self):
        return len(self._grads)

    def of(self, t: Tensor) -> np.ndarray:
        try:
            _, g = self._grads[id(t)]
        except KeyError:
            raise UsageError("no gradient recorded for this tensor") from None
        if g.shape != t.data.shape:
            raise NumericError("gradient shape does not match value shape")
        return g

    def _put(self, t: Tensor, g: np.ndarray) -> None:
        self._grads[id(t)] = (t, g)


class Tape:
    """Records primitive applications; one reverse sweep yields all gradients.

    Use as a context manager::

        with Tape() as tape:
            x = tape.watch(Tensor(images))
            loss, _ = softmax_cross_entropy(model_logits, labels)
        grads = tape.backward(loss)
        gx = grads.of(x)
    """

    def __init__(self):
        self._records = []  # (out, parents, backward_fn) in creation order
        self._watched = []

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tapes.pop()
        return False

    def watch(self, t: Tensor) -> Tensor:
        t.requires_grad = True
        self._watched.append(t)
        return t

    def record(self, out: Tensor, parents, backward_fn) -> None:
        self._records.append((out, tuple(parents), backward_fn))

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor, seed: float = 1.0, retain_all: bool = False) -> GradientSet:
        """Reverse sweep from a scalar loss node.

        `seed` scales the upstream gradient (backward is linear in it).
        With `retain_all`, gradients of intermediate nodes are kept instead
        of being freed once consumed.
        """
        if loss.data.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        watched_ids = {id(t) for t in self._watched}
        pending: dict[int, np.ndarray] = {
            id(loss): np.full_like(loss.data, seed)
        }
        result = GradientSet()
        if id(loss) in watched_ids or retain_all:
            result._grads[id(loss)] = pending[id(loss)]
        for out, parents, backward_fn in reversed(self._records):
            g = pending.get(id(out))
            if g is None:
                continue
            _check_finite(g, "backward")
            for parent, contrib in backward_fn(g):
                if not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in pending:
                    pending[pid] = pending[pid] + contrib
                else:
                    pending[pid] = contrib
                if retain_all or pid in watched_ids:
                    result._grads[pid] = pending[pid]
            if not retain_all and id(out) not in watched_ids:
                del pending[id(out)]
        for t in self._watched:
            if id(t) in result._grads:
                g = result._grads[id(t)]
                if g.shape != t.data.shape:
                    raise NumericError("gradient shape does not match value shape")
        return result


def active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _emit(out_data: np.ndarray, parents, backward_fn, opname: str) -> Tensor:
    _check_finite(out_data, opname)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.name = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward_fn)
    return out


# ---------------------------------------------------------------------------
# convolution


def _pad_amounts(kh, kw, padding):
    if padding == "same":
        pt = (kh - 1) // 2
        pl = (kw - 1) // 2
        return pt, kh - 1 - pt, pl, kw - 1 - pl
    if padding == "valid":
        return 0, 0, 0, 0
    raise ConfigError(f"unknown padding mode {padding!r}")


def _im2col(xp: np.ndarray, kh: int, kw: int):
    """Patch matrix of a padded NCHW array: (N*Ho*Wo, C*kh*kw)."""
    n, c, hp, wp = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, c, ho, wo, kh, kw), (s0, s1, s2, s3, s2, s3), writeable=False
    )
    cols = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * ho * wo, c * kh * kw), ho, wo


def _corr2d(x: np.ndarray, w: np.ndarray, pads):
    """Raw cross-correlation used by both the forward pass and its adjoint."""
    pt, pb, pl, pr = pads
    if any(pads):
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    n = x.shape[0]
    cout, cin, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw)
    out = cols @ w.reshape(cout, cin * kh * kw).T
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    return out, cols


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: str = "same") -> Tensor:
    """Cross-correlation (no kernel flip) plus per-output-channel bias."""
    n, cin, h, ww = x.data.shape
    cout, cin_k, kh, kw = w.data.shape
    if cin_k != cin:
        raise ConfigError(f"conv2d channel mismatch: input has {cin}, kernel expects {cin_k}")
    if b.data.shape != (cout,):
        raise ConfigError(f"conv2d bias shape {b.data.shape} != ({cout},)")
    pads = _pad_amounts(kh, kw, padding)
    if kh > h + pads[0] + pads[1] or kw > ww + pads[2] + pads[3]:
        raise ConfigError(f"conv2d kernel {kh}x{kw} larger than padded input {h}x{ww}")
    out_data, cols = _corr2d(x.data, w.data, pads)
    out_data += b.data.reshape(1, cout, 1, 1)
    if not w.requires_grad:
        cols = None  # patches only needed for the weight gradient

    def backward(g):
        grads = []
        gmat = None
        if w.requires_grad or b.requires_grad:
            gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if x.requires_grad:
            wflip = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            pt, pb, pl, pr = pads
            gpads = (kh - 1 - pt, kh - 1 - pb, kw - 1 - pl, kw - 1 - pr)
            gx, _ = _corr2d(g, wflip, gpads)
            grads.append((x, gx))
        if w.requires_grad:
            grads.append((w, (gmat.T @ cols).reshape(w.data.shape)))
        if b.requires_grad:
            grads.append((b, gmat.sum(axis=0)))
        return grads

    return _emit(out_data, (x, w, b), backward, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; gradient routed to the first max per window."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ConfigError(f"maxpool2 requires even spatial extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first occurrence, row-major within the window
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return [(x, np.ascontiguousarray(gx).reshape(n, c, h, w))]

    return _emit(np.ascontiguousarray(out_data), (x,), backward, "maxpool2")


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w + b for a batch of row vectors."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ConfigError(
            f"dense shape mismatch: input {x.data.shape} vs weight {w.data.shape}"
        )
    if b.data.shape != (w.data.shape[1],):
        raise ConfigError(f"dense bias shape {b.data.shape} != ({w.data.shape[1]},)")
    out_data = x.data @ w.data + b.data

    def backward(g):
        grads = []
        if x.requires_grad:
            grads.append((x, g @ w.data.T))
        if w.requires_grad:
            grads.append((w, x.data.T @ g))
        if b.requires_grad:
            grads.append((b, g.sum(axis=0)))
        return grads

    return _emit(out_data, (x, w, b), backward, "dense")


def flatten(x: Tensor) -> Tensor:
    n = x.data.shape[0]
    shape = x.data.shape

    def backward(g):
        return [(x, g.reshape(shape))]

    return _emit(x.data.reshape(n, -1), (x,), backward, "flatten")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return [(x, g * mask)]

    return _emit(np.where(mask, x.data, 0), (x,), backward, "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        return [(x, g * (1.0 - y * y))]

    return _emit(y, (x,), backward, "tanh")


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ConfigError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")

        def backward(g):
            return [(a, g), (b, g)]

        return _emit(a.data + b.data, (a, b), backward, "add")

    def backward(g):
        return [(a, g)]

    return _emit(a.data + b, (a,), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ConfigError(f"sub shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        return [(a, g), (b, -g)]

    return _emit(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ConfigError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        return [(a, g * b.data), (b, g * a.data)]

    return _emit(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        return [(a, g * s)]

    return _emit(a.data * s, (a,), backward, "scale")


def square(a: Tensor) -> Tensor:
    def backward(g):
        return [(a, 2.0 * a.data * g)]

    return _emit(a.data * a.data, (a,), backward, "square")


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        return [(x, np.full_like(x.data, g))]

    return _emit(np.asarray(x.data.sum()), (x,), backward, "sum_all")


def batch_sum(x: Tensor) -> Tensor:
    """Per-sample sum over all non-batch axes: NxCxHxW -> (N,)."""
    n = x.data.shape[0]
    axes = tuple(range(1, x.data.ndim))

    def backward(g):
        return [(x, np.broadcast_to(g.reshape((n,) + (1,) * (x.data.ndim - 1)), x.data.shape).copy())]

    return _emit(x.data.sum(axis=axes) if axes else x.data.copy(), (x,), backward, "batch_sum")


def _validate_labels(labels, k):
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise DataError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"label out of range [0, {k})")
    return labels


def gather_labels(z: Tensor, labels) -> Tensor:
    """Per-row logit pick: out[n] = z[n, labels[n]]."""
    n, k = z.data.shape
    labels = _validate_labels(labels, k)
    rows = np.arange(n)

    def backward(g):
        gz = np.zeros_like(z.data)
        gz[rows, labels] = g
        return [(z, gz)]

    return _emit(z.data[rows, labels].copy(), (z,), backward, "gather_labels")


def max_others(z: Tensor, labels) -> Tensor:
    """Per-row max over all classes except labels[n]; gradient to the argmax."""
    n, k = z.data.shape
    labels = _validate_labels(labels, k)
    rows = np.arange(n)
    masked = z.data.copy()
    masked[rows, labels] = -np.inf
    idx = masked.argmax(axis=1)

    def backward(g):
        gz = np.zeros_like(z.data)
        gz[rows, idx] = g
        return [(z, gz)]

    return _emit(masked[rows, idx].copy(), (z,), backward, "max_others")


def softmax_cross_entropy(logits: Tensor, labels):
    """Mean negative log-likelihood over the batch; returns (loss, probabilities)."""
    n, k = logits.data.shape
    labels = _validate_labels(labels, k)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    probs = exp / denom
    loglik = shifted[np.arange(n), labels] - np.log(denom[:, 0])
    loss_data = np.asarray(-loglik.mean())

    def backward(g):
        gz = probs.copy()
        gz[np.arange(n), labels] -= 1.0
        return [(logits, gz * (g / n))]

    loss = _emit(loss_data, (logits,), backward, "softmax_cross_entropy")
    return loss, probs


def sigmoid_bce(logit: Tensor, labels) -> Tensor:
    """Mean binary cross entropy on raw logits, stabilized in log-sum-exp form."""
    z = logit.data.reshape(-1)
    y = np.asarray(labels, dtype=z.dtype).reshape(-1)
    if z.shape != y.shape:
        raise ConfigError(f"sigmoid_bce shape mismatch: {z.shape} logits vs {y.shape} labels")
    if y.size and not np.all((y == 0) | (y == 1)):
        raise DataError("sigmoid_bce labels must be 0 or 1")
    n = z.size
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss_data = np.asarray(per.mean())

    def backward(g):
        gz = (sigmoid(z) - y) * (g / n)
        return [(logit, gz.reshape(logit.data.shape))]

    return _emit(loss_data, (logit,), backward, "sigmoid_bce")


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on a plain array."""
    out = np.empty_like(z, dtype=z.dtype)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(fn, inputs, h: float = 1e-5, samples: int = 20, rng=None, eligible=None):
    """Max relative error between tape gradients and central differences.

    `fn(*inputs)` must build a scalar loss from the given leaf tensors.
    `eligible` optionally gives one boolean mask per input restricting which
    coordinates may be probed (used to keep clear of relu/maxpool kinks).
    Requires f64 precision.
    """
    if precision() != "f64":
        raise UsageError("grad_check requires f64 precision")
    rng = rng or np.random.default_rng(0)
    with Tape() as tape:
        for t in inputs:
            tape.watch(t)
        loss = fn(*inputs)
    grads = tape.backward(loss)

    worst = 0.0
    for j, t in enumerate(inputs):
        analytic = grads.of(t).reshape(-1)
        flat = t.data.reshape(-1)
        if eligible is not None and eligible[j] is not None:
            candidates = np.flatnonzero(eligible[j].reshape(-1))
        else:
            candidates = np.arange(flat.size)
        if candidates.size == 0:
            continue
        take = min(samples, candidates.size)
        picks = rng.choice(candidates, size=take, replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn(*inputs).data)
            flat[i] = orig - h
            down = float(fn(*inputs).data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
