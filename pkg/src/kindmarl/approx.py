"""Small numpy function-approximation core.

Fully connected networks, an LSTM cell, a few losses, SGD/Adam, a checkpoint
format and a central finite-difference gradient checker. Only what the EICM and
DQN architectures need; everything is float64 and runs on the CPU.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Mlp",
    "LstmCell",
    "Optimizer",
    "NonFiniteGradientError",
    "softmax",
    "block_softmax",
    "half_squared_error",
    "block_cross_entropy",
    "save_arrays",
    "load_arrays",
    "check_gradients",
    "flatten_params",
    "flatten_grads",
]


class NonFiniteGradientError(ValueError):
    pass


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Mlp:
    """Fully connected network: ReLU on hidden layers, linear (or ReLU) output.

    ``forward`` records the activations it needs; ``backward`` consumes that
    record and returns the parameter gradients (same order as ``params``) plus
    the gradient with respect to the input.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        rng: np.random.Generator | None = None,
        output_relu: bool = False,
    ):
        if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
            raise ValueError(f"invalid layer sizes {sizes}")
        self.sizes = tuple(int(s) for s in sizes)
        self.output_relu = output_relu
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.params.append(_he_uniform(rng, fan_in, fan_out))
            self.params.append(np.zeros(fan_out))
        self._cache: list[np.ndarray] | None = None

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def input_size(self) -> int:
        return self.sizes[0]

    @property
    def output_size(self) -> int:
        return self.sizes[-1]

    def _run(self, x: np.ndarray, record: bool) -> np.ndarray:
        if x.shape[-1] != self.input_size:
            raise ValueError(f"expected input of size {self.input_size}, got {x.shape[-1]}")
        acts = [x]
        h = x
        for layer in range(self.n_layers):
            w, b = self.params[2 * layer], self.params[2 * layer + 1]
            h = h @ w + b
            if layer < self.n_layers - 1 or self.output_relu:
                h = np.maximum(h, 0.0)
            acts.append(h)
        if record:
            self._cache = acts
        return h

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Evaluate without recording anything for backprop."""
        xb, single = _as_batch(x)
        out = self._run(xb, record=False)
        return out[0] if single else out

    __call__ = predict

    def forward(self, x: np.ndarray) -> np.ndarray:
        xb, _ = _as_batch(x)
        self._single = np.asarray(x).ndim == 1
        out = self._run(xb, record=True)
        return out[0] if self._single else out

    def backward(self, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        if self._cache is None:
            raise RuntimeError("backward called without a recorded forward pass")
        acts, self._cache = self._cache, None
        g, _ = _as_batch(grad_out)
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        for layer in reversed(range(self.n_layers)):
            out = acts[layer + 1]
            if layer < self.n_layers - 1 or self.output_relu:
                g = g * (out > 0.0)
            grads[2 * layer] = acts[layer].T @ g
            grads[2 * layer + 1] = g.sum(axis=0)
            g = g @ self.params[2 * layer].T
        return grads, (g[0] if self._single else g)

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.sizes = self.sizes
        clone.output_relu = self.output_relu
        clone.params = [p.copy() for p in self.params]
        clone._cache = None
        return clone

    def load_params(self, params: Sequence[np.ndarray]) -> None:
        if len(params) != len(self.params):
            raise ValueError("parameter count mismatch")
        for dst, src in zip(self.params, params):
            if dst.shape != src.shape:
                raise ValueError(f"shape mismatch {dst.shape} vs {src.shape}")
            dst[...] = src


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class LstmCell:
    """Standard LSTM cell (input, forget, candidate, output gates).

    ``forward`` unrolls a whole sequence ``xs`` of shape (T, B, input_size) and
    ``backward`` runs BPTT through it. ``step`` is the non-recording single
    step used at acting time.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_size = int(input_size)
        self.hidden_size = int(hidden_size)
        fan_in = self.input_size + self.hidden_size
        limit = np.sqrt(1.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(fan_in, 4 * self.hidden_size))
        b = np.zeros(4 * self.hidden_size)
        b[self.hidden_size : 2 * self.hidden_size] = 1.0  # forget-gate bias
        self.params: list[np.ndarray] = [w, b]
        self._cache: list[tuple] | None = None

    def zero_state(self, batch: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        shape = (self.hidden_size,) if batch is None else (batch, self.hidden_size)
        return np.zeros(shape), np.zeros(shape)

    def _gates(self, x, h):
        H = self.hidden_size
        z = np.concatenate([x, h], axis=-1) @ self.params[0] + self.params[1]
        i = _sigmoid(z[..., :H])
        f = _sigmoid(z[..., H : 2 * H])
        g = np.tanh(z[..., 2 * H : 3 * H])
        o = _sigmoid(z[..., 3 * H :])
        return i, f, g, o

    def step(self, x: np.ndarray, state: tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        h, c = state
        if np.shape(x)[-1] != self.input_size:
            raise ValueError(f"expected input of size {self.input_size}, got {np.shape(x)[-1]}")
        i, f, g, o = self._gates(np.asarray(x, dtype=np.float64), h)
        c_new = f * c + i * g
        return o * np.tanh(c_new), c_new

    def forward(
        self, xs: np.ndarray, h0: np.ndarray, c0: np.ndarray
    ) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
        xs = np.asarray(xs, dtype=np.float64)
        if xs.ndim != 3 or xs.shape[2] != self.input_size:
            raise ValueError(f"expected (T, B, {self.input_size}) inputs, got {xs.shape}")
        h, c = h0, c0
        hs, cache = [], []
        for x in xs:
            i, f, g, o = self._gates(x, h)
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            cache.append((x, h, c, i, f, g, o, tc))
            h, c = h_new, c_new
            hs.append(h)
        self._cache = cache
        return np.stack(hs), (h, c)

    def backward(
        self, dhs: np.ndarray, dh_last: np.ndarray | None = None, dc_last: np.ndarray | None = None
    ) -> tuple[list[np.ndarray], np.ndarray, np.ndarray, np.ndarray]:
        """Returns (param grads, d inputs, d h0, d c0)."""
        if self._cache is None:
            raise RuntimeError("backward called without a recorded forward pass")
        cache, self._cache = self._cache, None
        H = self.hidden_size
        w = self.params[0]
        dw = np.zeros_like(w)
        db = np.zeros_like(self.params[1])
        dxs = []
        dh_next = np.zeros_like(cache[-1][1]) if dh_last is None else dh_last
        dc_next = np.zeros_like(cache[-1][2]) if dc_last is None else dc_last
        for t in reversed(range(len(cache))):
            x, h_prev, c_prev, i, f, g, o, tc = cache[t]
            dh = dhs[t] + dh_next
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dz = np.concatenate(
                [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=-1
            )
            xh = np.concatenate([x, h_prev], axis=-1)
            dw += xh.T @ dz
            db += dz.sum(axis=0)
            dxh = dz @ w.T
            dxs.append(dxh[:, : self.input_size])
            dh_next = dxh[:, self.input_size :]
            dc_next = dc * f
        dxs.reverse()
        return [dw, db], np.stack(dxs), dh_next, dc_next


class Optimizer:
    """SGD or Adam over a list of parameter arrays, updated in place."""

    def __init__(
        self,
        method: str = "adam",
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if method not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer method {method!r}")
        self.method = method
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] = []
        self.v: list[np.ndarray] = []

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError("non-finite gradient passed to optimizer")
        self.t += 1
        if self.method == "sgd":
            for p, g in zip(params, grads):
                p -= self.lr * g
            return
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
            self._tmp = [np.zeros_like(p) for p in params]
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v, tmp in zip(params, grads, self.m, self.v, self._tmp):
            m *= self.beta1
            np.multiply(g, 1.0 - self.beta1, out=tmp)
            m += tmp
            v *= self.beta2
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - self.beta2
            v += tmp
            # p -= lr * (m / bc1) / (sqrt(v / bc2) + eps), without temporaries
            np.divide(v, bc2, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= self.lr / bc1
            p -= tmp

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)])}
        for idx, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{idx}"] = m
            out[f"v{idx}"] = v
        return out


def flatten_params(nets: Sequence["Mlp | LstmCell"]) -> np.ndarray:
    """Move every parameter of ``nets`` into one contiguous vector.

    Each net's ``params`` entries become views of the returned vector, so one
    optimizer update on the flat vector updates all nets.
    """
    arrays = [p for net in nets for p in net.params]
    flat = np.concatenate([p.reshape(-1) for p in arrays])
    pos = 0
    for net in nets:
        for i, p in enumerate(net.params):
            net.params[i] = flat[pos : pos + p.size].reshape(p.shape)
            pos += p.size
    return flat


def flatten_grads(grads: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([g.reshape(-1) for g in grads])


# ---------------------------------------------------------------------------
# losses

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def block_softmax(logits: np.ndarray, n_blocks: int) -> np.ndarray:
    """Softmax applied independently to ``n_blocks`` equal slices of the last axis."""
    shape = logits.shape
    blocks = logits.reshape(shape[:-1] + (n_blocks, shape[-1] // n_blocks))
    return softmax(blocks).reshape(shape)


def half_squared_error(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of 0.5 * ||pred - target||^2 and its gradient w.r.t. pred."""
    pred, _ = _as_batch(pred)
    target, _ = _as_batch(target)
    diff = pred - target
    n = pred.shape[0]
    return float(0.5 * np.sum(diff * diff) / n), diff / n


def block_cross_entropy(
    logits: np.ndarray, labels: np.ndarray, n_blocks: int
) -> tuple[float, np.ndarray]:
    """Cross-entropy summed over blocks, averaged over the batch.

    ``logits`` is (B, n_blocks * m); ``labels`` is (B, n_blocks) of class ids.
    """
    logits, _ = _as_batch(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(logits.shape[0], n_blocks)
    B = logits.shape[0]
    m = logits.shape[1] // n_blocks
    z = logits.reshape(B, n_blocks, m)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(B)[:, None]
    cols = np.arange(n_blocks)[None, :]
    loss = -logp[rows, cols, labels].sum() / B
    grad = np.exp(logp)
    grad[rows, cols, labels] -= 1.0
    return float(loss), grad.reshape(B, n_blocks * m) / B


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (all little-endian):
#   magic  b"KMCK"
#   u16    format version (1)
#   u32    number of arrays
#   per array:
#     u16 name length, utf-8 name
#     u8  ndim, u32 * ndim shape
#     float64 data, row-major

_MAGIC = b"KMCK"
_VERSION = 1


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HI", _VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return out


# ---------------------------------------------------------------------------
# gradient verification

def check_gradients(
    loss_fn: Callable[[], float],
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    n_coords: int = 100,
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic ``grads`` and central differences.

    ``loss_fn`` must re-evaluate the loss from the current contents of
    ``params`` (they are perturbed in place and restored). Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(int(flat - offsets[which]), params[which].shape)
        p = params[which]
        orig = p[idx]
        p[idx] = orig + h
        up = loss_fn()
        p[idx] = orig - h
        down = loss_fn()
        p[idx] = orig
        numeric = (up - down) / (2 * h)
        analytic = float(grads[which][idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    return worst
