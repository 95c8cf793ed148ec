"""Parameter storage, checkpoints, Adam and finite-difference gradient checks."""
from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, backward, no_grad
from .errors import CheckpointError, DeterminismError, InvalidConfig, InvalidEps, ShapeError

CHECKPOINT_MAGIC = b"TSP3DCKP"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class ParamStore:
    """Ordered name -> parameter tensor map.

    Each tensor draws its initial values from an RNG seeded by
    ``(rng_seed, crc32(name))`` so adding a parameter never perturbs others.
    """

    def __init__(self, rng_seed=0):
        self.rng_seed = int(rng_seed)
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name):
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def _rng(self, name):
        return np.random.default_rng([self.rng_seed, zlib.crc32(name.encode())])

    def add(self, name, shape, init="uniform", fan_in=None, value=None):
        if name in self._params:
            raise ShapeError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if value is not None:
            data = np.array(value, dtype=np.float64).reshape(shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "uniform":
            if fan_in is None:
                fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
            bound = 1.0 / np.sqrt(max(fan_in, 1))
            data = self._rng(name).uniform(-bound, bound, size=shape)
        elif init == "normal":
            data = self._rng(name).normal(0.0, 0.02 if fan_in is None else 1.0 / np.sqrt(fan_in), size=shape)
        else:
            raise InvalidConfig(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, name=name)
        t.grad = np.zeros_like(data)
        self._params[name] = t
        return t

    def get_or_add(self, name, shape, **kw):
        if name in self._params:
            t = self._params[name]
            if t.shape != tuple(shape):
                raise ShapeError(f"parameter {name!r} has shape {t.shape}, expected {tuple(shape)}")
            return t
        return self.add(name, shape, **kw)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def grads(self):
        return OrderedDict((n, t.grad) for n, t in self._params.items())

    def state(self):
        return OrderedDict((n, t.data.copy()) for n, t in self._params.items())

    def load_state(self, state):
        for n, v in state.items():
            if n not in self._params:
                self.add(n, np.shape(v), value=v)
            else:
                self._params[n].data = np.array(v, dtype=np.float64)

    def num_values(self):
        return sum(t.data.size for t in self._params.values())


# -- checkpoint ---------------------------------------------------------------

def save_checkpoint(store, path):
    """Write header (magic, version, count) then one record per tensor."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(store))]
    for name, t in store.items():
        arr = np.ascontiguousarray(t.data)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_TAGS:
            arr = arr.astype("<f8")
            dt = arr.dtype
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BI", _DTYPE_TAGS[dt], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(dt, copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, rng_seed=0):
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    pos = len(CHECKPOINT_MAGIC)
    try:
        version, count = struct.unpack_from("<II", buf, pos)
        pos += 8
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        store = ParamStore(rng_seed)
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BI", buf, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            dt = _TAG_DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            arr = np.frombuffer(buf, dtype=dt, count=int(np.prod(dims, dtype=np.int64)), offset=pos)
            pos += nbytes
            t = Tensor(arr.reshape(dims).astype(np.float64), requires_grad=True, name=name)
            t.grad = np.zeros_like(t.data)
            store._params[name] = t
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return store


# -- optimiser ----------------------------------------------------------------

@dataclass
class AdamMoments:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(store, grads, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, t=1, moments=None):
    """One bias-corrected Adam update applied in place; returns the moments."""
    if lr <= 0:
        raise InvalidConfig(f"learning rate must be positive, got {lr}")
    if t < 1:
        raise InvalidConfig(f"adam step counter must be >= 1, got {t}")
    if moments is None:
        moments = AdamMoments()
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = grads.get(name)
        if g is None:
            continue
        m = moments.m.get(name)
        v = moments.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        moments.m[name], moments.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return moments


# -- gradient check -----------------------------------------------------------

@dataclass
class TensorCheck:
    name: str
    max_rel_err: float
    worst_index: tuple
    analytic: float
    numeric: float
    checked: int
    kinks: int = 0


@dataclass
class GradCheckReport:
    tensors: list

    @property
    def max_rel_err(self):
        return max((t.max_rel_err for t in self.tensors), default=0.0)

    @property
    def worst(self):
        return max(self.tensors, key=lambda t: t.max_rel_err) if self.tensors else None

    @property
    def checked(self):
        return sum(t.checked for t in self.tensors)

    @property
    def kinks(self):
        return sum(t.kinks for t in self.tensors)

    def passed(self, tol=1e-4):
        return self.max_rel_err < tol


def _probe(fn, flat, j, eps):
    orig = flat[j]
    with no_grad():
        flat[j] = orig + eps
        fp = float(fn().data)
        flat[j] = orig - eps
        fm = float(fn().data)
    flat[j] = orig
    return fp, fm


def grad_check(fn, store, eps=1e-5, max_entries=64, seed=0, abs_floor=1e-6, names=None,
               kink_rtol=1e-5, slope_rtol=1e-2, noise_ulps=16):
    """Compare analytic gradients of ``fn()`` against central differences.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, abs_floor)``
    with ``n = (f(x + eps) - f(x - eps)) / (2 eps)``; the floor keeps entries
    whose true gradient is below round-off from dominating the report.

    Every entry is also differenced at ``eps / 2``.  On a smooth stretch both
    estimates agree to O(eps^2) plus round-off; when they differ by more than
    ``kink_rtol`` relative and ``noise_ulps`` ulps of the loss per step, a
    non-differentiable point (relu, threshold) lies inside the window and the
    entry is counted in ``kinks`` instead of compared.  A kink sitting
    exactly on the probed value is symmetric and fools that test, so the
    forward and backward slopes at ``eps / 2`` must also agree within
    ``slope_rtol``.
    """
    if not eps > 0:
        raise InvalidEps(f"eps must be positive, got {eps}")
    loss = fn()
    with no_grad():
        again = fn()
    f0 = float(loss.data)
    if f0 != float(again.data):
        raise DeterminismError(f"fn is not deterministic: {f0!r} vs {float(again.data)!r}")
    backward(loss, store)
    noise = noise_ulps * np.spacing(abs(f0)) / eps
    rng = np.random.default_rng(seed)
    results = []
    for name, p in store.items():
        if names is not None and name not in names:
            continue
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        if flat.size <= max_entries:
            picks = np.arange(flat.size)
        else:
            picks = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = TensorCheck(name, 0.0, (), 0.0, 0.0, 0)
        kinks = 0
        for j in picks:
            fp, fm = _probe(fn, flat, j, eps)
            hp, hm = _probe(fn, flat, j, eps / 2)
            num = (fp - fm) / (2.0 * eps)
            half = (hp - hm) / eps
            fwd, bwd = (hp - f0) * 2.0 / eps, (f0 - hm) * 2.0 / eps
            if (abs(num - half) > max(kink_rtol * max(abs(num), abs(half)), noise)
                    or abs(fwd - bwd) > max(slope_rtol * max(abs(fwd), abs(bwd)), 4 * noise)):
                kinks += 1
                continue
            ana = float(gflat[j])
            err = abs(ana - num) / max(abs(ana), abs(num), abs_floor)
            if err > worst.max_rel_err or not worst.worst_index:
                worst = TensorCheck(name, err, np.unravel_index(j, p.shape), ana, num, 0)
        worst.checked = len(picks) - kinks
        worst.kinks = kinks
        results.append(worst)
    return GradCheckReport(results)
