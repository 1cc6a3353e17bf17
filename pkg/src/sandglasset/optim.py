"""Parameter registry, Adam optimizer and the finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Tensor, no_grad


class ParamTable:
    """Ordered map of parameter path -> Tensor with Adam moment buffers.

    Registration order is the canonical enumeration order; it drives
    checkpoint layout and closed-form parameter-count cross-checks.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def register(self, path: str, data) -> Tensor:
        if path in self._params:
            raise ConfigError(f"parameter path registered twice: {path}")
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True)
        self._params[path] = t
        self._m[path] = np.zeros(t.shape, dtype=self.dtype)
        self._v[path] = np.zeros(t.shape, dtype=self.dtype)
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def paths(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def moments(self, path: str):
        return self._m[path], self._v[path]

    def total_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def grad_global_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            if t.grad is not None:
                total += float(np.sum(t.grad.astype(np.float64) ** 2))
        return float(np.sqrt(total))

    def copy_values_from(self, other: "ParamTable"):
        if self.paths() != other.paths():
            raise ConfigError("parameter tables do not share the same paths")
        for path, t in self._params.items():
            src = other[path].data
            if src.shape != t.shape:
                raise ConfigError(f"shape mismatch for {path}: {src.shape} vs {t.shape}")
            t.data[...] = src.astype(self.dtype)


def adam_step(
    params: ParamTable,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    clip_norm: float | None = None,
) -> ParamTable:
    """One Adam update with bias correction and optional global-norm clipping.

    Missing gradients count as zero.  Any non-finite gradient aborts the
    step before touching parameters or moments.  Gradients are cleared
    afterwards.
    """
    grads = {}
    for path, t in params.items():
        g = t.grad
        if g is None:
            g = np.zeros(t.shape, dtype=t.data.dtype)
        elif not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{path}'")
        grads[path] = g

    if clip_norm is not None:
        total = 0.0
        for g in grads.values():
            total += float(np.sum(g.astype(np.float64) ** 2))
        norm = float(np.sqrt(total))
        if norm > clip_norm:
            scale = clip_norm / norm
            grads = {path: g * g.dtype.type(scale) for path, g in grads.items()}

    t_step = params.step_count + 1
    bc1 = 1.0 - beta1 ** t_step
    bc2 = 1.0 - beta2 ** t_step
    for path, tensor in params.items():
        g = grads[path]
        m, v = params.moments(path)
        m *= m.dtype.type(beta1)
        m += m.dtype.type(1.0 - beta1) * g
        v *= v.dtype.type(beta2)
        v += v.dtype.type(1.0 - beta2) * (g * g)
        m_hat = m / m.dtype.type(bc1)
        v_hat = v / v.dtype.type(bc2)
        tensor.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(tensor.data.dtype)
    params.step_count = t_step
    params.zero_grads()
    return params


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_path: str
    worst_index: int
    coords_checked: int

    def __str__(self):
        return (
            f"max relative error {self.max_rel_error:.3e} "
            f"at {self.worst_path}[{self.worst_index}] "
            f"({self.coords_checked} coordinates)"
        )


def grad_check(
    f,
    params: ParamTable,
    h: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng=None,
    atol: float = 1e-8,
) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar function against central
    differences (f(p+h) - f(p-h)) / 2h, coordinate by coordinate.

    Requires double precision; finite differences are too noisy in single.
    Coordinates whose analytic and numeric values are both below ``atol``
    count as exact.
    """
    if params.dtype != np.float64:
        raise ConfigError("grad_check requires a double-precision ParamTable")

    params.zero_grads()
    loss = f(params)
    if loss.size != 1:
        raise ConfigError("grad_check target must return a scalar tensor")
    loss.backward()
    analytic = {
        path: (t.grad.copy() if t.grad is not None else np.zeros(t.shape))
        for path, t in params.items()
    }
    params.zero_grads()

    worst = 0.0
    worst_path = ""
    worst_index = -1
    checked = 0
    for path, tensor in params.items():
        flat = tensor.data.reshape(-1)
        n = flat.shape[0]
        if max_coords_per_param is not None and n > max_coords_per_param:
            if rng is None:
                indices = np.linspace(0, n - 1, max_coords_per_param).astype(np.intp)
            else:
                indices = np.sort(
                    rng.permutation(n)[:max_coords_per_param].astype(np.intp)
                )
        else:
            indices = range(n)
        ana_flat = analytic[path].reshape(-1)
        for idx in indices:
            orig = flat[idx]
            with no_grad():
                flat[idx] = orig + h
                fp = float(f(params).data)
                flat[idx] = orig - h
                fm = float(f(params).data)
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            ana = float(ana_flat[idx])
            denom = max(abs(ana), abs(numeric))
            rel = 0.0 if denom < atol else abs(ana - numeric) / denom
            checked += 1
            if rel > worst:
                worst = rel
                worst_path = path
                worst_index = int(idx)
    return GradCheckReport(worst, worst_path, worst_index, checked)
