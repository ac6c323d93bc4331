"""Dense numeric core shared by every learned module.

Everything runs in float64. Matrices are plain 2-D numpy arrays; `Param`
bundles a value with its gradient and momentum buffer. Backward passes are
hand-written per operation and validated against central differences via
`grad_check`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Matrix = np.ndarray


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> Matrix:
    """Validate/coerce `data` into a finite float64 2-D array."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"matrix must be 2-D, got shape {m.shape}")
    if rows is not None and m.shape != (rows, cols):
        raise ValueError(f"expected shape {(rows, cols)}, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with an explicit dimension check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul operands must be 2-D")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def sigmoid(x) -> np.ndarray:
    """Elementwise logistic function, numerically stable for large |x|.

    Outputs are clamped to the open interval (0, 1) at 1-ulp distance so
    downstream strict-range invariants hold even in the saturated regime.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _SIGMOID_LO, _SIGMOID_HI)


def sigmoid_grad_from_output(y: np.ndarray) -> np.ndarray:
    """d sigmoid / dx expressed through the forward output y = sigmoid(x)."""
    return y * (1.0 - y)


@dataclass
class Param:
    """A learnable matrix with gradient and momentum state.

    value/grad/velocity always share one shape. Callers accumulate into
    `grad`; `sgd_step` consumes and zeroes it.
    """

    name: str
    value: Matrix
    grad: Matrix = field(default=None)  # type: ignore[assignment]
    velocity: Matrix = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = as_matrix(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.velocity is None:
            self.velocity = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape or self.velocity.shape != self.value.shape:
            raise ValueError(f"param {self.name}: value/grad/velocity shapes differ")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[:] = 0.0


def make_param(name: str, rows: int, cols: int, rng: np.random.Generator,
               fan_in: int | None = None, fan_out: int | None = None) -> Param:
    """Uniform init in [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    if fan_in is None:
        fan_in = rows
    if fan_out is None:
        fan_out = cols
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Param(name, rng.uniform(-a, a, size=(rows, cols)))


def sgd_step(params: list[Param], lr: float, weight_decay: float = 0.0,
             momentum: float = 0.0, nesterov: bool = False) -> None:
    """One SGD update over `params`, in place; gradients are zeroed after.

    Update rule (coupled weight decay, momentum buffer, optional Nesterov
    lookahead):

        g = grad + weight_decay * value
        velocity = momentum * velocity + g
        step = g + momentum * velocity   (nesterov)
             = velocity                  (otherwise)
        value -= lr * step
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise ValueError(f"non-finite gradient in param {p.name!r}")
        g = p.grad
        if weight_decay != 0.0:
            g = g + weight_decay * p.value
        p.velocity *= momentum
        p.velocity += g
        step = g + momentum * p.velocity if nesterov else p.velocity
        p.value -= lr * step
        p.zero_grad()


@dataclass
class GradCheckReport:
    param_name: str
    max_rel_error: float
    passed: bool


def grad_check(loss_fn, params: list[Param], eps: float = 1e-6,
               tolerance: float = 1e-4,
               max_entries_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> list[GradCheckReport]:
    """Compare analytic gradients in `params` against central differences.

    `loss_fn()` must be a deterministic scalar function of the current param
    values; the caller populates `p.grad` analytically before calling.
    Relative error per entry is |analytic - numeric| / max(1e-8,
    |analytic| + |numeric|). When `max_entries_per_param` is set, a seeded
    subset of entries is checked instead of all of them.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    l0 = float(loss_fn())
    l1 = float(loss_fn())
    if l0 != l1:
        raise ValueError(f"loss_fn is not deterministic ({l0!r} != {l1!r})")

    reports = []
    for p in params:
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idxs = np.arange(n)
        max_rel = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(loss_fn())
            flat[i] = orig - eps
            lm = float(loss_fn())
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if rel > max_rel:
                max_rel = rel
        reports.append(GradCheckReport(p.name, max_rel, max_rel < tolerance))
    return reports


def save_params(params: list[Param], path) -> None:
    """Write a checkpoint as structured text, 17 significant digits per value."""
    with open(path, "w") as fh:
        fh.write("mammograph-params v1\n")
        for p in params:
            r, c = p.value.shape
            fh.write(f"param {p.name} {r} {c}\n")
            for row in p.value:
                fh.write(" ".join(format(v, ".17g") for v in row) + "\n")


def load_params(path) -> list[Param]:
    """Read a checkpoint written by `save_params`; exact decimal round-trip."""
    params = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "mammograph-params v1":
            raise ValueError(f"unrecognized checkpoint header: {header!r}")
        line = fh.readline()
        while line:
            parts = line.split()
            if len(parts) != 4 or parts[0] != "param":
                raise ValueError(f"malformed param header line: {line!r}")
            name, r, c = parts[1], int(parts[2]), int(parts[3])
            rows = []
            for _ in range(r):
                rows.append([float(v) for v in fh.readline().split()])
            value = np.array(rows, dtype=np.float64).reshape(r, c)
            params.append(Param(name, value))
            line = fh.readline()
    return params
