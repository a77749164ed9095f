"""Minimal differentiable core for the trainable attribution sub-model.

Reverse-mode differentiation over a fixed op vocabulary: exactly the
operations the projection head, the linear classifier, the anchor
regularizers and the loss terms need, nothing more.  Values are float64
numpy arrays; every op records a backward closure on a tape so a single
``Tensor.backward()`` call accumulates gradients into the participating
:class:`Parameter` objects.

Also provides the Adam optimizer used for training and a central
finite-difference gradient checker used throughout the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Parameter",
    "Tensor",
    "ProjectionHead",
    "LinearClassifier",
    "Adam",
    "adam_step",
    "grad_check",
    "GradCheckReport",
    "constant",
    "matmul",
    "transpose",
    "add",
    "add_bias",
    "mul",
    "mul_array",
    "scale_shift",
    "tanh",
    "take_rows",
    "normalize_rows",
    "tsum",
    "cross_entropy_mean",
    "max_softmax_hinge_mean",
    "gram_identity_penalty",
    "softmax",
]


class Parameter:
    """A trainable tensor with an additive gradient and Adam moment buffers.

    ``grad`` always has the shape of ``values`` and accumulates across
    backward passes; the optimizer zeroes it after applying an update.
    """

    def __init__(self, values: np.ndarray, name: str = "param"):
        self.name = name
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.adam_m = np.zeros_like(self.values)
        self.adam_v = np.zeros_like(self.values)
        self.step_count = 0

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def grow_rows(self, new_rows: np.ndarray) -> None:
        """Append rows; moments and gradient rows for them start at zero."""
        new_rows = np.atleast_2d(np.asarray(new_rows, dtype=np.float64))
        if self.values.ndim != 2:
            raise ValueError(f"{self.name}: grow_rows requires a 2-D parameter")
        if new_rows.shape[1] != self.values.shape[1]:
            raise ValueError(
                f"{self.name}: new rows have width {new_rows.shape[1]}, "
                f"expected {self.values.shape[1]}"
            )
        pad = np.zeros_like(new_rows)
        self.values = np.concatenate([self.values, new_rows], axis=0)
        self.grad = np.concatenate([self.grad, pad], axis=0)
        self.adam_m = np.concatenate([self.adam_m, pad], axis=0)
        self.adam_v = np.concatenate([self.adam_v, pad], axis=0)

    def grow_flat(self, n_new: int, fill: float = 0.0) -> None:
        """Append entries to a 1-D parameter (classifier bias)."""
        if self.values.ndim != 1:
            raise ValueError(f"{self.name}: grow_flat requires a 1-D parameter")
        ext = np.full(n_new, fill, dtype=np.float64)
        zed = np.zeros(n_new, dtype=np.float64)
        self.values = np.concatenate([self.values, ext])
        self.grad = np.concatenate([self.grad, zed])
        self.adam_m = np.concatenate([self.adam_m, zed])
        self.adam_v = np.concatenate([self.adam_v, zed])

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.values.shape}, t={self.step_count})"


class Tensor:
    """A node on the differentiation tape.

    Leaves either wrap a :class:`Parameter` (gradients flow into
    ``param.grad``) or hold constants.  Interior nodes carry a backward
    closure mapping the output gradient to parent gradients.
    """

    __slots__ = ("value", "grad", "_parents", "_backward", "requires_grad", "_param")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None,
        requires_grad: bool = False,
        param: Parameter | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._param = param

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def backward(self) -> None:
        """Accumulate d(self)/d(param) into every reachable Parameter.grad."""
        if self.value.ndim != 0 and self.value.size != 1:
            raise RuntimeError("backward requires a scalar loss node")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._param is not None:
                node._param.grad += node.grad
            if node._backward is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if not parent.requires_grad or g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                parent.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def constant(value: np.ndarray) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64))


def leaf(param: Parameter) -> Tensor:
    return Tensor(param.values, requires_grad=True, param=param)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.value @ b.value

    def bw(g):
        return g @ b.value.T, a.value.T @ g

    return Tensor(out, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    def bw(g):
        return (g.T,)

    return Tensor(a.value.T, (a,), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"add: shape mismatch {a.value.shape} vs {b.value.shape}")

    def bw(g):
        return g, g

    return Tensor(a.value + b.value, (a, b), bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias add: (n, k) + (k,)."""
    x, b = _as_tensor(x), _as_tensor(b)

    def bw(g):
        return g, g.sum(axis=0)

    return Tensor(x.value + b.value, (x, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return g * b.value, g * a.value

    return Tensor(a.value * b.value, (a, b), bw)


def mul_array(x: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise product with a constant (broadcastable) array."""
    c = np.asarray(c, dtype=np.float64)

    def bw(g):
        out = g * c
        if out.shape != x.value.shape:  # undo broadcasting of c
            out = out.reshape(x.value.shape)
        return (out,)

    return Tensor(x.value * c, (x,), bw)


def scale_shift(x: Tensor, a: float = 1.0, b: float = 0.0) -> Tensor:
    def bw(g):
        return (g * a,)

    return Tensor(a * x.value + b, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.value)

    def bw(g):
        return (g * (1.0 - out * out),)

    return Tensor(out, (x,), bw)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        dx = np.zeros_like(x.value)
        np.add.at(dx, idx, g)
        return (dx,)

    return Tensor(x.value[idx], (x,), bw)


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Project each row onto the unit sphere; rows with norm < eps pass through."""
    norms = np.linalg.norm(x.value, axis=1, keepdims=True)
    safe = np.maximum(norms, eps)
    out = x.value / safe

    def bw(g):
        dot = np.sum(out * g, axis=1, keepdims=True)
        return ((g - out * dot) / safe,)

    return Tensor(out, (x,), bw)


def tsum(x: Tensor) -> Tensor:
    def bw(g):
        return (np.full_like(x.value, float(g)),)

    return Tensor(np.asarray(x.value.sum()), (x,), bw)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-stable softmax on a plain array."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_mean(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy, log-sum-exp stabilized."""
    labels = np.asarray(labels, dtype=np.intp)
    z = logits.value
    if z.ndim != 2:
        raise ValueError("cross_entropy_mean expects a (batch, classes) matrix")
    n = z.shape[0]
    if n == 0:
        raise ValueError("cross_entropy_mean: empty batch")
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ValueError("labels outside the current class range")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(n), labels] - lse
    p = softmax(z)

    def bw(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (float(g) / n),)

    return Tensor(np.asarray(-logp.mean()), (logits,), bw)


def max_softmax_hinge_mean(logits: Tensor, tau: float) -> Tensor:
    """Mean over rows of max(0, max softmax probability - tau).

    Subgradient at the hinge kink (max prob == tau) is taken as zero; the
    max over classes routes to the argmax row entry.
    """
    z = logits.value
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError("max_softmax_hinge_mean expects a nonempty logit matrix")
    p = softmax(z)
    top = np.argmax(p, axis=1)
    n = z.shape[0]
    pmax = p[np.arange(n), top]
    active = pmax > tau
    loss = np.maximum(0.0, pmax - tau).mean()

    def bw(g):
        d = np.zeros_like(z)
        rows = np.nonzero(active)[0]
        if rows.size:
            # d pmax / d logit_j = pmax * (1[j = argmax] - p_j)
            d[rows] = -p[rows] * pmax[rows, None]
            d[rows, top[rows]] += pmax[rows]
        return (d * (float(g) / n),)

    return Tensor(np.asarray(loss), (logits,), bw)


def gram_identity_penalty(a: Tensor) -> Tensor:
    """Squared Frobenius deviation of the row Gram matrix from identity.

    For anchors stored as rows A this is ||A A^T - I||_F^2, i.e. the
    column-orthogonality penalty of the anchor matrix Q = A^T.
    """
    dev = a.value @ a.value.T - np.eye(a.value.shape[0])

    def bw(g):
        return (4.0 * float(g) * dev @ a.value,)

    return Tensor(np.asarray((dev * dev).sum()), (a,), bw)


_NONLINEARITIES = {"tanh": tanh}


class ProjectionHead:
    """Feedforward re-encoder from encoder features to the structured latent space.

    ``layers`` is an ordered list of (weight, bias) Parameters; a fixed smooth
    nonlinearity is applied between layers (never after the last one), so a
    single-layer head is a plain affine map.
    """

    def __init__(self, layers: Sequence[tuple[Parameter, Parameter]], nonlinearity: str = "tanh"):
        if not layers:
            raise ValueError("ProjectionHead needs at least one layer")
        if nonlinearity not in _NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
        self.layers = list(layers)
        self.nonlinearity = nonlinearity
        self.input_dim = self.layers[0][0].values.shape[0]
        self.output_dim = self.layers[-1][0].values.shape[1]
        for (w, b) in self.layers:
            if b.values.shape != (w.values.shape[1],):
                raise ValueError("bias shape does not match weight columns")

    @classmethod
    def seeded(
        cls,
        input_dim: int,
        hidden_dim: int,
        output_dim: int,
        rng: np.random.Generator,
        nonlinearity: str = "tanh",
    ) -> "ProjectionHead":
        """Two-layer head with fan-in scaled Gaussian weights and zero biases."""
        dims = [input_dim, hidden_dim, output_dim]
        layers = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            w = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
            layers.append(
                (
                    Parameter(w, name=f"head.w{i}"),
                    Parameter(np.zeros(d_out), name=f"head.b{i}"),
                )
            )
        return cls(layers, nonlinearity)

    def forward(self, x: np.ndarray | Tensor) -> Tensor:
        """Project a (batch, input_dim) matrix; records the tape for backward."""
        t = _as_tensor(x)
        if t.value.ndim != 2 or t.value.shape[1] != self.input_dim:
            raise ValueError(
                f"expected (n, {self.input_dim}) features, got {t.value.shape}"
            )
        nl = _NONLINEARITIES[self.nonlinearity]
        h = t
        for i, (w, b) in enumerate(self.layers):
            h = add_bias(matmul(h, leaf(w)), leaf(b))
            if i < len(self.layers) - 1:
                h = nl(h)
        return h

    def project(self, features: np.ndarray) -> np.ndarray:
        """Inference-only projection of one vector or a batch (no tape kept)."""
        arr = np.asarray(features, dtype=np.float64)
        single = arr.ndim == 1
        if single:
            arr = arr[None, :]
        out = self.forward(arr).value
        return out[0] if single else out

    def parameters(self) -> list[Parameter]:
        return [p for pair in self.layers for p in pair]


class LinearClassifier:
    """Grow-only linear classifier over the latent space.

    Rows are appended as the cumulative label space expands; existing rows
    are never reinitialized, so old-class logits are untouched by growth
    until the next optimizer step.
    """

    def __init__(self, latent_dim: int):
        self.latent_dim = latent_dim
        self.weight = Parameter(np.zeros((0, latent_dim)), name="clf.weight")
        self.bias = Parameter(np.zeros(0), name="clf.bias")

    @property
    def num_classes(self) -> int:
        return self.weight.values.shape[0]

    def grow(self, n_new: int, rng: np.random.Generator) -> None:
        """Append rows for new classes: zero-mean rows at scale 1/sqrt(d')."""
        if n_new < 0:
            raise ValueError("n_new must be >= 0")
        if n_new == 0:
            return
        rows = rng.normal(0.0, 1.0 / np.sqrt(self.latent_dim), size=(n_new, self.latent_dim))
        self.weight.grow_rows(rows)
        self.bias.grow_flat(n_new)

    def forward(self, z: np.ndarray | Tensor) -> Tensor:
        t = _as_tensor(z)
        if t.value.ndim != 2 or t.value.shape[1] != self.latent_dim:
            raise ValueError(f"expected (n, {self.latent_dim}) latents, got {t.value.shape}")
        return add_bias(matmul(t, transpose(leaf(self.weight))), leaf(self.bias))

    def logits(self, z: np.ndarray) -> np.ndarray:
        """Inference-only logits for one latent vector or a batch."""
        arr = np.asarray(z, dtype=np.float64)
        single = arr.ndim == 1
        if single:
            arr = arr[None, :]
        out = self.forward(arr).value
        return out[0] if single else out

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


def adam_step(
    params: Iterable[Parameter],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update on every parameter, then zero the grads."""
    for p in params:
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * p.grad
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (p.grad * p.grad)
        m_hat = p.adam_m / (1.0 - beta1**t)
        v_hat = p.adam_v / (1.0 - beta2**t)
        p.values -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


@dataclass
class Adam:
    """Hyperparameter bundle around :func:`adam_step`."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def step(self, params: Iterable[Parameter]) -> None:
        adam_step(params, self.lr, self.beta1, self.beta2, self.eps)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str = ""
    worst_index: int = -1
    n_checked: int = 0
    tol: float = 1e-3
    details: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-4,
    tol: float = 1e-3,
    max_entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` must rebuild the loss graph from the current parameter values
    on every call and be deterministic.  Entries where both gradients are
    below 1e-7 in magnitude are treated as agreeing (avoids 0/0 noise).
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.value):
        raise FloatingPointError("loss is not finite")
    loss.backward()
    analytic = {p.name: p.grad.copy() for p in params}

    report = GradCheckReport(max_rel_error=0.0, tol=tol)
    for p in params:
        flat = p.values.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            indices = gen.choice(flat.size, size=max_entries_per_param, replace=False)
        worst_here = 0.0
        for i in indices:
            orig = flat[i]
            flat[i] = orig + step
            lo_hi = float(loss_fn().value)
            flat[i] = orig - step
            lo_lo = float(loss_fn().value)
            flat[i] = orig
            if not (np.isfinite(lo_hi) and np.isfinite(lo_lo)):
                raise FloatingPointError("loss is not finite during probing")
            numeric = (lo_hi - lo_lo) / (2.0 * step)
            a = analytic[p.name].reshape(-1)[i]
            denom = max(abs(a), abs(numeric))
            err = 0.0 if denom <= 1e-7 else abs(a - numeric) / denom
            report.n_checked += 1
            if err > worst_here:
                worst_here = err
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst_param = p.name
                report.worst_index = int(i)
        report.details[p.name] = worst_here
    for p in params:
        p.zero_grad()
    return report
