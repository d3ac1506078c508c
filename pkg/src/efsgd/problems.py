"""Synthetic stochastic-gradient problems with known (or bounded) smoothness.

Each oracle draws its randomness from a stream keyed by ``(seed, worker, t)``
so any worker's minibatch at any iteration can be regenerated on its own.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import BlockPartition, make_partition

PROBLEM_KINDS = ("quadratic", "logistic", "mlp")
_HEADER = struct.Struct("<QQQ")


class ProblemError(ValueError):
    pass


@dataclass(frozen=True)
class ProblemSpec:
    """Problem description.

    ``dim`` is the parameter dimension for quadratics and the feature
    dimension otherwise. ``hidden`` lists MLP hidden widths.
    """

    kind: str = "quadratic"
    dim: int = 10
    n: int = 512
    kappa: float = 10.0
    sigma: float = 0.0
    class_balance: float = 0.5
    separation: float = 1.0
    hidden: tuple[int, ...] = (16,)
    outputs: int = 1
    seed: int = 0
    data_path: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in PROBLEM_KINDS:
            raise ProblemError(f"unknown problem {self.kind!r}; expected one of {PROBLEM_KINDS}")
        if self.dim < 1 or self.n < 1:
            raise ProblemError("dim and n must be >= 1")
        if self.kappa < 1:
            raise ProblemError("kappa must be >= 1")
        if self.sigma < 0:
            raise ProblemError("sigma must be >= 0")
        if not 0.0 < self.class_balance < 1.0:
            raise ProblemError("class_balance must lie in (0, 1)")
        if self.kind == "mlp" and (len(self.hidden) == 0 or min(self.hidden) < 1):
            raise ProblemError("mlp needs at least one hidden layer of positive width")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class StreamCache:
    """Counter-based generators: the draw for (worker, t) never depends on what was drawn before.

    Each worker owns a Philox key ``(seed, worker)``; iteration ``t`` selects
    the counter block, so streams are independent across workers and any
    (worker, t) cell can be regenerated in isolation.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gens: dict[int, np.random.Generator] = {}

    def __call__(self, worker: int, t: int) -> np.random.Generator:
        gen = self._gens.get(worker)
        if gen is None:
            gen = np.random.Generator(np.random.Philox(key=[self.seed, worker]))
            self._gens[worker] = gen
        bg = gen.bit_generator
        st = bg.state
        st["state"]["counter"] = np.array([0, 0, t, 0], dtype=np.uint64)
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        bg.state = st
        return gen


def stream(seed: int, worker: int, t: int) -> np.random.Generator:
    """Fresh generator for one (worker, iteration) cell; same draws as :class:`StreamCache`."""
    return np.random.Generator(np.random.Philox(key=[int(seed), worker], counter=[0, 0, t, 0]))


class GradOracle:
    """Base class: subclasses provide ``loss``, ``exact_gradient``, ``gradient`` and ``sample_minibatch``."""

    spec: ProblemSpec
    dim: int
    L: float
    x0: np.ndarray
    partition: BlockPartition

    def stochastic_gradient(self, x: np.ndarray, t: int, worker: int, batch_size: int) -> np.ndarray:
        return self.gradient(x, self.sample_minibatch(t, worker, batch_size))

    def loss(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def exact_gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x: np.ndarray, sample) -> np.ndarray:
        raise NotImplementedError

    def sample_minibatch(self, t: int, worker: int, batch_size: int):
        raise NotImplementedError


class QuadraticOracle(GradOracle):
    """F(x) = x'Ax/2 - b'x with additive Gaussian gradient noise of total variance sigma^2."""

    def __init__(self, A: np.ndarray, b: np.ndarray, sigma: float = 0.0, seed: int = 0,
                 spec: Optional[ProblemSpec] = None, x0: Optional[np.ndarray] = None):
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        b = np.atleast_1d(np.asarray(b, dtype=np.float64))
        self.A, self.b = A, b
        self.dim = b.shape[0]
        self.sigma = float(sigma)
        self.seed = seed
        self._streams = StreamCache(seed)
        eig = np.linalg.eigvalsh(A)
        if eig[0] <= 0:
            raise ProblemError("A must be positive definite")
        self.L = float(eig[-1])
        self.mu_strong = float(eig[0])
        self.x_star = np.linalg.solve(A, b)
        self.f_star = float(-0.5 * b @ self.x_star)
        self.x0 = np.zeros(self.dim) if x0 is None else np.asarray(x0, dtype=np.float64)
        self.partition = make_partition([self.dim])
        self.spec = spec or ProblemSpec(kind="quadratic", dim=self.dim, sigma=sigma, seed=seed)

    def loss(self, x):
        return float(0.5 * x @ self.A @ x - self.b @ x)

    def exact_gradient(self, x):
        return self.A @ x - self.b

    def sample_minibatch(self, t, worker, batch_size):
        if self.sigma == 0.0:
            return None
        rng = self._streams(worker, t)
        # mean of batch_size draws of N(0, sigma^2/d I)
        return rng.standard_normal(self.dim) * (self.sigma / np.sqrt(self.dim * batch_size))

    def gradient(self, x, sample):
        g = self.exact_gradient(x)
        return g if sample is None else g + sample


def make_quadratic(d: int, kappa: float, sigma: float, seed: int = 0):
    """Random rotation of eigenvalues spread evenly over [1, kappa]; minimizer drawn from N(0, I)."""
    spec = ProblemSpec(kind="quadratic", dim=d, kappa=kappa, sigma=sigma, seed=seed)
    return spec, _build_quadratic(spec)


def _build_quadratic(spec: ProblemSpec) -> QuadraticOracle:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(2**31,)))
    d = spec.dim
    eigs = np.linspace(1.0, spec.kappa, d) if d > 1 else np.array([spec.kappa])
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    A = (q * eigs) @ q.T
    A = 0.5 * (A + A.T)
    x_star = rng.standard_normal(d)
    return QuadraticOracle(A, A @ x_star, sigma=spec.sigma, seed=spec.seed, spec=spec)


class _DatasetOracle(GradOracle):
    """Shared minibatch logic for finite-sum problems."""

    features: np.ndarray
    n: int

    def sample_minibatch(self, t, worker, batch_size):
        if batch_size >= self.n:
            return np.arange(self.n)
        rng = self._streams(worker, t)
        return np.sort(rng.choice(self.n, size=batch_size, replace=False))

    def exact_gradient(self, x):
        return self.gradient(x, np.arange(self.n))


class LogisticOracle(_DatasetOracle):
    """Mean of log(1 + exp(-y a'x)) over rows a with labels y in {-1, +1}.

    Smoothness: L = lambda_max(A'A/n)/4, which never exceeds max_i ||a_i||^2 / 4.
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray, seed: int = 0,
                 spec: Optional[ProblemSpec] = None):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64).reshape(-1)
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ProblemError("logistic labels must be -1 or +1")
        self.n, self.dim = self.features.shape
        self.seed = seed
        self._streams = StreamCache(seed)
        gram = self.features.T @ self.features / self.n
        self.L = float(np.linalg.eigvalsh(gram)[-1]) / 4.0
        self.L_rowbound = float(np.max(np.sum(self.features**2, axis=1))) / 4.0
        self.x0 = np.zeros(self.dim)
        self.partition = make_partition([self.dim])
        self.spec = spec or ProblemSpec(kind="logistic", dim=self.dim, n=self.n, seed=seed)

    def loss(self, x):
        z = self.labels * (self.features @ x)
        return float(np.mean(np.logaddexp(0.0, -z)))

    def gradient(self, x, idx):
        a = self.features[idx]
        y = self.labels[idx]
        s = _sigmoid(-y * (a @ x))
        return -(a.T @ (y * s)) / len(idx)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def make_logistic(n: int, dim: int, seed: int = 0, class_balance: float = 0.5, separation: float = 1.0):
    spec = ProblemSpec(kind="logistic", dim=dim, n=n, seed=seed, class_balance=class_balance,
                       separation=separation)
    return spec, _build_logistic(spec)


def logistic_data(spec: ProblemSpec) -> tuple[np.ndarray, np.ndarray]:
    """Two Gaussian classes at +/- separation along a random unit direction."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(2**31,)))
    direction = rng.standard_normal(spec.dim)
    direction /= np.linalg.norm(direction)
    y = np.where(rng.random(spec.n) < spec.class_balance, 1.0, -1.0)
    X = rng.standard_normal((spec.n, spec.dim)) + spec.separation * y[:, None] * direction
    return X, y


def _build_logistic(spec: ProblemSpec) -> LogisticOracle:
    if spec.data_path:
        X, Y = load_dataset(spec.data_path)
        return LogisticOracle(X, Y[:, 0], seed=spec.seed, spec=spec)
    X, y = logistic_data(spec)
    return LogisticOracle(X, y, seed=spec.seed, spec=spec)


class MLPOracle(_DatasetOracle):
    """tanh network with linear output and loss sum ||f(a) - y||^2 / (2n).

    Parameters are flattened layer by layer as (W_1, b_1, W_2, b_2, ...), each
    tensor forming one block of :attr:`partition`. ``L`` is a local estimate
    (twice the top Hessian eigenvalue at ``x0``), not a global bound.
    """

    def __init__(self, layer_sizes: Sequence[int], features: np.ndarray, targets: np.ndarray,
                 seed: int = 0, spec: Optional[ProblemSpec] = None):
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self.features = np.asarray(features, dtype=np.float64)
        self.targets = np.asarray(targets, dtype=np.float64).reshape(len(self.features), -1)
        self.n = self.features.shape[0]
        self.seed = seed
        self._streams = StreamCache(seed)
        self.shapes: list[tuple[int, ...]] = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            self.shapes += [(fan_out, fan_in), (fan_out,)]
        self.partition = make_partition([int(np.prod(s)) for s in self.shapes])
        self.dim = self.partition.dim
        if self.dim > 100_000:
            raise ProblemError(f"mlp has {self.dim} parameters; limit is 100000")
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2**31 + 1,)))
        parts = []
        for s in self.shapes:
            parts.append(rng.standard_normal(s).ravel() / np.sqrt(s[-1]) if len(s) == 2 else np.zeros(s))
        self.x0 = np.concatenate(parts)
        self.spec = spec or ProblemSpec(kind="mlp", dim=self.layer_sizes[0], n=self.n,
                                        hidden=self.layer_sizes[1:-1], outputs=self.layer_sizes[-1],
                                        seed=seed)
        self.L = 2.0 * self._top_hessian_eig(self.x0)

    def unflatten(self, x: np.ndarray) -> list[np.ndarray]:
        return [x[sl].reshape(s) for sl, s in zip(self.partition.slices(), self.shapes)]

    def _forward(self, x, a):
        params = self.unflatten(x)
        acts = [a]
        h = a
        n_layers = len(params) // 2
        for j in range(n_layers):
            W, b = params[2 * j], params[2 * j + 1]
            z = h @ W.T + b
            h = np.tanh(z) if j < n_layers - 1 else z
            acts.append(h)
        return params, acts

    def predict(self, x, a):
        return self._forward(x, a)[1][-1]

    def loss(self, x):
        r = self.predict(x, self.features) - self.targets
        return float(0.5 * np.sum(r * r) / self.n)

    def gradient(self, x, idx):
        a = self.features[idx]
        params, acts = self._forward(x, a)
        n_layers = len(params) // 2
        delta = (acts[-1] - self.targets[idx]) / len(idx)
        grads: list[np.ndarray] = [None] * len(params)
        for j in range(n_layers - 1, -1, -1):
            grads[2 * j] = delta.T @ acts[j]
            grads[2 * j + 1] = delta.sum(axis=0)
            if j > 0:
                delta = (delta @ params[2 * j]) * (1.0 - acts[j] ** 2)
        return np.concatenate([g.ravel() for g in grads])

    def _top_hessian_eig(self, x, iters: int = 30, h: float = 1e-5) -> float:
        rng = np.random.default_rng(0)
        v = rng.standard_normal(self.dim)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            hv = (self.exact_gradient(x + h * v) - self.exact_gradient(x - h * v)) / (2 * h)
            lam = float(np.linalg.norm(hv))
            if lam == 0.0:
                break
            v = hv / lam
        return max(lam, 1e-12)


def mlp_data(spec: ProblemSpec) -> tuple[np.ndarray, np.ndarray]:
    """Regression targets from a random tanh teacher plus small noise."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(2**31,)))
    X = rng.standard_normal((spec.n, spec.dim))
    W = rng.standard_normal((spec.hidden[0], spec.dim)) / np.sqrt(spec.dim)
    V = rng.standard_normal((spec.outputs, spec.hidden[0])) / np.sqrt(spec.hidden[0])
    Y = np.tanh(X @ W.T) @ V.T + 0.1 * rng.standard_normal((spec.n, spec.outputs))
    return X, Y


def make_mlp(layer_sizes: Sequence[int], n: int, seed: int = 0):
    sizes = tuple(layer_sizes)
    if len(sizes) < 3:
        raise ProblemError("layer_sizes needs input, at least one hidden layer, and output")
    spec = ProblemSpec(kind="mlp", dim=sizes[0], n=n, hidden=sizes[1:-1], outputs=sizes[-1], seed=seed)
    return spec, _build_mlp(spec)


def _build_mlp(spec: ProblemSpec) -> MLPOracle:
    sizes = (spec.dim, *spec.hidden, spec.outputs)
    if spec.data_path:
        X, Y = load_dataset(spec.data_path)
    else:
        X, Y = mlp_data(spec)
    return MLPOracle(sizes, X, Y, seed=spec.seed, spec=spec)


def make_problem(spec: ProblemSpec) -> GradOracle:
    if spec.kind == "quadratic":
        return _build_quadratic(spec)
    if spec.kind == "logistic":
        return _build_logistic(spec)
    return _build_mlp(spec)


def sample_minibatch(oracle: GradOracle, t: int, worker: int, batch_size: int):
    return oracle.sample_minibatch(t, worker, batch_size)


def save_dataset(path, features: np.ndarray, labels: np.ndarray) -> None:
    """Header (n, dim, label width) as little-endian u64, then row-major float64 rows [features | labels]."""
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(labels, dtype=np.float64).reshape(len(X), -1)
    rows = np.hstack([X, Y]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(X.shape[0], X.shape[1], Y.shape[1]))
        fh.write(rows.tobytes(order="C"))


def load_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ProblemError(f"{path}: truncated dataset header")
    n, dim, width = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 8 * n * (dim + width)
    if len(raw) != expected:
        raise ProblemError(f"{path}: expected {expected} bytes, found {len(raw)}")
    rows = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(n, dim + width)
    return rows[:, :dim].astype(np.float64), rows[:, dim:].astype(np.float64)
