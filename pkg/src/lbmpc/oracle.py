"""Uncertainty estimators: adaptive neural oracle, L2NW kernel baseline, zero.

The neural oracle is a feed-forward stack with a bounded (tanh) last hidden
layer.  Its output layer is adapted in real time by a projection-based update
that keeps every weight column inside a known norm ball; the hidden stack is
retrained separately on buffered data with the output layer frozen, and
swapped in whole generations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np


class OracleError(Exception):
    pass


class InsufficientData(OracleError):
    """Replay buffer holds fewer samples than the requested batch."""


class ShapeMismatch(OracleError):
    """Hidden-stack snapshot does not match the architecture."""


@dataclass(frozen=True)
class NetworkArch:
    """Feed-forward layout: input (d+m) -> hidden widths -> output d.

    The last hidden activation must be bounded; tanh is used throughout so
    every feature component lies in [-1, 1].
    """

    n_in: int
    hidden: Tuple[int, ...]
    n_out: int

    def __post_init__(self):
        if len(self.hidden) < 1:
            raise ValueError("need at least one hidden layer")
        if min(self.hidden) < 1 or self.n_in < 1 or self.n_out < 1:
            raise ValueError("layer widths must be positive")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))

    @property
    def n_last(self) -> int:
        return self.hidden[-1]

    @property
    def feature_dim(self) -> int:
        # constant bias element plus the last hidden layer
        return self.n_last + 1

    @property
    def sigma(self) -> float:
        """Uniform bound on the feature norm (attained by saturated tanh)."""
        return math.sqrt(self.feature_dim)


HiddenStack = List[Tuple[np.ndarray, np.ndarray]]


def init_hidden(arch: NetworkArch, seed: int) -> HiddenStack:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    widths = (arch.n_in,) + arch.hidden
    stack = []
    for n_a, n_b in zip(widths[:-1], widths[1:]):
        bound = 1.0 / math.sqrt(n_a)
        W = rng.uniform(-bound, bound, size=(n_a, n_b))
        stack.append((W, np.zeros(n_b)))
    return stack


def _forward_hidden(hidden: HiddenStack, xu: np.ndarray):
    """tanh forward pass; returns activations per layer (input first)."""
    acts = [xu]
    a = xu
    for W, b in hidden:
        a = np.tanh(a @ W + b)
        acts.append(a)
    return acts


@dataclass(frozen=True)
class OracleState:
    """Live network value: hidden stack, adapted output layer, bounds.

    ``K`` is (n_last+1) x d with the first row acting on the constant
    feature; column i never exceeds norm ``W_bar[i]``.  ``generation``
    counts hidden-stack swaps.
    """

    arch: NetworkArch
    hidden: HiddenStack
    K: np.ndarray
    W_bar: np.ndarray
    gamma: float
    generation: int = 0

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        W_bar = np.asarray(self.W_bar, dtype=float).reshape(-1)
        if K.shape != (self.arch.feature_dim, self.arch.n_out):
            raise ShapeMismatch("K must be (n_last+1) x d")
        if W_bar.shape != (self.arch.n_out,):
            raise ShapeMismatch("one column bound per output")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("learning rate must be in (0, 1)")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "W_bar", W_bar)

    @property
    def sigma(self) -> float:
        return self.arch.sigma


def new_oracle(arch: NetworkArch, W_bar, gamma: float, seed: int = 0) -> OracleState:
    """Fresh oracle with seeded hidden weights and K = 0 (inside any bound)."""
    return OracleState(arch=arch, hidden=init_hidden(arch, seed),
                       K=np.zeros((arch.feature_dim, arch.n_out)),
                       W_bar=np.asarray(W_bar, dtype=float), gamma=gamma)


def features(state: OracleState, x, u) -> np.ndarray:
    """Bounded feature vector phi(x, u) with leading constant 1."""
    xu = np.concatenate([np.atleast_1d(np.asarray(x, dtype=float)).reshape(-1),
                         np.atleast_1d(np.asarray(u, dtype=float)).reshape(-1)])
    a = _forward_hidden(state.hidden, xu)[-1]
    return np.concatenate([[1.0], a])


def predict(state: OracleState, x, u) -> np.ndarray:
    """Oracle output K' phi(x, u); uniformly bounded by sigma * sum W_bar."""
    return features(state, x, u) @ state.K


def predict_from_features(state: OracleState, phi: np.ndarray) -> np.ndarray:
    return phi @ state.K


def input_jacobian(state: OracleState, x, u):
    """d(K'phi)/d(x,u) split into (d/dx, d/du) via the tanh chain rule."""
    _, Jx, Ju = predict_and_jacobian(state, x, u)
    return Jx, Ju


def predict_and_jacobian(state: OracleState, x, u):
    """(h, dh/dx, dh/du) from a single forward pass (hot path of the SQP)."""
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(-1)
    u = np.atleast_1d(np.asarray(u, dtype=float)).reshape(-1)
    xu = np.concatenate([x, u])
    acts = _forward_hidden(state.hidden, xu)
    J = None
    for (W, _), a_out in zip(state.hidden, acts[1:]):
        layer = (1.0 - a_out ** 2)[:, None] * W.T
        J = layer if J is None else layer @ J
    if J is None:
        J = np.eye(xu.size)
    h = state.K[0] + acts[-1] @ state.K[1:]
    # bias feature contributes nothing; K rows 1.. act on the hidden output
    Jh = state.K[1:, :].T @ J
    return h, Jh[:, :x.size], Jh[:, x.size:]


def project_columns(K_bar: np.ndarray, W_bar: np.ndarray) -> np.ndarray:
    """Radially rescale any column whose norm exceeds its bound."""
    K = K_bar.copy()
    norms = np.linalg.norm(K, axis=0)
    for i, (n, bound) in enumerate(zip(norms, W_bar)):
        if n > bound:
            K[:, i] *= bound / n
    return K


def adapt(state: OracleState, x_t, u_t, x_next, model,
          phi: Optional[np.ndarray] = None) -> OracleState:
    """One projection-based output-layer update from the realized next state.

    The prediction error is xtilde = (A x + B u + K'phi) - x_next; the raw
    update K - gamma * phi xtilde' / |phi|^2 is projected column-wise back
    onto the norm bounds.  ``phi`` should be the cached feature vector of the
    generation that produced u_t; it is recomputed if omitted.
    """
    x_t = np.asarray(x_t, dtype=float).reshape(-1)
    u_vec = np.atleast_1d(np.asarray(u_t, dtype=float)).reshape(-1)
    x_next = np.asarray(x_next, dtype=float).reshape(-1)
    if phi is None:
        phi = features(state, x_t, u_vec)
    x_hat = model.A @ x_t + model.B @ u_vec + phi @ state.K
    x_tilde = x_hat - x_next
    K_bar = state.K - state.gamma * np.outer(phi, x_tilde) / float(phi @ phi)
    K_new = project_columns(K_bar, state.W_bar)
    return replace(state, K=K_new)


def lyapunov_Va(state: OracleState, W_star: np.ndarray) -> float:
    """(1/gamma) * ||K - W*||_F^2, the adaptation Lyapunov function."""
    diff = state.K - np.asarray(W_star, dtype=float)
    return float(np.sum(diff * diff) / state.gamma)


def swap_hidden(state: OracleState, new_hidden: HiddenStack) -> OracleState:
    """Atomically install a retrained hidden stack; K is untouched."""
    if len(new_hidden) != len(state.hidden):
        raise ShapeMismatch("hidden stack depth changed")
    for (W_old, b_old), (W_new, b_new) in zip(state.hidden, new_hidden):
        if W_old.shape != W_new.shape or b_old.shape != b_new.shape:
            raise ShapeMismatch("hidden layer shape changed")
    copied = [(W.copy(), b.copy()) for W, b in new_hidden]
    return replace(state, hidden=copied, generation=state.generation + 1)


# ---------------------------------------------------------------------------
# replay buffer


@dataclass
class ReplayBuffer:
    """Bounded store of ((x, u), h) training pairs.

    Write policies once full: 'fifo' overwrites the oldest entry;
    'diversity' evicts the stored entry closest to the newcomer, but only if
    doing so increases the minimum pairwise input distance, otherwise falls
    back to FIFO.
    """

    capacity: int
    policy: str = "fifo"
    inputs: List[np.ndarray] = field(default_factory=list)
    labels: List[np.ndarray] = field(default_factory=list)
    _oldest: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        if self.policy not in ("fifo", "diversity"):
            raise ValueError("unknown write policy %r" % self.policy)

    def __len__(self):
        return len(self.inputs)

    def push(self, xu, h):
        xu = np.asarray(xu, dtype=float).reshape(-1)
        h = np.asarray(h, dtype=float).reshape(-1)
        if not (np.all(np.isfinite(xu)) and np.all(np.isfinite(h))):
            raise ValueError("non-finite sample")
        if len(self.inputs) < self.capacity:
            self.inputs.append(xu)
            self.labels.append(h)
            return
        idx = self._oldest
        if self.policy == "diversity":
            div_idx = self._diversity_slot(xu)
            if div_idx is not None:
                idx = div_idx
        self.inputs[idx] = xu
        self.labels[idx] = h
        if idx == self._oldest:
            self._oldest = (self._oldest + 1) % self.capacity

    def _diversity_slot(self, xu) -> Optional[int]:
        X = np.stack(self.inputs)
        d2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        current_min = d2.min()
        nearest = int(np.argmin(np.sum((X - xu) ** 2, axis=-1)))
        X2 = X.copy()
        X2[nearest] = xu
        d2b = np.sum((X2[:, None, :] - X2[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2b, np.inf)
        if d2b.min() > current_min:
            return nearest
        return None

    def sample(self, M: int, rng: np.random.Generator):
        if len(self.inputs) < M:
            raise InsufficientData("buffer holds %d < %d samples" % (len(self.inputs), M))
        idx = rng.choice(len(self.inputs), size=M, replace=False)
        return np.stack([self.inputs[i] for i in idx]), np.stack([self.labels[i] for i in idx])

    def to_csv(self) -> str:
        if not self.inputs:
            return "\n"
        n_in = self.inputs[0].size
        n_lab = self.labels[0].size
        header = ",".join(["xu%d" % i for i in range(n_in)]
                          + ["h%d" % i for i in range(n_lab)])
        lines = [header]
        for xu, h in zip(self.inputs, self.labels):
            lines.append(",".join("%.17g" % v for v in np.concatenate([xu, h])))
        return "\n".join(lines) + "\n"


def buffer_push(buf: ReplayBuffer, xu, h) -> ReplayBuffer:
    buf.push(xu, h)
    return buf


# ---------------------------------------------------------------------------
# hidden-stack training


def batch_loss(hidden: HiddenStack, K: np.ndarray, X: np.ndarray, H: np.ndarray) -> float:
    """Mean squared error of K'phi against labels over a batch."""
    a = X
    for W, b in hidden:
        a = np.tanh(a @ W + b)
    pred = K[0] + a @ K[1:]
    r = pred - H
    return float(np.mean(np.sum(r * r, axis=1)))


def batch_gradients(hidden: HiddenStack, K: np.ndarray, X: np.ndarray, H: np.ndarray):
    """Reverse-mode gradients of the batch loss w.r.t. the hidden stack."""
    acts = [X]
    a = X
    for W, b in hidden:
        a = np.tanh(a @ W + b)
        acts.append(a)
    M = X.shape[0]
    r = (K[0] + acts[-1] @ K[1:]) - H
    loss = float(np.mean(np.sum(r * r, axis=1)))
    da = (2.0 / M) * (r @ K[1:].T)
    grads = [None] * len(hidden)
    for layer in range(len(hidden) - 1, -1, -1):
        a_out = acts[layer + 1]
        dz = da * (1.0 - a_out ** 2)
        grads[layer] = (acts[layer].T @ dz, dz.sum(axis=0))
        da = dz @ hidden[layer][0].T
    return grads, loss


def train_hidden(state: OracleState, buf: ReplayBuffer, M: int, epochs: int,
                 lr: float = 0.001, seed: int = 0, momentum: float = 0.0):
    """Gradient descent on the hidden stack with the output layer frozen.

    Draws one batch of M samples from the buffer (seeded), runs ``epochs``
    full-batch descent steps and returns ``(hidden, loss)`` for the best
    iterate seen, so the returned batch loss never exceeds the initial one.
    """
    rng = np.random.default_rng(seed)
    X, H = buf.sample(M, rng)
    hidden = [(W.copy(), b.copy()) for W, b in state.hidden]
    best = ([(W.copy(), b.copy()) for W, b in hidden],
            batch_loss(hidden, state.K, X, H))
    vel = [(np.zeros_like(W), np.zeros_like(b)) for W, b in hidden]
    for _ in range(epochs):
        grads, _ = batch_gradients(hidden, state.K, X, H)
        for i, ((W, b), (gW, gb), (vW, vb)) in enumerate(zip(hidden, grads, vel)):
            vW = momentum * vW - lr * gW
            vb = momentum * vb - lr * gb
            hidden[i] = (W + vW, b + vb)
            vel[i] = (vW, vb)
        loss = batch_loss(hidden, state.K, X, H)
        if loss < best[1]:
            best = ([(W.copy(), b.copy()) for W, b in hidden], loss)
    return best


# ---------------------------------------------------------------------------
# L2NW baseline


@dataclass
class L2nwEstimator:
    """Regularized Nadaraya-Watson regressor over a fixed-size buffer.

    Slots start masked out; masked entries contribute exactly zero kernel
    weight, so the pre-allocated buffer never biases the estimate.
    """

    capacity: int
    n_in: int
    n_out: int
    bandwidth: float
    lam: float = 1e-6

    def __post_init__(self):
        if self.bandwidth <= 0.0 or self.lam <= 0.0:
            raise ValueError("bandwidth and lambda must be positive")
        self.X = np.zeros((self.capacity, self.n_in))
        self.H = np.zeros((self.capacity, self.n_out))
        self.valid = np.zeros(self.capacity, dtype=bool)
        self._next = 0

    @property
    def count(self) -> int:
        return int(self.valid.sum())

    def push(self, xu, h):
        self.X[self._next] = np.asarray(xu, dtype=float).reshape(-1)
        self.H[self._next] = np.asarray(h, dtype=float).reshape(-1)
        self.valid[self._next] = True
        self._next = (self._next + 1) % self.capacity


def _l2nw_weights(est: L2nwEstimator, q: np.ndarray):
    if not est.valid.any():
        return None, None
    X = est.X[est.valid]
    H = est.H[est.valid]
    d2 = np.sum((X - q) ** 2, axis=1)
    k = np.exp(-d2 / (2.0 * est.bandwidth ** 2))
    return k, (X, H)


def l2nw_predict(est: L2nwEstimator, x, u) -> np.ndarray:
    """Kernel-weighted label average sum(k h) / (lambda + sum(k))."""
    q = np.concatenate([np.atleast_1d(np.asarray(x, dtype=float)).reshape(-1),
                        np.atleast_1d(np.asarray(u, dtype=float)).reshape(-1)])
    k, data = _l2nw_weights(est, q)
    if k is None:
        return np.zeros(est.n_out)
    _, H = data
    return (k @ H) / (est.lam + k.sum())


def l2nw_jacobian(est: L2nwEstimator, x, u):
    """Analytic input Jacobian of the regularized kernel estimate."""
    _, Jx, Ju = l2nw_predict_and_jacobian(est, x, u)
    return Jx, Ju


def l2nw_predict_and_jacobian(est: L2nwEstimator, x, u):
    """(h, dh/dx, dh/du) sharing one kernel evaluation."""
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(-1)
    u = np.atleast_1d(np.asarray(u, dtype=float)).reshape(-1)
    q = np.concatenate([x, u])
    k, data = _l2nw_weights(est, q)
    if k is None:
        return (np.zeros(est.n_out), np.zeros((est.n_out, x.size)),
                np.zeros((est.n_out, u.size)))
    X, H = data
    s = est.lam + k.sum()
    num = k @ H
    # dk_i/dq = k_i (x_i - q) / bw^2
    dk = k[:, None] * (X - q) / est.bandwidth ** 2
    J = (H.T @ dk) / s - np.outer(num, dk.sum(axis=0)) / s ** 2
    return num / s, J[:, :x.size], J[:, x.size:]


# ---------------------------------------------------------------------------
# weight snapshot serialization


def hidden_to_text(hidden: HiddenStack) -> str:
    """Flat text snapshot: 'layer rows cols' header then row-major values."""
    lines = []
    for i, (W, b) in enumerate(hidden):
        lines.append("layer %d %d %d" % (i, W.shape[0], W.shape[1]))
        for row in W:
            lines.append(" ".join("%.17g" % v for v in row))
        lines.append("bias " + " ".join("%.17g" % v for v in b))
    return "\n".join(lines) + "\n"


def hidden_from_text(text: str) -> HiddenStack:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    stack: HiddenStack = []
    i = 0
    while i < len(lines):
        tag, _, rows, cols = lines[i].split()
        if tag != "layer":
            raise ValueError("expected layer header, got %r" % lines[i])
        rows, cols = int(rows), int(cols)
        W = np.array([[float(v) for v in lines[i + 1 + r].split()] for r in range(rows)])
        bias_line = lines[i + 1 + rows].split()
        if bias_line[0] != "bias":
            raise ValueError("expected bias line")
        b = np.array([float(v) for v in bias_line[1:]])
        if W.shape != (rows, cols) or b.shape != (cols,):
            raise ValueError("snapshot shape mismatch")
        stack.append((W, b))
        i += rows + 2
    return stack
