"""Feed-forward velocity model with hand-written reverse-mode gradients.

The network maps (t, x) -> v(x) of the same dimension as x; time enters as
extra input columns (raw t by default, optionally quarter-period sin/cos
features). Parameter gradients, input Jacobian-vector products, exact and
stochastic divergences, and the Jacobian-penalty gradient are all computed
manually in double precision, so training never depends on an autodiff
framework and stays bit-reproducible.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError, NumericError
from .seeding import as_rng

ACTIVATIONS = ("relu", "elu")
TIME_FEATURES = ("raw", "sincos")

#: largest data dimension for which the exact divergence (d JVP passes) is
#: used by default; beyond it callers must opt into the stochastic estimator.
EXACT_TRACE_LIMIT = 64


@dataclass(frozen=True)
class MlpSpec:
    """Architecture description: data dim, hidden widths, activation, time features."""

    data_dim: int
    hidden: tuple
    activation: str = "relu"
    time_features: str = "raw"
    zero_init_final: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if self.data_dim < 1:
            raise ContractError("data_dim must be positive")
        if len(self.hidden) < 1:
            raise ContractError("at least one hidden layer is required")
        if any(w < 1 for w in self.hidden):
            raise ContractError("hidden widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"activation must be one of {ACTIVATIONS}")
        if self.time_features not in TIME_FEATURES:
            raise ContractError(f"time_features must be one of {TIME_FEATURES}")

    @property
    def n_time_features(self):
        return 1 if self.time_features == "raw" else 2

    @property
    def input_dim(self):
        return self.data_dim + self.n_time_features

    def layer_dims(self):
        return [self.input_dim, *self.hidden, self.data_dim]

    def to_dict(self):
        return {
            "data_dim": self.data_dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "time_features": self.time_features,
            "zero_init_final": self.zero_init_final,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            data_dim=int(d["data_dim"]),
            hidden=tuple(d["hidden"]),
            activation=d["activation"],
            time_features=d["time_features"],
            zero_init_final=bool(d.get("zero_init_final", True)),
        )


class MlpState:
    """Mutable parameter/optimizer state: weights, biases, Adam moments, step.

    Single-owner under mutation (adam_step); reads (forward, divergence) are
    pure and may run concurrently between updates.
    """

    def __init__(self, weights, biases, m_w=None, v_w=None, m_b=None, v_b=None, step=0, seed=0):
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.m_w = m_w if m_w is not None else [np.zeros_like(w) for w in self.weights]
        self.v_w = v_w if v_w is not None else [np.zeros_like(w) for w in self.weights]
        self.m_b = m_b if m_b is not None else [np.zeros_like(b) for b in self.biases]
        self.v_b = v_b if v_b is not None else [np.zeros_like(b) for b in self.biases]
        self.step = int(step)
        self.seed = int(seed)

    def n_layers(self):
        return len(self.weights)


@dataclass
class Gradients:
    """Per-layer parameter gradients (same shapes as weights/biases)."""

    weights: list
    biases: list

    @classmethod
    def zeros_like(cls, state):
        return cls([np.zeros_like(w) for w in state.weights], [np.zeros_like(b) for b in state.biases])

    def scaled(self, c):
        return Gradients([c * w for w in self.weights], [c * b for b in self.biases])

    def add_scaled(self, other, c=1.0):
        for a, b in zip(self.weights, other.weights):
            a += c * b
        for a, b in zip(self.biases, other.biases):
            a += c * b


def init_state(spec, seed):
    """Fan-in uniform initialization, biases zero; final layer zeroed when configured."""
    rng = as_rng(seed)
    dims = spec.layer_dims()
    weights, biases = [], []
    for li in range(len(dims) - 1):
        if spec.zero_init_final and li == len(dims) - 2:
            weights.append(np.zeros((dims[li], dims[li + 1])))
        else:
            bound = 1.0 / np.sqrt(dims[li])
            weights.append(rng.uniform(-bound, bound, size=(dims[li], dims[li + 1])))
        biases.append(np.zeros(dims[li + 1]))
    return MlpState(weights, biases, seed=int(seed) if not isinstance(seed, np.random.Generator) else 0)


def time_columns(spec, t, rows):
    """Time-feature columns, shape (rows, n_time_features)."""
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        t = np.full(rows, float(t))
    elif t.shape != (rows,):
        raise ContractError(f"t must be scalar or shape ({rows},), got {t.shape}")
    if spec.time_features == "raw":
        return t[:, None]
    half_pi = 0.5 * np.pi
    return np.stack([np.sin(half_pi * t), np.cos(half_pi * t)], axis=1)


def pack_inputs(spec, t, x):
    """Concatenate x with time features; rejects non-finite rows by index."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != spec.data_dim:
        raise ContractError(f"x must be (batch, {spec.data_dim}), got {x.shape}")
    bad = ~np.isfinite(x).all(axis=1)
    if bad.any():
        raise NumericError(f"non-finite input at batch index {int(np.argmax(bad))}")
    tc = time_columns(spec, t, x.shape[0])
    if not np.isfinite(tc).all():
        raise NumericError("non-finite time input")
    return np.concatenate([x, tc], axis=1)


def _act_inplace(activation, z):
    if activation == "relu":
        np.maximum(z, 0.0, out=z)
    else:  # elu: z -> z (z>0), exp(z)-1 (z<=0); masked to avoid exp overflow
        neg = z < 0.0
        z[neg] = np.expm1(z[neg])


def _act_deriv(activation, h):
    # derivative recovered from the activation output: relu h=max(z,0),
    # elu h=expm1(z) for z<0 so sigma'(z)=h+1 there
    if activation == "relu":
        return (h > 0.0).astype(float)
    return np.where(h > 0.0, 1.0, h + 1.0)


def _act_second_deriv(activation, h):
    if activation == "relu":
        return None  # identically zero a.e.
    return np.where(h > 0.0, 0.0, h + 1.0)


class Workspace:
    """Reusable forward/backward buffers for a fixed maximum row count."""

    def __init__(self, spec, rows):
        dims = spec.layer_dims()
        self.rows = rows
        self.X = np.empty((rows, dims[0]))
        self.H = [np.empty((rows, w)) for w in dims[1:]]
        self.D = [np.empty((rows, w)) for w in dims[1:]]


def forward_ws(spec, state, ws, m):
    """Forward pass over ws.X[:m]; activations cached in ws.H. Returns output view."""
    prev = ws.X[:m]
    n_layers = state.n_layers()
    for li, (W, b) in enumerate(zip(state.weights, state.biases)):
        out = ws.H[li][:m]
        np.matmul(prev, W, out=out)
        out += b
        if li < n_layers - 1:
            _act_inplace(spec.activation, out)
        prev = out
    return prev


def backward_ws(spec, state, ws, m, adjoint, grads):
    """Accumulate gradients of sum_b dot(adjoint_b, output_b) into ``grads``.

    Requires ws to hold the activations of the matching forward pass.
    """
    n_layers = state.n_layers()
    D = adjoint
    for li in reversed(range(n_layers)):
        inp = ws.X[:m] if li == 0 else ws.H[li - 1][:m]
        grads.weights[li] += inp.T @ D
        grads.biases[li] += D.sum(axis=0)
        if li > 0:
            nxt = ws.D[li - 1][:m]
            np.matmul(D, state.weights[li].T, out=nxt)
            nxt *= _act_deriv(spec.activation, ws.H[li - 1][:m])
            D = nxt


def forward(spec, state, t, x):
    """Velocity prediction for a batch, shape (batch, data_dim)."""
    X = pack_inputs(spec, t, x)
    ws = Workspace(spec, X.shape[0])
    ws.X[:] = X
    return forward_ws(spec, state, ws, X.shape[0]).copy()


def param_gradient(spec, state, t, x, adjoint):
    """Exact gradients of sum_b dot(adjoint_b, forward_b) w.r.t. all parameters."""
    X = pack_inputs(spec, t, x)
    adjoint = np.asarray(adjoint, dtype=float)
    if adjoint.shape != (X.shape[0], spec.data_dim):
        raise ContractError(f"adjoint must have shape {(X.shape[0], spec.data_dim)}, got {adjoint.shape}")
    ws = Workspace(spec, X.shape[0])
    ws.X[:] = X
    forward_ws(spec, state, ws, X.shape[0])
    grads = Gradients.zeros_like(state)
    backward_ws(spec, state, ws, X.shape[0], adjoint, grads)
    return grads


def _jvp_from_ws(spec, state, ws, m, tangent):
    """Input-tangent propagation using activations cached in ws (x-part tangent only)."""
    U = tangent
    n_layers = state.n_layers()
    for li, W in enumerate(state.weights):
        U = U @ W
        if li < n_layers - 1:
            U = U * _act_deriv(spec.activation, ws.H[li][:m])
    return U


def jvp(spec, state, t, x, x_tangent):
    """Jacobian-vector product d/de forward(t, x + e*x_tangent)."""
    X = pack_inputs(spec, t, x)
    x_tangent = np.asarray(x_tangent, dtype=float)
    if x_tangent.shape != (X.shape[0], spec.data_dim):
        raise ContractError("tangent shape must match the x batch")
    ws = Workspace(spec, X.shape[0])
    ws.X[:] = X
    forward_ws(spec, state, ws, X.shape[0])
    tang = np.concatenate([x_tangent, np.zeros((X.shape[0], spec.n_time_features))], axis=1)
    return _jvp_from_ws(spec, state, ws, X.shape[0], tang)


def _with_cached_forward(spec, state, t, x):
    X = pack_inputs(spec, t, x)
    ws = Workspace(spec, X.shape[0])
    ws.X[:] = X
    forward_ws(spec, state, ws, X.shape[0])
    return ws, X.shape[0]


def _unit_tangent(spec, m, i):
    tang = np.zeros((m, spec.input_dim))
    tang[:, i] = 1.0
    return tang


def divergence(spec, state, t, x, mode="exact", probes=16, seed=0, exact_limit=EXACT_TRACE_LIMIT):
    """Divergence of the velocity w.r.t. x for each batch point.

    Exact mode sums the d diagonal Jacobian entries via d tangent passes and
    requires d <= exact_limit. Estimator mode averages Rademacher-probe
    quadratic forms (Hutchinson); it is unbiased but stochastic.
    """
    d = spec.data_dim
    ws, m = _with_cached_forward(spec, state, t, x)
    if mode == "exact":
        if d > exact_limit:
            raise DomainError(f"exact divergence limited to d <= {exact_limit}; got {d}")
        out = np.zeros(m)
        for i in range(d):
            out += _jvp_from_ws(spec, state, ws, m, _unit_tangent(spec, m, i))[:, i]
        return out
    if mode == "hutchinson":
        if probes < 1:
            raise DomainError("hutchinson mode needs at least one probe")
        rng = as_rng(seed)
        acc = np.zeros(m)
        acc_sq = np.zeros(m)
        for _ in range(probes):
            eps = 2.0 * rng.integers(0, 2, size=(m, d)) - 1.0
            tang = np.concatenate([eps, np.zeros((m, spec.n_time_features))], axis=1)
            est = np.einsum("bd,bd->b", eps, _jvp_from_ws(spec, state, ws, m, tang))
            acc += est
            acc_sq += est * est
        mean = acc / probes
        if probes > 1:
            var = np.maximum(acc_sq / probes - mean * mean, 0.0) * probes / (probes - 1)
            return mean, np.sqrt(var / probes)
        return mean, np.zeros(m)
    raise ContractError(f"unknown divergence mode {mode!r}")


def jacobian_frobenius_sq(spec, state, t, x):
    """Squared Frobenius norm of the input Jacobian for each batch point."""
    ws, m = _with_cached_forward(spec, state, t, x)
    out = np.zeros(m)
    for i in range(spec.data_dim):
        cols = _jvp_from_ws(spec, state, ws, m, _unit_tangent(spec, m, i))
        out += np.einsum("bd,bd->b", cols, cols)
    return out


def penalty_value_and_gradients(spec, state, t, x):
    """Batch-mean squared Jacobian Frobenius norm and its parameter gradients.

    Forward-over-reverse: the tangent chain is differentiated w.r.t. the
    parameters including the activation-curvature coupling (zero a.e. for
    relu, the negative-branch exponential for elu).
    """
    X = pack_inputs(spec, t, x)
    m = X.shape[0]
    n_layers = state.n_layers()
    ws = Workspace(spec, m)
    ws.X[:] = X
    forward_ws(spec, state, ws, m)
    derivs = [_act_deriv(spec.activation, ws.H[li][:m]) for li in range(n_layers - 1)]
    second = [_act_second_deriv(spec.activation, ws.H[li][:m]) for li in range(n_layers - 1)]
    grads = Gradients.zeros_like(state)
    zbar = [np.zeros_like(ws.H[li][:m]) for li in range(n_layers - 1)]
    value = 0.0
    for i in range(spec.data_dim):
        tang = _unit_tangent(spec, m, i)
        T = [tang]  # post-activation tangents per layer input
        Tz = []     # pre-activation tangents
        U = tang
        for li, W in enumerate(state.weights):
            Uz = U @ W
            Tz.append(Uz)
            U = Uz * derivs[li] if li < n_layers - 1 else Uz
            T.append(U)
        value += float(np.einsum("bd,bd->", T[-1], T[-1]))
        ubar = (2.0 / m) * T[-1]
        for li in reversed(range(n_layers)):
            if li == n_layers - 1:
                tzbar = ubar
            else:
                tzbar = ubar * derivs[li]
                if second[li] is not None:
                    zbar[li] += ubar * second[li] * Tz[li]
            grads.weights[li] += T[li].T @ tzbar
            if li > 0:
                ubar = tzbar @ state.weights[li].T
    # primal reverse pass for the curvature coupling (no-op for relu)
    if any(z is not None and np.any(z) for z in zbar):
        A = None
        for li in reversed(range(n_layers - 1)):
            if A is None:
                A = zbar[li].copy()
            else:
                A = (A @ state.weights[li + 1].T) * derivs[li] + zbar[li]
            inp = ws.X[:m] if li == 0 else ws.H[li - 1][:m]
            grads.weights[li] += inp.T @ A
            grads.biases[li] += A.sum(axis=0)
    return value / m, grads


def adam_step(state, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update in place; rejects non-finite gradients untouched."""
    for g in (*grads.weights, *grads.biases):
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient; step rejected, state unchanged")
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, mom, vel in (
        *zip(state.weights, grads.weights, state.m_w, state.v_w),
        *zip(state.biases, grads.biases, state.m_b, state.v_b),
    ):
        mom *= beta1
        mom += (1.0 - beta1) * g
        vel *= beta2
        vel += (1.0 - beta2) * (g * g)
        p -= lr * (mom / c1) / (np.sqrt(vel / c2) + eps)
    state.step = t


CHECKPOINT_FORMAT = 1


def save_checkpoint(path, spec, state):
    """Write spec + all tensors + Adam moments + step/seed; round-trips bit-exactly."""
    arrays = {}
    for li in range(state.n_layers()):
        arrays[f"w{li}"] = state.weights[li]
        arrays[f"b{li}"] = state.biases[li]
        arrays[f"mw{li}"] = state.m_w[li]
        arrays[f"vw{li}"] = state.v_w[li]
        arrays[f"mb{li}"] = state.m_b[li]
        arrays[f"vb{li}"] = state.v_b[li]
    meta = {"format": CHECKPOINT_FORMAT, "spec": spec.to_dict(), "step": state.step, "seed": state.seed}
    np.savez(path, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    """Load (spec, state) from a checkpoint written by save_checkpoint."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ContractError(f"unsupported checkpoint format {meta.get('format')!r}")
        spec = MlpSpec.from_dict(meta["spec"])
        n_layers = len(spec.layer_dims()) - 1
        state = MlpState(
            weights=[data[f"w{li}"] for li in range(n_layers)],
            biases=[data[f"b{li}"] for li in range(n_layers)],
            m_w=[data[f"mw{li}"] for li in range(n_layers)],
            v_w=[data[f"vw{li}"] for li in range(n_layers)],
            m_b=[data[f"mb{li}"] for li in range(n_layers)],
            v_b=[data[f"vb{li}"] for li in range(n_layers)],
            step=meta["step"],
            seed=meta["seed"],
        )
    return spec, state


class ModelVelocityField:
    """Callable (t, x) -> v adapter around (spec, state), with divergence support."""

    def __init__(self, spec, state, divergence_mode="exact", probes=16, probe_seed=0, exact_limit=EXACT_TRACE_LIMIT):
        self.spec = spec
        self.state = state
        self.dim = spec.data_dim
        self.divergence_mode = divergence_mode
        self.probes = probes
        self.probe_seed = probe_seed
        self.exact_limit = exact_limit

    def __call__(self, t, x):
        return forward(self.spec, self.state, t, x)

    def divergence(self, t, x):
        out = divergence(
            self.spec, self.state, t, x,
            mode=self.divergence_mode, probes=self.probes, seed=self.probe_seed,
            exact_limit=self.exact_limit,
        )
        return out[0] if isinstance(out, tuple) else out

    def jac_frobenius_sq(self, t, x):
        return jacobian_frobenius_sq(self.spec, self.state, t, x)
