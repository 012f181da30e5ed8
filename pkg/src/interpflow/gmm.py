"""Analytic Gaussian-mixture oracle.

When the base and target densities are Gaussian mixtures and the path is a
linear two-endpoint interpolation, the time-t density is itself a mixture
over endpoint-component pairs with means ``a_t m0_i + b_t m1_j`` and
covariances ``a_t^2 C0_i + b_t^2 C1_j``. Everything a learned velocity
field is supposed to reproduce (density, current, velocity, score,
divergence, objective values) is available here in closed form.

All mixture math runs in log space with max-shift normalization so that
far-tail evaluations neither overflow nor produce NaNs.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError
from .interpolant import interpolate
from .seeding import as_rng

LOG_2PI = float(np.log(2.0 * np.pi))

#: largest pair count for which per-sample responsibilities are materialized
#: in one block; larger products are streamed over pair blocks.
PAIR_BLOCK = 10_000


def _as_spd(cov, dim, label):
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (dim, dim):
        raise ContractError(f"{label}: covariance must be {dim}x{dim}, got {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
        raise ContractError(f"{label}: covariance is not symmetric")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ContractError(f"{label}: covariance is not positive definite") from None
    return cov, chol


class GaussianMixture:
    """Finite Gaussian mixture with full covariances.

    Weights must be positive and sum to one (tolerance 1e-12); every
    covariance is factorized (Cholesky) once at construction, which is also
    the SPD check. Instances are immutable in practice: no method mutates
    the stored arrays.
    """

    def __init__(self, weights, means, covariances):
        weights = np.asarray(weights, dtype=float)
        means = np.asarray(means, dtype=float)
        if means.ndim != 2:
            raise ContractError("means must be a (components, dim) array")
        n, d = means.shape
        if weights.shape != (n,):
            raise ContractError(f"weights must have shape ({n},), got {weights.shape}")
        if np.any(weights <= 0):
            raise ContractError("mixture weights must all be positive")
        if abs(float(weights.sum()) - 1.0) > 1e-12:
            raise ContractError(f"mixture weights must sum to 1 (got {weights.sum()!r})")
        covs = np.empty((n, d, d))
        chols = np.empty((n, d, d))
        for i in range(n):
            covs[i], chols[i] = _as_spd(np.asarray(covariances[i]), d, f"component {i}")
        self.weights = weights
        self.means = means
        self.covariances = covs
        self._chol = chols
        self._log_weights = np.log(weights)
        self._logdet = 2.0 * np.log(np.diagonal(chols, axis1=1, axis2=2)).sum(axis=1)
        self._chol_inv = np.linalg.inv(chols)
        self._cov_inv = np.einsum("nji,njk->nik", self._chol_inv, self._chol_inv)

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.means.shape[0]

    @classmethod
    def isotropic(cls, weights, means, variances):
        """Mixture with covariances ``variances[i] * I``."""
        means = np.asarray(means, dtype=float)
        d = means.shape[1]
        covs = [float(v) * np.eye(d) for v in np.atleast_1d(variances)]
        if len(covs) == 1:
            covs = covs * means.shape[0]
        return cls(weights, means, covs)

    @classmethod
    def single(cls, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls([1.0], mean[None, :], [np.atleast_2d(cov)])

    def _check_points(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[-1] != self.dim:
            raise ContractError(f"points have dimension {x.shape[-1]}, mixture has {self.dim}")
        return x

    def _component_logpdfs(self, x):
        # (B, n): log N(x | m_i, C_i) via cached Cholesky factors
        diff = x[:, None, :] - self.means[None, :, :]
        z = np.einsum("nij,bnj->bni", self._chol_inv, diff)
        quad = np.einsum("bni,bni->bn", z, z)
        return -0.5 * (quad + self._logdet[None, :] + self.dim * LOG_2PI)

    def logpdf(self, x):
        """Log density, shape (B,) for a (B, d) batch (scalar for a single point)."""
        x1 = self._check_points(x)
        lp = self._log_weights[None, :] + self._component_logpdfs(x1)
        m = lp.max(axis=1)
        out = m + np.log(np.exp(lp - m[:, None]).sum(axis=1))
        return out if np.asarray(x).ndim == 2 else float(out[0])

    def pdf(self, x):
        """Density (computed in log space; underflows to 0.0 in far tails)."""
        return np.exp(self.logpdf(x))

    def score(self, x):
        """Gradient of log density, shape (B, d)."""
        x1 = self._check_points(x)
        lp = self._log_weights[None, :] + self._component_logpdfs(x1)
        r = np.exp(lp - lp.max(axis=1, keepdims=True))
        r /= r.sum(axis=1, keepdims=True)
        diff = x1[:, None, :] - self.means[None, :, :]
        grads = -np.einsum("nij,bnj->bni", self._cov_inv, diff)
        out = np.einsum("bn,bnd->bd", r, grads)
        return out if np.asarray(x).ndim == 2 else out[0]

    def mean(self):
        """Mixture mean, shape (d,)."""
        return self.weights @ self.means

    def sample(self, n, seed):
        """Draw n points; deterministic for a fixed seed."""
        if n < 0:
            raise DomainError("sample count must be nonnegative")
        rng = as_rng(seed)
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("bij,bj->bi", self._chol[comp], z)

    def to_dict(self):
        return {
            "components": [
                {"weight": float(w), "mean": m.tolist(), "cov": c.tolist()}
                for w, m, c in zip(self.weights, self.means, self.covariances)
            ]
        }

    @classmethod
    def from_dict(cls, spec):
        comps = spec["components"]
        weights = [c["weight"] for c in comps]
        means = [c["mean"] for c in comps]
        covs = []
        for c in comps:
            cov = c["cov"]
            if isinstance(cov, dict):
                if set(cov) != {"isotropic"}:
                    raise ContractError(f"covariance dict must be {{'isotropic': var}}, got {sorted(cov)}")
                covs.append(float(cov["isotropic"]) * np.eye(len(c["mean"])))
            else:
                covs.append(np.asarray(cov, dtype=float))
        return cls(weights, means, covs)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def mixture_density(gmm, x):
    """Density of a mixture at x (log-space internals)."""
    return gmm.pdf(x)


@dataclass(frozen=True)
class AffineMap:
    """Map ``x -> scale * x + offset`` (endpoint velocity fields are affine)."""

    scale: float
    offset: np.ndarray

    def __call__(self, x):
        return self.scale * np.asarray(x, dtype=float) + self.offset


class MixturePath:
    """Interpolation path between two Gaussian mixtures under a linear schedule.

    Immutable; all evaluations are pure. ``t`` arguments may be scalars or
    per-sample arrays matching the batch length.
    """

    def __init__(self, base, target, schedule):
        if base.dim != target.dim:
            raise ContractError(f"base dimension {base.dim} != target dimension {target.dim}")
        self.base = base
        self.target = target
        self.schedule = schedule
        self.dim = base.dim
        lw = base._log_weights[:, None] + target._log_weights[None, :]
        self._log_pair_weights = lw.reshape(-1)  # (P,)
        self._n_pairs = self._log_pair_weights.size

    def _coeffs(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise DomainError("path time must lie in [0, 1]")
        s = self.schedule
        return (
            np.asarray(s.a(t), dtype=float),
            np.asarray(s.b(t), dtype=float),
            np.asarray(s.a_dot(t), dtype=float),
            np.asarray(s.b_dot(t), dtype=float),
        )

    def _pair_params(self, t, pair_slice=slice(None)):
        """Pairwise path parameters at time(s) t for a block of pairs.

        Returns (m, md, C, Cd) with pair axis flattened; a leading time axis
        is present iff t is an array.
        """
        a, b, ad, bd = self._coeffs(t)
        d = self.dim
        m0 = np.repeat(self.base.means, self.target.n_components, axis=0)[pair_slice]
        m1 = np.tile(self.target.means, (self.base.n_components, 1))[pair_slice]
        C0 = np.repeat(self.base.covariances, self.target.n_components, axis=0)[pair_slice]
        C1 = np.tile(self.target.covariances, (self.base.n_components, 1, 1))[pair_slice]
        if np.ndim(a) == 0:
            m = a * m0 + b * m1
            md = ad * m0 + bd * m1
            C = a * a * C0 + b * b * C1
            Cd = 2 * a * ad * C0 + 2 * b * bd * C1
        else:
            m = a.reshape(-1, 1, 1) * m0[None] + b.reshape(-1, 1, 1) * m1[None]
            md = ad.reshape(-1, 1, 1) * m0[None] + bd.reshape(-1, 1, 1) * m1[None]
            C = (a * a).reshape(-1, 1, 1, 1) * C0[None] + (b * b).reshape(-1, 1, 1, 1) * C1[None]
            Cd = (2 * a * ad).reshape(-1, 1, 1, 1) * C0[None] + (2 * b * bd).reshape(-1, 1, 1, 1) * C1[None]
        return m, md, C, Cd

    def _block_terms(self, t, x, pair_slice, want_div):
        """Per-pair log weights and component quantities for one pair block.

        Returns (L, u, q, tq) where L = log(p_ij N_ij) has shape (B, Pb),
        u is the per-pair transport direction, q = C^{-1}(x - m), and
        tq = trace(Cd C^{-1}) - q . u (divergence integrand; None unless
        requested).
        """
        d = self.dim
        m, md, C, Cd = self._pair_params(t, pair_slice)
        if np.ndim(np.asarray(t)) == 0:
            # add a broadcastable batch axis so both t layouts share one path
            m, md, C, Cd = m[None], md[None], C[None], Cd[None]
        diff = x[:, None, :] - m  # (B, Pb, d)
        q = np.linalg.solve(C, diff[..., None])[..., 0]
        quad = np.einsum("bpi,bpi->bp", diff, q)
        _, logdet = np.linalg.slogdet(C)
        L = self._log_pair_weights[pair_slice][None, :] - 0.5 * (quad + logdet + d * LOG_2PI)
        u = md + (Cd @ q[..., None])[..., 0]
        tq = None
        if want_div:
            tr = np.trace(np.linalg.solve(C, Cd), axis1=-2, axis2=-1)
            tq = tr - np.einsum("bpi,bpi->bp", q, u)
        return L, u, q, tq

    def _eval(self, t, x, want=("logrho",), pair_block=PAIR_BLOCK, sample_block=None):
        """Shared evaluation core; streams over pair blocks and sample chunks."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[-1] != self.dim:
            raise ContractError(f"points have dimension {x.shape[-1]}, path has {self.dim}")
        B = x.shape[0]
        t_arr = np.asarray(t, dtype=float)
        if t_arr.ndim not in (0, 1):
            raise ContractError("t must be a scalar or a 1-d array")
        if t_arr.ndim == 1 and t_arr.shape[0] != B:
            raise ContractError(f"per-sample t has length {t_arr.shape[0]}, batch has {B}")
        want_div = "divergence" in want
        P, d = self._n_pairs, self.dim
        if sample_block is None:
            # keep the (chunk, pairs, d, d) workspace around 2^21 doubles
            sample_block = max(1, int(2_097_152 / max(1, min(P, pair_block) * d * d)))

        out_logrho = np.empty(B)
        out_num_u = np.empty((B, d))   # responsibility-weighted sums (unnormalized)
        out_num_q = np.empty((B, d))
        out_num_tq = np.empty(B)

        for s0 in range(0, B, sample_block):
            sl = slice(s0, min(s0 + sample_block, B))
            xc = x[sl]
            tc = t_arr if t_arr.ndim == 0 else t_arr[sl]
            nB = xc.shape[0]
            run_max = np.full(nB, -np.inf)
            S0 = np.zeros(nB)
            Su = np.zeros((nB, d))
            Sq = np.zeros((nB, d))
            Stq = np.zeros(nB)
            for p0 in range(0, P, pair_block):
                ps = slice(p0, min(p0 + pair_block, P))
                L, u, q, tq = self._block_terms(tc, xc, ps, want_div)
                blk_max = L.max(axis=1)
                new_max = np.maximum(run_max, blk_max)
                rescale = np.exp(run_max - new_max)
                rescale[~np.isfinite(rescale)] = 0.0
                w = np.exp(L - new_max[:, None])
                S0 = S0 * rescale + w.sum(axis=1)
                Su = Su * rescale[:, None] + np.einsum("bp,bpd->bd", w, u)
                Sq = Sq * rescale[:, None] + np.einsum("bp,bpd->bd", w, q)
                if want_div:
                    Stq = Stq * rescale + np.einsum("bp,bp->b", w, tq)
                run_max = new_max
            out_logrho[sl] = run_max + np.log(S0)
            out_num_u[sl] = Su / S0[:, None]
            out_num_q[sl] = Sq / S0[:, None]
            if want_div:
                out_num_tq[sl] = Stq / S0

        res = {}
        if "logrho" in want or "density" in want or "current" in want:
            res["logrho"] = out_logrho
        if "velocity" in want or "current" in want:
            res["velocity"] = out_num_u
        if "score" in want:
            res["score"] = -out_num_q
        if want_div:
            res["divergence"] = out_num_tq + np.einsum("bd,bd->b", out_num_u, out_num_q)
        return res

    def log_density(self, t, x):
        return self._eval(t, x, want=("logrho",))["logrho"]

    def density(self, t, x):
        return np.exp(self.log_density(t, x))

    def velocity(self, t, x):
        """Transport velocity (responsibility-weighted pair directions)."""
        return self._eval(t, x, want=("velocity",))["velocity"]

    def current(self, t, x):
        """Probability current; equals velocity * density pointwise."""
        res = self._eval(t, x, want=("current",))
        return res["velocity"] * np.exp(res["logrho"])[:, None]

    def score(self, t, x):
        """Gradient of the log path density."""
        return self._eval(t, x, want=("score",))["score"]

    def velocity_divergence(self, t, x):
        """Spatial divergence of the velocity field (closed form)."""
        return self._eval(t, x, want=("velocity", "divergence"))["divergence"]

    def endpoint_velocities(self):
        """Affine velocity fields at t=0 and t=1.

        v0(x) = a_dot(0) x + b_dot(0) E[target], v1(x) = b_dot(1) x + a_dot(1) E[base].
        """
        a0 = float(self.schedule.a_dot(0.0))
        b0 = float(self.schedule.b_dot(0.0))
        a1 = float(self.schedule.a_dot(1.0))
        b1 = float(self.schedule.b_dot(1.0))
        v0 = AffineMap(scale=a0, offset=b0 * self.target.mean())
        v1 = AffineMap(scale=b1, offset=a1 * self.base.mean())
        return v0, v1

    def sample_state(self, n, seed):
        """Draw (x0, x1, t) triples and the interpolated points (t uniform)."""
        rng = as_rng(seed)
        x0 = self.base.sample(n, rng)
        x1 = self.target.sample(n, rng)
        t = rng.uniform(0.0, 1.0, n)
        return x0, x1, t, interpolate(self.schedule, t, x0, x1)

    def exact_H(self, candidate, mc_samples, seed, chunk=65_536):
        """Monte Carlo distance-to-oracle objective for a candidate field.

        Estimates the mean squared deviation between the candidate velocity
        and the oracle velocity along the path, with (x0, x1) drawn from the
        endpoint mixtures and t uniform. Returns (mean, standard error).
        """
        if mc_samples <= 0:
            raise DomainError("mc_samples must be positive")
        rng = as_rng(seed)
        total = 0.0
        total_sq = 0.0
        for n0 in range(0, mc_samples, chunk):
            nb = min(chunk, mc_samples - n0)
            x0 = self.base.sample(nb, rng)
            x1 = self.target.sample(nb, rng)
            t = rng.uniform(0.0, 1.0, nb)
            pts = interpolate(self.schedule, t, x0, x1)
            diff = np.asarray(candidate(t, pts), dtype=float) - self.velocity(t, pts)
            vals = np.einsum("bd,bd->b", diff, diff)
            total += float(vals.sum())
            total_sq += float((vals * vals).sum())
        mean = total / mc_samples
        var = max(total_sq / mc_samples - mean * mean, 0.0)
        stderr = float(np.sqrt(var / mc_samples))
        return mean, stderr


class OracleVelocity:
    """Velocity-field adapter for a mixture path: callable (t, x) -> v.

    Exposes the same evaluation surface as the learned model (including the
    exact divergence needed by likelihood integration), so either can be
    plugged into the ODE machinery.
    """

    def __init__(self, path):
        self.path = path
        self.dim = path.dim

    def __call__(self, t, x):
        return self.path.velocity(t, x)

    def divergence(self, t, x):
        return self.path.velocity_divergence(t, x)


def path_density(path, t, x):
    """Path density at (t, x) via the pairwise mixture closed form."""
    return path.density(t, x)


def path_velocity_oracle(path, t, x):
    """Exact transport velocity of the mixture path."""
    return path.velocity(t, x)


def path_current(path, t, x):
    """Probability current of the mixture path (velocity numerator)."""
    return path.current(t, x)


def path_score(path, t, x):
    """Exact gradient of the log path density."""
    return path.score(t, x)


def endpoint_velocities(path):
    """Affine endpoint velocity maps (v0, v1) of a mixture path."""
    return path.endpoint_velocities()


def exact_H(path, candidate, mc_samples, seed):
    """Monte Carlo estimate (mean, stderr) of the candidate's squared error vs oracle."""
    return path.exact_H(candidate, mc_samples, seed)
