"""Trajectory generation for the growth-law experiments.

Linear paths use exact transition sampling (X_{t+h} = Phi X_t + xi with
xi ~ N(0, Sigma_h)), so there is no discretization bias in the statistics
that estimate the growth constant.  Perturbed paths use exponential Euler:
the linear part stays exact and only the bounded drift increment Psi F(X)
is approximated.  Both schemes advance the pure noise convolution N_t on
the same xi draws, because the pathwise Gronwall check needs L(t) =
sup |N_u| on the same Brownian path.  Convolution kernels of the form
(t-s)^k/k! e^{-lam (t-s)} cos/sin(mu (t-s)) are realized exactly as one
coordinate of an augmented linear system.

Randomness comes from counter-based Philox streams keyed by (seed,
stream id), with a polar-method Gaussian transform whose internal refill
batch has a fixed size: the emitted sequence depends only on the key,
never on how consumers chunk their requests.  That is what makes ensemble
artifacts byte-identical across runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numba
import numpy as np

from oulab import matops, model as model_mod
from oulab.model import DriftSpec, SdeSystem, StationaryModel, build_stationary_model

__all__ = [
    "BLOWUP_NORM",
    "KernelSpec",
    "PathRecord",
    "RngStream",
    "SimulationError",
    "TimeGrid",
    "kernel_path_from_increments",
    "kernel_stationary_model",
    "kernel_system",
    "mixing_projection",
    "run_ensemble",
    "sample_stationary_x0",
    "simulate_kernel",
    "simulate_linear",
    "simulate_perturbed",
]

BLOWUP_NORM = 1e12

# Uniform pairs drawn per refill of the polar-method pipeline.  The
# emitted sequence is an order-preserving filter of the Philox pair
# stream, so this is a pure performance knob: it never changes values.
_NOISE_BATCH = 1 << 12

# Steps advanced per noise chunk, divided by the state dimension.
_CHUNK_BUDGET = 1 << 18


class SimulationError(RuntimeError):
    """A path left the trusted regime (blow-up or non-finite state)."""


class RngStream:
    """Splittable Gaussian stream: Philox keyed by (seed, stream).

    Normals come from the Marsaglia polar method applied to Philox
    uniforms.  The same key yields the same sequence however the calls
    are batched, which run_ensemble relies on for per-path determinism.
    """

    __slots__ = ("seed", "stream", "_gen", "_buf", "_pos")

    def __init__(self, seed: int, stream: int = 0):
        seed = int(seed)
        stream = int(stream)
        if not 0 <= seed < 2**64 or not 0 <= stream < 2**64:
            raise ValueError("seed and stream must be unsigned 64-bit integers")
        self.seed = seed
        self.stream = stream
        key = np.array([seed, stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))
        self._buf = np.empty(0)
        self._pos = 0

    def _refill(self) -> None:
        u = self._gen.random((_NOISE_BATCH, 2))
        u = 2.0 * u - 1.0
        s = u[:, 0] ** 2 + u[:, 1] ** 2
        keep = (s > 0.0) & (s < 1.0)
        s = s[keep]
        f = np.sqrt(-2.0 * np.log(s) / s)
        self._buf = (u[keep] * f[:, None]).ravel()
        self._pos = 0

    def normals(self, n: int) -> np.ndarray:
        """Return the next n standard normals as a 1-d array."""
        n = int(n)
        out = np.empty(n)
        filled = 0
        while filled < n:
            avail = self._buf.size - self._pos
            if avail == 0:
                self._refill()
                continue
            take = min(avail, n - filled)
            out[filled:filled + take] = self._buf[self._pos:self._pos + take]
            self._pos += take
            filled += take
        return out

    def standard_normal(self, shape) -> np.ndarray:
        """Return the next normals reshaped to the requested shape."""
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        count = 1
        for s in shape:
            count *= int(s)
        return self.normals(count).reshape(shape)


@dataclass(frozen=True)
class TimeGrid:
    """Geometric checkpoint grid over a uniform internal step h.

    Checkpoints t_j = t0 * ratio^j are rounded to integer multiples of h
    and forced strictly increasing.  t0 must be at least e so that log t
    is at least 1 at every checkpoint and growth ratios are well posed.
    """

    t0: float
    ratio: float
    n_checkpoints: int
    h: float
    checkpoint_steps: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (self.t0 >= math.e):
            raise ValueError("t0 must be >= e so that log t0 >= 1")
        if not (self.ratio > 1.0):
            raise ValueError("ratio must exceed 1")
        if self.n_checkpoints < 1:
            raise ValueError("need at least one checkpoint")
        if not (self.h > 0.0 and math.isfinite(self.h)):
            raise ValueError("step h must be positive and finite")
        steps = np.empty(self.n_checkpoints, dtype=np.int64)
        lo = int(math.ceil(self.t0 / self.h - 1e-9))
        for j in range(self.n_checkpoints):
            want = int(round(self.t0 * self.ratio**j / self.h))
            want = max(want, lo)
            if j > 0:
                want = max(want, int(steps[j - 1]) + 1)
            steps[j] = want
        object.__setattr__(self, "checkpoint_steps", steps)

    @property
    def times(self) -> np.ndarray:
        return self.checkpoint_steps * self.h

    @property
    def t_max(self) -> float:
        return float(self.checkpoint_steps[-1] * self.h)

    @property
    def total_steps(self) -> int:
        return int(self.checkpoint_steps[-1])

    def projection_stride(self) -> int:
        """Steps between integer-time projection samples, 0 if none exist.

        Integer times sit on the step grid exactly when h = 1/m or h is
        itself a whole number (then only multiples of h are used).
        """
        m = 1.0 / self.h
        if self.h <= 1.0 and abs(m - round(m)) < 1e-9:
            return int(round(m))
        if self.h >= 1.0 and abs(self.h - round(self.h)) < 1e-9:
            return 1
        return 0

    @classmethod
    def spanning(cls, t_max: float, h: float, t0: float = math.e,
                 per_decade: int = 12) -> "TimeGrid":
        """Grid from t0 to at least t_max with per_decade checkpoints."""
        if t_max <= t0:
            raise ValueError("t_max must exceed t0")
        ratio = 10.0 ** (1.0 / per_decade)
        n = int(math.ceil(math.log(t_max / t0) / math.log(ratio))) + 1
        return cls(t0=t0, ratio=ratio, n_checkpoints=n, h=h)


@dataclass(frozen=True, eq=False)
class PathRecord:
    """Checkpoint summaries of one simulated path.

    max_x is the running max of the size statistic over every step point
    (including t = 0); max_n the same for the pure noise convolution;
    ratio = max_x / sqrt(log t).  For kernel paths the size statistic is
    |selected coordinate| and states hold that coordinate alone.
    """

    kind: str
    seed: int
    stream: int
    x0_kind: str
    x0: np.ndarray
    grid: TimeGrid
    t: np.ndarray
    norm_x: np.ndarray
    max_x: np.ndarray
    max_n: np.ndarray
    ratio: np.ndarray
    states: np.ndarray
    proj_bucket: np.ndarray | None = None

    @property
    def x0_norm(self) -> float:
        return float(np.linalg.norm(self.x0))

    def __post_init__(self):
        for name in ("norm_x", "max_x", "max_n", "ratio"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")
        if np.any(np.diff(self.max_x) < 0.0) or np.any(np.diff(self.max_n) < 0.0):
            raise ValueError("running maxima must be nondecreasing")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel (t-s)^k/k! e^{-lam(t-s)} cos/sin(mu(t-s)) driven by dB."""

    lam: float
    mu: float = 0.0
    k: int = 0
    phase: str = "cos"

    def __post_init__(self):
        if not (self.lam > 0.0 and math.isfinite(self.lam)):
            raise ValueError("lam must be positive and finite")
        if not math.isfinite(self.mu):
            raise ValueError("mu must be finite")
        if self.k < 0 or int(self.k) != self.k:
            raise ValueError("k must be a nonnegative integer")
        if self.phase not in ("cos", "sin"):
            raise ValueError("phase must be 'cos' or 'sin'")
        if self.phase == "sin" and self.mu == 0.0:
            raise ValueError("sin phase needs mu != 0 (kernel is identically 0)")

    def evaluate(self, lag) -> np.ndarray:
        """Kernel value at nonnegative time lags (vectorized)."""
        lag = np.asarray(lag, dtype=float)
        trig = np.cos if self.phase == "cos" else np.sin
        return (lag**self.k / math.factorial(self.k)) * np.exp(-self.lam * lag) \
            * trig(self.mu * lag)


def kernel_system(spec: KernelSpec) -> tuple[SdeSystem, int]:
    """Augmented linear system whose coordinate sel realizes the kernel.

    With I^(j), J^(j) the cos/sin integrals of order j, differentiating
    under the integral sign gives the closed cascade

        dI^(j) = (I^(j-1) - lam I^(j) - mu J^(j)) dt + [j = 0] dB,
        dJ^(j) = (J^(j-1) + mu I^(j) - lam J^(j)) dt,

    which is dZ = -A Z dt + e0 dB with 2x2 diagonal blocks
    [[lam, mu], [-mu, lam]] and -I coupling blocks.  mu = 0 drops the J
    rows and the blocks collapse to scalars.
    """
    k = int(spec.k)
    if spec.mu == 0.0:
        d = k + 1
        A = spec.lam * np.eye(d)
        for j in range(1, d):
            A[j, j - 1] = -1.0
        sel = k
    else:
        d = 2 * (k + 1)
        A = np.zeros((d, d))
        for j in range(k + 1):
            A[2 * j, 2 * j] = spec.lam
            A[2 * j + 1, 2 * j + 1] = spec.lam
            A[2 * j, 2 * j + 1] = spec.mu
            A[2 * j + 1, 2 * j] = -spec.mu
            if j > 0:
                A[2 * j, 2 * j - 2] = -1.0
                A[2 * j + 1, 2 * j - 1] = -1.0
        sel = 2 * k + (0 if spec.phase == "cos" else 1)
    D = np.zeros((d, 1))
    D[0, 0] = 1.0
    return SdeSystem(A=A, D=D), sel


_KERNEL_MODELS: dict[tuple, StationaryModel] = {}


def kernel_stationary_model(spec: KernelSpec) -> tuple[StationaryModel, int]:
    """Cached stationary model of the augmented kernel system."""
    key = (spec.lam, spec.mu, spec.k)
    system, sel = kernel_system(spec)
    cached = _KERNEL_MODELS.get(key)
    if cached is None:
        cached = build_stationary_model(system)
        _KERNEL_MODELS[key] = cached
    return cached, sel


@numba.njit(cache=True, nogil=True)
def _chunk_step(Phi, Psi, xi, x, nvec, track_twin, sel, drift_code, scale,
                proj_a, proj_stride, h, step0, mx, mn, mp):
    """Advance len(xi) steps in place; returns (mx, mn, mp, bad_index).

    drift_code: 0 linear, 1 scale*tanh componentwise, 2 saturating
    scale*x/(1+|x|).  sel >= 0 tracks |x[sel]| instead of the norm.
    bad_index >= 0 flags the first step whose state is non-finite or
    beyond the blow-up bound.
    """
    nsteps, d = xi.shape
    tmp = np.empty(d)
    F = np.empty(d)
    for i in range(nsteps):
        if drift_code == 1:
            for r in range(d):
                F[r] = scale * math.tanh(x[r])
        elif drift_code == 2:
            rr = 0.0
            for r in range(d):
                rr += x[r] * x[r]
            g = scale / (1.0 + math.sqrt(rr))
            for r in range(d):
                F[r] = g * x[r]
        for r in range(d):
            acc = xi[i, r]
            for c in range(d):
                acc += Phi[r, c] * x[c]
            if drift_code > 0:
                for c in range(d):
                    acc += Psi[r, c] * F[c]
            tmp[r] = acc
        for r in range(d):
            x[r] = tmp[r]
        if track_twin:
            for r in range(d):
                acc = xi[i, r]
                for c in range(d):
                    acc += Phi[r, c] * nvec[c]
                tmp[r] = acc
            nn = 0.0
            for r in range(d):
                nvec[r] = tmp[r]
                nn += tmp[r] * tmp[r]
            nn = math.sqrt(nn)
            if nn > mn:
                mn = nn
        if sel >= 0:
            nx = abs(x[sel])
        else:
            s2 = 0.0
            for r in range(d):
                s2 += x[r] * x[r]
            nx = math.sqrt(s2)
        if not math.isfinite(nx) or nx > BLOWUP_NORM:
            return mx, mn, mp, i
        if nx > mx:
            mx = nx
        if proj_stride > 0 and (step0 + i + 1) % proj_stride == 0:
            t_int = (step0 + i + 1) * h
            if t_int > 1.5:
                y = 0.0
                for r in range(d):
                    y += proj_a[r] * x[r]
                ry = abs(y) / math.sqrt(2.0 * math.log(t_int))
                if ry > mp:
                    mp = ry
    return mx, mn, mp, -1


def _py_chunk_step(Phi, Psi, drift, xi, x, nvec, track_twin, sel,
                   proj_a, proj_stride, h, step0, mx, mn, mp):
    """Python twin of _chunk_step for custom (callable) drifts."""
    for i in range(xi.shape[0]):
        x[:] = Phi @ x + Psi @ np.asarray(drift(x), dtype=float) + xi[i]
        if track_twin:
            nvec[:] = Phi @ nvec + xi[i]
            mn = max(mn, float(np.linalg.norm(nvec)))
        nx = abs(x[sel]) if sel >= 0 else float(np.linalg.norm(x))
        if not math.isfinite(nx) or nx > BLOWUP_NORM:
            return mx, mn, mp, i
        mx = max(mx, nx)
        if proj_stride > 0 and (step0 + i + 1) % proj_stride == 0:
            t_int = (step0 + i + 1) * h
            if t_int > 1.5:
                ry = abs(float(proj_a @ x)) / math.sqrt(2.0 * math.log(t_int))
                mp = max(mp, ry)
    return mx, mn, mp, -1


def _drive_path(model: StationaryModel, grid: TimeGrid, x0: np.ndarray,
                rng: RngStream, kind: str, x0_kind: str,
                drift_code: int, drift_scale: float,
                drift_fn: Callable | None, sel: int,
                track_projection: bool) -> PathRecord:
    """Shared chunked stepping driver behind the simulate_* entry points."""
    sc = model.step_cache(grid.h)
    d = model.dim
    rank = sc.chol_h.rank
    Phi = np.ascontiguousarray(sc.Phi)
    Psi = np.ascontiguousarray(sc.Psi)
    x = np.array(x0, dtype=float).copy()
    nvec = np.zeros(d)
    track_twin = drift_code != 0 or drift_fn is not None or \
        float(np.linalg.norm(x0)) > 0.0
    proj_stride = 0
    proj_a = np.zeros(d)
    if track_projection:
        proj_stride = grid.projection_stride()
        if proj_stride > 0 and model.lambda1 > 0.0:
            proj_a = model.alpha / math.sqrt(model.lambda1)
        else:
            proj_stride = 0

    mx = abs(x[sel]) if sel >= 0 else float(np.linalg.norm(x))
    mn = 0.0
    n_cp = grid.n_checkpoints
    norm_x = np.empty(n_cp)
    max_x = np.empty(n_cp)
    max_n = np.empty(n_cp)
    ratio = np.empty(n_cp)
    proj_bucket = np.full(n_cp, -np.inf) if proj_stride > 0 else None
    states = np.empty((n_cp, d))
    chunk = max(1024, _CHUNK_BUDGET // max(d, 1))

    step = 0
    for j in range(n_cp):
        target = int(grid.checkpoint_steps[j])
        mp = -math.inf
        while step < target:
            take = min(chunk, target - step)
            z = rng.standard_normal((take, rank))
            xi = np.ascontiguousarray(sc.chol_h.correlate(z))
            if drift_fn is not None:
                mx, mn, mp, bad = _py_chunk_step(
                    Phi, Psi, drift_fn, xi, x, nvec, track_twin, sel,
                    proj_a, proj_stride, grid.h, step, mx, mn, mp)
            else:
                mx, mn, mp, bad = _chunk_step(
                    Phi, Psi, xi, x, nvec, track_twin, sel, drift_code,
                    drift_scale, proj_a, proj_stride, grid.h, step, mx, mn, mp)
            if bad >= 0:
                t_bad = (step + bad + 1) * grid.h
                raise SimulationError(
                    f"blow-up: state size left [0, {BLOWUP_NORM:g}] near "
                    f"t = {t_bad:g} (seed {rng.seed}, stream {rng.stream})")
            step += take
        t_j = target * grid.h
        norm_x[j] = abs(x[sel]) if sel >= 0 else float(np.linalg.norm(x))
        max_x[j] = mx
        max_n[j] = mn if track_twin else mx
        ratio[j] = mx / math.sqrt(math.log(t_j))
        states[j] = x
        if proj_bucket is not None:
            proj_bucket[j] = mp
    if proj_bucket is not None:
        proj_bucket[np.isneginf(proj_bucket)] = np.nan
    if sel >= 0:
        states = states[:, sel:sel + 1]
    return PathRecord(
        kind=kind, seed=rng.seed, stream=rng.stream, x0_kind=x0_kind,
        x0=np.array(x0, dtype=float), grid=grid, t=grid.times,
        norm_x=norm_x, max_x=max_x, max_n=max_n, ratio=ratio,
        states=states, proj_bucket=proj_bucket)


def _resolve_x0(model: StationaryModel, x0, rng: RngStream) -> tuple[np.ndarray, str]:
    if isinstance(x0, str):
        if x0 != "stationary":
            raise ValueError("x0 must be a vector or the string 'stationary'")
        return sample_stationary_x0(model, rng), "stationary"
    vec = np.asarray(x0, dtype=float).reshape(-1)
    if vec.shape != (model.dim,):
        raise ValueError(f"x0 must have length {model.dim}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("x0 has non-finite entries")
    kind = "zero" if not vec.any() else "vector"
    return vec, kind


def sample_stationary_x0(model: StationaryModel, rng: RngStream) -> np.ndarray:
    """Draw X0 ~ N(0, Sigma) through the pivoted factor of Sigma."""
    z = rng.standard_normal(model.chol_sigma.rank)
    return model.sample_stationary(z)


def simulate_linear(model: StationaryModel, grid: TimeGrid, x0,
                    rng: RngStream, track_projection: bool = False) -> PathRecord:
    """Exact-transition path of dX = -AX dt + D dW.

    x0 is a vector or "stationary".  The noise convolution maxima L(t)
    reuse the same xi draws with X0 = 0 (for X0 = 0 the path IS the
    convolution and no twin recursion is run).
    """
    if not model.system.drift.is_zero:
        raise ValueError("model carries a drift; use simulate_perturbed")
    vec, kind = _resolve_x0(model, x0, rng)
    return _drive_path(model, grid, vec, rng, "linear", kind,
                       drift_code=0, drift_scale=0.0, drift_fn=None,
                       sel=-1, track_projection=track_projection)


_DRIFT_CODES = {"tanh_bounded": 1, "saturating_linear": 2}


def simulate_perturbed(model: StationaryModel, grid: TimeGrid, x0,
                       rng: RngStream, track_projection: bool = False) -> PathRecord:
    """Exponential-Euler path of dX = (F(X) - AX) dt + D dW.

    The linear propagation and the noise are exact; only the drift
    increment Psi F(X_t) is frozen over each step.  For built-in drifts
    the setup audits h * Lip(F) * |Psi| < 0.1 and refuses coarser steps.
    The coupled convolution N (same xi draws) is always advanced so the
    record carries the L(t) needed by the pathwise growth certificate.
    """
    drift = model.system.drift
    if drift.is_zero:
        raise ValueError("drift is zero; use simulate_linear")
    vec, kind = _resolve_x0(model, x0, rng)
    sc = model.step_cache(grid.h)
    lip = drift.lipschitz()
    if lip is not None:
        psi_norm = matops.spectral_norm(sc.Psi, allow_stall=True)
        budget = grid.h * lip * psi_norm
        if budget >= 0.1:
            raise ValueError(
                f"step too coarse for this drift: h*Lip*|Psi| = {budget:.3g} >= 0.1")
    code = _DRIFT_CODES.get(drift.kind, 0)
    fn = None if code else drift
    return _drive_path(model, grid, vec, rng, "perturbed", kind,
                       drift_code=code, drift_scale=drift.scale, drift_fn=fn,
                       sel=-1, track_projection=track_projection)


def simulate_kernel(spec: KernelSpec, grid: TimeGrid, rng: RngStream) -> PathRecord:
    """Exact path of the kernel integral via its augmented linear system.

    Starts from zero (the integral is empty at t = 0) and records the
    running max and growth ratio of the selected coordinate.
    """
    model, sel = kernel_stationary_model(spec)
    x0 = np.zeros(model.dim)
    return _drive_path(model, grid, x0, rng, "kernel", "zero",
                       drift_code=0, drift_scale=0.0, drift_fn=None,
                       sel=sel, track_projection=False)


def kernel_path_from_increments(spec: KernelSpec, h: float,
                                increments: np.ndarray,
                                record_steps: Sequence[int]) -> np.ndarray:
    """Kernel coordinate driven by given Brownian increments.

    Steps the augmented system with the conditional mean of the exact
    noise given each coarse increment, E[xi | dB] = (Psi e0 / h) dB, so
    the output is a deterministic function of the shared noise path and
    can be compared against a direct Ito-sum evaluation on the same dB.
    Not used for production paths (those draw the full exact noise).
    """
    model, sel = kernel_stationary_model(spec)
    sc = model.step_cache(h)
    d = model.dim
    w = sc.Psi[:, 0] / h
    increments = np.asarray(increments, dtype=float).reshape(-1)
    record_steps = np.asarray(record_steps, dtype=np.int64)
    if record_steps.size and (record_steps.min() < 1
                              or record_steps.max() > increments.size):
        raise ValueError("record steps out of range")
    xi = np.ascontiguousarray(increments[:, None] * w[None, :])
    Phi = np.ascontiguousarray(sc.Phi)
    Psi = np.ascontiguousarray(sc.Psi)
    x = np.zeros(d)
    nvec = np.zeros(d)
    dummy = np.zeros(d)
    out = np.empty(record_steps.size)
    prev = 0
    order = np.argsort(record_steps)
    for pos in order:
        target = int(record_steps[pos])
        if target > prev:
            _, _, _, bad = _chunk_step(Phi, Psi, xi[prev:target], x, nvec,
                                       False, sel, 0, 0.0, dummy, 0, h, prev,
                                       0.0, 0.0, -math.inf)
            if bad >= 0:
                raise SimulationError("kernel path left the trusted regime")
            prev = target
        out[pos] = x[sel]
    return out


def mixing_projection(model: StationaryModel, states: np.ndarray) -> np.ndarray:
    """Project states onto the top eigendirection: Y = alpha^T x / sqrt(lambda1)."""
    if model.lambda1 <= 0.0:
        raise ValueError("degenerate noise: lambda1 = 0")
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[-1] != model.dim:
        raise ValueError("states have the wrong dimension")
    return states @ (model.alpha / math.sqrt(model.lambda1))


def run_ensemble(simulate_one: Callable[[RngStream], PathRecord],
                 n_paths: int, base_seed: int, workers: int = 1) -> list[PathRecord]:
    """Run n_paths independent paths, one Philox stream per path index.

    Path i uses RngStream(base_seed, i), so any single path can be
    reproduced in isolation.  Results are ordered by path index and do
    not depend on workers (each stream is self-contained); workers > 1
    threads the paths, which pays off because the stepping kernels
    release the GIL.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    streams = [RngStream(base_seed, i) for i in range(n_paths)]
    if workers <= 1:
        return [simulate_one(s) for s in streams]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(simulate_one, streams))
