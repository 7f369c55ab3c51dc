"""Noise schedule, preconditioning, analytic denoisers, loss and the reverse-ODE sampler.

The sampler integrates ``dz/dsigma = (z - D(z; sigma)) / sigma`` (time parameterized
as ``sigma(t) = t``) along a descending noise schedule. Every denoiser here is the
exact posterior mean of some explicit data distribution (a Gaussian mixture, the
empirical distribution of a dataset, or a mixture of low-rank Gaussians around
the data points), so it stands in for a trained network without any training.
Optional temperatures blur the mixture weights the way a finite-capacity network
would.

Arrays carry an optional leading batch axis: a denoiser receives ``z`` of shape
``(..., *latent_shape)`` and a scalar sigma.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import Latent, RngStream

SIGMA_MIN = 2e-3
SIGMA_MAX = 80.0
RHO = 3.0
SIGMA_DATA = 0.5


@dataclass(frozen=True)
class NoiseSchedule:
    N: int
    rho: float
    sigma_min: float
    sigma_max: float
    sigmas: np.ndarray

    def __len__(self) -> int:
        return len(self.sigmas)


def build_schedule(N: int = 20, rho: float = RHO, sigma_min: float = SIGMA_MIN,
                   sigma_max: float = SIGMA_MAX) -> NoiseSchedule:
    """``N`` noise levels from ``sigma_max`` down to ``sigma_min``, evenly spaced in ``sigma^(1/rho)``."""
    if N < 2:
        raise ValueError("schedule needs N >= 2")
    if not (0 < sigma_min < sigma_max) or rho <= 0:
        raise ValueError("need 0 < sigma_min < sigma_max and rho > 0")
    i = np.arange(N)
    a, b = sigma_max ** (1.0 / rho), sigma_min ** (1.0 / rho)
    s = (a + i / (N - 1) * (b - a)) ** rho
    s[0], s[-1] = sigma_max, sigma_min
    s.setflags(write=False)
    return NoiseSchedule(N, float(rho), float(sigma_min), float(sigma_max), s)


@dataclass(frozen=True)
class Precond:
    c_skip: float
    c_out: float
    c_in: float
    c_noise: float
    loss_weight: float


def skip_scalings(sigma: float, sigma_data: float = SIGMA_DATA) -> tuple[float, float, float]:
    """``(c_skip, c_out, c_in)``; defined for every ``sigma >= 0``."""
    if sigma_data <= 0:
        raise ValueError("sigma_data must be positive")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    s2, d2 = sigma * sigma, sigma_data * sigma_data
    return d2 / (s2 + d2), sigma * sigma_data / np.sqrt(s2 + d2), 1.0 / np.sqrt(s2 + d2)


def precond_coeffs(sigma: float, sigma_data: float = SIGMA_DATA) -> Precond:
    """Full preconditioning set including ``c_noise = ln(sigma)/4`` and the loss weight."""
    if sigma <= 0:
        raise ValueError("c_noise = ln(sigma)/4 is undefined for sigma <= 0")
    c_skip, c_out, c_in = skip_scalings(sigma, sigma_data)
    return Precond(c_skip, c_out, c_in, float(np.log(sigma) / 4.0), 1.0 / c_out**2)


# --------------------------------------------------------------------------- denoisers


class Denoiser(Protocol):
    def __call__(self, z: np.ndarray, sigma: float) -> np.ndarray: ...


@dataclass(frozen=True)
class GaussianMixture:
    """Isotropic mixture ``sum_k w_k N(mu_k, s_k^2 I)`` over flattened latent cells."""

    weights: np.ndarray
    means: np.ndarray  # (K, *shape)
    stds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, float)
        mu = np.asarray(self.means, float)
        s = np.broadcast_to(np.asarray(self.stds, float), w.shape).copy()
        if w.ndim != 1 or len(w) != len(mu) or np.any(w <= 0):
            raise ValueError("weights must be a positive vector, one per component")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to 1")
        if np.any(s < 0):
            raise ValueError("component stds must be >= 0")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", s)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.means.shape[1:]

    def sample(self, n: int, gen: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        k = gen.choice(len(self.weights), size=n, p=self.weights)
        x = self.means[k] + self.stds[k].reshape((-1,) + (1,) * len(self.shape)) * gen.standard_normal((n,) + self.shape)
        return x, k

    def log_responsibilities(self, z: np.ndarray, sigma: float) -> np.ndarray:
        """``log gamma_k(z)`` with shape ``(..., K)``, noise level ``sigma``."""
        d = int(np.prod(self.shape))
        zf = z.reshape(z.shape[: z.ndim - len(self.shape)] + (d,))
        mf = self.means.reshape(len(self.weights), d)
        var = self.stds**2 + sigma**2
        if np.any(var == 0):
            raise ValueError("point-mass components need sigma > 0")
        sq = _sqdist(zf, mf)
        logp = np.log(self.weights) - 0.5 * d * np.log(2 * np.pi * var) - sq / (2 * var)
        return logp - logsumexp(logp, axis=-1, keepdims=True)

    def log_density(self, z: np.ndarray, sigma: float) -> np.ndarray:
        d = int(np.prod(self.shape))
        zf = z.reshape(z.shape[: z.ndim - len(self.shape)] + (d,))
        mf = self.means.reshape(len(self.weights), d)
        var = self.stds**2 + sigma**2
        logp = np.log(self.weights) - 0.5 * d * np.log(2 * np.pi * var) - _sqdist(zf, mf) / (2 * var)
        return logsumexp(logp, axis=-1)

    def score(self, z: np.ndarray, sigma: float) -> np.ndarray:
        """Analytic ``grad_z log p(z; sigma)``."""
        g = np.exp(self.log_responsibilities(z, sigma))
        var = self.stds**2 + sigma**2
        nshape = len(self.shape)
        coef = g / var  # (..., K)
        mu_term = np.tensordot(coef, self.means, axes=(-1, 0))
        return mu_term - coef.sum(-1).reshape(coef.shape[:-1] + (1,) * nshape) * z


def _sqdist(zf: np.ndarray, mf: np.ndarray) -> np.ndarray:
    """Squared distances ``(..., K)`` between rows of ``zf (..., d)`` and ``mf (K, d)``."""
    diff = zf[..., None, :] - mf
    return np.einsum("...kd,...kd->...k", diff, diff)


def gm_denoise(z_sigma: np.ndarray, sigma: float, gm: GaussianMixture) -> np.ndarray:
    """Posterior mean ``E[z | z_sigma]`` under the mixture."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    z = np.asarray(z_sigma, float)
    if sigma == 0:
        return z.copy()
    nshape = len(gm.shape)
    g = np.exp(gm.log_responsibilities(z, sigma))  # (..., K)
    s2 = gm.stds**2
    denom = s2 + sigma**2
    a = g * (s2 / denom)           # weight on z_sigma
    b = g * (sigma**2 / denom)     # weight on mu_k
    out = a.sum(-1).reshape(a.shape[:-1] + (1,) * nshape) * z
    return out + np.tensordot(b, gm.means, axes=(-1, 0))


def empirical_denoise(z_sigma: np.ndarray, sigma: float, dataset, bandwidth: float = 0.0) -> np.ndarray:
    """Posterior mean when the data distribution is the empirical one over ``dataset``.

    With ``bandwidth > 0`` the soft weights are evaluated at the inflated level
    ``sqrt(sigma^2 + bandwidth^2)``; the output is still a convex combination of
    data points, so samples become local barycenters rather than copies.
    """
    data = _stack(dataset)
    if len(data) == 0:
        raise ValueError("dataset is empty")
    if sigma <= 0 and bandwidth <= 0:
        raise ValueError("empirical denoiser needs sigma > 0")
    z = np.asarray(z_sigma, float)
    shape = data.shape[1:]
    d = int(np.prod(shape))
    lead = z.shape[: z.ndim - len(shape)]
    zf = z.reshape(lead + (d,))
    df = data.reshape(len(data), d)
    w = _soft_weights(zf, df, sigma * sigma + bandwidth * bandwidth)
    return (w @ df).reshape(lead + shape)


def _soft_weights(zf: np.ndarray, df: np.ndarray, var: float, sq_norms: np.ndarray | None = None) -> np.ndarray:
    # ||z - x_i||^2 = ||z||^2 - 2 z.x_i + ||x_i||^2; the ||z||^2 term cancels in the softmax
    if sq_norms is None:
        sq_norms = np.einsum("id,id->i", df, df)
    logits = (zf @ df.T - 0.5 * sq_norms) / var
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def _stack(dataset) -> np.ndarray:
    if isinstance(dataset, np.ndarray):
        return dataset.astype(float, copy=False)
    return np.stack([x.values if isinstance(x, Latent) else np.asarray(x, float) for x in dataset])


class GMDenoiser:
    def __init__(self, gm: GaussianMixture):
        self.gm = gm

    def __call__(self, z, sigma):
        return gm_denoise(z, sigma, self.gm)


class EmpiricalDenoiser:
    """Denoiser over a fixed set of clean latents.

    ``bandwidth=0, local_std=0, temperature=1`` gives the exact empirical posterior
    mean. The other settings turn it into a stand-in for a finite-capacity learned
    denoiser:

    * ``local_std`` treats each data point as ``N(z_i, s^2 I)``, so the output is the
      mixture posterior mean and tends to the identity once ``sigma << s``;
    * ``bandwidth`` evaluates the soft weights at the inflated variance
      ``t sigma^2 + s^2 + h^2``, which blends neighbouring data points and pulls
      samples toward densely populated regions;
    * ``temperature`` multiplies the noise variance in the weights, a blur that
      scales with ``sigma`` and so fades as the trajectory approaches the data.

    ``exclude`` (one data index per batch row, ``-1`` for none) drops a data point
    from the weights, used to hold an edited twin out of the model.
    """

    def __init__(self, dataset, bandwidth: float = 0.0, local_std: float = 0.0,
                 temperature: float = 1.0):
        self.data = _stack(dataset)
        if len(self.data) == 0:
            raise ValueError("dataset is empty")
        if bandwidth < 0 or local_std < 0:
            raise ValueError("bandwidth and local_std must be >= 0")
        if temperature < 1:
            raise ValueError("temperature must be >= 1")
        self.temperature = float(temperature)
        self.bandwidth = float(bandwidth)
        self.local_std = float(local_std)
        self._flat = self.data.reshape(len(self.data), -1)
        self._sq = np.einsum("id,id->i", self._flat, self._flat)

    def __call__(self, z, sigma, exclude=None):
        s2, h2 = self.local_std**2, self.bandwidth**2
        var = self.temperature * sigma * sigma + s2 + h2
        if var <= 0:
            raise ValueError("empirical denoiser needs sigma > 0")
        z = np.asarray(z, float)
        shape = self.data.shape[1:]
        lead = z.shape[: z.ndim - len(shape)]
        zf = z.reshape(lead + (-1,))
        logits = (zf @ self._flat.T - 0.5 * self._sq) / var
        if exclude is not None:
            ex = np.asarray(exclude).reshape(lead)
            rows = np.flatnonzero(ex.ravel() >= 0)
            lg = logits.reshape(-1, len(self.data))
            lg[rows, ex.ravel()[rows]] = -np.inf
        logits -= logits.max(axis=-1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=-1, keepdims=True)
        pulled = (w @ self._flat).reshape(lead + shape)
        if s2 == 0:
            return pulled
        c = s2 / (s2 + sigma * sigma)
        return c * z + (1.0 - c) * pulled

    def excluding(self, exclude) -> Denoiser:
        """Denoiser with a fixed per-row exclusion."""
        ex = np.asarray(exclude)
        return lambda z, sigma: self(z, sigma, ex)


class TangentMixtureDenoiser:
    """Posterior mean for a mixture of low-rank Gaussians around the data points.

    Component ``i`` is ``N(z_i, a V_i V_i^T)``. The columns of ``V_i`` are the
    offsets from ``z_i`` to its ``k`` nearest data points, cut into spatial blocks
    of ``block^3`` cells (all channels). Each block can therefore move toward a
    different neighbour, so the model recombines local anatomy instead of copying
    whole data points. ``a = tau^2 / k``. ``block=None`` keeps the offsets whole.

    Pieces in different blocks are orthogonal, so every component needs only a
    ``k x k`` eigendecomposition per block. One call costs about the same as the
    plain empirical denoiser: two matrix products over the data.

    ``temperature`` multiplies the noise variance used for the mixture weights
    (not for the within-component mean). ``exclude`` works as for
    :class:`EmpiricalDenoiser`.
    """

    def __init__(self, dataset, k: int = 5, tau: float = 1.0, block: int | None = 4,
                 temperature: float = 1.0):
        data = _stack(dataset)
        n = len(data)
        if n < 2:
            raise ValueError("tangent mixture needs at least 2 data points")
        if k < 1 or tau <= 0:
            raise ValueError("need k >= 1 and tau > 0")
        if temperature < 1:
            raise ValueError("temperature must be >= 1")
        self.shape = data.shape[1:]
        if block is not None:
            if block < 1 or len(self.shape) != 4 or any(d % block for d in self.shape[1:]):
                raise ValueError(f"block {block} must divide the spatial dims of a (C, X, Y, Z) latent, "
                                 f"got shape {self.shape}")
        self.block = block
        self.k = k = min(int(k), n - 1)
        self.tau = float(tau)
        self.a = self.tau**2 / k
        self.temperature = float(temperature)

        blk = self._to_blocks(data)                                    # (R, n, d)
        self.R = blk.shape[0]
        self._blk = np.ascontiguousarray(blk)
        flat = data.reshape(n, -1)
        gram = flat @ flat.T
        sq = np.diag(gram).copy()
        d2 = sq[:, None] + sq[None, :] - 2 * gram
        np.fill_diagonal(d2, np.inf)
        self.neighbours = np.argsort(d2, axis=1, kind="stable")[:, :k]  # (n, k)
        nb = self.neighbours
        kr = np.matmul(blk, blk.transpose(0, 2, 1))                    # (R, n, n) per-block Gram
        sqr = np.einsum("rii->ri", kr)                                  # (R, n)
        rows = np.arange(n)[:, None]
        kni = kr[:, nb, rows]                                           # (R, n, k): <z_nb, z_i>
        knn = kr[:, nb[:, :, None], nb[:, None, :]]                     # (R, n, k, k)
        # Gram of the offsets z_nb - z_i inside each block
        g = knn - kni[..., :, None] - kni[..., None, :] + sqr[..., None, None]
        e, q = np.linalg.eigh(g)
        self._e = np.clip(e, 0.0, None)
        self._q = q
        self._qt = np.ascontiguousarray(q.transpose(0, 1, 3, 2))
        self._off = kni - sqr[..., None]
        self._sq = sq
        sel = np.zeros((k, n, n))
        for j in range(k):
            sel[j, nb[:, j], np.arange(n)] = 1.0                        # row m gathers from i with nb[i, j] = m
        self._gather = sel

    def _to_blocks(self, z: np.ndarray) -> np.ndarray:
        """``(B, *shape)`` -> ``(R, B, d)`` with one row per spatial block."""
        b = len(z)
        if self.block is None:
            return z.reshape(1, b, -1)
        c, x, y, w = self.shape
        f = self.block
        v = z.reshape(b, c, x // f, f, y // f, f, w // f, f).transpose(2, 4, 6, 0, 1, 3, 5, 7)
        return v.reshape(-1, b, c * f**3)

    def _from_blocks(self, v: np.ndarray) -> np.ndarray:
        b = v.shape[1]
        if self.block is None:
            return v.reshape((b,) + self.shape)
        c, x, y, w = self.shape
        f = self.block
        v = v.reshape(x // f, y // f, w // f, b, c, f, f, f).transpose(3, 4, 0, 5, 1, 6, 2, 7)
        return v.reshape((b,) + self.shape)

    def __call__(self, z, sigma, exclude=None):
        if sigma <= 0:
            raise ValueError("tangent mixture denoiser needs sigma > 0")
        z = np.asarray(z, float)
        lead = z.shape[: z.ndim - len(self.shape)]
        zb = self._to_blocks(z.reshape((-1,) + self.shape))            # (R, B, d)
        g = np.matmul(self._blk, zb.transpose(0, 2, 1))                 # (R, n, B)
        p = g[:, self.neighbours, :] - g[:, :, None, :] - self._off[..., None]  # V_i^T (z - z_i)
        q = np.matmul(self._qt, p)                                       # (R, n, k, B)
        s2 = float(sigma) ** 2
        ts2 = self.temperature * s2
        den_t = (ts2 / self.a + self._e)[..., None]
        quad = np.sum(q * q / den_t, axis=(0, 2))                        # (n, B)
        logdet = np.sum(np.log1p(self.a * self._e / ts2), axis=(0, 2))
        logits = (2.0 * g.sum(0) - self._sq[:, None] + quad) / (2.0 * ts2) - 0.5 * logdet[:, None]
        if exclude is not None:
            ex = np.asarray(exclude).reshape(-1)
            cols = np.flatnonzero(ex >= 0)
            logits[ex[cols], cols] = -np.inf
        logits -= logits.max(axis=0, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=0, keepdims=True)                               # (n, B)
        # within-component posterior mean z_i + V_i c_i, Woodbury in the eigenbasis
        c = np.matmul(self._q, q / (s2 / self.a + self._e)[..., None]) * w[None, :, None, :]
        coef = w[None] - c.sum(2)                                        # weight on z_i, (R, n, B)
        for j in range(self.k):
            coef += np.matmul(self._gather[j], c[:, :, j, :])
        out = np.matmul(coef.transpose(0, 2, 1), self._blk)              # (R, B, d)
        return self._from_blocks(out).reshape(lead + self.shape)

    def excluding(self, exclude) -> Denoiser:
        ex = np.asarray(exclude)
        return lambda z, sigma: self(z, sigma, ex)


class IdentityDenoiser:
    def __call__(self, z, sigma):
        return np.array(z, dtype=float)


class ConstantDenoiser:
    def __init__(self, value):
        self.value = np.asarray(value, float)

    def __call__(self, z, sigma):
        return np.broadcast_to(self.value, np.shape(z)).copy()


# --------------------------------------------------------------------------- loss


def sample_sigmas(n: int, gen: np.random.Generator, mean: float = 1.0, std: float = 1.2,
                  space: str = "log") -> np.ndarray:
    """Log-normal noise levels for the training loss.

    ``space="log"``: ``ln sigma ~ N(ln mean, std^2)``. ``space="linear"``: the
    log-space parameters are chosen so that sigma itself has the given mean and std.
    """
    if space == "log":
        mu, s = np.log(mean), std
    elif space == "linear":
        s2 = np.log1p((std / mean) ** 2)
        mu, s = np.log(mean) - 0.5 * s2, np.sqrt(s2)
    else:
        raise ValueError(f"space must be 'log' or 'linear', got {space!r}")
    return np.exp(mu + s * gen.standard_normal(n))


def loss_eval(denoiser: Denoiser, dataset, sigma_samples: Sequence[float] | np.ndarray,
              rng: RngStream | np.random.Generator, sigma_data: float = SIGMA_DATA) -> float:
    """Monte-Carlo estimate of ``E[lambda(sigma) ||D(z + n; sigma) - z||^2]``.

    One data point (uniform over ``dataset``) and one noise draw per entry of
    ``sigma_samples``.
    """
    data = _stack(dataset)
    if len(data) == 0:
        raise ValueError("dataset is empty")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    sig = np.asarray(sigma_samples, float).ravel()
    total = 0.0
    idx = gen.integers(len(data), size=len(sig))
    for s, i in zip(sig, idx):
        z = data[i]
        zs = z + s * gen.standard_normal(z.shape)
        lam = precond_coeffs(s, sigma_data).loss_weight
        total += lam * float(np.sum((denoiser(zs, s) - z) ** 2))
    return total / len(sig)


# --------------------------------------------------------------------------- sampler


StepHook = Callable[[np.ndarray, int, float], np.ndarray]


def integrate(denoiser: Denoiser, schedule: NoiseSchedule, z: np.ndarray, start: int = 0,
              order: str = "heun", after_step: StepHook | None = None) -> np.ndarray:
    """Integrate the probability-flow ODE from ``sigmas[start]`` to ``sigmas[-1]``.

    Heun steps use the trapezoidal corrector except for the last step, which is
    plain Euler. ``after_step(z, i, sigma)`` may replace ``z`` after the step that
    lands on ``sigmas[i]``. Returns the final denoised estimate ``D(z; sigma_min)``.
    """
    if order not in ("euler", "heun"):
        raise ValueError(f"order must be 'euler' or 'heun', got {order!r}")
    s = schedule.sigmas
    last = len(s) - 1
    if not 0 <= start <= last:
        raise ValueError(f"start index {start} outside [0, {last}]")
    z = np.array(z, dtype=float)
    for i in range(start, last):
        s_cur, s_next = float(s[i]), float(s[i + 1])
        d = (z - denoiser(z, s_cur)) / s_cur
        z_next = z + (s_next - s_cur) * d
        if order == "heun" and i + 1 < last:
            d2 = (z_next - denoiser(z_next, s_next)) / s_next
            z_next = z + (s_next - s_cur) * 0.5 * (d + d2)
        z = z_next
        if after_step is not None:
            z = after_step(z, i + 1, s_next)
    return denoiser(z, float(s[last]))


def sample(denoiser: Denoiser, schedule: NoiseSchedule, dims: Sequence[int],
           rng: RngStream | np.random.Generator, order: str = "heun") -> np.ndarray:
    """Unconditional sample: ``z ~ sigma_max N(0, I)`` integrated to ``sigma_min``."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    z0 = schedule.sigmas[0] * gen.standard_normal(tuple(dims))
    return integrate(denoiser, schedule, z0, 0, order)


def single_gaussian_flow(z_start: np.ndarray, sigma_from: float, sigma_to: float, s: float = 1.0) -> np.ndarray:
    """Exact ODE solution for data ``N(0, s^2 I)``: ``z`` scales with ``sqrt(s^2 + sigma^2)``."""
    return z_start * np.sqrt((s * s + sigma_to**2) / (s * s + sigma_from**2))
