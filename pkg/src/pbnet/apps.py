"""Desk-scale applications: learned multiplexed design and learned residual prior.

``sr-design`` is a linear stand-in for multiplexed-illumination super
resolution.  The spectrum of a ``n x n`` image is tiled into ``S`` patches;
source ``s`` measures patch ``s`` (``A_s = mask_s o DFT``) and channel ``l``
records the mixture ``sum_s c_ls A_s x``.  The design matrix ``c`` is learned.

``mri-prior`` is undersampled multi-coil Fourier imaging,
``A = mask o DFT o coil-stack``, reconstructed by alternating gradient steps
with a learned invertible residual network that replaces the proximal step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError, ExperimentConfig
from .engines import GradientReport
from .layers import (
    GradientLayer,
    InvertibleResidualLayer,
    SmoothProxLayer,
    constrain_lipschitz,
    fidelity_sigma_max,
)
from .network import Network
from .numerics import (
    DFT,
    CircularConvolution,
    CoilStack,
    Composition,
    Mask,
    WeightedSum,
    estimate_sigma_max,
)
from .training import TrainingExample, complex_noise

LAPLACIAN = np.array([[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]])


def smooth_phantom(rng: np.random.Generator, n: int, width: float = 0.1, cutoff: float = 0.4) -> np.ndarray:
    """Complex Gaussian field, low-pass filtered and normalized to unit RMS."""
    f = np.fft.fftfreq(n)
    r2 = f[:, None] ** 2 + f[None, :] ** 2
    envelope = np.exp(-r2 / (2 * width**2)) * (r2 <= cutoff**2)
    spec = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) * envelope
    x = np.fft.ifft2(spec)
    return x / np.sqrt(np.mean(np.abs(x) ** 2))


def fourier_patches(n: int, p: int) -> list[np.ndarray]:
    """Flat DFT indices of the ``(n/p)^2`` spectral tiles, lowest frequency first.

    Indices inside each tile are row-major in centered coordinates, so every
    tile shares one local coordinate system.
    """
    if n % p:
        raise ConfigError("image_size must be a multiple of patch_size")
    m = n // p
    shifted = np.fft.ifftshift(np.arange(n * n).reshape(n, n))
    centre = (n - 1) / 2
    tiles = []
    for i in range(m):
        for j in range(m):
            block = shifted[i * p:(i + 1) * p, j * p:(j + 1) * p]
            dist = np.hypot((i + 0.5) * p - 0.5 - centre, (j + 0.5) * p - 0.5 - centre)
            tiles.append((dist, i, j, block.ravel()))
    tiles.sort(key=lambda t: t[:3])
    return [t[3] for t in tiles]


def laplacian_filter(n: int) -> CircularConvolution:
    return CircularConvolution((n, n), LAPLACIAN, centered=True)


class SRDesignApp:
    """Learned multiplexing weights for the linear super-resolution analog."""

    kind = "sr-design"

    def __init__(self, cfg: ExperimentConfig):
        n, p = cfg.image_size, cfg.patch_size
        self.cfg = cfg
        self.dft = DFT((n, n))
        self.masks = [Mask((n, n), idx) for idx in fourier_patches(n, p)]
        self.n_sources = len(self.masks)
        self.n_channels = cfg.n_channels
        if self.n_channels >= self.n_sources:
            raise ConfigError(
                f"n_channels ({self.n_channels}) must be smaller than the number of sources ({self.n_sources})"
            )
        self.filter = laplacian_filter(n)
        self.filter_sigma = float(np.max(np.abs(self.filter.transfer)) ** 2)
        self.learnable = tuple(cfg.learnable) if cfg.learnable is not None else ("design",)
        unknown = set(self.learnable) - {"design", "alpha", "lam"}
        if unknown:
            raise ConfigError(f"sr-design has no learnable parameter(s) {sorted(unknown)}")
        rng = np.random.default_rng([cfg.seed, 0])
        design = self.initial_design(cfg.design_init, rng)
        sigma = self.sigma_max(design)
        self.params0 = {
            "design": design,
            "alpha": cfg.step_contraction / sigma if sigma > 0 else cfg.step_contraction,
            "lam": cfg.prior_contraction / self.filter_sigma,
        }
        self.train_set = [self._example(rng) for _ in range(cfg.n_train)]
        self.test_set = [self._example(rng) for _ in range(cfg.n_test)]
        self._sigma_cache: dict = {}

    def initial_design(self, how: str, rng: np.random.Generator) -> np.ndarray:
        L, S = self.n_channels, self.n_sources
        if how == "zero":
            return np.zeros((L, S))
        if how == "one-hot":
            return np.eye(L, S)
        return random_design(rng, np.ones(L), S)

    def _example(self, rng) -> TrainingExample:
        n = self.cfg.image_size
        x = smooth_phantom(rng, n)
        m = len(self.masks[0].indices)
        noise = tuple(complex_noise(rng, (m,), self.cfg.noise_std) for _ in range(self.n_channels))
        return TrainingExample(x, noise)

    def operators(self, design) -> list:
        return [Composition([WeightedSum(row, self.masks), self.dft]) for row in np.asarray(design)]

    def sigma_max(self, design) -> float:
        return fidelity_sigma_max(self.operators(design))

    def _sigma(self, design) -> float:
        key = np.asarray(design, dtype=np.float64).tobytes()
        if key not in self._sigma_cache:
            if len(self._sigma_cache) > 64:
                self._sigma_cache.clear()
            self._sigma_cache[key] = self.sigma_max(design)
        return self._sigma_cache[key]

    def measurements(self, operators, example) -> list:
        return [op.forward(example.ground_truth) + n for op, n in zip(operators, example.noise)]

    def network(self, params, example) -> Network:
        ops = self.operators(params["design"])
        ys = self.measurements(ops, example)
        gkeys = {"design": "design", "measurements": "measurements"}
        if "alpha" in self.learnable:
            gkeys["alpha"] = "alpha"
        pkeys = {"lam": "lam"} if "lam" in self.learnable else {}
        # sigma is only needed for certificates; the layer computes it lazily on a cache miss
        sigma = self._sigma_cache.get(np.asarray(params["design"], dtype=np.float64).tobytes())
        grad = GradientLayer(params["alpha"], ops, ys, keys=gkeys, sigma_max=sigma)
        prox = SmoothProxLayer(params["lam"], self.filter, keys=pkeys)
        return Network((grad, prox) * self.cfg.n_unrolls)

    def baseline_network(self, params, example, sources) -> Network:
        """Unmultiplexed PGD measuring the listed sources directly."""
        ops = [Composition([self.masks[s], self.dft]) for s in sources]
        ys = self.measurements(ops, example)
        grad = GradientLayer(params["alpha"], ops, ys)
        prox = SmoothProxLayer(params["lam"], self.filter)
        return Network((grad, prox) * self.cfg.n_unrolls)

    def initial_state(self, params, example, net=None) -> np.ndarray:
        n = self.cfg.image_size
        return np.zeros((n, n), dtype=np.complex128)

    def chain(self, params, example, report: GradientReport) -> dict:
        """Keep learnable gradients, adding the measurement-formation path to ``design``."""
        pg = report.param_grads
        grads = {k: pg[k] for k in self.learnable if k in pg}
        if "design" in self.learnable:
            g = np.array(grads.get("design", np.zeros_like(params["design"])), dtype=np.float64)
            spectrum = self.dft.forward(example.ground_truth)
            parts = [m.forward(spectrum) for m in self.masks]
            for l, gy in enumerate(pg.get("measurements", ())):
                for s, part in enumerate(parts):
                    g[l, s] += float(np.real(np.vdot(part, gy)))
            grads["design"] = g
        return grads

    def project(self, params) -> dict:
        """Nonnegative design, step size and prior strength inside the contraction budget."""
        out = dict(params)
        out["design"] = np.maximum(np.asarray(params["design"], dtype=np.float64), 0.0)
        sigma = self._sigma(out["design"])
        limit = self.cfg.max_contraction
        if sigma > 0 and out["alpha"] * sigma > limit:
            out["alpha"] = limit / sigma
        out["alpha"] = max(float(out["alpha"]), 1e-12)
        out["lam"] = float(np.clip(out["lam"], 0.0, limit / self.filter_sigma))
        return out


def random_design(rng: np.random.Generator, row_sums, n_sources: int) -> np.ndarray:
    """Uniform random nonnegative rows rescaled to the given row sums."""
    row_sums = np.asarray(row_sums, dtype=np.float64)
    d = rng.uniform(0.0, 1.0, (len(row_sums), n_sources))
    return d * (row_sums / d.sum(axis=1))[:, None]


def sensitivity_maps(n: int, n_coils: int) -> np.ndarray:
    """Smooth synthetic coil maps normalized so that ``sum_c |S_c|^2 = 1``."""
    t = np.linspace(-1.0, 1.0, n)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    maps = []
    for c in range(n_coils):
        ang = 2 * np.pi * c / n_coils
        cy, cx = 1.2 * np.sin(ang), 1.2 * np.cos(ang)
        mag = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.8**2))
        phase = np.exp(1j * np.pi * 0.25 * (np.cos(ang) * yy - np.sin(ang) * xx + c))
        maps.append(mag * phase)
    maps = np.stack(maps)
    return maps / np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))


def sampling_mask(rng: np.random.Generator, n: int, acceleration: float, center_lines: int) -> np.ndarray:
    """Cartesian phase-encode undersampling (rows) with a fully sampled centre, in DFT order."""
    keep = np.zeros(n, dtype=bool)
    c0 = n // 2 - center_lines // 2
    keep[c0:c0 + center_lines] = True
    target = int(round(n / acceleration))
    extra = max(target - int(keep.sum()), 0)
    candidates = np.flatnonzero(~keep)
    if extra:
        keep[rng.choice(candidates, size=min(extra, len(candidates)), replace=False)] = True
    rows = np.fft.ifftshift(keep)
    return np.broadcast_to(rows[:, None], (n, n)).copy()


class MRIPriorApp:
    """Learned invertible residual prior inside unrolled multi-coil reconstruction."""

    kind = "mri-prior"

    def __init__(self, cfg: ExperimentConfig):
        n = cfg.image_size
        self.cfg = cfg
        if cfg.n_coils < 2:
            raise ConfigError("mri-prior needs at least two coils")
        rng = np.random.default_rng([cfg.seed, 0])
        self.sensitivities = sensitivity_maps(n, cfg.n_coils)
        self.mask = sampling_mask(rng, n, cfg.acceleration, cfg.center_lines)
        if not self.mask.any():
            raise ConfigError("sampling mask is empty")
        full = np.broadcast_to(self.mask, (cfg.n_coils, n, n))
        self.A = Composition([
            Mask.from_boolean(full),
            DFT((cfg.n_coils, n, n), axes=(1, 2)),
            CoilStack(self.sensitivities),
        ])
        self.sigma = estimate_sigma_max(self.A, 100, 0)
        self.alpha = cfg.step_contraction / self.sigma
        self.prior_keys = [
            ("W1", "W2") if cfg.share_prior else (f"W1_{k}", f"W2_{k}") for k in range(cfg.n_unrolls)
        ]
        self.learnable = tuple(cfg.learnable) if cfg.learnable is not None else tuple(
            sorted({k for pair in self.prior_keys for k in pair})
        )
        params = {}
        h, k = cfg.hidden_channels, cfg.kernel_size
        for k1, k2 in dict.fromkeys(self.prior_keys):
            w1 = cfg.prior_init_scale * rng.standard_normal((h, 2, k, k))
            w2 = cfg.prior_init_scale * rng.standard_normal((2, h, k, k))
            params[k1], params[k2] = w1, w2
        self.params0 = self.project(params)
        self.train_set = [self._example(rng) for _ in range(cfg.n_train)]
        self.test_set = [self._example(rng) for _ in range(cfg.n_test)]

    def _example(self, rng) -> TrainingExample:
        x = smooth_phantom(rng, self.cfg.image_size, width=0.15)
        return TrainingExample(x, (complex_noise(rng, self.A.out_shape, self.cfg.noise_std),))

    def _prior(self, w1, w2, keys=None) -> InvertibleResidualLayer:
        n = self.cfg.image_size
        k = {"W1": keys[0], "W2": keys[1]} if keys else {}
        return InvertibleResidualLayer(w1, w2, (n, n), self.cfg.lipschitz_budget, keys=k)

    def measurements(self, example) -> np.ndarray:
        return self.A.forward(example.ground_truth) + example.noise[0]

    def network(self, params, example) -> Network:
        y = self.measurements(example)
        grad = GradientLayer(self.alpha, (self.A,), (y,), sigma_max=self.sigma)
        layers = []
        for k1, k2 in self.prior_keys:
            layers += [grad, self._prior(params[k1], params[k2], (k1, k2))]
        return Network(tuple(layers))

    def initial_state(self, params, example, net=None) -> np.ndarray:
        """Zero-filled reconstruction ``A^H y``."""
        return self.A.adjoint(self.measurements(example))

    def chain(self, params, example, report: GradientReport) -> dict:
        return {k: report.param_grads[k] for k in self.learnable if k in report.param_grads}

    def project(self, params) -> dict:
        out = dict(params)
        for k1, k2 in dict.fromkeys(self.prior_keys):
            layer = constrain_lipschitz(self._prior(params[k1], params[k2]))
            out[k1], out[k2] = layer.W1, layer.W2
        return out


def build_sr_design_app(cfg: ExperimentConfig) -> SRDesignApp:
    return SRDesignApp(cfg)


def build_mri_prior_app(cfg: ExperimentConfig) -> MRIPriorApp:
    return MRIPriorApp(cfg)


def build_app(cfg: ExperimentConfig):
    if cfg.application == "sr-design":
        return build_sr_design_app(cfg)
    if cfg.application == "mri-prior":
        return build_mri_prior_app(cfg)
    raise ConfigError(f"unknown application {cfg.application!r}")
