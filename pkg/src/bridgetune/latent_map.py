"""Projection from hidden-state space to the latent bridge space.

Covers the PCA endpoint table, the 3-layer mapping network, the discrete
latent path, the two goodness functions (transition-PDF sum and Girsanov
KL of the approximated SDE), and the map-fitting loop over a frozen
backbone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import bridges
from .autodiff import Tensor
from .backbone import BackboneState, HiddenTrace, forward
from .snapshot import load_snapshot, save_snapshot
from .spline import interp_weights

# Full-scale reference presets (desk runs use the smaller values below).
FULLSCALE_FITMAP_LR = 1e-3
FULLSCALE_FITMAP_BATCH = 128
FULLSCALE_FITMAP_GRAD_CLIP = 1.0
FULLSCALE_FITMAP_WARMUP_RATIO = 0.01
FULLSCALE_FITMAP_STEPS = {"pdf": 100_000, "sde": 500_000}
FULLSCALE_MAPNET_DIMS = {"pdf": (1024, 256, 128), "sde": (1024, 256, 32)}


class RankDeficientError(ValueError):
    """Embedding covariance has rank below the requested latent dimension."""


@dataclass(frozen=True)
class EndpointTable:
    """Per-token bridge tails: |V| x r matrix whose rows all have norm eta."""

    beta: np.ndarray
    eta: float
    r: int

    def row(self, token: int) -> np.ndarray:
        return self.beta[token]


def build_endpoints(V_embed: np.ndarray, r: int, eta: float = 1.0) -> EndpointTable:
    """PCA of the output embedding rows: project mean-centered rows onto the
    top-r principal directions, then rescale every row to norm eta.

    Sign convention for determinism: each principal direction's
    largest-magnitude component is made positive. Zero rows map to a fixed
    unit direction scaled by eta.
    """
    V_embed = np.asarray(V_embed, dtype=np.float64)
    n, d = V_embed.shape
    if not (r < d and n > r):
        raise ValueError(f"need r < d and |V| > r, got r={r}, d={d}, |V|={n}")
    centered = V_embed - V_embed.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    achieved = int((eigvals > 1e-12 * max(eigvals[0], 1e-300)).sum())
    if achieved < r:
        raise RankDeficientError(
            f"covariance rank {achieved} below latent dimension {r}")
    P = eigvecs[:, :r]
    for j in range(r):
        k = int(np.argmax(np.abs(P[:, j])))
        if P[k, j] < 0:
            P[:, j] = -P[:, j]
    proj = centered @ P
    norms = np.linalg.norm(proj, axis=1)
    beta = np.empty_like(proj)
    fixed = np.zeros(r)
    fixed[0] = 1.0
    for i in range(n):
        beta[i] = fixed * eta if norms[i] == 0.0 else proj[i] * (eta / norms[i])
    return EndpointTable(beta=beta, eta=float(eta), r=r)


@dataclass
class MapNet:
    """Three affine layers with relu between them. Input is [h_o; h_bar]
    (2d) for the PDF method, plus a scalar time channel (2d+1) for SDE."""

    weights: list
    biases: list
    dims: tuple
    time_augmented: bool

    def forward(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(w, h), b)
            if i < last:
                h = ad.relu(h)
        return h

    def drift(self, features: Tensor, z: Tensor) -> Tensor:
        """SDE drift hook: the learned map ignores the current state z, but
        the signature lets tests substitute the analytic bridge drift."""
        return self.forward(features)

    def trainables(self):
        return self.weights + self.biases

    @property
    def out_dim(self) -> int:
        return self.dims[-1]


def new_mapnet(input_dim: int, hidden_dims, out_dim: int,
               rng: np.random.Generator, time_augmented: bool) -> MapNet:
    dims = (input_dim, *hidden_dims, out_dim)
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        scale = 1.0 / math.sqrt(d_in)
        weights.append(Tensor(rng.uniform(-scale, scale, size=(d_out, d_in)),
                              requires_grad=True))
        biases.append(Tensor(np.zeros((d_out, 1)), requires_grad=True))
    return MapNet(weights=weights, biases=biases, dims=dims,
                  time_augmented=time_augmented)


def latent_times(num_layers: int):
    """t_{i+1} = (i+1)/(L+2) for the L+1 trace entries i = 0..L."""
    L = num_layers
    return [(i + 1) / (L + 2) for i in range(L + 1)]


def project_discrete(mapnet: MapNet, trace: HiddenTrace):
    """LatentPath: (t_i, u_i) with u_i = g([h_o; h_bar]) per trace entry."""
    times = latent_times(len(trace.h_out) - 1)
    path = []
    for t, ho, hc in zip(times, trace.h_out, trace.h_ctx):
        u = mapnet.forward(ad.concat([ho, hc], axis=0))
        path.append((t, u))
    return path


def goodness_pdf(mapnet: MapNet, trace: HiddenTrace, spec: bridges.BridgeSpec) -> Tensor:
    """Sum over latent points of the bridge marginal log-density, kept on
    the autodiff graph (differentiable in gamma and in the trace)."""
    if spec.horizon != 1.0:
        raise ValueError("pipeline bridges are fixed to horizon 1")
    r = spec.dim
    total = None
    for t, u in project_discrete(mapnet, trace):
        m = bridges.mean_coeff(spec, t) * spec.beta
        v = bridges.marginal_variance(spec, t)
        diff = ad.sub(u, Tensor(m.reshape(-1, 1)))
        term = ad.scalar_mul(ad.tensor_sum(ad.square(diff)), -1.0 / (2.0 * v))
        const = Tensor(np.asarray(-0.5 * r * math.log(2.0 * math.pi * v)))
        term = ad.add(term, const)
        total = term if total is None else ad.add(total, term)
    return total


@lru_cache(maxsize=32)
def _spline_feature_weights(num_layers: int, n_steps: int) -> np.ndarray:
    """Interpolation weights from trace knots (layer indices 0..L) to the
    simulation grid, through x = (L+2) t - 1. Constant given (L, n_steps)."""
    L = num_layers
    ts = np.arange(n_steps - 1) / n_steps
    xs = (L + 2) * ts - 1.0
    return interp_weights(np.arange(L + 1, dtype=np.float64), xs)


def goodness_sde(mapnet, trace: HiddenTrace, spec: bridges.BridgeSpec,
                 n_steps: int, rng: np.random.Generator) -> Tensor:
    """Girsanov KL of the g-driven latent SDE against the bridge.

    Z is simulated from zero under drift g(h_o(x), h_bar(x), t) with the
    bridge's diffusion scale; the running integrand 0.5 ||u||^2 dt with
    u = sigma^-1 (g - bridge drift) accumulates up to t_max = 1 - 1/n_steps.
    Differentiable through g and through the spline-interpolated trace.
    """
    if n_steps < 4:
        raise ValueError("n_steps must be at least 4")
    if spec.horizon != 1.0:
        raise ValueError("pipeline bridges are fixed to horizon 1")
    L = len(trace.h_out) - 1
    W = _spline_feature_weights(L, n_steps)
    H_o = ad.concat(trace.h_out, axis=1)
    H_c = ad.concat(trace.h_ctx, axis=1)
    r = spec.dim
    sig = spec.diffusion_scale()
    dt = 1.0 / n_steps
    noise = rng.standard_normal((n_steps - 1, r)) * (sig * math.sqrt(dt))

    z = Tensor(np.zeros((r, 1)))
    beta_col = spec.beta.reshape(-1, 1)
    total = None
    for k in range(n_steps - 1):
        t = k * dt
        w = Tensor(W[k].reshape(-1, 1))
        feats = ad.concat([ad.matmul(H_o, w), ad.matmul(H_c, w),
                           Tensor(np.asarray([[t]]))], axis=0)
        g = mapnet.drift(feats, z)
        if spec.kind == bridges.BROWNIAN:
            b = ad.scalar_mul(ad.sub(Tensor(beta_col), z), 1.0 / (1.0 - t))
        else:
            s = spec.q * (1.0 - t)
            coef = -spec.q / math.tanh(s)
            offset = spec.q * beta_col / math.sinh(s)
            b = ad.add(ad.scalar_mul(z, coef), Tensor(offset))
        u = ad.scalar_mul(ad.sub(g, b), 1.0 / sig)
        term = ad.scalar_mul(ad.tensor_sum(ad.square(u)), 0.5 * dt)
        total = term if total is None else ad.add(total, term)
        if k < n_steps - 2:
            z = ad.add(ad.add(z, ad.scalar_mul(g, dt)),
                       Tensor(noise[k].reshape(-1, 1)))
    return total


@dataclass(frozen=True)
class FitMapConfig:
    method: str = "pdf"
    bridge_kind: str = bridges.BROWNIAN
    q: float = 1.0
    sigma: float = 1.0
    hidden_dims: tuple = (64, 32)
    latent_dim: int = 8
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_steps: int = 400
    grad_clip: float = 1.0
    warmup_ratio: float = 0.01
    sde_steps: int = 8
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("pdf", "sde"):
            raise ValueError(f"method must be pdf or sde, got {self.method!r}")


def _sample_spec(cfg: FitMapConfig, endpoints: EndpointTable, token: int):
    return bridges.BridgeSpec(kind=cfg.bridge_kind, beta=endpoints.row(token),
                              horizon=1.0, q=cfg.q, sigma=cfg.sigma)


def collect_traces(state: BackboneState, samples):
    """Frozen-backbone traces for (tokens, target, mask_position) samples.
    The backbone never changes during map fitting, so traces are computed
    once, off-graph."""
    traces = []
    with ad.no_grad():
        for tokens, target, pos in samples:
            _, trace = forward(state, tokens, pos)
            traces.append((trace, target))
    return traces


def fit_map(state: BackboneState, samples, cfg: FitMapConfig,
            endpoints: EndpointTable, holdout=None):
    """Train gamma by Adam to maximize goodness_pdf or minimize the SDE KL.

    samples/holdout: (tokens, target, mask_position) triples. Returns
    (MapNet, history) where history rows are (step, train_loss, holdout_goodness).
    """
    rng = np.random.default_rng(cfg.seed)
    input_dim = 2 * state.config.hidden_dim + (1 if cfg.method == "sde" else 0)
    mapnet = new_mapnet(input_dim, cfg.hidden_dims, cfg.latent_dim, rng,
                        time_augmented=cfg.method == "sde")
    traces = collect_traces(state, samples)
    held = collect_traces(state, holdout) if holdout else None
    params = mapnet.trainables()
    adam = ad.AdamState(params, cfg.learning_rate)
    warmup_steps = max(1, int(cfg.warmup_ratio * cfg.max_steps))
    history = []

    def holdout_goodness():
        if held is None:
            return math.nan
        with_total = 0.0
        for trace, target in held:
            spec = _sample_spec(cfg, endpoints, target)
            if cfg.method == "pdf":
                val = goodness_pdf(mapnet, trace, spec).item()
            else:
                val = -goodness_sde(mapnet, trace, spec, cfg.sde_steps,
                                    np.random.default_rng(cfg.seed)).item()
            with_total += val
        return with_total / len(held)

    for step in range(1, cfg.max_steps + 1):
        idx = rng.integers(0, len(traces), size=cfg.batch_size)
        losses = []
        for j in idx:
            trace, target = traces[j]
            spec = _sample_spec(cfg, endpoints, target)
            if cfg.method == "pdf":
                losses.append(ad.scalar_mul(goodness_pdf(mapnet, trace, spec), -1.0))
            else:
                losses.append(goodness_sde(mapnet, trace, spec, cfg.sde_steps, rng))
        loss = losses[0]
        for extra in losses[1:]:
            loss = ad.add(loss, extra)
        loss = ad.scalar_mul(loss, 1.0 / len(losses))
        grads = ad.backward(loss)
        ad.clip_gradients(params, grads, cfg.grad_clip)
        adam.learning_rate = cfg.learning_rate * min(1.0, step / warmup_steps)
        ad.adam_step(params, grads, adam)
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            history.append((step, loss.item(), holdout_goodness()))
    return mapnet, history


def save_mapnet(path, mapnet: MapNet, method: str, endpoints: EndpointTable,
                bridge_kind: str = bridges.BROWNIAN, q: float = 1.0,
                sigma: float = 1.0) -> None:
    header = {
        "kind": "mapnet", "method": method, "dims": list(mapnet.dims),
        "time_augmented": mapnet.time_augmented, "eta": endpoints.eta,
        "r": endpoints.r, "bridge_kind": bridge_kind, "q": q, "sigma": sigma,
    }
    tensors = {"endpoints.beta": endpoints.beta}
    for i, (w, b) in enumerate(zip(mapnet.weights, mapnet.biases)):
        tensors[f"map.w{i}"] = w.data
        tensors[f"map.b{i}"] = b.data
    save_snapshot(path, header, tensors)


def load_mapnet(path):
    """Returns (MapNet, EndpointTable, header)."""
    header, tensors = load_snapshot(path)
    if header.get("kind") != "mapnet":
        raise ValueError(f"{path} is not a map snapshot")
    dims = tuple(header["dims"])
    n_layers = len(dims) - 1
    weights = [Tensor(tensors[f"map.w{i}"], requires_grad=True) for i in range(n_layers)]
    biases = [Tensor(tensors[f"map.b{i}"], requires_grad=True) for i in range(n_layers)]
    mapnet = MapNet(weights=weights, biases=biases, dims=dims,
                    time_augmented=header["time_augmented"])
    endpoints = EndpointTable(beta=tensors["endpoints.beta"],
                              eta=header["eta"], r=header["r"])
    return mapnet, endpoints, header
