"""Temporally-conditioned latent diffusion over per-frame mesh latents.

Forward noising mixes Gaussian noise into the latent step by step while a
cross-attention layer injects a learned sequence context; a graph+time
feature stack summarizes temporal dependencies per spatial site; the reverse
chain denoises conditioned on those dependencies. Spatial sites of the
latent grid correspond one-to-one with coarse mesh vertices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .body_graph import BodyGraph, GraphConvLayer, resolve_activation

LAYOUT_FLAT = "(bt)chw"     # (B*T, C, H, W)
LAYOUT_VIDEO = "btchw"      # (B, T, C, H, W)
LAYOUT_SITES = "(bhw)tc"    # (B*H*W, T, C)

_LAYOUTS = (LAYOUT_FLAT, LAYOUT_VIDEO, LAYOUT_SITES)


class ScheduleError(ValueError):
    """Invalid diffusion schedule parameters."""


@dataclass
class DiffusionSchedule:
    """Per-step signal-keep coefficients and their cumulative products.

    ``alpha[t-1]`` is the step-t coefficient; ``alpha_bar`` stores the running
    products. Steps are 1-indexed in the step functions.
    """

    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.alpha)

    def validate(self) -> None:
        if self.n_steps < 2:
            raise ScheduleError(f"need at least 2 steps, got {self.n_steps}")
        if np.any(self.alpha <= 0.0) or np.any(self.alpha > 1.0):
            raise ScheduleError("alpha values must lie in (0, 1]")
        np.testing.assert_allclose(self.alpha_bar, np.cumprod(self.alpha), rtol=0, atol=0)
        if np.any(np.diff(self.alpha_bar) > 0):
            raise ScheduleError("alpha_bar must be non-increasing")


def _linear_betas(n_steps: int, target_tail: float = 0.05) -> np.ndarray:
    """Linearly spaced betas in [1e-4, 0.02], rescaled so the cumulative
    signal fraction at the last step hits ``target_tail``."""
    base = np.linspace(1e-4, 0.02, n_steps)

    def tail(scale: float) -> float:
        return float(np.prod(1.0 - np.clip(base * scale, 0.0, 0.999)))

    lo, hi = 1.0, 1.0
    while tail(hi) > target_tail and hi < 1e6:
        hi *= 2.0
    if tail(lo) < target_tail:
        hi = lo
        lo = 1e-6
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if tail(mid) > target_tail:
            lo = mid
        else:
            hi = mid
    return np.clip(base * hi, 1e-8, 0.999)


def make_schedule(n_steps: int, kind: str = "linear") -> DiffusionSchedule:
    if n_steps < 2:
        raise ScheduleError(f"need at least 2 steps, got {n_steps}")
    if kind == "linear":
        alpha = 1.0 - _linear_betas(n_steps)
    elif kind == "cosine":
        s = 0.008
        grid = np.arange(n_steps + 1) / n_steps
        f = np.cos((grid + s) / (1.0 + s) * math.pi / 2.0) ** 2
        bar = f / f[0]
        alpha = np.clip(bar[1:] / bar[:-1], 1e-3, 1.0 - 1e-12)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    sched = DiffusionSchedule(alpha=alpha, alpha_bar=np.cumprod(alpha))
    sched.validate()
    return sched


def _check_step(t: int, schedule: DiffusionSchedule) -> int:
    if not (1 <= t <= schedule.n_steps):
        raise ScheduleError(f"step {t} outside [1, {schedule.n_steps}]")
    return int(t)


def forward_noise_step(x_prev, t: int, schedule: DiffusionSchedule, noise) -> Tensor:
    """One noising step: sqrt(1-alpha_t) * noise + sqrt(alpha_t) * x_prev."""
    x_prev, noise = ad.as_tensor(x_prev), ad.as_tensor(noise)
    if noise.shape != x_prev.shape:
        raise ShapeError(f"noise shape {noise.shape} != input shape {x_prev.shape}")
    t = _check_step(t, schedule)
    a = float(schedule.alpha[t - 1])
    return ad.add(ad.mul(noise, math.sqrt(1.0 - a)), ad.mul(x_prev, math.sqrt(a)))


def reverse_step(
    z_t,
    t: int,
    eps_pred,
    schedule: DiffusionSchedule,
    noise,
    noise_term: str = "paper",
) -> Tensor:
    """One denoising step.

    Deterministic part: (z_t - (1-alpha_t)/sqrt(1-alpha_bar_t) * eps_pred)
    / sqrt(alpha_t). The additive term scales a standard Gaussian draw by
    sqrt(1-alpha_t) * sqrt(1-alpha_bar_{t-1}) / sqrt(1-alpha_bar_t)
    (``noise_term="posterior"`` uses the posterior standard deviation
    sqrt(beta_t * (1-alpha_bar_{t-1}) / (1-alpha_bar_t)), which coincides
    algebraically). The draw is forced to zero at t = 1.
    """
    z_t, eps_pred = ad.as_tensor(z_t), ad.as_tensor(eps_pred)
    if eps_pred.shape != z_t.shape:
        raise ShapeError(f"eps shape {eps_pred.shape} != input shape {z_t.shape}")
    t = _check_step(t, schedule)
    a = float(schedule.alpha[t - 1])
    abar = float(schedule.alpha_bar[t - 1])
    abar_prev = float(schedule.alpha_bar[t - 2]) if t > 1 else 1.0

    one_m_abar = 1.0 - abar
    if one_m_abar <= 0.0:
        eps_coef = 0.0  # alpha_t = 1 collapses both correction terms
        sigma = 0.0
    else:
        eps_coef = (1.0 - a) / math.sqrt(one_m_abar)
        if noise_term == "paper":
            sigma = math.sqrt(1.0 - a) * math.sqrt(1.0 - abar_prev) / math.sqrt(one_m_abar)
        elif noise_term == "posterior":
            sigma = math.sqrt((1.0 - a) * (1.0 - abar_prev) / one_m_abar)
        else:
            raise ScheduleError(f"unknown noise_term {noise_term!r}")
    mean = ad.mul(ad.sub(z_t, ad.mul(eps_pred, eps_coef)), 1.0 / math.sqrt(a))
    if t == 1 or sigma == 0.0:
        return mean
    noise = ad.as_tensor(noise)
    if noise.shape != z_t.shape:
        raise ShapeError(f"noise shape {noise.shape} != input shape {z_t.shape}")
    return ad.add(mean, ad.mul(noise, sigma))


# ---------------------------------------------------------------------------
# latent video layouts


@dataclass
class LatentVideo:
    """A latent tensor tagged with its axis layout and logical dimensions."""

    data: Tensor
    layout: str
    dims: tuple[int, int, int, int, int]  # (B, T, C, H, W)

    def __post_init__(self):
        if self.layout not in _LAYOUTS:
            raise ShapeError(f"unknown layout {self.layout!r}; expected one of {_LAYOUTS}")
        b, t, c, h, w = self.dims
        expected = {
            LAYOUT_FLAT: (b * t, c, h, w),
            LAYOUT_VIDEO: (b, t, c, h, w),
            LAYOUT_SITES: (b * h * w, t, c),
        }[self.layout]
        if self.data.shape != expected:
            raise ShapeError(
                f"layout {self.layout} with dims {self.dims} expects shape "
                f"{expected}, got {self.data.shape}"
            )


def rearrange(video: LatentVideo, target: str) -> LatentVideo:
    """Permute/reshape between the three supported layouts; differentiable."""
    if target not in _LAYOUTS:
        raise ShapeError(f"unknown target layout {target!r}")
    if target == video.layout:
        return video
    b, t, c, h, w = video.dims

    x = video.data
    # lift to the canonical (B, T, C, H, W) arrangement
    if video.layout == LAYOUT_FLAT:
        x = ad.reshape(x, (b, t, c, h, w))
    elif video.layout == LAYOUT_SITES:
        x = ad.reshape(x, (b, h, w, t, c))
        x = ad.transpose(x, (0, 3, 4, 1, 2))
    # drop into the target arrangement
    if target == LAYOUT_FLAT:
        x = ad.reshape(x, (b * t, c, h, w))
    elif target == LAYOUT_SITES:
        x = ad.transpose(x, (0, 3, 4, 1, 2))
        x = ad.reshape(x, (b * h * w, t, c))
    return LatentVideo(x, target, video.dims)


# ---------------------------------------------------------------------------
# attention layers and the feature stack


def _init(rng: np.random.Generator, shape, scale=None) -> Tensor:
    if scale is None:
        scale = 1.0 / math.sqrt(shape[0])
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


class AttentionLayer:
    """Residual scaled dot-product attention with learned projections.

    Output projection starts at zero so a fresh layer is the identity map.
    """

    def __init__(self, width: int, heads: int = 1, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        if width % heads:
            raise ShapeError(f"heads {heads} must divide width {width}")
        self.width = width
        self.heads = heads
        self.p = {
            "wq": _init(rng, (width, width)),
            "wk": _init(rng, (width, width)),
            "wv": _init(rng, (width, width)),
            "wo": Tensor(np.zeros((width, width)), requires_grad=True),
        }

    def __call__(self, query: Tensor, context: Tensor) -> Tensor:
        if query.shape[-1] != self.width or context.shape[-1] != self.width:
            raise ShapeError(
                f"token width {query.shape[-1]}/{context.shape[-1]} != layer width {self.width}"
            )
        q = ad.matmul(query, self.p["wq"])
        k = ad.matmul(context, self.p["wk"])
        v = ad.matmul(context, self.p["wv"])
        out = ad.attention(q, k, v, heads=self.heads)
        return ad.add(query, ad.matmul(out, self.p["wo"]))


@dataclass
class SequenceContext:
    """Learned conditioning rows injected during noising (one shared table)."""

    rows: Tensor  # (L, C)


@dataclass
class TemporalDependencies:
    """Per spatial site, a summary of its feature evolution over time."""

    delta: Tensor  # (B*H*W, T, C)
    dims: tuple[int, int, int, int, int]


def temporal_self_attention(video: LatentVideo, layer: AttentionLayer) -> TemporalDependencies:
    """Self-attention over the T axis, independently per spatial site."""
    if video.layout != LAYOUT_SITES:
        raise ShapeError(f"temporal attention expects layout {LAYOUT_SITES}, got {video.layout}")
    out = layer(video.data, video.data)
    return TemporalDependencies(delta=out, dims=video.dims)


def time_embedding(t: int, channels: int) -> np.ndarray:
    """Sinusoidal embedding of a diffusion step index."""
    half = (channels + 1) // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(1, half))
    ang = t * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    return emb[:channels]


class GraphTimePass:
    """One modeling pass: 3D conv over (T,H,W), per-frame graph conv over the
    coarse mesh, then temporal self-attention across frames."""

    def __init__(self, channels: int, kernel: int, heads: int, activation: str,
                 rng: np.random.Generator):
        k3 = (channels, channels, kernel, kernel, kernel)
        self.activation = activation
        self.conv_kernel = _init(rng, k3, scale=1.0 / math.sqrt(channels * kernel**3))
        self.graph = GraphConvLayer(channels, channels, activation=activation, rng=rng)
        self.time_attn = AttentionLayer(channels, heads=heads, rng=rng)
        self.p = {"conv_kernel": self.conv_kernel}

    def layers(self):
        return [self, self.graph, self.time_attn]

    def __call__(self, video: LatentVideo, coarse_adj: Tensor) -> tuple[LatentVideo, TemporalDependencies]:
        act = resolve_activation(self.activation)
        v = rearrange(video, LAYOUT_VIDEO)
        b, t, c, h, w = v.dims
        x = ad.transpose(v.data, (0, 2, 1, 3, 4))             # (B, C, T, H, W)
        x = act(ad.conv3d(x, self.p["conv_kernel"]))
        x = ad.transpose(x, (0, 2, 1, 3, 4))                  # back to (B, T, C, H, W)
        # per-frame graph conv: spatial sites are coarse vertices
        x = ad.reshape(x, (b * t, c, h * w))
        x = ad.transpose(x, (0, 2, 1))                        # (B*T, HW, C)
        x = self.graph.apply(coarse_adj, x)
        x = ad.transpose(x, (0, 2, 1))
        x = ad.reshape(x, (b, t, c, h, w))
        sites = rearrange(LatentVideo(x, LAYOUT_VIDEO, v.dims), LAYOUT_SITES)
        deps = temporal_self_attention(sites, self.time_attn)
        out = rearrange(LatentVideo(deps.delta, LAYOUT_SITES, v.dims), LAYOUT_FLAT)
        return out, deps


class FeatureStack:
    """Two graph+time passes applied back to back (independent weights)."""

    def __init__(self, channels: int, kernel: int, heads: int, activation: str,
                 rng: np.random.Generator, n_passes: int = 2):
        self.passes = [GraphTimePass(channels, kernel, heads, activation, rng)
                       for _ in range(n_passes)]

    def layers(self):
        out = []
        for p in self.passes:
            out += p.layers()
        return out

    def __call__(self, video: LatentVideo, coarse_adj: Tensor) -> tuple[LatentVideo, TemporalDependencies]:
        deps = None
        for p in self.passes:
            video, deps = p(video, coarse_adj)
        return video, deps


class NoisePredictor:
    """Estimates the noise component of a latent at a given diffusion step.

    Input normalization -> 3D conv -> per-frame graph conv -> temporal
    self-attention -> linear head (zero-init), with a sinusoidal step
    embedding added to the channel axis.
    """

    def __init__(self, channels: int, kernel: int, heads: int, activation: str,
                 rng: np.random.Generator):
        self.channels = channels
        self.activation = activation
        self.pass_ = GraphTimePass(channels, kernel, heads, activation, rng)
        self.p = {
            "ln_gamma": Tensor(np.ones(channels), requires_grad=True),
            "ln_beta": Tensor(np.zeros(channels), requires_grad=True),
            "head": Tensor(np.zeros((channels, channels)), requires_grad=True),
        }

    def layers(self):
        return [self] + self.pass_.layers()

    def __call__(self, video: LatentVideo, t: int, coarse_adj: Tensor) -> Tensor:
        b, tt, c, h, w = video.dims
        v = rearrange(video, LAYOUT_FLAT)
        x = ad.transpose(v.data, (0, 2, 3, 1))                # (B*T, H, W, C)
        x = ad.layer_norm(x, self.p["ln_gamma"], self.p["ln_beta"])
        emb = time_embedding(t, c)
        x = ad.add(x, ad.constant(emb))
        x = ad.transpose(x, (0, 3, 1, 2))
        feats, _ = self.pass_(LatentVideo(x, LAYOUT_FLAT, video.dims), coarse_adj)
        y = ad.transpose(feats.data, (0, 2, 3, 1))
        y = ad.matmul(y, self.p["head"])
        y = ad.transpose(y, (0, 3, 1, 2))
        return y


class DiffusionBlock:
    """Full noising/denoising block over a latent video.

    Forward: per-step noise mixing, each step followed by cross-attention
    against the learned sequence context. A two-pass graph+time stack then
    summarizes temporal dependencies, which condition every reverse step
    through cross-attention before the denoising update. Deterministic given
    the seed; returns the denoised video plus the mean squared error between
    predicted and injected noise (training signal for the predictor).
    """

    def __init__(self, graph: BodyGraph, channels: int, schedule: DiffusionSchedule,
                 kernel: int = 3, heads: int = 1, activation: str = "relu",
                 rng: np.random.Generator | None = None, noise_term: str = "paper"):
        if rng is None:
            rng = np.random.default_rng(0)
        self.schedule = schedule
        self.noise_term = noise_term
        self.coarse_adj = graph.coarse_adjacency()
        self.n_sites = graph.n_coarse
        self.context_attn = AttentionLayer(channels, heads=heads, rng=rng)
        self.stack = FeatureStack(channels, kernel, heads, activation, rng)
        self.cond_attn = AttentionLayer(channels, heads=heads, rng=rng)
        self.predictor = NoisePredictor(channels, kernel, heads, activation, rng)

    def layers(self):
        return ([self.context_attn, self.cond_attn]
                + self.stack.layers() + self.predictor.layers())

    def _to_tokens(self, video: LatentVideo) -> Tensor:
        b, t, c, h, w = video.dims
        x = rearrange(video, LAYOUT_FLAT).data
        x = ad.transpose(x, (0, 2, 3, 1))
        return ad.reshape(x, (b * t, h * w, c))

    def _from_tokens(self, tokens: Tensor, dims) -> LatentVideo:
        b, t, c, h, w = dims
        x = ad.reshape(tokens, (b * t, h, w, c))
        x = ad.transpose(x, (0, 3, 1, 2))
        return LatentVideo(x, LAYOUT_FLAT, dims)

    def __call__(self, x0: LatentVideo, ctx: SequenceContext, seed: int) -> tuple[LatentVideo, Tensor]:
        if x0.layout != LAYOUT_FLAT:
            raise ShapeError(f"block input must be {LAYOUT_FLAT}, got {x0.layout}")
        b, t, c, h, w = x0.dims
        if h * w != self.n_sites:
            raise ShapeError(
                f"latent grid {h}x{w} must match coarse vertex count {self.n_sites}"
            )
        rng = np.random.default_rng(seed)
        sched = self.schedule
        x0_data = x0.data.data

        # forward noising with context cross-attention after every step
        x = x0
        for step in range(1, sched.n_steps + 1):
            eps = rng.standard_normal(x.data.shape)
            noised = forward_noise_step(x.data, step, sched, ad.constant(eps))
            tokens = self._to_tokens(LatentVideo(noised, LAYOUT_FLAT, x0.dims))
            tokens = self.context_attn(tokens, ctx.rows)
            x = self._from_tokens(tokens, x0.dims)

        # temporal dependency summary from the noised latent
        _, deps = self.stack(x, self.coarse_adj)
        delta_tokens = self._to_tokens(
            rearrange(LatentVideo(deps.delta, LAYOUT_SITES, x0.dims), LAYOUT_FLAT)
        )

        # conditioned reverse chain; the predictor trains toward the noise
        # component of the live state, (z_t - sqrt(abar_t) x0)/sqrt(1-abar_t),
        # whose exact prediction recovers x0 at the final step
        z = x
        eps_losses = []
        for step in range(sched.n_steps, 0, -1):
            tokens = self.cond_attn(self._to_tokens(z), delta_tokens)
            z = self._from_tokens(tokens, x0.dims)
            eps_hat = self.predictor(z, step, self.coarse_adj)
            abar = float(sched.alpha_bar[step - 1])
            if 1.0 - abar > 0.0:
                target = (z.data.data - math.sqrt(abar) * x0_data) / math.sqrt(1.0 - abar)
            else:
                target = np.zeros_like(x0_data)
            diff = ad.sub(eps_hat, ad.constant(target))
            eps_losses.append(ad.mean(ad.mul(diff, diff)))
            draw = rng.standard_normal(z.data.shape) if step > 1 else np.zeros(z.data.shape)
            z_data = reverse_step(z.data, step, eps_hat, sched, ad.constant(draw),
                                  noise_term=self.noise_term)
            z = LatentVideo(z_data, LAYOUT_FLAT, x0.dims)

        eps_loss = ad.mul(sum(eps_losses[1:], eps_losses[0]), 1.0 / len(eps_losses))
        return z, eps_loss
