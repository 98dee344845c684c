"""
Recurrent state-space transition model.

    h_t     = GRU(h_{t-1}, s_{t-1})
    q(s_t)  = N(o_t, h_t, a_t)          posterior, observed steps
    p(s_t)  = N(h_t, a_{t-1})           prior, every step

1D latent: vectors and MLP heads. 2D latent: C_h×T token maps, a
convolutional GRU along the token axis and transformer-decoder heads whose
learned queries attend to [h tokens, action token, observation tokens].
"""

import logging
from typing import Literal, NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from schemas import MAX_ACCELERATION_MPS2, MAX_STEERING_RAD, Action, DynamicsConfig, LatentMode

logger = logging.getLogger(__name__)

SPEED_SCALE_MPS = 10.0

NoiseMode = Literal["sample", "mean"]


class GaussianParams(NamedTuple):
    mean: Tensor
    std: Tensor


class LatentState(NamedTuple):
    s: Tensor
    h: Tensor


class Rollout(NamedTuple):
    states: list[LatentState]  # m + n
    posteriors: list[GaussianParams]  # m
    priors: list[GaussianParams]  # m + n
    observed: int


def gaussian_from_raw(raw: Tensor, sigma_min: float, dim: int) -> GaussianParams:
    mean, std_raw = raw.chunk(2, dim=dim)
    return GaussianParams(mean, F.softplus(std_raw) + sigma_min)


def zero_init(layer: nn.Linear | nn.Conv1d) -> nn.Module:
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)
    return layer


# ============================================================================
# Actions
# ============================================================================


class ActionEncoder(nn.Module):
    """2-layer MLP on (acceleration, steering, speed), each scaled to ~unit range."""

    def __init__(self, action_dim: int, hidden_dim: int) -> None:
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(3, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, action_dim))
        self.register_buffer(
            "scale",
            torch.tensor([1 / MAX_ACCELERATION_MPS2, 1 / MAX_STEERING_RAD, 1 / SPEED_SCALE_MPS]),
            persistent=False,
        )

    def forward(self, raw: Tensor) -> Tensor:
        return self.mlp(raw * self.scale.to(raw))


def encode_action(action: Action, speed_mps: float, encoder: ActionEncoder) -> Tensor:
    dtype = encoder.mlp[0].weight.dtype
    raw = torch.tensor([[action.acceleration_mps2, action.steering_rad, speed_mps]], dtype=dtype)
    return encoder(raw)[0]


# ============================================================================
# GRU
# ============================================================================


class GRUUpdate(nn.Module):
    """
    h' = (1 - z) * h + z * ĥ with z = σ(W_z s + U_z h), r = σ(W_r s + U_r h),
    ĥ = tanh(W s + U (r * h)). Token mode replaces the affine maps with
    kernel-3 1D convolutions along the token axis.
    """

    def __init__(self, input_dim: int, hidden_dim: int, tokens: bool = False) -> None:
        super().__init__()
        if tokens:
            self.input_map = nn.Conv1d(input_dim, 3 * hidden_dim, 3, padding=1)
            self.hidden_map = nn.Conv1d(hidden_dim, 3 * hidden_dim, 3, padding=1)
        else:
            self.input_map = nn.Linear(input_dim, 3 * hidden_dim)
            self.hidden_map = nn.Linear(hidden_dim, 3 * hidden_dim)
        # channel axis: 1 for B×C×T, -1 for B×D
        self.axis = 1 if tokens else -1

    def gates(self, h: Tensor, s: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        xz, xr, xn = self.input_map(s).chunk(3, dim=self.axis)
        hz, hr, _ = self.hidden_map(h).chunk(3, dim=self.axis)
        z = torch.sigmoid(xz + hz)
        r = torch.sigmoid(xr + hr)
        _, _, hn = self.hidden_map(r * h).chunk(3, dim=self.axis)
        candidate = torch.tanh(xn + hn)
        return z, r, candidate

    def forward(self, h: Tensor, s: Tensor, z_override: Tensor | None = None) -> Tensor:
        z, _, candidate = self.gates(h, s)
        if z_override is not None:
            z = z_override.expand_as(z)
        return (1 - z) * h + z * candidate


def gru_update(h: Tensor, s: Tensor, gru: GRUUpdate) -> Tensor:
    return gru(h, s)


# ============================================================================
# Gaussian heads
# ============================================================================


class VectorGaussianHead(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, sigma_min: float) -> None:
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.ReLU(), zero_init(nn.Linear(hidden_dim, 2 * out_dim)))
        self.sigma_min = sigma_min

    def forward(self, parts: list[Tensor]) -> GaussianParams:
        return gaussian_from_raw(self.mlp(torch.cat(parts, dim=-1)), self.sigma_min, dim=-1)


class CrossAttentionBlock(nn.Module):
    def __init__(self, channels: int, heads: int) -> None:
        super().__init__()
        self.norm_q = nn.LayerNorm(channels)
        self.norm_kv = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.norm_out = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(nn.Linear(channels, 4 * channels), nn.GELU(), nn.Linear(4 * channels, channels))

    def forward(self, q: Tensor, kv: Tensor) -> Tensor:
        kv = self.norm_kv(kv)
        q = q + self.attn(self.norm_q(q), kv, kv, need_weights=False)[0]
        return q + self.mlp(self.norm_out(q))


class TokenGaussianHead(nn.Module):
    """
    Learned query per state token; key-values are the h tokens (plus the same
    query embedding as position), one action token and, for the posterior,
    the observation tokens.
    """

    def __init__(self, cfg: DynamicsConfig, n_tokens: int, obs_channels: int | None) -> None:
        super().__init__()
        c = cfg.token_channels
        self.queries = nn.Parameter(torch.randn(n_tokens, c) * 0.02)
        self.action_token = nn.Linear(cfg.action_dim, c)
        self.obs_proj = nn.Linear(obs_channels, c) if obs_channels is not None else None
        self.decoder = CrossAttentionBlock(c, cfg.heads)
        self.out = zero_init(nn.Linear(c, 2 * c))
        self.sigma_min = cfg.sigma_min

    def forward(self, h: Tensor, action_code: Tensor, obs: Tensor | None = None) -> GaussianParams:
        b = h.shape[0]
        kv = [h.transpose(1, 2) + self.queries[None], self.action_token(action_code)[:, None]]
        if self.obs_proj is not None:
            if obs is None:
                raise ValueError("posterior head needs observation tokens")
            kv.append(self.obs_proj(obs))
        q = self.decoder(self.queries[None].expand(b, -1, -1), torch.cat(kv, dim=1))
        raw = self.out(q).transpose(1, 2)  # B×2C×T
        return gaussian_from_raw(raw, self.sigma_min, dim=1)


def sample_state(g: GaussianParams, noise: Tensor, reparameterized: bool = True) -> Tensor:
    mean, std = g
    if not reparameterized:
        mean, std = mean.detach(), std.detach()
    return mean + std * noise


# ============================================================================
# Transition model
# ============================================================================


class Dynamics(nn.Module):
    def __init__(self, cfg: DynamicsConfig, latent_mode: LatentMode, obs_dim: int, n_tokens: int) -> None:
        """
        obs_dim: length of o_t (1D) or channels of its tokens (2D).
        n_tokens: state token count T (2D only).
        """
        super().__init__()
        self.cfg = cfg
        self.latent_mode = latent_mode
        self.n_tokens = n_tokens
        self.action_encoder = ActionEncoder(cfg.action_dim, cfg.hidden_dim)

        if latent_mode == "1D":
            self.s_shape: tuple[int, ...] = (cfg.stoch_dim,)
            self.h_shape: tuple[int, ...] = (cfg.deter_dim,)
            self.gru = GRUUpdate(cfg.stoch_dim, cfg.deter_dim)
            self.posterior = VectorGaussianHead(obs_dim + cfg.deter_dim + cfg.action_dim, cfg.hidden_dim, cfg.stoch_dim, cfg.sigma_min)
            self.prior = VectorGaussianHead(cfg.deter_dim + cfg.action_dim, cfg.hidden_dim, cfg.stoch_dim, cfg.sigma_min)
        else:
            c = cfg.token_channels
            self.s_shape = (c, n_tokens)
            self.h_shape = (c, n_tokens)
            self.gru = GRUUpdate(c, c, tokens=True)
            self.posterior = TokenGaussianHead(cfg, n_tokens, obs_dim)
            self.prior = TokenGaussianHead(cfg, n_tokens, None)

        self.h0 = nn.Parameter(torch.zeros(self.h_shape))
        self.s0 = nn.Parameter(torch.zeros(self.s_shape))

    @property
    def state_channels(self) -> int:
        """Channels of concat(s, h): per token in 2D, vector length in 1D."""
        if self.latent_mode == "2D":
            return 2 * self.cfg.token_channels
        return self.cfg.stoch_dim + self.cfg.deter_dim

    def initial_state(self, batch: int) -> LatentState:
        return LatentState(self.s0.expand(batch, *self.s_shape), self.h0.expand(batch, *self.h_shape))

    def posterior_params(self, obs: Tensor, h: Tensor, action_code: Tensor) -> GaussianParams:
        if self.latent_mode == "1D":
            return self.posterior([obs, h, action_code])
        return self.posterior(h, action_code, obs)

    def prior_params(self, h: Tensor, prev_action_code: Tensor) -> GaussianParams:
        if self.latent_mode == "1D":
            return self.prior([h, prev_action_code])
        return self.prior(h, prev_action_code)

    def rollout(
        self,
        observations: list[Tensor],
        actions: Tensor,
        n: int,
        noise: NoiseMode = "sample",
        generator: torch.Generator | None = None,
    ) -> Rollout:
        """
        observations: m tensors o_1..o_m. actions: B×L×3 raw (accel, steer,
        speed) with L ≥ m + n. Steps past m sample from the prior.
        """
        m = len(observations)
        if m < 1:
            raise ValueError("rollout needs at least one observation")
        if n < 0:
            raise ValueError(f"future steps must be >= 0, got {n}")
        if actions.shape[1] < m + n:
            raise ValueError(f"action horizon {actions.shape[1]} shorter than m + n = {m + n}")

        b = actions.shape[0]
        codes = self.action_encoder(actions)
        no_action = torch.zeros_like(codes[:, 0])
        s, h = self.initial_state(b)

        states: list[LatentState] = []
        posteriors: list[GaussianParams] = []
        priors: list[GaussianParams] = []
        for t in range(m + n):
            h = self.gru(h, s)
            prior = self.prior_params(h, codes[:, t - 1] if t > 0 else no_action)
            priors.append(prior)
            if t < m:
                g = self.posterior_params(observations[t], h, codes[:, t])
                posteriors.append(g)
            else:
                g = prior

            if noise == "mean":
                eps = torch.zeros_like(g.mean)
            else:
                eps = torch.randn(g.mean.shape, generator=generator, dtype=g.mean.dtype, device=g.mean.device)
            s = sample_state(g, eps)
            states.append(LatentState(s, h))

        return Rollout(states, posteriors, priors, m)
