"""Modular multimodal transformer velocity model.

Each observation modality is encoded into a single 64-d token whose first
5 entries are that modality's learned tag; the noisy action sequence and
the flow time contribute one token each per element. Attention is masked
so that observation and time tokens never read from action tokens, and
action tokens only read from earlier actions. Tactile tokens can be
dropped per example during training (masked training), which shortens the
sequence instead of zero-filling.

The transformer is written from scratch (pre-norm blocks, explicit
additive masks with -inf logits) so the mask contract is exactly testable
and attention probabilities can be captured for analysis.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn

from . import liegroup as lg
from .flowmatch import ActionNormalizer, ActionSequence

MODALITY_ORDER = ("vision", "tactile", "proprio")
TAG_DIM = 5

# raw tactile event counts are squashed into roughly [0, 3] for the encoder
TACTILE_COUNT_CLIP = 30.0
TACTILE_COUNT_SCALE = 10.0


class NumericError(RuntimeError):
    """Non-finite activations or loss; carries the offending layer index."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


@dataclass
class PolicyConfig:
    latent_dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ff_dim: int = 256
    n_actions: int = 16
    modalities: tuple[str, ...] = ("vision", "tactile", "proprio")
    image_hw: tuple[int, int] = (48, 48)
    tactile_hw: tuple[int, int] = (16, 16)
    proprio_dim: int = 6
    conv_channels: tuple[int, int, int] = (8, 16, 32)
    objective: str = "flow"  # flow | bc | ddpm
    sigma_rot: float = 1.0
    diffusion_steps: int = 100
    image_noise_std: float = 0.0  # training-time per-pixel noise
    time_in_actions_group: bool = True

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        unknown = set(self.modalities) - set(MODALITY_ORDER)
        if unknown:
            raise ValueError(f"unknown modalities {sorted(unknown)}")
        if not self.modalities:
            raise ValueError("at least one modality required")
        if self.objective not in ("flow", "bc", "ddpm"):
            raise ValueError(f"unknown objective {self.objective!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        d["image_hw"] = list(self.image_hw)
        d["tactile_hw"] = list(self.tactile_hw)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "PolicyConfig":
        d = dict(d)
        for key in ("modalities", "image_hw", "tactile_hw", "conv_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return PolicyConfig(**d)


def build_attention_mask(n_obs: int, n_actions: int) -> np.ndarray:
    """Boolean visibility matrix for token order [obs..., time, actions...].

    Observation and time tokens see each other and nothing else; action i
    sees all observation tokens, the time token, and actions j <= i.
    """
    if n_obs < 1 or n_actions < 1:
        raise ValueError("need at least one observation token and one action token")
    n_ctx = n_obs + 1  # observations plus the time token
    size = n_ctx + n_actions
    mask = np.zeros((size, size), dtype=bool)
    mask[:n_ctx, :n_ctx] = True
    mask[n_ctx:, :n_ctx] = True
    act = np.tril(np.ones((n_actions, n_actions), dtype=bool))
    mask[n_ctx:, n_ctx:] = act
    return mask


def quats_to_rot6d(q: np.ndarray) -> np.ndarray:
    """First two rotation-matrix columns; a continuous network input."""
    m = lg.quat_to_matrix(q)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def actions_to_inputs(actions: ActionSequence) -> np.ndarray:
    """(N, 9) network representation: translation + 6d rotation."""
    return np.concatenate([actions.translations, quats_to_rot6d(actions.rotations)], axis=-1)


def neutral_action_inputs(n_actions: int) -> np.ndarray:
    """Identity-pose inputs used by the regression objective (no noise input)."""
    out = np.zeros((n_actions, 9))
    out[:, 3] = 1.0  # first column (1,0,0)
    out[:, 7] = 1.0  # second column (0,1,0)
    return out


def time_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of a scalar time in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(
        torch.linspace(0.0, math.log(1000.0), half, dtype=t.dtype, device=t.device)
    )
    ang = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class ConvEncoder(nn.Module):
    """Three stride-2 conv blocks, global average pool, linear projection."""

    def __init__(self, in_channels: int, channels: tuple[int, int, int], out_dim: int):
        super().__init__()
        c1, c2, c3 = channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, c1, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1),
            nn.GELU(),
        )
        self.proj = nn.Linear(c3, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.net(x)
        h = h.mean(dim=(2, 3))
        return self.proj(h)


class ProprioEncoder(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class MaskedSelfAttention(nn.Module):
    """Multi-head attention with an explicit additive mask (-inf logits)."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads:
            raise ValueError("latent_dim must divide by n_heads")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.last_probs: torch.Tensor | None = None

    def forward(self, x: torch.Tensor, mask: torch.Tensor, capture: bool = False) -> torch.Tensor:
        b, s, d = x.shape
        qkv = self.qkv(x).view(b, s, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        neg_inf = torch.tensor(float("-inf"), dtype=x.dtype, device=x.device)
        scores = torch.where(mask, scores, neg_inf)
        probs = torch.softmax(scores, dim=-1)
        if capture:
            self.last_probs = probs.detach()
        h = (probs @ v).transpose(1, 2).reshape(b, s, d)
        return self.out(h)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int, ff_dim: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MaskedSelfAttention(dim, n_heads)
        self.ln2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(), nn.Linear(ff_dim, dim))

    def forward(self, x: torch.Tensor, mask: torch.Tensor, capture: bool = False) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), mask, capture=capture)
        x = x + self.ff(self.ln2(x))
        return x


class PolicyNet(nn.Module):
    """Velocity model over (observation tokens, time token, action tokens)."""

    def __init__(self, config: PolicyConfig):
        super().__init__()
        self.config = config
        dim = config.latent_dim
        feat_dim = dim - TAG_DIM

        self.encoders = nn.ModuleDict()
        if "vision" in config.modalities:
            self.encoders["vision"] = ConvEncoder(1, config.conv_channels, feat_dim)
        if "tactile" in config.modalities:
            self.encoders["tactile"] = ConvEncoder(2, config.conv_channels, feat_dim)
        if "proprio" in config.modalities:
            self.encoders["proprio"] = ProprioEncoder(config.proprio_dim, feat_dim)
        self.modality_tags = nn.Parameter(torch.randn(len(MODALITY_ORDER), TAG_DIM) * 0.1)

        self.action_embed = nn.Linear(9, dim)
        self.action_pos = nn.Parameter(torch.randn(config.n_actions, dim) * 0.02)
        self.time_proj = nn.Linear(dim, dim)
        self.blocks = nn.ModuleList(
            [TransformerBlock(dim, config.n_heads, config.ff_dim) for _ in range(config.n_layers)]
        )
        self.final_norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, 6)
        self.last_hidden: torch.Tensor | None = None

    # -- encoding ----------------------------------------------------------

    def encode_tokens(
        self,
        image: torch.Tensor | None = None,
        tactile: torch.Tensor | None = None,
        proprio: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, list[str]]:
        """Encode present modalities into tagged tokens (B, n_obs, latent).

        Returns the token stack and the ordered modality names it contains.
        """
        inputs = {"vision": image, "tactile": tactile, "proprio": proprio}
        tokens, names = [], []
        for idx, name in enumerate(MODALITY_ORDER):
            x = inputs[name]
            if x is None:
                continue
            if name not in self.encoders:
                raise ValueError(f"model has no {name} encoder")
            feat = self.encoders[name](x)
            tag = self.modality_tags[idx].to(feat.dtype).expand(feat.shape[0], TAG_DIM)
            tokens.append(torch.cat([tag, feat], dim=-1))
            names.append(name)
        if not tokens:
            raise ValueError("no observation modalities present")
        return torch.stack(tokens, dim=1), names

    # -- transformer -------------------------------------------------------

    def forward_tokens(
        self,
        obs_tokens: torch.Tensor,
        action_inputs: torch.Tensor,
        t: torch.Tensor,
        capture: bool = False,
    ) -> torch.Tensor:
        """Run the transformer; obs_tokens (B, n_obs, D), actions (B, N, 9), t (B,)."""
        b, n_obs, dim = obs_tokens.shape
        n_act = action_inputs.shape[1]
        if n_act != self.config.n_actions:
            raise ValueError(f"expected {self.config.n_actions} actions, got {n_act}")
        time_tok = self.time_proj(time_features(t, dim))[:, None, :]
        act_tok = self.action_embed(action_inputs) + self.action_pos.to(obs_tokens.dtype)[None]
        x = torch.cat([obs_tokens, time_tok, act_tok], dim=1)

        mask_np = build_attention_mask(n_obs, n_act)
        mask = torch.from_numpy(mask_np).to(obs_tokens.device)
        for i, block in enumerate(self.blocks):
            x = block(x, mask, capture=capture)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after block {i}", layer=i)
        x = self.final_norm(x)
        if capture:
            self.last_hidden = x.detach()
        out = self.head(x[:, n_obs + 1 :, :])
        if not torch.isfinite(out).all():
            raise NumericError("non-finite head output", layer=self.config.n_layers)
        return out

    def forward(self, batch: dict, capture: bool = False) -> torch.Tensor:
        obs_tokens, _ = self.encode_tokens(
            image=batch.get("image"), tactile=batch.get("tactile"), proprio=batch.get("proprio")
        )
        return self.forward_tokens(obs_tokens, batch["actions_in"], batch["t"], capture=capture)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def captured_attention(self, layer: int) -> torch.Tensor:
        probs = self.blocks[layer].attn.last_probs
        if probs is None:
            raise RuntimeError("no attention captured; run forward with capture=True")
        return probs


def build_policy(config: PolicyConfig, seed: int) -> PolicyNet:
    """Deterministically initialized policy (float32)."""
    torch.manual_seed(seed)
    return PolicyNet(config).float()


# ---------------------------------------------------------------------------
# Observation featurization
# ---------------------------------------------------------------------------

def image_to_input(image: np.ndarray) -> np.ndarray:
    """(H, W) grayscale in [0,1] -> (1, H, W) float32."""
    return np.asarray(image, dtype=np.float32)[None, :, :]

def tactile_to_input(counts: np.ndarray) -> np.ndarray:
    """(h, w, 2) event counts -> (2, h, w) float32, squashed to ~[0, 3]."""
    c = np.minimum(np.asarray(counts, dtype=np.float32), TACTILE_COUNT_CLIP)
    return np.transpose(c / TACTILE_COUNT_SCALE, (2, 0, 1))


# ---------------------------------------------------------------------------
# Masked-modality training
# ---------------------------------------------------------------------------

def apply_modality_mask(example: dict, p_mask: float, rng: np.random.Generator) -> dict:
    """Drop the tactile entry with probability p_mask (no placeholder left behind)."""
    if not 0.0 <= p_mask <= 1.0:
        raise ValueError("p_mask must lie in [0, 1]")
    out = dict(example)
    if "tactile" in out and rng.random() < p_mask:
        del out["tactile"]
    return out


def train_step(model: PolicyNet, optimizer: torch.optim.Optimizer, batch: dict) -> float:
    """One gradient step on a (possibly mixed masked/unmasked) batch.

    batch: image/tactile/proprio (optional tensors), actions_in (B,N,9),
    t (B,), target (B,N,6), and optionally keep_tactile (B,) bool marking
    which examples retain their tactile token.
    """
    model.train()
    optimizer.zero_grad()
    keep = batch.get("keep_tactile")
    if keep is None or batch.get("tactile") is None or bool(keep.all()):
        pred = model(batch)
        loss = _sequence_mse(pred, batch["target"])
    elif not bool(keep.any()):
        sub = {k: v for k, v in batch.items() if k not in ("tactile", "keep_tactile")}
        pred = model(sub)
        loss = _sequence_mse(pred, batch["target"])
    else:
        keep_idx = torch.nonzero(keep, as_tuple=True)[0]
        drop_idx = torch.nonzero(~keep, as_tuple=True)[0]
        losses = []
        for idx, with_tactile in ((keep_idx, True), (drop_idx, False)):
            sub = {}
            for key in ("image", "tactile", "proprio", "actions_in", "t", "target"):
                if batch.get(key) is None or (key == "tactile" and not with_tactile):
                    continue
                sub[key] = batch[key][idx]
            pred = model(sub)
            losses.append(_sequence_mse(pred, sub["target"]) * len(idx))
        loss = (losses[0] + losses[1]) / (len(keep_idx) + len(drop_idx))
    if not torch.isfinite(loss):
        raise NumericError("non-finite training loss")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def _sequence_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over batch and sequence of the squared 6-d error norm."""
    return ((pred - target) ** 2).sum(dim=-1).mean()


# ---------------------------------------------------------------------------
# Attention analysis
# ---------------------------------------------------------------------------

def attention_weights(
    model: PolicyNet,
    batch: dict,
    query_action: int,
    layer: int,
) -> tuple[np.ndarray, dict[str, float]]:
    """Head-averaged attention of one action token, grouped by input category.

    Returns (per-key weights over the full token sequence, category sums).
    The time token joins the "actions" group unless configured otherwise.
    """
    if not 0 <= query_action < model.config.n_actions:
        raise IndexError(f"action index {query_action} out of range")
    if not 0 <= layer < model.config.n_layers:
        raise IndexError(f"layer {layer} out of range")
    obs_tokens, names = model.encode_tokens(
        image=batch.get("image"), tactile=batch.get("tactile"), proprio=batch.get("proprio")
    )
    model.forward_tokens(obs_tokens, batch["actions_in"], batch["t"], capture=True)
    probs = model.captured_attention(layer)  # (B, H, S, S)
    n_obs = len(names)
    q_idx = n_obs + 1 + query_action
    weights = probs[0, :, q_idx, :].mean(dim=0).cpu().numpy()
    groups: dict[str, float] = {name: float(weights[i]) for i, name in enumerate(names)}
    actions_w = float(weights[n_obs + 1 :].sum())
    time_w = float(weights[n_obs])
    if model.config.time_in_actions_group:
        groups["actions"] = actions_w + time_w
    else:
        groups["actions"] = actions_w
        groups["time"] = time_w
    return weights, groups


# ---------------------------------------------------------------------------
# Checkpoint format: JSON header line + raw little-endian float32 payload
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "strikeflow-checkpoint"


def save_checkpoint(
    path,
    model: PolicyNet,
    normalization: dict | None = None,
    extra: dict | None = None,
) -> None:
    state = model.state_dict()
    params = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
    header = {
        "format": CHECKPOINT_MAGIC,
        "schema_version": 1,
        "config": model.config.to_dict(),
        "parameter_count": model.parameter_count(),
        "normalization": normalization or {},
        "params": params,
    }
    if extra:
        header["extra"] = extra
    buf = io.BytesIO()
    for k in state:
        buf.write(state[k].detach().cpu().numpy().astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8"))
        f.write(b"\n")
        f.write(buf.getvalue())


def load_checkpoint(path) -> tuple[PolicyNet, dict, dict]:
    """Returns (model, normalization dict, full header)."""
    with open(path, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"unreadable checkpoint header: {e}") from e
    if header.get("format") != CHECKPOINT_MAGIC:
        raise ValueError("missing checkpoint magic in header field 'format'")
    config = PolicyConfig.from_dict(header["config"])
    model = PolicyNet(config).float()
    expected = sum(int(np.prod(e["shape"])) if e["shape"] else 1 for e in header["params"]) * 4
    if expected != len(payload):
        raise ValueError(f"payload size mismatch: header declares {expected}, file has {len(payload)}")
    state = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += n * 4
        state[entry["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model, header.get("normalization", {}), header


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def finite_difference_check(
    model: PolicyNet,
    batch: dict,
    n_params: int = 200,
    eps: float = 1e-3,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    The model must be in float64 for the comparison to be meaningful.
    """
    rng = rng or np.random.default_rng(0)
    model.zero_grad()
    loss = _sequence_mse(model(batch), batch["target"])
    loss.backward()
    params = [p for p in model.parameters() if p.requires_grad]
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_params):
            p = params[rng.integers(len(params))]
            idx = tuple(rng.integers(s) for s in p.shape) if p.dim() else ()
            original = p[idx].item()
            analytic = p.grad[idx].item()
            p[idx] = original + eps
            up = _sequence_mse(model(batch), batch["target"]).item()
            p[idx] = original - eps
            down = _sequence_mse(model(batch), batch["target"]).item()
            p[idx] = original
            fd = (up - down) / (2 * eps)
            rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Velocity-model adapters bridging torch and the numpy samplers
# ---------------------------------------------------------------------------

class PolicyVelocityModel:
    """Binds a policy and encoded observation tokens into a velocity field.

    Matches the sampler protocol: called with (actions, obs, t) where the
    observation context is fixed at construction (encoders do not depend
    on actions or flow time, so tokens are computed once per observation).
    """

    def __init__(self, model: PolicyNet, obs_tokens: torch.Tensor, capture_final: bool = False):
        self.model = model
        self.obs_tokens = obs_tokens
        self.capture_final = capture_final
        self.calls = 0

    def __call__(self, actions: ActionSequence, obs, t: float):
        self.calls += 1
        inputs = torch.from_numpy(actions_to_inputs(actions).astype(np.float32))[None]
        t_t = torch.tensor([t], dtype=torch.float32)
        with torch.no_grad():
            out = self.model.forward_tokens(
                self.obs_tokens, inputs, t_t, capture=self.capture_final
            )
        v = out[0].cpu().numpy().astype(np.float64)
        return v[:, :3], v[:, 3:]


def encode_observation_arrays(
    model: PolicyNet,
    image: np.ndarray | None,
    tactile: np.ndarray | None,
    proprio: np.ndarray | None,
) -> torch.Tensor:
    """Single-observation token stack (1, n_obs, D) from raw numpy arrays."""
    kwargs = {}
    if image is not None and "vision" in model.config.modalities:
        kwargs["image"] = torch.from_numpy(image_to_input(image))[None]
    if tactile is not None and "tactile" in model.config.modalities:
        kwargs["tactile"] = torch.from_numpy(tactile_to_input(tactile))[None]
    if proprio is not None and "proprio" in model.config.modalities:
        kwargs["proprio"] = torch.from_numpy(np.asarray(proprio, dtype=np.float32))[None]
    with torch.no_grad():
        tokens, _ = model.encode_tokens(**kwargs)
    return tokens


def predict_bc_actions(
    model: PolicyNet,
    obs_tokens: torch.Tensor,
    normalizer: ActionNormalizer | None = None,
) -> ActionSequence:
    """Direct regression head: one forward pass, outputs interpreted as poses."""
    n = model.config.n_actions
    inputs = torch.from_numpy(neutral_action_inputs(n).astype(np.float32))[None]
    t_t = torch.zeros(1, dtype=torch.float32)
    with torch.no_grad():
        out = model.forward_tokens(obs_tokens, inputs, t_t)[0].cpu().numpy().astype(np.float64)
    trans = out[:, :3]
    if normalizer is not None:
        trans = normalizer.denormalize(trans)
    return ActionSequence(trans, lg.quat_exp(out[:, 3:]))
