"""Cross-attention multi-hop autoencoder: the learned denoiser.

Inputs per user: the noised interaction row u_t, the normalized hop
vectors (hops 2..H), and the timestep t. Everything is first compressed
to a latent of size k (one encoder for the interaction row, one per
hop), then each latent scalar is expanded to a d-wide token so the
latents become k x d token grids. Each of N layers lets every hop
condition the running interaction state through cross-attention (hop
tokens make the queries; the state makes keys and values), pushes the
result through that hop's two-layer ReLU feedforward, and blends the
hop outputs with fixed mixing weights. Layers stack plainly by default;
the residual flag adds each layer's input back to its blended output.
A learned d -> 1 collapse and a decoder map the final state back to
item space.

There are no bias terms anywhere; with the timestep embedding disabled,
zero inputs provably map to zero output. The sinusoidal timestep
embedding (on by default) is added to the expanded interaction tokens.

Ablation variants:
- "self-attn": queries come from the expanded interaction tokens rather
  than the hop tokens (hop encoders go unused).
- "no-cross-attn": attention is skipped entirely; each hop's feedforward
  reads the running state directly.
- "no-ae": encoders/decoder are frozen identity pads, so attention runs
  at full catalog width. Memory-hungry by construction; meant for small
  studies only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nd
from .errors import ContractError, ShapeError

VARIANTS = ("full", "self-attn", "no-cross-attn", "no-ae")


@dataclass(frozen=True)
class CamAeConfig:
    num_users: int
    num_items: int
    latent_dim: int = 500          # k: compressed length of every sequence
    attn_dim: int = 16             # d: token width inside attention
    layers: int = 2                # N: attention/feedforward rounds
    hops: int = 3                  # H: deepest hop used (context covers 2..H)
    hop_weights: tuple[float, ...] = (0.7, 0.3)
    ff_hidden: int = 0             # 0 means 4 * attn_dim
    t_embed: bool = True
    residual: bool = False         # add each round's input back to its output
    variant: str = "full"

    def __post_init__(self):
        if self.num_users < 1 or self.num_items < 1:
            raise ContractError("need at least one user and one item")
        if self.latent_dim < 1 or self.attn_dim < 1 or self.layers < 1:
            raise ContractError("latent_dim, attn_dim, layers must be >= 1")
        if self.hops < 2:
            raise ContractError(f"hops must be >= 2, got {self.hops}")
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.hop_weights) != self.hops - 1:
            raise ContractError(
                f"{self.hops - 1} hop weights needed for hops 2..{self.hops}, "
                f"got {len(self.hop_weights)}")
        if any(w < 0 for w in self.hop_weights):
            raise ContractError(f"hop weights must be non-negative: {self.hop_weights}")
        if abs(sum(self.hop_weights) - 1.0) > 1e-6:
            raise ContractError(f"hop weights must sum to 1: {self.hop_weights}")
        if self.ff_hidden < 0:
            raise ContractError(f"ff_hidden must be >= 0, got {self.ff_hidden}")

    @property
    def hop_list(self) -> tuple[int, ...]:
        return tuple(range(2, self.hops + 1))

    @property
    def width(self) -> int:
        return max(self.num_users, self.num_items)

    @property
    def seq_len(self) -> int:
        """Token count inside attention: k, or full width without the AE."""
        return self.width if self.variant == "no-ae" else self.latent_dim

    @property
    def ff_width(self) -> int:
        return self.ff_hidden if self.ff_hidden else 4 * self.attn_dim

    def hop_dim(self, h: int) -> int:
        return self.num_items if h % 2 == 1 else self.num_users


def _xavier(rng: np.random.Generator, shape: tuple[int, int],
            fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def param_shapes(config: CamAeConfig) -> dict[str, tuple[tuple[int, int], int, int]]:
    """name -> (shape, fan_in, fan_out), in deterministic creation order."""
    d, hN = config.attn_dim, config.ff_width
    shapes: dict[str, tuple[tuple[int, int], int, int]] = {}
    if config.variant != "no-ae":
        k = config.latent_dim
        shapes["enc_items"] = ((k, config.num_items), config.num_items, k)
        for h in config.hop_list:
            shapes[f"enc_hop{h}"] = ((k, config.width), config.width, k)
        shapes["dec_items"] = ((config.num_items, k), k, config.num_items)
    shapes["expand_obs"] = ((1, d), 1, d)
    shapes["expand_ctx"] = ((1, d), 1, d)
    for layer in range(1, config.layers + 1):
        for h in config.hop_list:
            for role in ("q", "k", "v"):
                shapes[f"attn{layer}_hop{h}_{role}"] = ((d, d), d, d)
    for h in config.hop_list:
        shapes[f"ff_hop{h}_in"] = ((d, hN), d, hN)
        shapes[f"ff_hop{h}_out"] = ((hN, d), hN, d)
    shapes["collapse"] = ((d, 1), d, 1)
    return shapes


def init_params(config: CamAeConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Xavier-uniform float32 tensors, reproducible for a given seed."""
    rng = np.random.default_rng(seed)
    return {name: _xavier(rng, shape, fi, fo)
            for name, (shape, fi, fo) in param_shapes(config).items()}


def cross_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """softmax(q k^T / sqrt(d)) v, computed exactly as the tape op does."""
    tape = nd.Tape(finite_mode="all")
    out = tape.record("cross_attention", tape.leaf(q), tape.leaf(k), tape.leaf(v))
    return tape.value(out)


# ------------------------------------------------------------------- forward


def _identity_pad(n_in: int, n_out: int, dtype) -> np.ndarray:
    pad = np.zeros((n_in, n_out), dtype=dtype)
    np.fill_diagonal(pad, 1.0)
    return pad


def encode_interactions(tape: nd.Tape, leaves: dict[str, int],
                        config: CamAeConfig, u_id: int) -> int:
    """Compress interaction rows (B, |items|) to latents (B, k)."""
    if config.variant == "no-ae":
        dtype = tape.value(u_id).dtype
        pad = tape.leaf(_identity_pad(config.num_items, config.width, dtype))
        return tape.record("matmul", u_id, pad)
    enc_t = tape.record("transpose_last2", leaves["enc_items"])
    return tape.record("matmul", u_id, enc_t)


def encode_hops(tape: nd.Tape, leaves: dict[str, int], config: CamAeConfig,
                ctx_ids: dict[int, int]) -> dict[int, int]:
    """Compress each hop vector batch (B, dim_h) to latents (B, k)."""
    out: dict[int, int] = {}
    for h in config.hop_list:
        cid = ctx_ids[h]
        n_h = tape.value(cid).shape[-1]
        if n_h != config.hop_dim(h):
            raise ShapeError(f"hop {h} context has width {n_h}, expected {config.hop_dim(h)}")
        if config.variant == "no-ae":
            dtype = tape.value(cid).dtype
            pad = tape.leaf(_identity_pad(n_h, config.width, dtype))
            out[h] = tape.record("matmul", cid, pad)
            continue
        enc = leaves[f"enc_hop{h}"]
        if n_h != config.width:
            enc = tape.record("col_slice", enc, n=n_h)
        out[h] = tape.record("matmul", cid, tape.record("transpose_last2", enc))
    return out


def camae_forward(tape: nd.Tape, leaves: dict[str, int], config: CamAeConfig,
                  u_t: np.ndarray, contexts: dict[int, np.ndarray],
                  t: np.ndarray) -> int:
    """Record the full denoiser on `tape`; returns the node id of the
    reconstructed interaction rows (B, |items|).

    `u_t` is (B, |items|), `contexts[h]` is (B, hop_dim(h)) for h in 2..H,
    and `t` holds B integer timesteps.
    """
    u_t = np.asarray(u_t)
    if u_t.ndim != 2 or u_t.shape[1] != config.num_items:
        raise ShapeError(f"u_t must be (B, {config.num_items}), got {u_t.shape}")
    batch = u_t.shape[0]
    t = np.asarray(t).reshape(-1)
    if t.size != batch:
        raise ShapeError(f"t has {t.size} entries for batch {batch}")
    missing = [h for h in config.hop_list if h not in contexts]
    if missing:
        raise ContractError(f"missing contexts for hops {missing}")

    dtype = tape.value(leaves["collapse"]).dtype
    u_id = tape.leaf(u_t.astype(dtype, copy=False))
    ctx_ids = {h: tape.leaf(np.asarray(contexts[h], dtype=dtype)) for h in config.hop_list}

    seq = config.seq_len
    z_obs = encode_interactions(tape, leaves, config, u_id)
    tokens = tape.record("matmul", tape.record("reshape", z_obs, shape=(batch, seq, 1)),
                         leaves["expand_obs"])
    if config.t_embed:
        emb = tape.record("sinusoidal_embed", t=t, dim=config.attn_dim, dtype=dtype)
        tokens = tape.record("add", tokens, emb)

    z_hops = encode_hops(tape, leaves, config, ctx_ids)
    queries: dict[int, int] = {}
    for h in config.hop_list:
        if config.variant == "self-attn":
            queries[h] = tokens
        else:
            zh3 = tape.record("reshape", z_hops[h], shape=(batch, seq, 1))
            queries[h] = tape.record("matmul", zh3, leaves["expand_ctx"])

    state = tokens
    for layer in range(1, config.layers + 1):
        hop_outs = []
        for h in config.hop_list:
            if config.variant == "no-cross-attn":
                attended = state
            else:
                q = tape.record("matmul", queries[h], leaves[f"attn{layer}_hop{h}_q"])
                key = tape.record("matmul", state, leaves[f"attn{layer}_hop{h}_k"])
                val = tape.record("matmul", state, leaves[f"attn{layer}_hop{h}_v"])
                attended = tape.record("cross_attention", q, key, val)
            hidden = tape.record("relu", tape.record("matmul", attended,
                                                     leaves[f"ff_hop{h}_in"]))
            hop_outs.append(tape.record("matmul", hidden, leaves[f"ff_hop{h}_out"]))
        blended = tape.record("weighted_sum", *hop_outs, weights=config.hop_weights)
        state = tape.record("add", state, blended) if config.residual else blended

    y = tape.record("matmul", state, leaves["collapse"])
    y = tape.record("reshape", y, shape=(batch, seq))
    if config.variant == "no-ae":
        return tape.record("col_slice", y, n=config.num_items) \
            if config.width != config.num_items else y
    dec_t = tape.record("transpose_last2", leaves["dec_items"])
    return tape.record("matmul", y, dec_t)


def bind_params(tape: nd.Tape, params: dict[str, np.ndarray]) -> dict[str, int]:
    return {name: tape.leaf(value, trainable=True) for name, value in params.items()}


def run_batch(params: dict[str, np.ndarray], config: CamAeConfig, u_t: np.ndarray,
              contexts: dict[int, np.ndarray], t,
              finite_mode: str = "small"):
    """Convenience one-shot forward. Returns (tape, leaves, output id)."""
    tape = nd.Tape(finite_mode=finite_mode)
    leaves = bind_params(tape, params)
    t = np.full(u_t.shape[0], t, dtype=np.int64) if np.isscalar(t) else np.asarray(t)
    out = camae_forward(tape, leaves, config, u_t, contexts, t)
    return tape, leaves, out


def denoise_single(params: dict[str, np.ndarray], config: CamAeConfig,
                   u_t: np.ndarray, context_rows: np.ndarray, t: int) -> np.ndarray:
    """Single-user forward: 1-D u_t plus stacked hop rows (H-1, width)."""
    contexts = {h: np.asarray(context_rows[i][: config.hop_dim(h)]).reshape(1, -1)
                for i, h in enumerate(config.hop_list)}
    tape, _, out = run_batch(params, config, np.asarray(u_t).reshape(1, -1), contexts, t)
    return tape.value(out)[0]
