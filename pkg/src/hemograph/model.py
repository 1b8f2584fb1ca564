"""Encode-process-decode graph transformer.

Per node, a 15-wide feature row goes through an MLP encoder into a latent of
width ``d``; ``L`` post-norm transformer blocks mix the latents with masked
multi-head attention over the augmented adjacency; an MLP decoder reads out a
3-vector (the normalized acceleration). The masked-autoencoder variant runs
the blocks on the visible subgraph, fills hidden nodes with a shared learnable
token and finishes with a short stack of extra blocks on the full graph.

Parameters live in a flat ``dict[str, ndarray]``; gradients use the same keys.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import graph as G
from . import tensor as T
from .meshio import WALL, FormatError, Mesh, Waveform, inflow_stats, inlet_profile

N_FEATURES = 15
N_OUTPUTS = 3

# feature layout of a frame row
VEL = slice(0, 3)
ACC = slice(3, 6)
POS = slice(6, 9)
DIST = 9
SPEED = 10
INFLOW = slice(11, 14)
TYPE = 14

CKPT_MAGIC = b"HSC1"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d: int = 64
    heads: int = 8
    expansion: int = 3
    p_in: int = N_FEATURES
    p_out: int = N_OUTPUTS
    dilated_layers: int = 5
    jumper_fraction: float = 0.20
    global_fraction: float = 0.05
    masked_token: bool = True
    mae_decoder_layers: int = 3
    strict_a2: bool = False

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if min(self.d, self.heads, self.expansion) < 1 or self.n_layers < 0:
            raise ValueError("non-positive model dimension")

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        return cls(n_layers=15, d=512)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown model config keys: {sorted(extra)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def augment_config(self, seed: int = 0) -> G.AugmentConfig:
        return G.AugmentConfig(n_layers=self.n_layers, n_heads=self.heads,
                               jumper_fraction=self.jumper_fraction,
                               global_fraction=self.global_fraction,
                               dilated_layers=self.dilated_layers, seed=seed,
                               strict_a2=self.strict_a2)


# ---------------------------------------------------------------------------
# Parameter accounting and initialisation
# ---------------------------------------------------------------------------


def block_param_count(d: int, e: int) -> int:
    qkv = 3 * d * d + 3 * d
    out = d * d + d
    mlp = 2 * (d * e * d + e * d) + e * d * d + d
    return qkv + out + mlp + 2 * d


def param_count(config: ModelConfig) -> int:
    """Parameters of the standalone model (encoder, blocks, decoder, masked token).

    The extra blocks used only by masked pre-training are counted by
    :func:`mae_param_count`.
    """
    d, p, q = config.d, config.p_in, config.p_out
    encoder = p * d + d + d * d + d + d
    decoder = d * d + d + d + d * q + q
    token = d if config.masked_token else 0
    return encoder + config.n_layers * block_param_count(d, config.expansion) + decoder + token


def mae_param_count(config: ModelConfig) -> int:
    return param_count(config) + config.mae_decoder_layers * block_param_count(
        config.d, config.expansion)


def _block_shapes(d: int, e: int) -> dict[str, tuple]:
    return {"Wqkv": (d, 3 * d), "bqkv": (3 * d,), "Wo": (d, d), "bo": (d,), "g1": (d,),
            "Wl": (d, e * d), "bl": (e * d,), "Wr": (d, e * d), "br": (e * d,),
            "Wf": (e * d, d), "bf": (d,), "g2": (d,)}


def param_shapes(config: ModelConfig, mae: bool = False) -> dict[str, tuple]:
    d = config.d
    shapes = {"enc.W0": (config.p_in, d), "enc.b0": (d,), "enc.W1": (d, d), "enc.b1": (d,),
              "enc.g": (d,)}
    for l in range(config.n_layers):
        shapes.update({f"blk{l}.{k}": s for k, s in _block_shapes(d, config.expansion).items()})
    shapes.update({"dec.W0": (d, d), "dec.b0": (d,), "dec.g": (d,),
                   "dec.W1": (d, config.p_out), "dec.b1": (config.p_out,)})
    if config.masked_token:
        shapes["mask_token"] = (d,)
    if mae:
        for l in range(config.mae_decoder_layers):
            shapes.update({f"mae{l}.{k}": s
                           for k, s in _block_shapes(d, config.expansion).items()})
    return shapes


def init_params(config: ModelConfig, seed: int = 0, mae: bool = False,
                dtype=np.float32) -> dict[str, np.ndarray]:
    """Weights ~ N(0, 1/fan_in), biases 0, norm gains 1, masked token ~ N(0, 0.02)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config, mae).items():
        leaf = name.split(".")[-1]
        if leaf.startswith("W"):
            a = rng.standard_normal(shape) / math.sqrt(shape[0])
        elif leaf.startswith("g"):
            a = np.ones(shape)
        elif name == "mask_token":
            a = 0.02 * rng.standard_normal(shape)
        else:
            a = np.zeros(shape)
        params[name] = a.astype(dtype)
    return params


def zero_params(config: ModelConfig, mae: bool = False, dtype=np.float64):
    return {k: np.zeros(s, dtype=dtype) for k, s in param_shapes(config, mae).items()}


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def encode(params, x):
    h, _ = T.linear(x, params["enc.W0"], params["enc.b0"])
    a, _ = T.relu(h)
    z, _ = T.linear(a, params["enc.W1"], params["enc.b1"])
    out, nc = T.rmsnorm(z, params["enc.g"])
    return out, (x, h, a, nc)


def encode_backward(params, dout, cache, grads):
    x, h, a, nc = cache
    dz, grads["enc.g"] = T.rmsnorm_backward(dout, nc, params["enc.g"])
    da, grads["enc.W1"], grads["enc.b1"] = T.linear_backward(dz, a, params["enc.W1"])
    dh = T.relu_backward(da, h)
    dx, grads["enc.W0"], grads["enc.b0"] = T.linear_backward(dh, x, params["enc.W0"])
    return dx


def decode(params, z):
    h, _ = T.linear(z, params["dec.W0"], params["dec.b0"])
    a, _ = T.relu(h)
    n, nc = T.rmsnorm(a, params["dec.g"])
    out, _ = T.linear(n, params["dec.W1"], params["dec.b1"])
    return out, (z, h, n, nc)


def decode_backward(params, dout, cache, grads):
    z, h, n, nc = cache
    dn, grads["dec.W1"], grads["dec.b1"] = T.linear_backward(dout, n, params["dec.W1"])
    da, grads["dec.g"] = T.rmsnorm_backward(dn, nc, params["dec.g"])
    dh = T.relu_backward(da, h)
    dz, grads["dec.W0"], grads["dec.b0"] = T.linear_backward(dh, z, params["dec.W0"])
    return dz


def mmha(z, Wqkv, bqkv, heads: int, masks: list[tuple[G.Adjacency, np.ndarray]]):
    """Fused QKV projection, per-head masked attention. Output projection is
    applied by the caller."""
    n, d = z.shape
    dh = d // heads
    qkv, _ = T.linear(z, Wqkv, bqkv)
    q = qkv[:, :d].reshape(n, heads, dh)
    k = qkv[:, d:2 * d].reshape(n, heads, dh)
    v = qkv[:, 2 * d:].reshape(n, heads, dh)
    att = np.empty_like(q)
    caches = []
    for mask, idx in masks:
        o, c = T.sparse_attention(q[:, idx], k[:, idx], v[:, idx], mask)
        att[:, idx] = o
        caches.append((idx, c))
    return att.reshape(n, d), (z, caches)


def mmha_backward(datt, cache, Wqkv, heads: int):
    z, caches = cache
    n, d = z.shape
    dh = d // heads
    datt = datt.reshape(n, heads, dh)
    dqkv = np.empty((n, 3, heads, dh), dtype=datt.dtype)
    for idx, c in caches:
        dq, dk, dv = T.sparse_attention_backward(datt[:, idx], c)
        dqkv[:, 0, idx] = dq
        dqkv[:, 1, idx] = dk
        dqkv[:, 2, idx] = dv
    dqkv = dqkv.reshape(n, 3 * d)
    return T.linear_backward(dqkv, z, Wqkv)


def process_block(params, prefix: str, z, heads: int, masks):
    """``Z' = RMSNorm(MMHA(Z) + Z)``, then ``RMSNorm(GatedMLP(Z') + Z')``."""
    p = lambda k: params[f"{prefix}.{k}"]  # noqa: E731
    att, ac = mmha(z, p("Wqkv"), p("bqkv"), heads, masks)
    o, _ = T.linear(att, p("Wo"), p("bo"))
    z1, n1 = T.rmsnorm(o + z, p("g1"))
    m, mc = T.gated_mlp(z1, p("Wl"), p("bl"), p("Wr"), p("br"), p("Wf"), p("bf"))
    z2, n2 = T.rmsnorm(m + z1, p("g2"))
    return z2, (ac, att, n1, mc, n2)


def process_block_backward(params, prefix: str, dz2, cache, heads: int, grads):
    p = lambda k: params[f"{prefix}.{k}"]  # noqa: E731
    ac, att, n1, mc, n2 = cache
    ds2, grads[f"{prefix}.g2"] = T.rmsnorm_backward(dz2, n2, p("g2"))
    dz1, g = T.gated_mlp_backward(ds2, mc, p("Wl"), p("Wr"), p("Wf"))
    for k, v in g.items():
        grads[f"{prefix}.{k}"] = v
    dz1 = dz1 + ds2
    ds1, grads[f"{prefix}.g1"] = T.rmsnorm_backward(dz1, n1, p("g1"))
    datt, grads[f"{prefix}.Wo"], grads[f"{prefix}.bo"] = T.linear_backward(ds1, att, p("Wo"))
    dz, grads[f"{prefix}.Wqkv"], grads[f"{prefix}.bqkv"] = mmha_backward(
        datt, ac, p("Wqkv"), heads)
    return dz + ds1


def layer_masks(aug: G.AugmentedAdjacency, layer: int):
    return aug.layer_masks(layer)


def _base_masks(adj: G.Adjacency, heads: int):
    return [(adj, np.arange(heads))]


def forward(params, config: ModelConfig, x: np.ndarray, aug: G.AugmentedAdjacency):
    """Normalized features (N, 15) -> normalized acceleration (N, 3), with tape."""
    if x.shape[1] != config.p_in:
        raise T.ShapeError(f"expected {config.p_in} features, got {x.shape[1]}")
    z, ec = encode(params, x)
    bc = []
    for l in range(config.n_layers):
        z, c = process_block(params, f"blk{l}", z, config.heads, layer_masks(aug, l))
        bc.append(c)
    y, dc = decode(params, z)
    return y, (ec, bc, dc)


def backward(params, config: ModelConfig, dy: np.ndarray, tape) -> dict[str, np.ndarray]:
    ec, bc, dc = tape
    grads: dict[str, np.ndarray] = {}
    dz = decode_backward(params, dy, dc, grads)
    for l in reversed(range(config.n_layers)):
        dz = process_block_backward(params, f"blk{l}", dz, bc[l], config.heads, grads)
    encode_backward(params, dz, ec, grads)
    for name, p in params.items():
        if name not in grads:  # masked token and any pre-training-only blocks
            grads[name] = np.zeros_like(p)
    return grads


def mae_forward(params, config: ModelConfig, x: np.ndarray, aug: G.AugmentedAdjacency,
                mask_ratio: float, seed: int):
    """Masked-autoencoder pass: encoder blocks on the visible subgraph, masked
    token at hidden nodes, ``mae_decoder_layers`` blocks on the full base mask."""
    if not config.masked_token:
        raise ValueError("masked pre-training needs masked_token=True")
    masked = G.mask_nodes(aug.base, mask_ratio, seed)
    vis = masked.visible_nodes
    sub = aug.restrict(vis) if vis.size < aug.n_nodes else aug
    z, ec = encode(params, x[vis])
    bc = []
    for l in range(config.n_layers):
        z, c = process_block(params, f"blk{l}", z, config.heads, layer_masks(sub, l))
        bc.append(c)
    full = np.broadcast_to(params["mask_token"], (x.shape[0], config.d)).copy()
    full[vis] = z
    dcs = []
    masks = _base_masks(aug.base, config.heads)
    for l in range(config.mae_decoder_layers):
        full, c = process_block(params, f"mae{l}", full, config.heads, masks)
        dcs.append(c)
    y, dc = decode(params, full)
    return y, (ec, bc, dcs, dc, masked)


def mae_backward(params, config: ModelConfig, dy: np.ndarray, tape):
    ec, bc, dcs, dc, masked = tape
    grads: dict[str, np.ndarray] = {}
    dz = decode_backward(params, dy, dc, grads)
    for l in reversed(range(config.mae_decoder_layers)):
        dz = process_block_backward(params, f"mae{l}", dz, dcs[l], config.heads, grads)
    grads["mask_token"] = dz[masked.hidden].sum(axis=0)
    dz = dz[masked.visible_nodes]
    for l in reversed(range(config.n_layers)):
        dz = process_block_backward(params, f"blk{l}", dz, bc[l], config.heads, grads)
    encode_backward(params, dz, ec, grads)
    return grads


# ---------------------------------------------------------------------------
# Dense reference (oracle for small graphs)
# ---------------------------------------------------------------------------


def dense_forward(params, config: ModelConfig, x: np.ndarray, aug: G.AugmentedAdjacency):
    """Same network evaluated with dense masked attention; O(N^2) per head."""
    def block(prefix, z, masks):
        p = lambda k: params[f"{prefix}.{k}"]  # noqa: E731
        n, d = z.shape
        dh = d // config.heads
        qkv = z @ p("Wqkv") + p("bqkv")
        q, k, v = (qkv[:, i * d:(i + 1) * d].reshape(n, config.heads, dh) for i in range(3))
        att = np.empty_like(q)
        for mask, idx in masks:
            att[:, idx] = T.dense_masked_attention(q[:, idx], k[:, idx], v[:, idx],
                                                   mask.to_dense())
        z1 = T.rmsnorm(att.reshape(n, d) @ p("Wo") + p("bo") + z, p("g1"))[0]
        m = T.gated_mlp(z1, p("Wl"), p("bl"), p("Wr"), p("br"), p("Wf"), p("bf"))[0]
        return T.rmsnorm(m + z1, p("g2"))[0]

    z = encode(params, x)[0]
    for l in range(config.n_layers):
        z = block(f"blk{l}", z, layer_masks(aug, l))
    return decode(params, z)[0]


# ---------------------------------------------------------------------------
# Feature frames and the physical step
# ---------------------------------------------------------------------------


def build_frame(mesh: Mesh, u_t: np.ndarray, u_prev: np.ndarray, inflow: np.ndarray,
                dtype=np.float64) -> np.ndarray:
    """Per-node inputs (N, 15): velocity, acceleration (``u_t - u_prev``),
    position, inlet distance, speed, inflow (mean, min, max) and node type."""
    n = mesh.n_nodes
    x = np.empty((n, N_FEATURES), dtype=dtype)
    x[:, VEL] = u_t
    x[:, ACC] = np.asarray(u_t, dtype=np.float64) - u_prev
    x[:, POS] = mesh.positions
    x[:, DIST] = mesh.inlet_distance
    x[:, SPEED] = np.linalg.norm(np.asarray(u_t, dtype=np.float64), axis=1)
    x[:, INFLOW] = inflow
    x[:, TYPE] = mesh.node_type
    return x


def enforce_boundaries(mesh: Mesh, u: np.ndarray, waveform: Waveform, t: float) -> np.ndarray:
    """Zero the wall nodes and prescribe the inlet profile at time ``t`` (in place)."""
    u[mesh.node_type == WALL] = 0.0
    idx, v = inlet_profile(mesh, waveform, t)
    u[idx] = v
    return u


def boundary_violation(mesh: Mesh, u: np.ndarray, waveform: Waveform, t: float) -> float:
    """Largest deviation from the boundary conditions (0.0 when enforced exactly)."""
    idx, v = inlet_profile(mesh, waveform, t)
    wall = np.abs(u[mesh.node_type == WALL]).max(initial=0.0)
    inlet = np.abs(u[idx] - v.astype(u.dtype)).max(initial=0.0)
    return float(max(wall, inlet))


@dataclass(eq=False)
class Surrogate:
    """A trained network plus the normalization it was trained with.

    ``norm`` must provide ``apply_inputs(x)`` and ``invert_outputs(y)``.
    """
    config: ModelConfig
    params: dict[str, np.ndarray]
    norm: object
    aug_seed: int = 0
    _aug: dict = field(default_factory=dict, repr=False)

    def augmented(self, mesh: Mesh) -> G.AugmentedAdjacency:
        key = mesh.content_hash()
        if key not in self._aug:
            adj = G.build_adjacency(mesh)
            self._aug.clear()
            self._aug[key] = G.assemble(adj, mesh, self.config.augment_config(self.aug_seed))
        return self._aug[key]

    def predict_acceleration(self, mesh: Mesh, frame: np.ndarray, step: int,
                             aug: G.AugmentedAdjacency | None = None) -> np.ndarray:
        aug = aug if aug is not None else self.augmented(mesh)
        dtype = next(iter(self.params.values())).dtype
        x = self.norm.apply_inputs(frame).astype(dtype)
        y, _ = forward(self.params, self.config, x, aug)
        return self.norm.invert_outputs(y.astype(np.float64))


def forward_step(model, mesh: Mesh, frame: np.ndarray, waveform: Waveform, t: float,
                 dt: float, step: int = 0, aug=None) -> np.ndarray:
    """``u(t + dt) = u(t) + a_hat`` followed by boundary enforcement at ``t + dt``.

    ``model`` is anything with ``predict_acceleration(mesh, frame, step, aug)``
    returning physical units.
    """
    a = model.predict_acceleration(mesh, frame, step, aug)
    u = np.asarray(frame[:, VEL], dtype=np.float64) + a
    return enforce_boundaries(mesh, u, waveform, t + dt)


def frame_at(mesh: Mesh, waveform: Waveform, u_t, u_prev, t: float, dt: float, dtype=np.float64):
    """Frame for predicting ``t + dt``; inflow statistics are taken at ``t + dt``."""
    return build_frame(mesh, u_t, u_prev, inflow_stats(mesh, waveform, t + dt), dtype)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def checkpoint_to_bytes(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    """``HSC1``, u64 length + JSON block, u64 blob count, then per blob:
    u16 name length, name, u8 ndim, ndim x u64 dims, f32 data."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    block = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<Q", len(block)))
    buf.write(block)
    buf.write(struct.pack("<Q", len(arrays)))
    for name, a in arrays.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        a = np.asarray(a)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("checkpoint truncated", pos)
        out = data[pos:pos + n]
        pos += n
        return out

    if take(4) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    (size,) = struct.unpack("<Q", take(8))
    at = pos
    try:
        meta = json.loads(take(size))
    except ValueError as exc:
        raise FormatError("malformed checkpoint config block", at) from exc
    (count,) = struct.unpack("<Q", take(8))
    arrays = {}
    for _ in range(count):
        (nl,) = struct.unpack("<H", take(2))
        name = take(nl).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint", pos)
    return meta, arrays


def save_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]) -> str:
    data = checkpoint_to_bytes(meta, arrays)
    with open(path, "wb") as f:
        f.write(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())
