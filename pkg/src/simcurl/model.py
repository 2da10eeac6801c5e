"""User-session network, projection head and checkpoint persistence.

Session branch: each session's frequency vector goes through a linear layer,
gets a sinusoidal position added (slot 0 holds a learned <rep> vector), and
the sequence runs through pre-norm transformer blocks. The final-norm hidden
state at slot 0 is the session encoding. A two-layer MLP encodes the user's
overall frequency vector, and a combiner MLP maps both encodings to the
representation ``r``. The projection head ``h`` maps ``r`` into the space the
contrastive loss works in.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor
from .seeding import make_rng

FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 200
    dim: int = 64
    heads: int = 4
    depth: int = 2
    ffn_mult: int = 4
    max_sessions: int = 64
    use_session_branch: bool = True
    use_user_branch: bool = True
    ln_eps: float = 1e-10
    # token embeddings are multiplied by this before positions are added (0 means sqrt(dim))
    embed_scale: float = 0.0

    def validate(self) -> None:
        if self.dim % 2:
            raise ConfigError("dim must be even for sinusoidal positions")
        if self.dim % self.heads:
            raise ConfigError("dim must be divisible by heads")
        if self.depth < 1 or self.max_sessions < 1 or self.vocab_size < 1:
            raise ConfigError("depth, max_sessions and vocab_size must be >= 1")
        if not (self.use_session_branch or self.use_user_branch):
            raise ConfigError("at least one of the session and user branches is required")

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SessionBatch:
    """Padded model input: ``sessions`` (B, S, V), ``mask`` (B, S), ``user`` (B, V)."""

    sessions: np.ndarray
    mask: np.ndarray
    user: np.ndarray

    def __len__(self) -> int:
        return len(self.user)


def make_batch(items, cfg: ModelConfig) -> SessionBatch:
    """``items`` is a list of ``(session_rows, user_vector)``.

    Users with more than ``max_sessions`` sessions keep their most recent ones.
    """
    if not items:
        raise ValueError("empty batch")
    rows = []
    for sess, _ in items:
        sess = np.asarray(sess, dtype=np.float64)
        if sess.ndim != 2 or len(sess) == 0:
            raise ValueError("every user needs at least one session")
        if sess.shape[1] != cfg.vocab_size:
            raise DimensionError(f"session features have width {sess.shape[1]}, expected {cfg.vocab_size}")
        rows.append(sess[-cfg.max_sessions :])
    s_max = max(len(r) for r in rows)
    feats = np.zeros((len(rows), s_max, cfg.vocab_size))
    mask = np.zeros((len(rows), s_max), dtype=bool)
    for i, r in enumerate(rows):
        feats[i, : len(r)] = r
        mask[i, : len(r)] = True
    user = np.stack([np.asarray(u, dtype=np.float64) for _, u in items])
    if user.shape[1] != cfg.vocab_size:
        raise DimensionError(f"user features have width {user.shape[1]}, expected {cfg.vocab_size}")
    return SessionBatch(feats, mask, user)


def positional_encoding(position, dim: int) -> np.ndarray:
    """Sinusoids: even entries sin(pos / 10000^(2k/d)), odd entries the matching cos."""
    if dim % 2:
        raise ConfigError("positional encoding needs an even dimension")
    pos = np.asarray(position, dtype=np.float64)
    freqs = 1.0 / 10000.0 ** (np.arange(0, dim, 2) / dim)
    angles = pos[..., None] * freqs
    out = np.empty(pos.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


# -- parameters --------------------------------------------------------------


def param_shapes(cfg: ModelConfig, with_head: bool = True) -> dict[str, tuple[int, ...]]:
    d, v, f = cfg.dim, cfg.vocab_size, cfg.dim * cfg.ffn_mult
    shapes: dict[str, tuple[int, ...]] = {}

    def linear(name, n_in, n_out):
        shapes[f"{name}.w"] = (n_in, n_out)
        shapes[f"{name}.b"] = (n_out,)

    if cfg.use_session_branch:
        linear("session.in", v, d)
        shapes["session.rep"] = (d,)
        for l in range(cfg.depth):
            p = f"session.layer{l}"
            shapes[f"{p}.ln1.g"], shapes[f"{p}.ln1.b"] = (d,), (d,)
            for part in "qkvo":
                linear(f"{p}.attn.{part}", d, d)
            shapes[f"{p}.ln2.g"], shapes[f"{p}.ln2.b"] = (d,), (d,)
            linear(f"{p}.ffn.1", d, f)
            linear(f"{p}.ffn.2", f, d)
        shapes["session.ln_f.g"], shapes["session.ln_f.b"] = (d,), (d,)
    if cfg.use_user_branch:
        linear("user.1", v, d)
        linear("user.2", d, d)
    n_in = d * (int(cfg.use_session_branch) + int(cfg.use_user_branch))
    linear("combine.1", n_in, d)
    linear("combine.2", d, d)
    if with_head:
        linear("head.1", d, d)
        linear("head.2", d, d)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, with_head: bool = True) -> dict[str, Tensor]:
    """Xavier-uniform weights, zero biases, unit layer-norm gains, unit-norm <rep>."""
    cfg.validate()
    params = {}
    for name, shape in param_shapes(cfg, with_head).items():
        rng = make_rng(seed, "init", *name.encode())
        if name.endswith(".w"):
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, size=shape)
        elif name == "session.rep":
            data = rng.standard_normal(shape)
            data /= np.linalg.norm(data)
        elif name.endswith(".g"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def encoder_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: v for k, v in params.items() if not k.startswith("head.")}


def head_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: v for k, v in params.items() if k.startswith("head.")}


def frozen(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Gradient-free views of ``params`` sharing no buffers with them."""
    return {k: Tensor(v.data.copy(), name=k) for k, v in params.items()}


# -- forward -----------------------------------------------------------------


def _linear(x, params, name):
    return nx.add(nx.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def _mlp(x, params, name):
    return _linear(nx.relu(_linear(x, params, f"{name}.1")), params, f"{name}.2")


def _split_heads(x, heads):
    b, t, d = x.shape
    return nx.transpose(nx.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _attention(x_q, x_kv, key_bias, params, prefix, heads):
    q = _split_heads(_linear(x_q, params, f"{prefix}.q"), heads)
    k = _split_heads(_linear(x_kv, params, f"{prefix}.k"), heads)
    v = _split_heads(_linear(x_kv, params, f"{prefix}.v"), heads)
    logits = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(q.shape[-1]))
    att = nx.softmax_rows(nx.add(logits, key_bias))
    ctx = nx.transpose(nx.matmul(att, v), (0, 2, 1, 3))
    b, t = ctx.shape[0], ctx.shape[1]
    return _linear(nx.reshape(ctx, (b, t, -1)), params, f"{prefix}.o")


def _block(h, key_bias, params, prefix, cfg, slot0_only):
    x = nx.layer_norm(h, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"], cfg.ln_eps)
    if slot0_only:
        # only slot 0 is read after the last block, so only its query is needed
        h = nx.getitem(h, (slice(None), slice(0, 1)))
        x_q = nx.getitem(x, (slice(None), slice(0, 1)))
    else:
        x_q = x
    h = nx.add(h, _attention(x_q, x, key_bias, params, f"{prefix}.attn", cfg.heads))
    x = nx.layer_norm(h, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"], cfg.ln_eps)
    return nx.add(h, _mlp(x, params, f"{prefix}.ffn"))


def encode_sessions(batch: SessionBatch, params, cfg: ModelConfig) -> Tensor:
    """Session-branch output, shape (B, dim)."""
    feats, mask = batch.sessions, batch.mask
    if feats.shape[1] == 0 or not mask[:, 0].all():
        raise ValueError("every user needs at least one session")
    if feats.shape[1] > cfg.max_sessions:
        raise ValueError(f"batch holds {feats.shape[1]} sessions, more than max_sessions={cfg.max_sessions}")
    b, s, _ = feats.shape
    d = cfg.dim
    pe = positional_encoding(np.arange(s + 1), d)
    scale = cfg.embed_scale or math.sqrt(d)
    tokens = nx.add(nx.scale(_linear(Tensor(feats), params, "session.in"), scale), pe[1:])
    rep = nx.add(nx.reshape(params["session.rep"], (1, 1, d)), np.broadcast_to(pe[0], (b, 1, d)))
    h = nx.concat([rep, tokens], axis=1)
    key_bias = np.zeros((b, 1, 1, s + 1))
    key_bias[:, 0, 0, 1:][~mask] = -np.inf
    for l in range(cfg.depth):
        h = _block(h, key_bias, params, f"session.layer{l}", cfg, slot0_only=l == cfg.depth - 1)
    h = nx.layer_norm(h, params["session.ln_f.g"], params["session.ln_f.b"], cfg.ln_eps)
    return nx.reshape(h, (b, d))


def encode_user(user_feats, params, cfg: ModelConfig) -> Tensor:
    user_feats = nx.as_tensor(user_feats)
    if user_feats.shape[-1] != cfg.vocab_size:
        raise DimensionError(f"user features have width {user_feats.shape[-1]}, expected {cfg.vocab_size}")
    return _mlp(user_feats, params, "user")


def represent(batch: SessionBatch, params, cfg: ModelConfig) -> Tensor:
    parts = []
    if cfg.use_session_branch:
        parts.append(encode_sessions(batch, params, cfg))
    if cfg.use_user_branch:
        parts.append(encode_user(batch.user, params, cfg))
    x = parts[0] if len(parts) == 1 else nx.concat(parts, axis=-1)
    return _mlp(x, params, "combine")


def project(r, params) -> Tensor:
    return _mlp(nx.as_tensor(r), params, "head")


# -- checkpoints -------------------------------------------------------------


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    manifest = path if path.suffix == ".json" else path.with_suffix(".json")
    return manifest, manifest.with_suffix(".bin")


def save_checkpoint(path, arrays: dict, config: dict, **extra) -> Path:
    """Write ``<stem>.json`` (manifest) and ``<stem>.bin`` (little-endian f32).

    Offsets and lengths in the manifest count f32 elements.
    """
    manifest_path, blob_path = _paths(path)
    entries, chunks, offset = [], [], 0
    for name, value in arrays.items():
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        flat = np.ascontiguousarray(data, dtype="<f4").reshape(-1)
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "len": int(flat.size)})
        chunks.append(flat.tobytes())
        offset += int(flat.size)
    manifest = {"format_version": FORMAT_VERSION, "config": config, "tensors": entries, **extra}
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest_path


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    manifest_path, blob_path = _paths(path)
    if not manifest_path.exists() or not blob_path.exists():
        raise CheckpointError(f"checkpoint {manifest_path} or its blob is missing")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {manifest.get('format_version')!r}")
    raw = blob_path.read_bytes()
    if len(raw) % 4:
        raise CheckpointError(f"{blob_path}: size {len(raw)} is not a whole number of f32 values")
    blob = np.frombuffer(raw, dtype="<f4")
    covered = sum(int(e["len"]) for e in manifest["tensors"])
    if covered != blob.size:
        raise CheckpointError(f"blob holds {blob.size} values, manifest covers {covered}")
    arrays, expected_offset = {}, 0
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] != expected_offset or e["len"] != n:
            raise CheckpointError(f"tensor {e['name']!r}: manifest offsets do not tile the blob")
        arrays[e["name"]] = blob[e["offset"] : e["offset"] + n].astype(np.float64).reshape(e["shape"])
        expected_offset += n
    if expected_offset != blob.size:
        raise CheckpointError(f"blob holds {blob.size} values, manifest covers {expected_offset}")
    return manifest, arrays


def save_encoder(path, params: dict[str, Tensor], cfg: ModelConfig, **extra) -> Path:
    return save_checkpoint(path, encoder_params(params), asdict(cfg), kind="encoder", **extra)


def load_encoder(path) -> tuple[dict[str, Tensor], ModelConfig, dict]:
    manifest, arrays = load_checkpoint(path)
    cfg = ModelConfig.from_dict(manifest["config"])
    expected = param_shapes(cfg, with_head=False)
    if set(arrays) != set(expected):
        missing, extra = sorted(set(expected) - set(arrays)), sorted(set(arrays) - set(expected))
        raise CheckpointError(f"checkpoint tensors do not match config (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointError(f"tensor {name!r} has shape {arrays[name].shape}, config expects {shape}")
    params = {name: Tensor(arrays[name], name=name) for name in expected}
    return params, cfg, manifest
