"""Text-line recognizer: conv stem + transformer encoder, adapter, decoder.

The stem collapses a B x 1 x 48 x W line to floor(W/8) patch vectors (three
2x downsamples plus a final height pool). Sinusoidal positions are added in
the encoder, after the adapter's linear map, and under the decoder embedding.
The pre-training projection head maps encoder states to codebook classes and
is dropped when fine-tuning starts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .dataset import BOS_ID, LINE_HEIGHT, PATCH_STRIDE, Alphabet, EOS_ID, PAD_ID
from .errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    FormatError,
    VersionError,
)
from .tensorcore import Tensor

CHECKPOINT_MAGIC = b"LQCK"
CHECKPOINT_VERSION = 1

_NEG_INF = -1e9


@dataclasses.dataclass(frozen=True)
class StemConfig:
    """Convolutional stem: 4 blocks, stride 8 horizontally, height collapsed."""

    channels: tuple[int, int, int, int] = (64, 128, 256, 512)
    height: int = LINE_HEIGHT

    def __post_init__(self):
        if len(self.channels) != 4:
            raise ConfigurationError("stem needs exactly 4 conv blocks")
        if self.height % PATCH_STRIDE:
            raise ConfigurationError("stem height must be divisible by 8")


@dataclasses.dataclass(frozen=True)
class EncoderConfig:
    layers: int
    heads: int
    dim: int
    mlp_ratio: int = 4
    stem: StemConfig = StemConfig()

    def __post_init__(self):
        _check_tower("encoder", self.layers, self.heads, self.dim)


@dataclasses.dataclass(frozen=True)
class DecoderConfig:
    layers: int
    heads: int
    dim: int
    alphabet_size: int
    mlp_ratio: int = 4
    max_len: int = 256

    def __post_init__(self):
        _check_tower("decoder", self.layers, self.heads, self.dim)
        if self.alphabet_size < 4:
            raise ConfigurationError("alphabet size must cover specials plus one character")


@dataclasses.dataclass(frozen=True)
class AdapterConfig:
    in_dim: int
    out_dim: int


def _check_tower(kind: str, layers: int, heads: int, dim: int) -> None:
    if layers < 0:
        raise ConfigurationError(f"{kind} layers must be >= 0")
    if heads < 1 or dim % heads:
        raise ConfigurationError(f"{kind} dim {dim} not divisible by heads {heads}")
    if dim % 2:
        raise ConfigurationError(f"{kind} dim must be even for sinusoidal positions")


ENCODER_PRESETS = {
    "E6": dict(layers=6, heads=8, dim=512),
    "E12": dict(layers=12, heads=16, dim=1024),
}

DECODER_PRESETS = {
    "D2": dict(layers=2, heads=4, dim=320),
    "D6": dict(layers=6, heads=8, dim=512),
    "D10": dict(layers=10, heads=12, dim=768),
}


def encoder_preset(name: str, **overrides) -> EncoderConfig:
    return EncoderConfig(**{**ENCODER_PRESETS[name], **overrides})


def decoder_preset(name: str, alphabet_size: int, **overrides) -> DecoderConfig:
    return DecoderConfig(alphabet_size=alphabet_size,
                         **{**DECODER_PRESETS[name], **overrides})


# ---------------------------------------------------------------------------
# parameter specs: one source of truth for init, counting, and checkpoints

_ZEROS = "zeros"
_ONES = "ones"


def _linear(name, d_in, d_out, gain=1.0):
    return [(f"{name}.w", (d_in, d_out), d_in, gain), (f"{name}.b", (d_out,), _ZEROS, 0)]


def _ln(name, d):
    return [(f"{name}.g", (d,), _ONES, 0), (f"{name}.b", (d,), _ZEROS, 0)]


def _attn_spec(name, d):
    spec = []
    for part in ("q", "k", "v", "o"):
        spec += _linear(f"{name}.{part}", d, d)
    return spec


def _block_spec(prefix, d, mlp_ratio, cross: bool):
    spec = _ln(f"{prefix}.ln1", d) + _attn_spec(f"{prefix}.self", d)
    if cross:
        spec += _ln(f"{prefix}.ln2", d) + _attn_spec(f"{prefix}.cross", d)
        spec += _ln(f"{prefix}.ln3", d)
    else:
        spec += _ln(f"{prefix}.ln2", d)
    spec += _linear(f"{prefix}.mlp.fc1", d, d * mlp_ratio)
    spec += _linear(f"{prefix}.mlp.fc2", d * mlp_ratio, d)
    return spec


def _stem_spec(cfg: StemConfig, out_dim: int):
    spec = []
    in_ch = 1
    for i, out_ch in enumerate(cfg.channels):
        fan_in = in_ch * 9
        spec.append((f"stem.conv{i}.w", (out_ch, in_ch, 3, 3), fan_in, 1.0))
        spec.append((f"stem.conv{i}.b", (out_ch,), _ZEROS, 0))
        in_ch = out_ch
    spec += _linear("stem.proj", cfg.channels[-1], out_dim)
    return spec


def _encoder_spec(cfg: EncoderConfig):
    spec = _stem_spec(cfg.stem, cfg.dim)
    for i in range(cfg.layers):
        spec += _block_spec(f"enc.l{i}", cfg.dim, cfg.mlp_ratio, cross=False)
    spec += _ln("enc.lnf", cfg.dim)
    return spec


def _adapter_spec(cfg: AdapterConfig):
    return _linear("adapter.proj", cfg.in_dim, cfg.out_dim)


def _decoder_spec(cfg: DecoderConfig):
    spec = [("dec.embed.w", (cfg.alphabet_size, cfg.dim), cfg.dim, 1.0)]
    for i in range(cfg.layers):
        spec += _block_spec(f"dec.l{i}", cfg.dim, cfg.mlp_ratio, cross=True)
    spec += _ln("dec.lnf", cfg.dim)
    # half-gain output keeps the fresh model's token distribution near uniform
    spec += _linear("dec.out", cfg.dim, cfg.alphabet_size, gain=0.5)
    return spec


def _head_spec(enc_dim: int, k: int):
    return _linear("head.proj", enc_dim, k, gain=0.5)


def count_params(config) -> int:
    """Exact number of trainable scalars for a component config."""
    if isinstance(config, EncoderConfig):
        spec = _encoder_spec(config)
    elif isinstance(config, DecoderConfig):
        spec = _decoder_spec(config)
    elif isinstance(config, AdapterConfig):
        spec = _adapter_spec(config)
    else:
        raise ConfigurationError(f"cannot count parameters of {type(config).__name__}")
    return int(sum(np.prod(shape) for _, shape, _, _ in spec))


def _init_tensors(spec, rng: np.random.Generator) -> dict[str, Tensor]:
    tensors = {}
    for name, shape, fan_in, gain in spec:
        if fan_in == _ZEROS:
            data = np.zeros(shape)
        elif fan_in == _ONES:
            data = np.ones(shape)
        else:
            bound = gain / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return tensors


_GROUP_PREFIXES = {
    "stem": "stem.",
    "encoder": "enc.",
    "adapter": "adapter.",
    "decoder": "dec.",
    "head": "head.",
}


class ModelParams:
    """Named parameter tensors plus the configs that shaped them."""

    def __init__(self, tensors: dict[str, Tensor],
                 encoder: EncoderConfig | None = None,
                 adapter: AdapterConfig | None = None,
                 decoder: DecoderConfig | None = None,
                 head_k: int | None = None,
                 meta: dict | None = None):
        self.tensors = tensors
        self.encoder = encoder
        self.adapter = adapter
        self.decoder = decoder
        self.head_k = head_k
        self.meta = meta or {}

    def groups(self) -> list[str]:
        present = []
        for group, prefix in _GROUP_PREFIXES.items():
            if any(name.startswith(prefix) for name in self.tensors):
                present.append(group)
        return present

    def named(self, groups=None) -> dict[str, Tensor]:
        if groups is None:
            return dict(self.tensors)
        prefixes = tuple(_GROUP_PREFIXES[g] for g in groups)
        return {n: t for n, t in self.tensors.items() if n.startswith(prefixes)}

    def state_hash(self, groups=None) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.named(groups)):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.tensors[name].data).tobytes())
        return digest.hexdigest()

    def copy(self) -> "ModelParams":
        tensors = {n: Tensor(t.data.copy(), requires_grad=t.requires_grad,
                             dtype=t.data.dtype)
                   for n, t in self.tensors.items()}
        return ModelParams(tensors, self.encoder, self.adapter, self.decoder,
                           self.head_k, dict(self.meta))

    def clear_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def build_model(enc: EncoderConfig, adp: AdapterConfig, dec: DecoderConfig,
                seed: int) -> ModelParams:
    """Full recognizer with per-component seeding (no projection head)."""
    if adp.in_dim != enc.dim or adp.out_dim != dec.dim:
        raise ConfigurationError(
            f"adapter {adp.in_dim}->{adp.out_dim} does not bridge "
            f"encoder dim {enc.dim} to decoder dim {dec.dim}"
        )
    tensors = {}
    tensors.update(_init_tensors(_encoder_spec(enc), np.random.default_rng([seed, 0])))
    tensors.update(_init_tensors(_adapter_spec(adp), np.random.default_rng([seed, 1])))
    tensors.update(_init_tensors(_decoder_spec(dec), np.random.default_rng([seed, 2])))
    return ModelParams(tensors, enc, adp, dec)


def build_pretrain_model(enc: EncoderConfig, k: int, seed: int) -> ModelParams:
    """Encoder plus the discardable projection head onto k codebook classes."""
    if k < 2:
        raise ConfigurationError("projection head needs k >= 2 classes")
    tensors = {}
    tensors.update(_init_tensors(_encoder_spec(enc), np.random.default_rng([seed, 0])))
    tensors.update(_init_tensors(_head_spec(enc.dim, k), np.random.default_rng([seed, 3])))
    return ModelParams(tensors, encoder=enc, head_k=k)


# ---------------------------------------------------------------------------
# forward passes

_PE_CACHE: dict[tuple, np.ndarray] = {}


def positional_encoding(length: int, dim: int, dtype=None) -> np.ndarray:
    """Interleaved sin/cos table with base 10000; position 0 is (0, 1, 0, 1, ...)."""
    dtype = np.dtype(dtype or tc.default_dtype())
    key = (length, dim, dtype.str)
    cached = _PE_CACHE.get(key)
    if cached is None:
        pos = np.arange(length, dtype=np.float64)[:, None]
        idx = np.arange(dim // 2, dtype=np.float64)[None, :]
        angles = pos / np.power(10000.0, 2.0 * idx / dim)
        table = np.zeros((length, dim), dtype=np.float64)
        table[:, 0::2] = np.sin(angles)
        table[:, 1::2] = np.cos(angles)
        cached = table.astype(dtype)
        _PE_CACHE[key] = cached
    return cached


def _linear_fwd(mp: ModelParams, name: str, x: Tensor) -> Tensor:
    return tc.matmul(x, mp.tensors[f"{name}.w"]) + mp.tensors[f"{name}.b"]


def _ln_fwd(mp: ModelParams, name: str, x: Tensor) -> Tensor:
    return tc.layer_norm(x, mp.tensors[f"{name}.g"], mp.tensors[f"{name}.b"])


def _attention_fwd(mp: ModelParams, prefix: str, x_q: Tensor, x_kv: Tensor,
                   heads: int, bias: np.ndarray | None) -> Tensor:
    b, tq, d = x_q.shape
    tk = x_kv.shape[1]
    dh = d // heads

    def split(t: Tensor, length: int) -> Tensor:
        return tc.transpose(tc.reshape(t, (b, length, heads, dh)), (0, 2, 1, 3))

    q = split(_linear_fwd(mp, f"{prefix}.q", x_q), tq)
    k = split(_linear_fwd(mp, f"{prefix}.k", x_kv), tk)
    v = split(_linear_fwd(mp, f"{prefix}.v", x_kv), tk)
    scores = tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    if bias is not None:
        scores = scores + Tensor(bias, dtype=scores.dtype.type)
    attn = tc.softmax(scores, -1)
    ctx = tc.reshape(tc.transpose(tc.matmul(attn, v), (0, 2, 1, 3)), (b, tq, d))
    return _linear_fwd(mp, f"{prefix}.o", ctx)


def _mlp_fwd(mp: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return _linear_fwd(mp, f"{prefix}.fc2", tc.gelu(_linear_fwd(mp, f"{prefix}.fc1", x)))


def _key_bias(patch_mask: np.ndarray) -> np.ndarray:
    b, t = patch_mask.shape
    bias = np.where(patch_mask, 0.0, _NEG_INF).astype(np.float64)
    return bias.reshape(b, 1, 1, t)


def stem_forward(mp: ModelParams, images: np.ndarray,
                 patch_mask: np.ndarray | None = None) -> Tensor:
    """Conv stem: B x 1 x 48 x W images to B x floor(W/8) x dim patch vectors.

    Content beyond the last complete patch of each line is zeroed first so a
    line produces the same patch vectors whether batched alone or padded
    next to a wider one.
    """
    if images.ndim != 4 or images.shape[1] != 1:
        raise DimensionError(f"expected B x 1 x H x W images, got {images.shape}")
    stem_cfg = mp.encoder.stem
    b, _, h, w = images.shape
    if h != stem_cfg.height:
        raise DimensionError(f"line height {h} != required {stem_cfg.height}")
    t = w // PATCH_STRIDE
    if t < 1:
        raise DimensionError(f"width {w} shorter than one patch stride")
    if patch_mask is None:
        n_real = np.full(b, t, dtype=np.int64)
    else:
        if patch_mask.shape != (b, t):
            raise DimensionError(f"patch mask {patch_mask.shape} != ({b}, {t})")
        n_real = patch_mask.sum(axis=1).astype(np.int64)

    cropped = images[:, :, :, :t * PATCH_STRIDE]
    col_keep = (np.arange(t * PATCH_STRIDE)[None, :] < (n_real * PATCH_STRIDE)[:, None])
    x = Tensor(cropped * col_keep[:, None, None, :])

    strides = ((1, 1), (2, 2), (2, 2), (2, 2))
    for i in range(4):
        x = tc.conv2d(x, mp.tensors[f"stem.conv{i}.w"], mp.tensors[f"stem.conv{i}.b"],
                      stride=strides[i], padding=(1, 1))
        x = tc.gelu(x)
    x = tc.maxpool2d(x, (stem_cfg.height // PATCH_STRIDE, 1))  # collapse height to 1
    c = stem_cfg.channels[-1]
    x = tc.transpose(tc.reshape(x, (b, c, t)), (0, 2, 1))
    return _linear_fwd(mp, "stem.proj", x)


def encoder_forward(mp: ModelParams, images: np.ndarray,
                    patch_mask: np.ndarray | None = None) -> Tensor:
    """Stem, positions, then the transformer encoder stack."""
    x = stem_forward(mp, images, patch_mask)
    b, t, d = x.shape
    x = x + Tensor(positional_encoding(t, d, x.dtype.type))
    bias = _key_bias(patch_mask) if patch_mask is not None else None
    cfg = mp.encoder
    for i in range(cfg.layers):
        p = f"enc.l{i}"
        sa_in = _ln_fwd(mp, f"{p}.ln1", x)
        x = x + _attention_fwd(mp, f"{p}.self", sa_in, sa_in, cfg.heads, bias)
        x = x + _mlp_fwd(mp, f"{p}.mlp", _ln_fwd(mp, f"{p}.ln2", x))
    return _ln_fwd(mp, "enc.lnf", x)


def adapter_forward(mp: ModelParams, states: Tensor) -> Tensor:
    """Linear bridge to decoder width plus fresh positional encoding."""
    if states.shape[-1] != mp.adapter.in_dim:
        raise DimensionError(
            f"adapter expects dim {mp.adapter.in_dim}, got {states.shape[-1]}"
        )
    x = _linear_fwd(mp, "adapter.proj", states)
    return x + Tensor(positional_encoding(x.shape[1], mp.adapter.out_dim, x.dtype.type))


def _causal_bias(length: int) -> np.ndarray:
    bias = np.triu(np.full((length, length), _NEG_INF, dtype=np.float64), k=1)
    return bias.reshape(1, 1, length, length)


def decoder_forward(mp: ModelParams, memory: Tensor, target_ids: np.ndarray,
                    memory_mask: np.ndarray | None = None) -> Tensor:
    """Teacher-forced logits; position j attends targets <= j only."""
    cfg = mp.decoder
    target_ids = np.asarray(target_ids)
    b, length = target_ids.shape
    if length > cfg.max_len:
        raise DimensionError(f"target length {length} exceeds configured max {cfg.max_len}")
    if not (target_ids[:, 0] == BOS_ID).all():
        raise DataError("decoder targets must begin with BOS")

    x = tc.embedding(mp.tensors["dec.embed.w"], target_ids)
    x = x + Tensor(positional_encoding(length, cfg.dim, x.dtype.type))
    causal = _causal_bias(length)
    cross_bias = _key_bias(memory_mask) if memory_mask is not None else None
    for i in range(cfg.layers):
        p = f"dec.l{i}"
        sa_in = _ln_fwd(mp, f"{p}.ln1", x)
        x = x + _attention_fwd(mp, f"{p}.self", sa_in, sa_in, cfg.heads, causal)
        x = x + _attention_fwd(mp, f"{p}.cross", _ln_fwd(mp, f"{p}.ln2", x),
                               memory, cfg.heads, cross_bias)
        x = x + _mlp_fwd(mp, f"{p}.mlp", _ln_fwd(mp, f"{p}.ln3", x))
    x = _ln_fwd(mp, "dec.lnf", x)
    return _linear_fwd(mp, "dec.out", x)


def recognizer_forward(mp: ModelParams, images: np.ndarray, patch_mask: np.ndarray,
                       target_ids: np.ndarray) -> Tensor:
    memory = adapter_forward(mp, encoder_forward(mp, images, patch_mask))
    return decoder_forward(mp, memory, target_ids, memory_mask=patch_mask)


def pretrain_forward(mp: ModelParams, images: np.ndarray,
                     patch_mask: np.ndarray | None = None) -> Tensor:
    """Encoder states projected onto the k codebook classes."""
    if mp.head_k is None:
        raise ConfigurationError("model has no projection head")
    return _linear_fwd(mp, "head.proj", encoder_forward(mp, images, patch_mask))


def greedy_decode_batch(mp: ModelParams, images: np.ndarray, patch_mask: np.ndarray,
                        alphabet: Alphabet, max_len: int) -> list[str]:
    """Argmax decoding, stopping per line at EOS or after max_len tokens."""
    b = images.shape[0]
    memory = adapter_forward(mp, encoder_forward(mp, images, patch_mask))
    ids = np.full((b, 1), BOS_ID, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    # the prefix fed back includes BOS, so generation is also bounded by the
    # decoder's configured maximum target length
    max_len = min(max_len, mp.decoder.max_len - 1)
    for _ in range(max_len):
        logits = decoder_forward(mp, memory, ids, memory_mask=patch_mask)
        nxt = logits.data[:, -1].argmax(axis=-1).astype(np.int64)
        nxt[done] = PAD_ID
        done |= nxt == EOS_ID
        ids = np.concatenate([ids, nxt[:, None]], axis=1)
        if done.all():
            break
    return [alphabet.decode(row) for row in ids]


def greedy_decode(mp: ModelParams, image: np.ndarray, alphabet: Alphabet,
                  max_len: int) -> str:
    if image.ndim == 2:
        image = image[None, None]
    elif image.ndim == 3:
        image = image[None]
    t = image.shape[-1] // PATCH_STRIDE
    mask = np.ones((1, t), dtype=bool)
    return greedy_decode_batch(mp, image, mask, alphabet, max_len)[0]


# ---------------------------------------------------------------------------
# checkpoint I/O


def _config_to_dict(mp: ModelParams, iteration: int, rng_state, extra_meta) -> dict:
    def as_dict(cfg):
        return dataclasses.asdict(cfg) if cfg is not None else None

    return {
        "format_version": CHECKPOINT_VERSION,
        "iteration": iteration,
        "rng_state": rng_state,
        "encoder": as_dict(mp.encoder),
        "adapter": as_dict(mp.adapter),
        "decoder": as_dict(mp.decoder),
        "head_k": mp.head_k,
        "meta": extra_meta or {},
    }


def _configs_from_dict(block: dict):
    enc = adp = dec = None
    if block.get("encoder"):
        e = dict(block["encoder"])
        stem = e.pop("stem")
        enc = EncoderConfig(stem=StemConfig(channels=tuple(stem["channels"]),
                                            height=stem["height"]), **e)
    if block.get("adapter"):
        adp = AdapterConfig(**block["adapter"])
    if block.get("decoder"):
        dec = DecoderConfig(**block["decoder"])
    return enc, adp, dec, block.get("head_k")


def save_checkpoint(mp: ModelParams, path, iteration: int = 0,
                    rng_state=None, extra_meta: dict | None = None) -> None:
    """Write magic, version, config JSON, then sorted named f32 tensors."""
    path = Path(path)
    block = json.dumps(_config_to_dict(mp, iteration, rng_state, extra_meta),
                       sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(block)))
        fh.write(block)
        for name in sorted(mp.tensors):
            data = np.ascontiguousarray(mp.tensors[name].data, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(struct.pack("<B", 0))  # dtype tag: f32
            fh.write(data.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint: needed {n} bytes for {what} "
                          f"at offset {fh.tell() - len(data)}")
    return data


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r} at offset 0")
        version = struct.unpack("<I", _read_exact(fh, 4, "version"))[0]
        if version != CHECKPOINT_VERSION:
            raise VersionError(f"unsupported checkpoint version {version}")
        block_len = struct.unpack("<I", _read_exact(fh, 4, "config length"))[0]
        try:
            block = json.loads(_read_exact(fh, block_len, "config block"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"corrupt config block: {exc}") from None
        tensors = {}
        while True:
            head = fh.read(2)
            if not head:
                break  # clean end of file after the last record
            if len(head) != 2:
                raise FormatError(
                    f"truncated checkpoint: partial record header at offset "
                    f"{fh.tell() - len(head)}"
                )
            name_len = struct.unpack("<H", head)[0]
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            rank = struct.unpack("<B", _read_exact(fh, 1, "rank"))[0]
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            tag = struct.unpack("<B", _read_exact(fh, 1, "dtype tag"))[0]
            if tag != 0:
                raise FormatError(f"unknown dtype tag {tag} for tensor {name}")
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 4 * count, f"tensor {name}")
            data = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            tensors[name] = Tensor(data, requires_grad=True, dtype=np.float32)
    enc, adp, dec, head_k = _configs_from_dict(block)
    meta = {"iteration": block.get("iteration", 0),
            "rng_state": block.get("rng_state"),
            **(block.get("meta") or {})}
    return ModelParams(tensors, enc, adp, dec, head_k, meta)


def load_group_into(target: ModelParams, source: ModelParams, groups) -> None:
    """Overwrite the target's tensors for the given groups from the source."""
    prefixes = tuple(_GROUP_PREFIXES[g] for g in groups)
    for name, tensor in target.tensors.items():
        if not name.startswith(prefixes):
            continue
        if name not in source.tensors:
            raise FormatError(f"checkpoint is missing tensor {name}")
        src = source.tensors[name].data
        if src.shape != tensor.data.shape:
            raise ConfigurationError(
                f"tensor {name} shape {src.shape} does not match model {tensor.data.shape}"
            )
        tensor.data = src.astype(tensor.data.dtype, copy=True)
