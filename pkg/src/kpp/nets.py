"""Model networks: encoder with temporal shift, memory writer, key and
latent posterior heads, memory-readout prior, decoder, and the no-memory
ablation head.

All parameters live in a flat name -> Tensor dict.  Each parameter's
initializer is seeded from (seed, parameter name), so two models built
with the same seed share identical values for every parameter they have
in common, regardless of which other parameters exist.  Gaussian heads
have zero-initialized final layers, which makes every posterior and
prior exactly standard normal at initialization (both KL terms start
at zero).
"""

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import DiagGaussian
from . import stn

CHECKPOINT_MAGIC = b"KPP1"
CONFIG_KEY = "__config__"
TSM_FOLD_DIV = 8  # shift fraction 0.125 per direction


@dataclass
class Episode:
    """T images stacked (T, C, H, W) plus their source dataset indices."""

    images: np.ndarray
    dataset_ids: list

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise ValueError(f"episode images must be (T,C,H,W), got {self.images.shape}")
        if len(self.dataset_ids) != self.images.shape[0]:
            raise ValueError("dataset_ids length must equal episode length")

    @property
    def T(self):
        return self.images.shape[0]


@dataclass
class Memory:
    """Deterministic episode-level memory block (C, H, W)."""

    grid: Tensor

    @property
    def shape(self):
        return self.grid.shape


@dataclass
class ModelConfig:
    image_shape: tuple = (1, 16, 16)
    T: int = 8
    K: int = 2
    L: int = 64
    memory_shape: tuple = (3, 64, 64)
    trace_size: tuple = (16, 16)
    embed_dim: int = 128
    enc_channels: tuple = (16, 32, 64)
    key_hidden: int = 64
    post_hidden: int = 128
    read_channels: tuple = (16, 32)
    dec_hidden: int = 128
    dec_base_channels: int = 32
    dec_mid_channels: int = 16
    mem_base_channels: int = 32
    writer_channels: tuple = (16, 8)
    likelihood: str = "bernoulli"
    gaussian_std: float = 1.0
    tsm: bool = True
    dense_nets: bool = False
    ablation: bool = False
    log_std_min: float = -7.0
    log_std_max: float = 2.0

    def __post_init__(self):
        self.image_shape = tuple(self.image_shape)
        self.memory_shape = tuple(self.memory_shape)
        self.trace_size = tuple(self.trace_size)
        self.enc_channels = tuple(self.enc_channels)
        self.read_channels = tuple(self.read_channels)
        self.writer_channels = tuple(self.writer_channels)
        if self.T < 1 or self.K < 1 or self.L < 1:
            raise ValueError("T, K and L must all be >= 1")
        if self.likelihood not in ("bernoulli", "gaussian"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if self.likelihood == "gaussian" and self.gaussian_std <= 0:
            raise ValueError("gaussian_std must be > 0")
        if not self.dense_nets:
            _, h, w = self.image_shape
            if h % 4 or w % 4 or h < 8 or w < 8:
                raise ValueError(
                    f"conv nets need image sides divisible by 4 and >= 8, got {h}x{w}"
                )
            mh, mw = self.memory_shape[1], self.memory_shape[2]
            if mh % 8 or mw % 8:
                raise ValueError(f"memory sides must be divisible by 8, got {mh}x{mw}")
            th, tw = self.trace_size
            if th % 4 or tw % 4:
                raise ValueError(f"trace sides must be divisible by 4, got {th}x{tw}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def tsm_shift(features: Tensor) -> Tensor:
    """Temporal shift along the episode axis of (T, C, h, w) features.

    The first floor(C/8) channels move one step toward later samples, the
    next floor(C/8) one step toward earlier samples, with zeros filling
    the vacated boundary slots; remaining channels pass through.
    """
    features = ad.tensor(features) if not isinstance(features, Tensor) else features
    if len(features.shape) != 4:
        raise ValueError(f"tsm_shift expects (T,C,h,w), got {features.shape}")
    t, c = features.shape[0], features.shape[1]
    fold = c // TSM_FOLD_DIV
    if fold == 0:
        return features
    zeros = ad.constant(np.zeros((1, fold) + features.shape[2:]))

    def chans(lo, hi):
        return ad.slice_(features, (slice(None), slice(lo, hi)))

    fwd_src = chans(0, fold)
    bwd_src = chans(fold, 2 * fold)
    rest = chans(2 * fold, c)
    if t == 1:
        fwd = ad.mul(fwd_src, ad.constant(0.0))
        bwd = ad.mul(bwd_src, ad.constant(0.0))
    else:
        fwd = ad.concat([zeros, ad.slice_(fwd_src, slice(0, t - 1))], axis=0)
        bwd = ad.concat([ad.slice_(bwd_src, slice(1, t)), zeros], axis=0)
    parts = [fwd, bwd]
    if 2 * fold < c:
        parts.append(rest)
    return ad.concat(parts, axis=1)


def _conv_out(side, n_layers):
    for _ in range(n_layers):
        side = (side + 2 - 3) // 2 + 1
    return side


class MemoryVAE:
    """All learned networks of the latent-memory model."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = int(seed)
        self._spec = self._build_spec(config)
        self.params = {}
        for name, shape, kind in self._spec:
            if self._owned(name):
                self.params[name] = ad.parameter(
                    self._init_value(name, shape, kind), name=name
                )

    # -- parameter bookkeeping -------------------------------------------

    def _owned(self, name):
        head = name.split(".")[0]
        if self.config.ablation:
            return head in ("enc", "post", "dec", "abl")
        return head != "abl"

    def _init_value(self, name, shape, kind):
        if kind in ("bias", "zero"):
            return np.zeros(shape)
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, *name.encode()]))
        )
        if len(shape) == 2:  # dense (in, out)
            fan_in = shape[0]
        else:  # conv kernels: input-channel fan-in
            fan_in = shape[1] * shape[2] * shape[3]
        return rng.normal(size=shape) / np.sqrt(fan_in)

    @staticmethod
    def _gauss_head_spec(prefix, d_in, d_out):
        # zero-initialized final layer: standard-normal output at init
        return [(f"{prefix}.w", (d_in, 2 * d_out), "zero"),
                (f"{prefix}.b", (2 * d_out,), "zero")]

    def _build_spec(self, cfg):
        spec = []
        c_img, h_img, w_img = cfg.image_shape
        pixels = c_img * h_img * w_img

        def dense(prefix, d_in, d_out, zero=False):
            spec.append((f"{prefix}.w", (d_in, d_out), "zero" if zero else "weight"))
            spec.append((f"{prefix}.b", (d_out,), "bias"))

        def conv(prefix, c_in, c_out, k):
            spec.append((f"{prefix}.w", (c_out, c_in, k, k), "weight"))
            spec.append((f"{prefix}.b", (c_out,), "bias"))

        def convT(prefix, c_in, c_out, k):
            spec.append((f"{prefix}.w", (c_in, c_out, k, k), "weight"))
            spec.append((f"{prefix}.b", (c_out,), "bias"))

        if cfg.dense_nets:
            dense("enc.fc0", pixels, cfg.embed_dim)
            dense("enc.out", cfg.embed_dim, cfg.embed_dim)
        else:
            e0, e1, e2 = cfg.enc_channels
            conv("enc.conv0", c_img, e0, 3)
            conv("enc.conv1", e0, e1, 3)
            conv("enc.conv2", e1, e2, 3)
            side_h = _conv_out(h_img, 3)
            side_w = _conv_out(w_img, 3)
            dense("enc.fc", e2 * side_h * side_w, cfg.embed_dim)

        mc, mh, mw = cfg.memory_shape
        if cfg.dense_nets:
            dense("mem.fc0", cfg.embed_dim, cfg.embed_dim)
            dense("mem.out", cfg.embed_dim, mc * mh * mw)
        else:
            base = cfg.mem_base_channels
            dense("mem.fc", cfg.embed_dim, base * (mh // 8) * (mw // 8))
            w0, w1 = cfg.writer_channels
            convT("mem.up0", base, w0, 4)
            convT("mem.up1", w0, w1, 4)
            convT("mem.up2", w1, mc, 4)

        dense("key.fc", cfg.embed_dim, cfg.key_hidden)
        spec.extend(self._gauss_head_spec("key.out", cfg.key_hidden, cfg.K * 3))

        dense("post.fc", cfg.embed_dim, cfg.post_hidden)
        spec.extend(self._gauss_head_spec("post.out", cfg.post_hidden, cfg.L))

        th, tw = cfg.trace_size
        if cfg.dense_nets:
            dense("read.fc0", cfg.K * mc * th * tw, cfg.embed_dim)
            spec.extend(self._gauss_head_spec("read.out", cfg.embed_dim, cfg.L))
        else:
            r0, r1 = cfg.read_channels
            conv("read.conv0", cfg.K * mc, r0, 3)
            conv("read.conv1", r0, r1, 3)
            flat = r1 * _conv_out(th, 2) * _conv_out(tw, 2)
            spec.extend(self._gauss_head_spec("read.out", flat, cfg.L))

        if cfg.dense_nets:
            dense("dec.fc0", cfg.L, cfg.dec_hidden)
            dense("dec.out", cfg.dec_hidden, pixels)
        else:
            db = cfg.dec_base_channels
            dense("dec.fc", cfg.L, cfg.dec_hidden)
            dense("dec.spatial", cfg.dec_hidden, db * (h_img // 4) * (w_img // 4))
            convT("dec.up0", db, cfg.dec_mid_channels, 4)
            convT("dec.up1", cfg.dec_mid_channels, c_img, 4)

        # ablation head sized to match the memory path's parameter count
        mem_path = sum(
            int(np.prod(shape)) for name, shape, _ in spec
            if name.split(".")[0] in ("mem", "read")
        )
        h_abl = max(1, round((mem_path - 2 * cfg.L) / (cfg.embed_dim + 2 * cfg.L + 1)))
        dense("abl.fc", cfg.embed_dim, h_abl)
        spec.extend(self._gauss_head_spec("abl.out", h_abl, cfg.L))
        return spec

    def n_params(self, prefix=None):
        total = 0
        for name, shape, _ in self._spec:
            if not self._owned(name):
                continue
            if prefix is None or name.startswith(prefix):
                total += int(np.prod(shape))
        return total

    def trainable(self):
        """Parameters in a fixed, name-sorted order."""
        return [self.params[k] for k in sorted(self.params)]

    # -- layer helpers ----------------------------------------------------

    def _dense(self, x, prefix):
        return ad.add(ad.matmul(x, self.params[f"{prefix}.w"]), self.params[f"{prefix}.b"])

    def _conv(self, x, prefix, stride=2, pad=1):
        y = ad.conv2d(x, self.params[f"{prefix}.w"], stride=stride, pad=pad)
        b = self.params[f"{prefix}.b"]
        return ad.add(y, ad.reshape(b, (1, b.shape[0], 1, 1)))

    def _convT(self, x, prefix, stride=2, pad=1):
        y = ad.conv_transpose2d(x, self.params[f"{prefix}.w"], stride=stride, pad=pad)
        b = self.params[f"{prefix}.b"]
        return ad.add(y, ad.reshape(b, (1, b.shape[0], 1, 1)))

    def _gauss_head(self, h, prefix, event_shape):
        out = self._dense(h, prefix)
        n = out.shape[0]
        d = int(np.prod(event_shape))
        mean = ad.reshape(ad.slice_(out, (slice(None), slice(0, d))), (n,) + tuple(event_shape))
        log_std = ad.reshape(ad.slice_(out, (slice(None), slice(d, 2 * d))), (n,) + tuple(event_shape))
        log_std = ad.clamp(log_std, self.config.log_std_min, self.config.log_std_max)
        return DiagGaussian(mean=mean, log_std=log_std)

    # -- networks ----------------------------------------------------------

    def encode(self, images) -> Tensor:
        """Per-sample embeddings (T, embed_dim) of an episode's images."""
        x = ad.tensor(images) if not isinstance(images, Tensor) else images
        if x.shape[1:] != self.config.image_shape:
            raise ValueError(
                f"episode images {x.shape[1:]} do not match configured "
                f"image shape {self.config.image_shape}"
            )
        t = x.shape[0]
        if self.config.dense_nets:
            flat = ad.reshape(x, (t, int(np.prod(self.config.image_shape))))
            h = ad.relu(self._dense(flat, "enc.fc0"))
            return self._dense(h, "enc.out")
        h = ad.relu(self._conv(x, "enc.conv0"))
        if self.config.tsm:
            h = tsm_shift(h)
        h = ad.relu(self._conv(h, "enc.conv1"))
        if self.config.tsm:
            h = tsm_shift(h)
        h = ad.relu(self._conv(h, "enc.conv2"))
        flat = ad.reshape(h, (t, int(np.prod(h.shape[1:]))))
        return self._dense(flat, "enc.fc")

    def tsm_shift(self, features):
        return tsm_shift(features)

    def write_memory(self, embeddings: Tensor) -> Memory:
        """Mean-pool the episode embedding and expand it into the memory block."""
        if self.config.ablation:
            raise RuntimeError("ablation model has no memory writer")
        t = embeddings.shape[0]
        pooled = ad.mean_(embeddings, axis=0, keepdims=True)  # (1, embed)
        mc, mh, mw = self.config.memory_shape
        if self.config.dense_nets:
            h = ad.relu(self._dense(pooled, "mem.fc0"))
            grid = ad.reshape(self._dense(h, "mem.out"), (mc, mh, mw))
            return Memory(grid=grid)
        base = self.config.mem_base_channels
        h = ad.relu(self._dense(pooled, "mem.fc"))
        h = ad.reshape(h, (1, base, mh // 8, mw // 8))
        h = ad.relu(self._convT(h, "mem.up0"))
        h = ad.relu(self._convT(h, "mem.up1"))
        h = self._convT(h, "mem.up2")
        return Memory(grid=ad.reshape(h, (mc, mh, mw)))

    def key_posterior(self, embeddings: Tensor) -> DiagGaussian:
        h = ad.relu(self._dense(embeddings, "key.fc"))
        return self._gauss_head(h, "key.out", (self.config.K, 3))

    def latent_posterior(self, embeddings: Tensor) -> DiagGaussian:
        h = ad.relu(self._dense(embeddings, "post.fc"))
        return self._gauss_head(h, "post.out", (self.config.L,))

    def readout_prior(self, traces) -> DiagGaussian:
        """Latent prior from K read traces, stacked along channels.

        Accepts a TraceSet (one sample) or a (T, K, C, h, w) tensor.
        """
        single = isinstance(traces, stn.TraceSet)
        x = traces.traces if single else traces
        x = ad.tensor(x) if not isinstance(x, Tensor) else x
        if single:
            x = ad.reshape(x, (1,) + x.shape)
        if len(x.shape) != 5:
            raise ValueError(f"readout_prior expects (T,K,C,h,w) traces, got {x.shape}")
        t, k = x.shape[0], x.shape[1]
        if k != self.config.K:
            raise ValueError(f"expected {self.config.K} traces per sample, got {k}")
        mc = self.config.memory_shape[0]
        th, tw = self.config.trace_size
        if x.shape[2:] != (mc, th, tw):
            raise ValueError(
                f"trace shape {x.shape[2:]} does not match configured ({mc}, {th}, {tw})"
            )
        if self.config.dense_nets:
            flat = ad.reshape(x, (t, k * mc * th * tw))
            h = ad.relu(self._dense(flat, "read.fc0"))
            return self._gauss_head(h, "read.out", (self.config.L,))
        stacked = ad.reshape(x, (t, k * mc, th, tw))
        h = ad.relu(self._conv(stacked, "read.conv0"))
        h = ad.relu(self._conv(h, "read.conv1"))
        flat = ad.reshape(h, (t, int(np.prod(h.shape[1:]))))
        return self._gauss_head(flat, "read.out", (self.config.L,))

    def decode(self, z: Tensor) -> Tensor:
        """Map latents (N, L) to image-shaped Bernoulli logits or Gaussian means."""
        z = ad.tensor(z) if not isinstance(z, Tensor) else z
        if len(z.shape) == 1:
            z = ad.reshape(z, (1, z.shape[0]))
        if z.shape[1] != self.config.L:
            raise ValueError(f"latent width {z.shape[1]} != configured L={self.config.L}")
        n = z.shape[0]
        c_img, h_img, w_img = self.config.image_shape
        if self.config.dense_nets:
            h = ad.relu(self._dense(z, "dec.fc0"))
            out = self._dense(h, "dec.out")
            return ad.reshape(out, (n, c_img, h_img, w_img))
        db = self.config.dec_base_channels
        h = ad.relu(self._dense(z, "dec.fc"))
        h = ad.relu(self._dense(h, "dec.spatial"))
        h = ad.reshape(h, (n, db, h_img // 4, w_img // 4))
        h = ad.relu(self._convT(h, "dec.up0"))
        return self._convT(h, "dec.up1")

    def ablation_prior(self, embeddings: Tensor) -> DiagGaussian:
        """Latent prior straight from the pooled episode embedding (no memory)."""
        t = embeddings.shape[0]
        pooled = ad.mean_(embeddings, axis=0, keepdims=True)
        h = ad.relu(self._dense(pooled, "abl.fc"))
        d = self._gauss_head(h, "abl.out", (self.config.L,))
        mean = ad.broadcast_to(d.mean, (t, self.config.L))
        log_std = ad.broadcast_to(d.log_std, (t, self.config.L))
        return DiagGaussian(mean=mean, log_std=log_std)

    # -- persistence -------------------------------------------------------

    def state_arrays(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def save(self, path):
        save_checkpoint(path, self.state_arrays(), self.config.to_dict())

    @classmethod
    def load(cls, path):
        arrays, config_dict = load_checkpoint(path)
        if config_dict is None:
            raise ValueError(f"checkpoint {path} carries no model config")
        model = cls(ModelConfig.from_dict(config_dict), seed=0)
        model.load_arrays(arrays)
        return model

    def load_arrays(self, arrays):
        for name, param in self.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            arr = arrays[name]
            if arr.shape != param.data.shape:
                raise ValueError(
                    f"parameter {name!r} shape {arr.shape} != expected {param.data.shape}"
                )
            param.data = arr.astype(np.float64).copy()


def save_checkpoint(path, arrays, config_dict=None):
    """Self-describing binary: magic, then per entry name/rank/dims/f64 data."""
    entries = dict(arrays)
    if config_dict is not None:
        blob = np.frombuffer(json.dumps(config_dict).encode(), dtype=np.uint8)
        entries[CONFIG_KEY] = blob.astype(np.float64)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name in sorted(entries):
            arr = np.asarray(entries[name], dtype=np.float64)
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (arrays, config_dict or None)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(
            f"bad checkpoint magic at byte 0: expected {CHECKPOINT_MAGIC!r}, got {raw[:4]!r}"
        )
    pos = 4
    arrays = {}

    def need(n, what):
        if pos + n > len(raw):
            raise ValueError(
                f"truncated checkpoint: needed {n} bytes for {what} at byte {pos}, "
                f"file has {len(raw) - pos} left"
            )

    while pos < len(raw):
        need(4, "name length")
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        need(nlen, "name")
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        need(4, "rank")
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        need(4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        need(8 * count, f"data of {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
        pos += 8 * count
    config_dict = None
    if CONFIG_KEY in arrays:
        blob = arrays.pop(CONFIG_KEY)
        config_dict = json.loads(bytes(blob.astype(np.uint8)).decode())
        for key in ("image_shape", "memory_shape", "trace_size",
                    "enc_channels", "read_channels", "writer_channels"):
            if key in config_dict:
                config_dict[key] = tuple(config_dict[key])
    return arrays, config_dict
