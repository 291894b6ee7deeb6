"""The assembled enhancement model.

A 3-level UNet of hybrid feature extractors (DRDB -> SGTB -> SAM), with
pixel-unshuffle downsampling, pixel-shuffle (or bilinear) upsampling,
concatenation skip connections, and one output head per decoder level.
Heads emit residuals added to the bilinearly resized input, so a
zero-initialized model is the identity mapping.

The structure prior is extracted once per input at full resolution and
re-embedded per level with a small convolution. Checkpoints use the
binary "SGCK1" container with a CRC64 footer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .blocks import (SAM, SGTB, BlockConfig, Conv2dLayer, DRDB, LinearLayer,
                     _collect)
from .color_prior import PriorConfig, PriorMap, ciconv
from .imageops import bilinear_resize, pixel_shuffle_r2, pixel_unshuffle_r2
from .tensor import Tensor

LEVELS = 3
ADJUST_FACTOR_MIN = 0.96
ADJUST_FACTOR_MAX = 1.05


class NonFiniteActivation(RuntimeError):
    """Raised when a forward stage produces NaN or Inf."""


class CheckpointError(RuntimeError):
    """Corrupt, truncated, or incompatible checkpoint file."""


@dataclass
class ModelConfig:
    base_channels: int = 32
    channel_multipliers: tuple[int, int, int] = (1, 2, 4)
    hsgfe_per_level: int = 1
    attention_heads: int = 1
    drdb_growth: int = 16
    drdb_layers: int = 3
    ffn_expansion: float = 2.0
    upsample_mode: str = "pixel_shuffle"  # or "bilinear"
    adjustment_enabled: bool = False
    identity_init: bool = True
    use_sgtb: bool = True                # ablation: drop the transformer stage
    use_sgca: bool = True                # ablation: drop cross attention only
    prior: PriorConfig = field(default_factory=PriorConfig)

    def __post_init__(self):
        if len(self.channel_multipliers) != LEVELS:
            raise ValueError("exactly three channel multipliers required")
        for m in self.channel_multipliers:
            if (self.base_channels * m) % self.attention_heads:
                raise ValueError("level channels must be divisible by heads")
        if self.upsample_mode not in ("pixel_shuffle", "bilinear"):
            raise ValueError("upsample_mode must be pixel_shuffle or bilinear")
        if self.hsgfe_per_level < 1:
            raise ValueError("hsgfe_per_level must be >= 1")

    def level_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def block_config(self, channels: int) -> BlockConfig:
        return BlockConfig(channels=channels,
                           attention_heads=self.attention_heads,
                           drdb_growth=self.drdb_growth,
                           drdb_layers=self.drdb_layers,
                           ffn_expansion=self.ffn_expansion,
                           use_sgca=self.use_sgca)


def paper_scale_config() -> ModelConfig:
    """Configuration sized toward the published parameter budget."""
    return ModelConfig(base_channels=64, channel_multipliers=(1, 2, 4),
                       hsgfe_per_level=2, attention_heads=4,
                       drdb_growth=32, ffn_expansion=2.0)


class HSGFE:
    """Hybrid extractor: DRDB, then SGTB guided by the prior, then SAM."""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator,
                 use_sgtb: bool = True, identity_init: bool = True):
        self.drdb = DRDB(cfg, rng, zero_init_out=identity_init)
        self.sgtb = SGTB(cfg, rng, zero_init_out=identity_init) if use_sgtb else None
        self.sam = SAM(cfg, rng, zero_init_out=identity_init)

    def __call__(self, x: Tensor, prior_feat: Tensor) -> Tensor:
        y = self.drdb(x)
        if self.sgtb is not None:
            y = self.sgtb(y, prior_feat)
        return self.sam(y)

    def params(self) -> dict[str, Tensor]:
        return _collect({"drdb": self.drdb, "sgtb": self.sgtb, "sam": self.sam})


class Upsample2x:
    """Channel projection + pixel shuffle, or bilinear + projection."""

    def __init__(self, cin: int, cout: int, mode: str, rng: np.random.Generator):
        self.mode = mode
        if mode == "pixel_shuffle":
            self.conv = Conv2dLayer(cin, 4 * cout, 1, rng)
        else:
            self.conv = Conv2dLayer(cin, cout, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if self.mode == "pixel_shuffle":
            return pixel_shuffle_r2(self.conv(x))
        b, c, h, w = x.shape
        return self.conv(bilinear_resize(x, 2 * h, 2 * w))

    def params(self) -> dict[str, Tensor]:
        return _collect({"conv": self.conv})


class AdjustmentHead:
    """Five-class illumination classifier with a bounded factor table.

    Three linear layers joined by ReLU map 8 illumination statistics to
    class logits; each class selects a global brightness factor within
    [0.96, 1.05]. Factors live in the checkpoint but are not trained.
    """

    def __init__(self, rng: np.random.Generator):
        self.fc1 = LinearLayer(8, 32, rng)
        self.fc2 = LinearLayer(32, 32, rng)
        self.fc3 = LinearLayer(32, 5, rng)
        self.factors = Tensor(np.array([0.96, 0.98, 1.00, 1.02, 1.05]))

    def logits(self, stats: Tensor) -> Tensor:
        return self.fc3(T.relu(self.fc2(T.relu(self.fc1(stats)))))

    def classify(self, stats: np.ndarray) -> np.ndarray:
        with T.no_grad():
            lg = self.logits(Tensor(np.atleast_2d(stats)))
        return np.argmax(lg.data, axis=1)

    def factor_table(self) -> np.ndarray:
        return np.clip(self.factors.data, ADJUST_FACTOR_MIN, ADJUST_FACTOR_MAX)

    def params(self) -> dict[str, Tensor]:
        return _collect({"fc1": self.fc1, "fc2": self.fc2, "fc3": self.fc3,
                         "factors": self.factors})


def illumination_stats(input_image: np.ndarray, enhanced_image: np.ndarray) -> np.ndarray:
    """Per-image vector of 8 reals: mean/std/p5/p95 of luma, both images.

    Accepts [3,H,W] or [B,3,H,W]; returns [8] or [B,8].
    """
    def stats_of(img: np.ndarray) -> np.ndarray:
        luma = 0.299 * img[:, 0] + 0.587 * img[:, 1] + 0.114 * img[:, 2]
        flat = luma.reshape(luma.shape[0], -1)
        return np.stack([flat.mean(axis=1), flat.std(axis=1),
                         np.percentile(flat, 5, axis=1),
                         np.percentile(flat, 95, axis=1)], axis=1)

    single = input_image.ndim == 3
    a = np.asarray(input_image, dtype=np.float64)[None] if single else np.asarray(input_image, dtype=np.float64)
    b = np.asarray(enhanced_image, dtype=np.float64)[None] if single else np.asarray(enhanced_image, dtype=np.float64)
    out = np.concatenate([stats_of(a), stats_of(b)], axis=1)
    return out[0] if single else out


class Model:
    """The full enhancement network plus optional adjustment head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        chans = config.level_channels()
        c0, c1, c2 = chans
        ii = config.identity_init

        self.log2_sigma = Tensor(config.prior.log2_sigma,
                                 requires_grad=config.prior.trainable_sigma)
        self.in_conv = Conv2dLayer(3, c0, 3, rng)
        self.prior_embed = [Conv2dLayer(1, c, 3, rng) for c in chans]

        def stage(c):
            bc = config.block_config(c)
            return [HSGFE(bc, rng, use_sgtb=config.use_sgtb, identity_init=ii)
                    for _ in range(config.hsgfe_per_level)]

        self.enc0 = stage(c0)
        self.down0 = Conv2dLayer(4 * c0, c1, 1, rng)
        self.enc1 = stage(c1)
        self.down1 = Conv2dLayer(4 * c1, c2, 1, rng)
        self.mid = stage(c2)
        self.up1 = Upsample2x(c2, c1, config.upsample_mode, rng)
        self.fuse1 = Conv2dLayer(2 * c1, c1, 1, rng)
        self.dec1 = stage(c1)
        self.up0 = Upsample2x(c1, c0, config.upsample_mode, rng)
        self.fuse0 = Conv2dLayer(2 * c0, c0, 1, rng)
        self.dec0 = stage(c0)
        self.head3 = Conv2dLayer(c2, 3, 3, rng, zero_init=ii)
        self.head2 = Conv2dLayer(c1, 3, 3, rng, zero_init=ii)
        self.head1 = Conv2dLayer(c0, 3, 3, rng, zero_init=ii)
        self.adjust_head = AdjustmentHead(rng) if config.adjustment_enabled else None

    # -- parameters -----------------------------------------------------------
    def params(self) -> dict[str, Tensor]:
        children: dict[str, object] = {"prior.log2_sigma": self.log2_sigma,
                                       "in_conv": self.in_conv}
        for i, pe in enumerate(self.prior_embed):
            children[f"prior_embed{i}"] = pe
        for name, stage in (("enc0", self.enc0), ("enc1", self.enc1),
                            ("mid", self.mid), ("dec1", self.dec1),
                            ("dec0", self.dec0)):
            for i, block in enumerate(stage):
                children[f"{name}.{i}"] = block
        children.update({"down0": self.down0, "down1": self.down1,
                         "up1": self.up1, "fuse1": self.fuse1,
                         "up0": self.up0, "fuse0": self.fuse0,
                         "head3": self.head3, "head2": self.head2,
                         "head1": self.head1})
        if self.adjust_head is not None:
            children["adjust_head"] = self.adjust_head
        return _collect(children)

    def trainable_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params().items() if v.requires_grad}

    def param_count(self) -> int:
        return sum(p.data.size for p in self.trainable_params().values())

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.zero_grad()

    # -- forward ---------------------------------------------------------------
    def extract_prior(self, image: Tensor) -> PriorMap:
        sigma_param = self.log2_sigma if self.config.prior.trainable_sigma else None
        return ciconv(image, self.config.prior, log2_sigma=sigma_param)

    def __call__(self, image: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return self.forward(image)

    def forward(self, image: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Enhance; returns (full, half, quarter) resolution outputs."""
        image = T._as_tensor(image)
        b, c, h, w = image.shape
        if c != 3:
            raise ValueError("expected a 3-channel image batch")
        if h % 16 or w % 16:
            raise ValueError("input H and W must be divisible by 16")
        lo, hi = float(image.data.min()), float(image.data.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values must lie in [0,1], got [{lo}, {hi}]")

        prior = self.extract_prior(image)
        sizes = [(h, w), (h // 2, w // 2), (h // 4, w // 4)]
        pfeats = []
        for lvl, (ph, pw) in enumerate(sizes):
            p = prior.w_norm if lvl == 0 else bilinear_resize(prior.w_norm, ph, pw)
            pfeats.append(self.prior_embed[lvl](p))

        x = self._checked(self.in_conv(image), "in_conv")
        for i, blk in enumerate(self.enc0):
            x = self._checked(blk(x, pfeats[0]), f"enc0.{i}")
        skip0 = x
        x = self.down0(pixel_unshuffle_r2(x))
        for i, blk in enumerate(self.enc1):
            x = self._checked(blk(x, pfeats[1]), f"enc1.{i}")
        skip1 = x
        x = self.down1(pixel_unshuffle_r2(x))
        for i, blk in enumerate(self.mid):
            x = self._checked(blk(x, pfeats[2]), f"mid.{i}")

        base3 = bilinear_resize(image, h // 4, w // 4)
        i3 = T.clamp(base3 + self.head3(x), 0.0, 1.0)

        x = self.fuse1(T.concat([self.up1(x), skip1], axis=1))
        for i, blk in enumerate(self.dec1):
            x = self._checked(blk(x, pfeats[1]), f"dec1.{i}")
        base2 = bilinear_resize(image, h // 2, w // 2)
        i2 = T.clamp(base2 + self.head2(x), 0.0, 1.0)

        x = self.fuse0(T.concat([self.up0(x), skip0], axis=1))
        for i, blk in enumerate(self.dec0):
            x = self._checked(blk(x, pfeats[0]), f"dec0.{i}")
        i1 = T.clamp(image + self.head1(x), 0.0, 1.0)
        return i1, i2, i3

    @staticmethod
    def _checked(x: Tensor, name: str) -> Tensor:
        if not np.isfinite(x.data).all():
            raise NonFiniteActivation(f"non-finite activation after {name}")
        return x

    # -- adjustment --------------------------------------------------------------
    def adjust(self, enhanced: Tensor, stats: np.ndarray) -> Tensor:
        """Scale by the per-image class factor, then clamp to [0,1]."""
        if self.adjust_head is None:
            raise RuntimeError("model was built without the adjustment head")
        cls = self.adjust_head.classify(stats)
        table = self.adjust_head.factor_table()
        fac = table[cls].reshape(-1, 1, 1, 1)
        return T.clamp(enhanced * Tensor(fac.astype(enhanced.dtype)), 0.0, 1.0)


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, seed)


# -- checkpoint I/O --------------------------------------------------------------

CHECKPOINT_MAGIC = b"SGCK1\n"
CHECKPOINT_VERSION = 1

_CRC64_POLY = 0xC96C5795D7870F42  # CRC-64/XZ, reflected
_CRC64_TABLE: list[int] = []
for _i in range(256):
    _c = _i
    for _ in range(8):
        _c = (_c >> 1) ^ _CRC64_POLY if _c & 1 else _c >> 1
    _CRC64_TABLE.append(_c)


def crc64(data: bytes, crc: int = 0) -> int:
    crc ^= 0xFFFFFFFFFFFFFFFF
    for byte in data:
        crc = _CRC64_TABLE[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


def _config_lines(config: ModelConfig, iteration: int,
                  rng_state: dict | None) -> str:
    kv = {
        "base_channels": config.base_channels,
        "channel_multipliers": ",".join(map(str, config.channel_multipliers)),
        "hsgfe_per_level": config.hsgfe_per_level,
        "attention_heads": config.attention_heads,
        "drdb_growth": config.drdb_growth,
        "drdb_layers": config.drdb_layers,
        "ffn_expansion": repr(config.ffn_expansion),
        "upsample_mode": config.upsample_mode,
        "adjustment_enabled": int(config.adjustment_enabled),
        "identity_init": int(config.identity_init),
        "use_sgtb": int(config.use_sgtb),
        "use_sgca": int(config.use_sgca),
        "prior.log2_sigma": repr(config.prior.log2_sigma),
        "prior.epsilon": repr(config.prior.epsilon),
        "prior.kernel_truncation": repr(config.prior.kernel_truncation),
        "prior.trainable_sigma": int(config.prior.trainable_sigma),
        "iteration": iteration,
    }
    if rng_state is not None:
        kv["rng.state"] = rng_state["state"]["state"]
        kv["rng.inc"] = rng_state["state"]["inc"]
        kv["rng.has_uint32"] = rng_state["has_uint32"]
        kv["rng.uinteger"] = rng_state["uinteger"]
    return "".join(f"{k}={v}\n" for k, v in sorted(kv.items()))


def _parse_config(text: str) -> tuple[ModelConfig, int, dict | None]:
    kv = dict(line.split("=", 1) for line in text.splitlines() if line)
    prior = PriorConfig(log2_sigma=float(kv["prior.log2_sigma"]),
                        epsilon=float(kv["prior.epsilon"]),
                        kernel_truncation=float(kv["prior.kernel_truncation"]),
                        trainable_sigma=bool(int(kv["prior.trainable_sigma"])))
    config = ModelConfig(
        base_channels=int(kv["base_channels"]),
        channel_multipliers=tuple(int(x) for x in kv["channel_multipliers"].split(",")),
        hsgfe_per_level=int(kv["hsgfe_per_level"]),
        attention_heads=int(kv["attention_heads"]),
        drdb_growth=int(kv["drdb_growth"]),
        drdb_layers=int(kv["drdb_layers"]),
        ffn_expansion=float(kv["ffn_expansion"]),
        upsample_mode=kv["upsample_mode"],
        adjustment_enabled=bool(int(kv["adjustment_enabled"])),
        identity_init=bool(int(kv["identity_init"])),
        use_sgtb=bool(int(kv["use_sgtb"])),
        use_sgca=bool(int(kv["use_sgca"])),
        prior=prior,
    )
    rng_state = None
    if "rng.state" in kv:
        rng_state = {
            "bit_generator": "PCG64",
            "state": {"state": int(kv["rng.state"]), "inc": int(kv["rng.inc"])},
            "has_uint32": int(kv["rng.has_uint32"]),
            "uinteger": int(kv["rng.uinteger"]),
        }
    return config, int(kv["iteration"]), rng_state


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    dtype = {"float32": b"f32", "float64": b"f64"}[arr.dtype.name]
    head = struct.pack("<I", len(name)) + name.encode()
    head += dtype + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("unexpected end of checkpoint file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def array(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u32()).decode()
        dtype = {b"f32": np.float32, b"f64": np.float64}.get(self.take(3))
        if dtype is None:
            raise CheckpointError(f"unknown dtype for parameter {name!r}")
        ndim = self.take(1)[0]
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim)) if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        raw = self.take(n * np.dtype(dtype).itemsize)
        arr = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype)
        return name, arr.reshape(shape)


def save_checkpoint(model: Model, path: str, optimizer=None,
                    rng_state: dict | None = None, iteration: int = 0) -> None:
    """Write the SGCK1 container; see the format note in the module docstring."""
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<I", CHECKPOINT_VERSION)
    cfg = _config_lines(model.config, iteration, rng_state).encode()
    body += struct.pack("<I", len(cfg)) + cfg

    params = model.params()
    body += struct.pack("<I", len(params))
    for name, p in params.items():
        body += _pack_array(name, p.data)

    if optimizer is not None:
        body += b"\x01"
        body += struct.pack("<Q", optimizer.step_count)
        body += struct.pack("<I", len(optimizer.m))
        for name in optimizer.m:
            body += _pack_array(f"m.{name}", optimizer.m[name])
            body += _pack_array(f"v.{name}", optimizer.v[name])
    else:
        body += b"\x00"

    body += struct.pack("<Q", crc64(bytes(body)))
    with open(path, "wb") as f:
        f.write(body)


def load_checkpoint(path: str):
    """Read an SGCK1 file; returns (model, optimizer_state, rng_state, iteration).

    optimizer_state is None or (step_count, m_dict, v_dict).
    """
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(CHECKPOINT_MAGIC) + 12:
        raise CheckpointError("file too short to be a checkpoint")
    stored = struct.unpack("<Q", data[-8:])[0]
    if crc64(data[:-8]) != stored:
        raise CheckpointError("checksum mismatch: file is corrupt")

    r = _Reader(data[:-8])
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not an SGCK1 checkpoint")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config, iteration, rng_state = _parse_config(r.take(r.u32()).decode())

    model = Model(config, seed=0)
    params = model.params()
    n = r.u32()
    if n != len(params):
        raise CheckpointError(f"parameter count mismatch: file {n}, model {len(params)}")
    for _ in range(n):
        name, arr = r.array()
        if name not in params:
            raise CheckpointError(f"unknown parameter {name!r} in checkpoint")
        if params[name].data.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name!r}")
        params[name].data = arr
        if params[name].grad is not None:
            params[name].grad = np.zeros_like(arr)

    opt_state = None
    if r.take(1) == b"\x01":
        step = struct.unpack("<Q", r.take(8))[0]
        count = r.u32()
        m, v = {}, {}
        for _ in range(count):
            name, arr = r.array()
            m[name.removeprefix("m.")] = arr
            name, arr = r.array()
            v[name.removeprefix("v.")] = arr
        opt_state = (step, m, v)
    return model, opt_state, rng_state, iteration
