"""Stage-1 latent codec: a small convolutional autoencoder with a
vector-quantization codebook.

Images live in [0,1] at H x W x 3; latents at (H/f) x (W/f) x 3 where
f = 2^n. Decoding always routes through the quantization layer (nearest
codebook entry, lowest index on ties), and the whole codec is frozen before
diffusion training starts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import (Tensor, _result, add, conv2d, detach, gather_rows,
                       nearest_upsample, scale, silu, square, sub, tmean)
from .errors import ConfigError, DimensionError, InputError, NumericError
from .optim import Adam
from .params import ParamStore, glorot
from .rng import Rng


@dataclass
class CodecConfig:
    image_size: int = 64
    downsample_stages: int = 2  # f = 2**n
    codebook_size: int = 128
    base_width: int = 16
    latent_channels: int = 3  # must equal codebook entry dim

    @property
    def factor(self) -> int:
        return 2 ** self.downsample_stages

    @property
    def latent_size(self) -> int:
        return self.image_size // self.factor

    def validate(self) -> None:
        if self.image_size % self.factor != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by factor {self.factor}"
            )
        if self.codebook_size < 1:
            raise ConfigError("codebook must have at least one entry")


def _stage_widths(cfg: CodecConfig) -> list[int]:
    return [cfg.base_width * (2 ** i) for i in range(cfg.downsample_stages)]


class Codec:
    """Encoder, decoder and codebook with a freeze switch.

    While unfrozen the tensors are also registered in ``params`` (a
    ParamStore) for training; ``freeze()`` drops the store and turns off
    gradient tracking, after which encode/decode run as plain array code.
    """

    def __init__(self, cfg: CodecConfig, rng: Rng, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self.frozen = False
        self.tensors: dict[str, Tensor] = {}
        self.params: ParamStore | None = ParamStore()

        widths = _stage_widths(cfg)
        cin = 3
        for i, w in enumerate(widths):
            self._add_conv(f"enc/stage{i}", rng.split(f"enc{i}"), 3, cin, w)
            cin = w
        self._add_conv("enc/proj", rng.split("encp"), 1, cin, cfg.latent_channels)

        self._add_conv("dec/proj", rng.split("decp"), 1, cfg.latent_channels, widths[-1])
        cin = widths[-1]
        for i, w in enumerate(reversed(widths[:-1])):
            self._add_conv(f"dec/stage{i}", rng.split(f"dec{i}"), 3, cin, w)
            cin = w
        self._add_conv(f"dec/stage{len(widths) - 1}", rng.split("decout"), 3, cin, 3)

        book = rng.split("codebook").uniform(
            -1.0, 1.0, (cfg.codebook_size, cfg.latent_channels), dtype=dtype
        )
        self._register("codebook", Tensor(book, requires_grad=True))

    # -- parameter plumbing ---------------------------------------------------

    def _register(self, name: str, t: Tensor) -> Tensor:
        self.tensors[name] = t
        self.params.add(name, t)
        return t

    def _add_conv(self, prefix: str, rng: Rng, k: int, cin: int, cout: int) -> None:
        fan_in, fan_out = k * k * cin, k * k * cout
        self._register(prefix + "/w", Tensor(
            glorot(rng, (k, k, cin, cout), fan_in, fan_out, self.dtype),
            requires_grad=True))
        self._register(prefix + "/b", Tensor(
            np.zeros(cout, dtype=self.dtype), requires_grad=True))

    @property
    def codebook(self) -> np.ndarray:
        return self.tensors["codebook"].data

    def checksum(self) -> int:
        import zlib
        crc = 0
        for name in sorted(self.tensors):
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(self.tensors[name].data).tobytes(), crc)
        return crc

    def freeze(self) -> None:
        """Stop gradient tracking for good; validates codebook uniqueness."""
        ent = self.codebook
        d = ((ent[:, None, :] - ent[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d, np.inf)
        if d.min() < 1e-6 ** 2:
            raise NumericError("codebook contains duplicate entries after training")
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None
        self.params = None
        self.frozen = True

    # -- forward graphs ---------------------------------------------------------

    def _conv(self, x: Tensor, prefix: str, stride: int = 1, padding: int = 0) -> Tensor:
        return conv2d(x, self.tensors[prefix + "/w"], self.tensors[prefix + "/b"],
                      stride=stride, padding=padding)

    def encode_t(self, image: Tensor) -> Tensor:
        h, w = image.shape[0], image.shape[1]
        if (h, w) != (self.cfg.image_size, self.cfg.image_size) or image.shape[2] != 3:
            raise DimensionError(
                f"encode expects {self.cfg.image_size}x{self.cfg.image_size}x3, got {image.shape}"
            )
        x = add(scale(image, 2.0), -1.0)  # [0,1] -> [-1,1]
        for i in range(self.cfg.downsample_stages):
            x = silu(self._conv(x, f"enc/stage{i}", stride=2, padding=1))
        return self._conv(x, "enc/proj")

    def decode_t(self, latent: Tensor) -> Tensor:
        """Quantize then decode; output is linear (clamped only at the array API)."""
        zq, _ = self.quantize_t(latent)
        return self.decode_quantized_t(zq)

    def decode_quantized_t(self, zq: Tensor) -> Tensor:
        s = self.cfg.latent_size
        if zq.shape != (s, s, self.cfg.latent_channels):
            raise DimensionError(
                f"decode expects {s}x{s}x{self.cfg.latent_channels} latent, got {zq.shape}"
            )
        x = silu(self._conv(zq, "dec/proj"))
        n = self.cfg.downsample_stages
        for i in range(n - 1):
            x = silu(self._conv(nearest_upsample(x, 2), f"dec/stage{i}", padding=1))
        return self._conv(nearest_upsample(x, 2), f"dec/stage{n - 1}", padding=1)

    def quantize_t(self, latent: Tensor) -> tuple[Tensor, np.ndarray]:
        """Nearest-entry replacement with straight-through gradients."""
        idx = nearest_entries(latent.data, self.codebook)
        data = self.codebook[idx].astype(latent.dtype)

        lat = latent

        def backward(g):
            if lat.requires_grad:
                lat._accumulate(g)  # gradient copies through the quantizer

        return _result(data, (lat,), backward), idx

    # -- frozen array API ---------------------------------------------------------

    def encode(self, image: np.ndarray) -> np.ndarray:
        return self.encode_t(Tensor(np.asarray(image), dtype=self.dtype)).data

    def quantize(self, latent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        zq, idx = self.quantize_t(Tensor(np.asarray(latent)))
        return zq.data, idx

    def decode(self, latent: np.ndarray) -> np.ndarray:
        out = self.decode_t(Tensor(np.asarray(latent), dtype=self.dtype)).data
        return np.clip(out, 0.0, 1.0)


def nearest_entries(latent: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index map of nearest codebook entries (Euclidean, lowest index on ties)."""
    if entries.size == 0:
        raise ConfigError("empty codebook")
    if latent.shape[-1] != entries.shape[1]:
        raise DimensionError(
            f"latent channels {latent.shape[-1]} != codebook dim {entries.shape[1]}"
        )
    diff = latent[..., None, :] - entries  # (..., K, D)
    d = np.einsum("...kd,...kd->...k", diff, diff)
    return d.argmin(axis=-1)


@dataclass
class CodecTrainLog:
    recon: list[float] = field(default_factory=list)
    codebook: list[float] = field(default_factory=list)
    commit: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)


def train_codec(images: list[np.ndarray], cfg: CodecConfig, seed: int,
                steps: int = 500, batch_size: int = 4, lr: float = 1e-3,
                commitment_beta: float = 0.25, revive_after: int = 100,
                dtype=np.float32) -> tuple[Codec, CodecTrainLog]:
    """Train encoder/decoder/codebook with the usual VQ objective and return
    the codec frozen.

    Loss = recon MSE + ||sg(z) - e||^2 + beta * ||z - sg(e)||^2. Entries that
    go unused for revive_after consecutive steps are re-seeded to a random
    encoder output from the current batch (standard dead-code revival).
    """
    if not images:
        raise InputError("codec training requires a nonempty dataset")
    root = Rng(seed, "codec")
    codec = Codec(cfg, root.split("init"), dtype=dtype)
    opt = Adam(codec.params, lr=lr)
    log = CodecTrainLog()
    k = cfg.codebook_size
    last_used = np.zeros(k, dtype=np.int64)

    for step in range(steps):
        srng = root.split(f"step{step}")
        pick = srng.integers(0, len(images), shape=batch_size)
        recon_l = None
        book_l = None
        commit_l = None
        batch_latents = []
        used = np.zeros(k, dtype=bool)
        for i in pick:
            x = Tensor(images[int(i)], dtype=dtype)
            z = codec.encode_t(x)
            zq, idx = codec.quantize_t(z)
            used[np.unique(idx)] = True
            batch_latents.append(z.data.reshape(-1, cfg.latent_channels))
            rec = codec.decode_quantized_t(zq)
            e_sel = gather_rows(codec.tensors["codebook"], idx.reshape(-1))
            z_flat = z.reshape((-1, cfg.latent_channels))
            r = tmean(square(sub(rec, x)))
            cb = tmean(square(sub(e_sel, detach(z_flat))))
            cm = tmean(square(sub(z_flat, detach(e_sel))))
            recon_l = r if recon_l is None else add(recon_l, r)
            book_l = cb if book_l is None else add(book_l, cb)
            commit_l = cm if commit_l is None else add(commit_l, cm)
        inv = 1.0 / batch_size
        total = add(add(scale(recon_l, inv), scale(book_l, inv)),
                    scale(commit_l, commitment_beta * inv))
        codec.params.zero_grads()
        total.backward()
        opt.step()

        last_used[used] = step
        dead = np.flatnonzero(step - last_used >= revive_after)
        if dead.size:
            pool = np.concatenate(batch_latents, axis=0)
            rows = srng.integers(0, pool.shape[0], shape=dead.size)
            noise = srng.normal((dead.size, cfg.latent_channels), dtype=dtype) * 1e-3
            codec.tensors["codebook"].data[dead] = pool[rows] + noise
            opt.reset_entry("codebook", dead)
            last_used[dead] = step

        log.recon.append(float(recon_l.data) * inv)
        log.codebook.append(float(book_l.data) * inv)
        log.commit.append(float(commit_l.data) * inv)
        log.total.append(float(total.data))

    codec.freeze()
    return codec, log
