"""Block-DCT transform codec used as a conventional-codec stand-in for transfer attacks.

Intra-only. Pixels are scaled to 8 bits and (by default) converted to full-range
YCbCr at full chroma resolution; each 8x8 block of each plane is transformed
with an orthonormal DCT-II, uniformly quantized with step ``2 ** ((Q - 4) / 6)``
(flat matrix), reconstructed, converted back and clipped. Rate is an order-0
entropy estimate of the quantized coefficients, by default with one symbol
distribution per frequency band per plane (the DCT counterpart of a per-channel prior).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attacks import fgsm_attack
from .codec import Mode, codec_forward
from .config import AttackConfig, Method, Target
from . import autodiff as ad
from .metrics import psnr

BLOCK = 8

# full-range BT.601, as in JFIF
YCBCR = np.array([[0.299, 0.587, 0.114],
                  [-0.168736, -0.331264, 0.5],
                  [0.5, -0.418688, -0.081312]])
YCBCR_INV = np.linalg.inv(YCBCR)


@dataclass(frozen=True)
class DctCodecConfig:
    q: int = 20
    block_size: int = BLOCK
    color: str = "ycbcr"  # or "rgb"
    entropy: str = "band"  # or "pooled": one distribution for the whole stream

    def __post_init__(self):
        if not 1 <= self.q <= 51:
            raise ValueError(f"Q must lie in 1..51, got {self.q}")
        if self.block_size != BLOCK:
            raise ValueError("only 8x8 blocks are supported")
        if self.color not in ("ycbcr", "rgb"):
            raise ValueError(f"unknown color space {self.color!r}")
        if self.entropy not in ("band", "pooled"):
            raise ValueError(f"unknown entropy estimate {self.entropy!r}")

    @property
    def step(self) -> float:
        return 2.0 ** ((self.q - 4) / 6)


def dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal DCT-II basis; rows are frequencies."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    m[0] /= np.sqrt(2.0)
    return m


def _blocks(channel: np.ndarray) -> np.ndarray:
    h, w = channel.shape
    return channel.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).transpose(0, 2, 1, 3)


def _unblocks(blocks: np.ndarray) -> np.ndarray:
    bh, bw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(bh * BLOCK, bw * BLOCK)


def forward_dct(img: np.ndarray) -> np.ndarray:
    """Blockwise DCT of a C x H x W array; returns C x H/8 x W/8 x 8 x 8."""
    d = dct_matrix()
    return np.stack([d @ _blocks(c) @ d.T for c in img])


def inverse_dct(coeffs: np.ndarray) -> np.ndarray:
    d = dct_matrix()
    return np.stack([_unblocks(d.T @ c @ d) for c in coeffs])


def order0_entropy(symbols: np.ndarray) -> float:
    """Empirical entropy in bits per symbol."""
    _, counts = np.unique(symbols, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def _as_chw(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a 3 x H x W image, got shape {x.shape}")
    h, w = x.shape[1:]
    if h % BLOCK or w % BLOCK:
        raise ValueError(f"spatial size {h}x{w} is not divisible by {BLOCK}")
    return x


def to_planes(x, cfg: DctCodecConfig = DctCodecConfig()) -> np.ndarray:
    """Zero-centred 8-bit-scale planes (Y, Cb, Cr or R, G, B)."""
    img = _as_chw(x) * 255.0
    if cfg.color == "ycbcr":
        img = np.einsum("ij,jhw->ihw", YCBCR, img)
        img[0] -= 128.0
        return img
    return img - 128.0


def from_planes(planes: np.ndarray, cfg: DctCodecConfig = DctCodecConfig()) -> np.ndarray:
    img = np.array(planes, dtype=np.float64)
    if cfg.color == "ycbcr":
        img[0] += 128.0
        img = np.einsum("ij,jhw->ihw", YCBCR_INV, img)
    else:
        img += 128.0
    return img / 255.0


def quantize(x, cfg: DctCodecConfig = DctCodecConfig()) -> np.ndarray:
    """Integer coefficient levels, C x H/8 x W/8 x 8 x 8."""
    return np.round(forward_dct(to_planes(x, cfg)) / cfg.step).astype(np.int64)


def coefficient_bits(levels: np.ndarray, cfg: DctCodecConfig = DctCodecConfig()) -> float:
    if cfg.entropy == "pooled":
        return order0_entropy(levels) * levels.size
    bits = 0.0
    for plane in levels:
        bands = plane.reshape(-1, BLOCK * BLOCK)
        bits += sum(order0_entropy(bands[:, k]) * len(bands) for k in range(BLOCK * BLOCK))
    return float(bits)


def dct_encode_decode(x, cfg: DctCodecConfig = DctCodecConfig()) -> tuple[np.ndarray, float]:
    """Reconstruction (same layout as ``x``) and the estimated bits per pixel."""
    shape = np.shape(x)
    chw = _as_chw(x)
    levels = quantize(chw, cfg)
    rec = from_planes(inverse_dct(levels * cfg.step), cfg)
    x_hat = np.clip(rec, 0.0, 1.0).astype(np.float32).reshape(shape)
    num_pixels = chw.shape[1] * chw.shape[2]
    return x_hat, coefficient_bits(levels, cfg) / num_pixels


def low_frequency_energy(x, k: int = 4, cfg: DctCodecConfig = DctCodecConfig()) -> float:
    """Mean over blocks of the share of coefficient energy in the top-left ``k`` x ``k``."""
    energy = forward_dct(to_planes(x, cfg)) ** 2
    total = energy.sum(axis=(-2, -1))
    low = energy[..., :k, :k].sum(axis=(-2, -1))
    mask = total > 0
    return float(np.mean(low[mask] / total[mask])) if mask.any() else 1.0


# ---------------------------------------------------------------- transfer attack


TRANSFER_METRICS = ["lic_psnr", "lic_bpp", "dct_psnr", "dct_bpp", "lic_psnr_vs_original", "dct_psnr_vs_original"]
TRANSFER_FIELDS = ["target", "q", "row"] + TRANSFER_METRICS


@dataclass
class TransferTable:
    """Mean (PSNR, bpp) of origin and adversary under the LIC model and the DCT codec.

    ``*_psnr`` compares each reconstruction with the image the codec was given;
    ``*_psnr_vs_original`` compares it with the clean image.
    """

    target: str
    q: int
    origin: dict[str, float]
    adversary: dict[str, float]
    count: int

    def change(self, codec: str) -> tuple[float, float]:
        """(bpp ratio, relative PSNR change) for ``codec`` in {"lic", "dct"}."""
        o, a = self.origin, self.adversary
        return a[f"{codec}_bpp"] / o[f"{codec}_bpp"], \
            (a[f"{codec}_psnr"] - o[f"{codec}_psnr"]) / o[f"{codec}_psnr"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRANSFER_FIELDS)
        for name, row in (("origin", self.origin), ("adversary", self.adversary)):
            w.writerow([self.target, self.q, name] +
                       [repr(float(row[k])) for k in TRANSFER_METRICS])
        return buf.getvalue()


def transfer_attack_eval(lic_model, images: Sequence[np.ndarray], fgsm_cfg: AttackConfig,
                         dct_cfg: DctCodecConfig = DctCodecConfig()) -> TransferTable:
    """Craft one-step FGSM adversaries on ``lic_model`` and code them with both codecs.

    Codec fidelity (``*_psnr``) is measured against each codec's input, the
    way an encoder reports it; the clean-image reference is kept alongside.
    """
    if fgsm_cfg.method is not Method.FGSM or fgsm_cfg.max_steps != 1:
        raise ValueError("transfer evaluation uses one-step FGSM (method fgsm, max_steps 1)")
    if len(images) == 0:
        raise ValueError("empty test set")
    sums = {k: dict.fromkeys(TRANSFER_METRICS, 0.0) for k in ("origin", "adversary")}
    for i, img in enumerate(images):
        x = np.asarray(img, dtype=np.float32).reshape(1, *np.shape(img)[-3:])
        adv = fgsm_attack(lic_model, x, fgsm_cfg.replace(seed=fgsm_cfg.seed + i)).x_adv
        for name, inp in (("origin", x), ("adversary", adv)):
            with ad.no_grad():
                r = codec_forward(lic_model, inp, Mode.EVAL)
            dct_hat, dct_bpp = dct_encode_decode(inp, dct_cfg)
            s = sums[name]
            s["lic_psnr"] += psnr(inp, r.x_hat.data)
            s["lic_bpp"] += r.bpp
            s["dct_psnr"] += psnr(inp, dct_hat)
            s["dct_bpp"] += dct_bpp
            s["lic_psnr_vs_original"] += psnr(x, r.x_hat.data)
            s["dct_psnr_vs_original"] += psnr(x, dct_hat)
    n = len(images)
    mean = {k: {m: v / n for m, v in row.items()} for k, row in sums.items()}
    return TransferTable(Target(fgsm_cfg.target).value, dct_cfg.q, mean["origin"], mean["adversary"], n)
