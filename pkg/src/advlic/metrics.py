"""Quality, rate and change metrics, and the EvalRecord CSV schema."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PSNR_PERFECT = math.inf

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


class MetricError(ValueError):
    pass


def _same_shape(a: np.ndarray, b: np.ndarray, name: str) -> None:
    if a.shape != b.shape:
        raise MetricError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def mse(x, x_hat) -> float:
    x, x_hat = np.asarray(x, np.float64), np.asarray(x_hat, np.float64)
    _same_shape(x, x_hat, "mse")
    return float(np.mean((x - x_hat) ** 2))


def psnr(x, x_hat) -> float:
    """PSNR in dB for [0,1] images; ``inf`` when the images are identical."""
    err = mse(x, x_hat)
    if err == 0:
        return PSNR_PERFECT
    return -10.0 * math.log10(err)


# ---------------------------------------------------------------- MS-SSIM


def _gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-coords ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # separable "valid" filtering over the last two axes
    k = len(win)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-2) @ win
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-1) @ win


def _ssim_terms(x: np.ndarray, y: np.ndarray, win: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c1, c2 = K1 ** 2, K2 ** 2
    mu_x, mu_y = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mu_x ** 2
    syy = _filter_valid(y * y, win) - mu_y ** 2
    sxy = _filter_valid(x * y, win) - mu_x * mu_y
    cs_map = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    axes = (-2, -1)
    return (lum * cs_map).mean(axis=axes), cs_map.mean(axis=axes)


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2] // 2 * 2, img.shape[-1] // 2 * 2
    img = img[..., :h, :w]
    return 0.25 * (img[..., 0::2, 0::2] + img[..., 1::2, 0::2] + img[..., 0::2, 1::2] + img[..., 1::2, 1::2])


def msssim_scales(height: int, width: int) -> int:
    """Scales used for an image: 5 when min side >= 176, fewer for smaller images."""
    side = min(height, width)
    if side < WINDOW:
        raise MetricError(f"ms_ssim: image side {side} is smaller than the {WINDOW}-pixel window")
    scales = 1
    while scales < len(MSSSIM_WEIGHTS) and side // 2 ** scales >= WINDOW:
        scales += 1
    return scales


def ms_ssim(x, x_hat) -> float:
    """Multi-scale SSIM for [0,1] images shaped (..., H, W) with channels averaged.

    Arrays may be H x W, C x H x W or N x C x H x W. When the image is too small
    for five scales the leading weights are used and renormalised to sum to one.
    Negative contrast-structure terms are clipped at zero before exponentiation.
    """
    x, y = np.asarray(x, np.float64), np.asarray(x_hat, np.float64)
    _same_shape(x, y, "ms_ssim")
    if x.ndim < 2:
        raise MetricError("ms_ssim needs at least two dimensions")
    scales = msssim_scales(*x.shape[-2:])
    weights = np.asarray(MSSSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    win = _gaussian_window()
    vals = []
    for s in range(scales):
        ssim, cs = _ssim_terms(x, y, win)
        vals.append(np.maximum(ssim if s == scales - 1 else cs, 0.0))
        if s < scales - 1:
            x, y = _downsample(x), _downsample(y)
    stacked = np.stack(vals, axis=0)
    per_channel = np.prod(stacked ** weights.reshape((-1,) + (1,) * (stacked.ndim - 1)), axis=0)
    return float(np.mean(per_channel))


# ---------------------------------------------------------------- change metrics


def change_metrics(orig: Sequence[float], adv: Sequence[float]) -> tuple[float, float, float]:
    """(bpp ratio, relative PSNR change, relative MS-SSIM change)."""
    bpp_o, psnr_o, ms_o = orig
    bpp_a, psnr_a, ms_a = adv
    if not bpp_o > 0:
        raise MetricError(f"original bpp must be positive, got {bpp_o}")
    if not (math.isfinite(psnr_o) and psnr_o > 0) or not math.isfinite(psnr_a):
        raise MetricError("PSNR change is undefined for infinite or non-positive original PSNR")
    if ms_o == 0:
        raise MetricError("original MS-SSIM is zero")
    return bpp_a / bpp_o, (psnr_a - psnr_o) / psnr_o, (ms_a - ms_o) / ms_o


def rd_cost_change(cost_pre: float, cost_post: float) -> float:
    if not cost_pre > 0:
        raise MetricError(f"pre cost must be positive, got {cost_pre}")
    return (cost_post - cost_pre) / cost_pre


def rd_cost(bpp: float, mse_value: float, lam: float) -> float:
    return bpp + lam * mse_value


# ---------------------------------------------------------------- records


@dataclass
class EvalRecord:
    image_id: str
    bpp_orig: float
    bpp_adv: float
    psnr_orig: float
    psnr_adv: float
    msssim_orig: float
    msssim_adv: float
    bpp_change: float
    psnr_change: float
    msssim_change: float
    rd_cost_orig: float
    rd_cost_adv: float
    method: str = ""
    target: str = ""
    variant: str = ""
    lam: float = 0.0

    @classmethod
    def build(cls, image_id: str, x, x_hat, x_hat_adv, bpp_orig: float, bpp_adv: float,
              lam: float, **context) -> "EvalRecord":
        """Score reconstructions of the original and adversarial inputs against ``x``.

        A clean MS-SSIM of exactly zero leaves the MS-SSIM change undefined; it
        is stored as NaN (with a warning) so one degenerate image does not
        abort a whole evaluation.
        """
        p_o, p_a = psnr(x, x_hat), psnr(x, x_hat_adv)
        m_o, m_a = ms_ssim(x, x_hat), ms_ssim(x, x_hat_adv)
        if m_o == 0:
            log.warning("%s: clean MS-SSIM is zero, MS-SSIM change left undefined", image_id)
            bc, pc, _ = change_metrics((bpp_orig, p_o, 1.0), (bpp_adv, p_a, m_a))
            mc = math.nan
        else:
            bc, pc, mc = change_metrics((bpp_orig, p_o, m_o), (bpp_adv, p_a, m_a))
        return cls(image_id, bpp_orig, bpp_adv, p_o, p_a, m_o, m_a, bc, pc, mc,
                   rd_cost(bpp_orig, mse(x, x_hat), lam), rd_cost(bpp_adv, mse(x, x_hat_adv), lam),
                   lam=lam, **context)


RECORD_FIELDS = [f.name for f in fields(EvalRecord)]
_STR_FIELDS = {"image_id", "method", "target", "variant"}

AGGREGATE_KEYS = ("method", "target", "variant", "lam")
AGGREGATE_FIELDS = list(AGGREGATE_KEYS) + ["count", "mean_bpp_change", "mean_psnr_change",
                                           "mean_msssim_change", "mean_rd_cost_orig", "mean_rd_cost_adv"]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def records_to_csv(records: Iterable[EvalRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for r in records:
        w.writerow([_fmt(getattr(r, k)) for k in RECORD_FIELDS])
    return buf.getvalue()


def records_from_csv(text: str) -> list[EvalRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and set(rows[0]) != set(RECORD_FIELDS):
        raise MetricError(f"unexpected EvalRecord header: {sorted(rows[0])}")
    return [EvalRecord(**{k: (row[k] if k in _STR_FIELDS else float(row[k])) for k in RECORD_FIELDS})
            for row in rows]


def aggregate(records: Sequence[EvalRecord]) -> list[dict]:
    """Mean change metrics per (method, target, variant, lambda) group, in first-seen order."""
    if not records:
        raise MetricError("no records to aggregate")
    groups: dict[tuple, list[EvalRecord]] = {}
    for r in records:
        groups.setdefault(tuple(getattr(r, k) for k in AGGREGATE_KEYS), []).append(r)
    rows = []
    for key, rs in groups.items():
        row = dict(zip(AGGREGATE_KEYS, key))
        row["count"] = len(rs)
        for name in ("bpp_change", "psnr_change", "msssim_change", "rd_cost_orig", "rd_cost_adv"):
            vals = [getattr(r, name) for r in rs]
            if name == "msssim_change":
                vals = [v for v in vals if not math.isnan(v)] or [math.nan]
            row[f"mean_{name}"] = float(np.mean(vals))
        rows.append(row)
    return rows


def aggregate_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGGREGATE_FIELDS)
    for row in rows:
        w.writerow([_fmt(row[k]) for k in AGGREGATE_FIELDS])
    return buf.getvalue()


def write_text(path: Path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def as_dict(record: EvalRecord) -> dict:
    return asdict(record)
