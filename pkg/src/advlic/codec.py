"""Toy learned image codecs: factorized prior and zero-mean scale hyperprior.

Analysis: three 5x5 stride-2 convolutions (3 -> 32 -> 64 -> C) with leaky-ReLU
in between; synthesis mirrors it with transposed convolutions. The hyperprior
variant adds a small side-information path that predicts one Gaussian scale
per latent element.
"""

from __future__ import annotations

import enum
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainingConfig, Variant
from .data import PatchSet
from .entropy import (FactorizedEntropyParams, GaussianConditionalParams, bpp_from_likelihoods,
                      likelihood_factorized, likelihood_gaussian)

log = logging.getLogger(__name__)

DOWNSAMPLE = 8
SLOPE = 0.01
KERNEL = 5
HYPER_KERNEL = 3
LOG_SCALE_MAX = 10.0


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


class CodecInputError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch: int | None = None, detail: str = ""):
        self.epoch, self.batch = epoch, batch
        where = f"epoch {epoch}" + (f", batch {batch}" if batch is not None else "")
        super().__init__(f"training diverged at {where}{': ' + detail if detail else ''}")


@dataclass
class ForwardResult:
    x_hat: Tensor
    y_hat: Tensor
    y_likelihoods: Tensor
    rate: Tensor  # differentiable bits per pixel
    z_hat: Tensor | None = None
    z_likelihoods: Tensor | None = None

    @property
    def bpp(self) -> float:
        return float(self.rate.data)

    def likelihoods(self) -> list[Tensor]:
        return [p for p in (self.y_likelihoods, self.z_likelihoods) if p is not None]


def _init_weight(rng, shape, fan_in) -> Tensor:
    std = math.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _zeros(n) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


@dataclass
class CodecModel:
    variant: Variant
    lam: float
    params: dict[str, Tensor]
    entropy_y: FactorizedEntropyParams | None = None
    entropy_z: FactorizedEntropyParams | None = None
    gaussian: GaussianConditionalParams = field(default_factory=GaussianConditionalParams)

    @classmethod
    def create(cls, variant: Variant | str = Variant.FACTORIZED, lam: float = 1.0, seed: int = 0,
               channels: tuple[int, int] = (32, 64), latent: int = 64, hyper: int = 16) -> "CodecModel":
        variant = Variant(variant)
        rng = np.random.default_rng(seed)
        c1, c2 = channels
        k = KERNEL
        p: dict[str, Tensor] = {}
        for i, (cin, cout) in enumerate([(3, c1), (c1, c2), (c2, latent)]):
            p[f"g_a.{i}.weight"] = _init_weight(rng, (cout, cin, k, k), cin * k * k)
            p[f"g_a.{i}.bias"] = _zeros(cout)
        # transposed weights are (C_in, C_out, k, k)
        for i, (cin, cout) in enumerate([(latent, c2), (c2, c1), (c1, 3)]):
            p[f"g_s.{i}.weight"] = _init_weight(rng, (cin, cout, k, k), cin * k * k / 4)
            p[f"g_s.{i}.bias"] = _zeros(cout)
        p["g_s.2.bias"].data[:] = 0.5
        p["g_s.2.weight"].data *= 0.1
        model = cls(variant, float(lam), p)
        if variant is Variant.FACTORIZED:
            model.entropy_y = FactorizedEntropyParams.init(latent, scale=4.0)
        else:
            hk = HYPER_KERNEL
            p["h_a.0.weight"] = _init_weight(rng, (hyper, latent, hk, hk), latent * hk * hk)
            p["h_a.0.bias"] = _zeros(hyper)
            p["h_a.1.weight"] = _init_weight(rng, (hyper, hyper, hk, hk), hyper * hk * hk)
            p["h_a.1.bias"] = _zeros(hyper)
            p["h_s.0.weight"] = _init_weight(rng, (hyper, c1, hk, hk), hyper * hk * hk / 4)
            p["h_s.0.bias"] = _zeros(c1)
            p["h_s.1.weight"] = _init_weight(rng, (latent, c1, hk, hk), c1 * hk * hk)
            p["h_s.1.weight"].data *= 0.1
            p["h_s.1.bias"] = Tensor(np.full(latent, np.log(2.0)), requires_grad=True)
            model.entropy_z = FactorizedEntropyParams.init(hyper, scale=2.0)
        return model

    # ------------------------------------------------------------ parameters

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for prefix, ent in (("entropy_y", self.entropy_y), ("entropy_z", self.entropy_z)):
            if ent is not None:
                out.update({f"{prefix}.{k}": v for k, v in ent.parameters().items()})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def copy(self) -> "CodecModel":
        clone = CodecModel(self.variant, self.lam,
                           {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()},
                           gaussian=self.gaussian)
        for name in ("entropy_y", "entropy_z"):
            ent = getattr(self, name)
            if ent is not None:
                setattr(clone, name, FactorizedEntropyParams(
                    Tensor(ent.loc.data.copy(), requires_grad=True),
                    Tensor(ent.log_scale.data.copy(), requires_grad=True)))
        return clone

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    # ------------------------------------------------------------ transforms

    def analysis(self, x: Tensor) -> Tensor:
        h = x
        for i in range(3):
            h = ad.conv2d(h, self.params[f"g_a.{i}.weight"], self.params[f"g_a.{i}.bias"],
                          stride=2, padding=KERNEL // 2)
            if i < 2:
                h = ad.leaky_relu(h, SLOPE)
        return h

    def synthesis(self, y: Tensor) -> Tensor:
        h = y
        for i in range(3):
            h = ad.conv_transpose2d(h, self.params[f"g_s.{i}.weight"], self.params[f"g_s.{i}.bias"],
                                    stride=2, padding=KERNEL // 2, output_padding=1)
            if i < 2:
                h = ad.leaky_relu(h, SLOPE)
        return h

    def hyper_analysis(self, y: Tensor) -> Tensor:
        h = ad.conv2d(ad.abs(y), self.params["h_a.0.weight"], self.params["h_a.0.bias"],
                      stride=2, padding=HYPER_KERNEL // 2)
        h = ad.leaky_relu(h, SLOPE)
        return ad.conv2d(h, self.params["h_a.1.weight"], self.params["h_a.1.bias"],
                         stride=1, padding=HYPER_KERNEL // 2)

    def hyper_synthesis(self, z_hat: Tensor, out_hw: tuple[int, int]) -> Tensor:
        """Per-element Gaussian scales for a latent of spatial size ``out_hw``."""
        hz, wz = z_hat.shape[2:]
        # transposed conv with k=3, p=1, s=2 gives 2n - 1 + output_padding
        op = (out_hw[0] - (2 * hz - 1), out_hw[1] - (2 * wz - 1))
        h = ad.conv_transpose2d(z_hat, self.params["h_s.0.weight"], self.params["h_s.0.bias"],
                                stride=2, padding=HYPER_KERNEL // 2, output_padding=op)
        h = ad.leaky_relu(h, SLOPE)
        h = ad.conv2d(h, self.params["h_s.1.weight"], self.params["h_s.1.bias"],
                      stride=1, padding=HYPER_KERNEL // 2)
        return ad.exp(ad.clamp(h, None, LOG_SCALE_MAX))

    def forward(self, x: Tensor, mode: Mode, rng: np.random.Generator | None = None) -> ForwardResult:
        mode = Mode(mode)
        if mode is Mode.TRAIN and rng is None:
            raise ValueError("train mode needs an explicit rng for the quantization noise")

        def quantize(t: Tensor) -> Tensor:
            return ad.add_uniform_noise(t, rng) if mode is Mode.TRAIN else ad.round_ste(t)

        n, _, h, w = x.shape
        y = self.analysis(x)
        y_hat = quantize(y)
        z_hat = z_lik = None
        if self.variant is Variant.FACTORIZED:
            y_lik = likelihood_factorized(y_hat, self.entropy_y)
        else:
            z = self.hyper_analysis(y)
            z_hat = quantize(z)
            z_lik = likelihood_factorized(z_hat, self.entropy_z)
            sigma = self.hyper_synthesis(z_hat, y.shape[2:])
            y_lik = likelihood_gaussian(y_hat, sigma, self.gaussian)
        x_hat = ad.clamp(self.synthesis(y_hat), 0.0, 1.0)
        rate = bpp_from_likelihoods([p for p in (y_lik, z_lik) if p is not None], n * h * w)
        return ForwardResult(x_hat, y_hat, y_lik, rate, z_hat, z_lik)


def check_image(x: np.ndarray) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise CodecInputError(f"expected an N x 3 x H x W image batch, got shape {x.shape}")
    h, w = x.shape[2:]
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise CodecInputError(
            f"spatial size {h}x{w} is not divisible by {DOWNSAMPLE}; pad or crop the image first")
    if x.size and (x.min() < 0 or x.max() > 1):
        raise CodecInputError("image values must lie in [0, 1]")


def codec_forward(model, x, mode: Mode | str = Mode.EVAL,
                  rng: np.random.Generator | None = None) -> ForwardResult:
    """Run ``model`` on ``x`` (N x 3 x H x W in [0,1]).

    Train mode quantizes with additive uniform noise drawn from ``rng``; eval
    mode rounds, with straight-through gradients.
    """
    x = ad.as_tensor(x)
    check_image(x.data)
    return model.forward(x, Mode(mode), rng)


def rd_loss(x, result: ForwardResult, lam: float) -> Tensor:
    """``bpp + lam * MSE(x, x_hat)`` with MSE over [0,1]-scaled pixels."""
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    return result.rate + ad.mse(result.x_hat, ad.as_tensor(x)) * float(lam)


# ---------------------------------------------------------------- optimization


class Adam:
    """Adam with bias correction and no weight decay.

    ``lr`` is one rate for every parameter or a sequence with one rate each.
    """

    def __init__(self, params: list[Tensor], lr, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lrs = [float(lr)] * len(params) if np.isscalar(lr) else [float(v) for v in lr]
        if len(self.lrs) != len(params):
            raise ValueError("one learning rate per parameter is required")
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def scale_lr(self, factor: float) -> None:
        self.lrs = [lr * factor for lr in self.lrs]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v, lr in zip(self.params, self.m, self.v, self.lrs):
            if p.grad is None or lr == 0:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype)


ENTROPY_LR_SCALE = 10.0


def make_optimizer(model: CodecModel, lr: float) -> Adam:
    """Adam over all parameters; entropy-model parameters use a larger step."""
    named = model.named_parameters()
    lrs = [lr * ENTROPY_LR_SCALE if k.startswith("entropy_") else lr for k in named]
    return Adam(list(named.values()), lrs)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_step(model: CodecModel, opt: Adam, x: np.ndarray, lam: float,
               rng: np.random.Generator) -> float:
    model.zero_grad()
    result = codec_forward(model, x, Mode.TRAIN, rng)
    loss = rd_loss(x, result, lam)
    loss.backward()
    opt.step()
    return loss.item()


@dataclass
class Evaluation:
    loss: float
    bpp: float
    mse: float


def evaluate(model, x: np.ndarray, lam: float, batch_size: int = 16) -> Evaluation:
    """Eval-mode R-D loss averaged over ``x`` (N x 3 x H x W)."""
    if len(x) == 0:
        raise ValueError("nothing to evaluate")
    bpp = mse = 0.0
    with ad.no_grad():
        for i in range(0, len(x), batch_size):
            xb = x[i:i + batch_size]
            r = codec_forward(model, xb, Mode.EVAL)
            bpp += r.bpp * len(xb)
            mse += float(ad.mse(r.x_hat, xb).data) * len(xb)
    bpp /= len(x)
    mse /= len(x)
    return Evaluation(bpp + lam * mse, bpp, mse)


def as_patchset(dataset, patch_size: int | None = None, seed: int = 0) -> PatchSet:
    if isinstance(dataset, PatchSet):
        return dataset
    arr = np.asarray(dataset, dtype=np.float32)
    if arr.ndim != 4 or len(arr) == 0:
        raise ValueError("dataset must be a non-empty N x 3 x H x W array or a PatchSet")
    return PatchSet.from_array(arr, seed)


def train_baseline(model: CodecModel, dataset, config: TrainingConfig,
                   on_epoch: Callable[[dict], None] | None = None) -> tuple[CodecModel, list[dict]]:
    """Train ``model`` in place on R-D loss; returns it with a per-epoch log.

    ``dataset`` is a :class:`PatchSet` or an N x 3 x P x P array of patches.
    A ``val_fraction`` share of images is held out (fixed by seed) and scored
    in eval mode after every epoch; epoch 0 in the log is the initial model.
    """
    patches = as_patchset(dataset, seed=config.seed)
    if len(patches) == 0:
        raise ValueError("empty dataset")
    train, val = patches.split(config.val_fraction, config.seed)
    val_x = val.epoch(0) if len(val) else train.epoch(0)
    opt = make_optimizer(model, config.learning_rate)
    model.lam = config.lam
    first = evaluate(model, val_x, config.lam, config.batch_size)
    history = [dict(epoch=0, train_loss=float("nan"), val_loss=first.loss, val_bpp=first.bpp,
                    val_mse=first.mse)]
    best, stale = first.loss, 0
    for epoch in range(1, config.max_epochs + 1):
        if epoch == config.decay_epoch():
            opt.scale_lr(config.lr_decay)
        xs = train.epoch(epoch)
        rng = np.random.default_rng([config.seed, epoch])
        losses = []
        for bi, idx in enumerate(batches(len(xs), config.batch_size, rng)):
            try:
                loss = train_step(model, opt, xs[idx], config.lam, rng)
            except FloatingPointError as exc:
                raise TrainingDivergedError(epoch, bi, str(exc)) from exc
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, bi, "loss is not finite")
            losses.append(loss)
        ev = evaluate(model, val_x, config.lam, config.batch_size)
        entry = dict(epoch=epoch, train_loss=float(np.mean(losses)), val_loss=ev.loss,
                     val_bpp=ev.bpp, val_mse=ev.mse)
        history.append(entry)
        log.info("epoch %d train %.4f val %.4f (bpp %.4f, mse %.6f)", epoch, entry["train_loss"],
                 ev.loss, ev.bpp, ev.mse)
        if on_epoch:
            on_epoch(entry)
        if config.checkpoint_every and config.checkpoint_dir and epoch % config.checkpoint_every == 0:
            save_checkpoint(model, Path(config.checkpoint_dir) / f"baseline_epoch{epoch:04d}.ckpt")
        if ev.loss < best:
            best, stale = ev.loss, 0
        else:
            stale += 1
        if config.early_stopping and stale >= config.patience:
            log.info("early stop at epoch %d", epoch)
            break
    return model, history


# ---------------------------------------------------------------- checkpoints

MAGIC = b"\x89LICCKP\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: CodecModel, path: Path) -> None:
    """Binary little-endian container: magic, version, variant, lambda, tensor manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tag = model.variant.value.encode()
    tensors = model.state()
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<B", len(tag)), tag,
              struct.pack("<d", model.lam), struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode()
        chunks += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim),
                   struct.pack(f"<{arr.ndim}I", *arr.shape),
                   np.ascontiguousarray(arr, dtype="<f4").tobytes()]
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path: Path) -> CodecModel:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(8) != MAGIC:
        raise CheckpointError(f"{path}: not a codec checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (tag_len,) = struct.unpack("<B", take(1))
    try:
        variant = Variant(take(tag_len).decode())
    except ValueError as exc:
        raise CheckpointError(f"{path}: unknown model variant") from exc
    (lam,) = struct.unpack("<d", take(8))
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after manifest")
    try:
        c1 = tensors["g_a.0.weight"].shape[0]
        c2 = tensors["g_a.1.weight"].shape[0]
        latent = tensors["g_a.2.weight"].shape[0]
        hyper = tensors["h_a.0.weight"].shape[0] if variant is Variant.HYPERPRIOR else 16
    except KeyError as exc:
        raise CheckpointError(f"{path}: manifest is missing {exc}") from None
    model = CodecModel.create(variant, lam, channels=(c1, c2), latent=latent, hyper=hyper)
    expected = model.named_parameters()
    if set(expected) != set(tensors):
        raise CheckpointError(f"{path}: manifest names do not match a {variant.value} model")
    for name, t in expected.items():
        if t.shape != tensors[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, expected {t.shape}")
        t.data[...] = tensors[name]
    return model
