"""Variance-exploding noise schedule, score models and denoising score matching.

Score models are evaluated as ``model.evaluate(x, sigma)`` on float arrays
shaped ``(..., views, detectors)`` and return an array of the same shape.
Training goes through ``model(x, sigma)`` on torch tensors shaped
``(batch, views, detectors)`` with one sigma per batch item.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .sinogram import SubsampleMask, apply_mask, extract_sparse

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    steps: int = 1000

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.steps < 1:
            raise ValueError("schedule needs at least one step")

    def sigma_at(self, t):
        """Geometric interpolation ``sigma_min * (sigma_max / sigma_min) ** (t / T)``."""
        t_arr = np.asarray(t)
        if np.any(t_arr < 0) or np.any(t_arr > self.steps):
            raise ValueError(f"step {t} outside [0, {self.steps}]")
        ratio = self.sigma_max / self.sigma_min
        out = self.sigma_min * ratio ** (t_arr / self.steps)
        if np.ndim(out) == 0:
            if t_arr == 0:
                return float(self.sigma_min)
            if t_arr == self.steps:
                return float(self.sigma_max)
            return float(out)
        out = np.where(t_arr == 0, self.sigma_min, out)
        return np.where(t_arr == self.steps, self.sigma_max, out)

    @property
    def sigmas(self) -> np.ndarray:
        return self.sigma_at(np.arange(self.steps + 1))

    def diffusion_coefficient(self, t) -> float:
        """``g = sqrt(d sigma^2 / dt)`` of the VE forward process, per unit step."""
        sigma = self.sigma_at(t)
        return sigma * math.sqrt(2.0 * math.log(self.sigma_max / self.sigma_min) / self.steps)


def perturb(x0, t, z, schedule: NoiseSchedule):
    """Sample the VE marginal kernel: ``x0 + sigma(t) * z``."""
    x0 = np.asarray(x0)
    z = np.asarray(z)
    if x0.shape != z.shape:
        raise ValueError(f"noise shape {z.shape} does not match data shape {x0.shape}")
    sigma = np.asarray(schedule.sigma_at(t), dtype=np.float64)
    sigma = sigma.reshape(sigma.shape + (1,) * (x0.ndim - sigma.ndim))
    return x0 + sigma * z


def conditional_score(x_t, x0, sigma):
    """Score of the Gaussian perturbation kernel, ``-(x_t - x0) / sigma^2``."""
    return -(np.asarray(x_t) - np.asarray(x0)) / np.asarray(sigma) ** 2


# ---------------------------------------------------------------------------
# networks


def _sigma_embedding(sigma: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = 2.0 ** torch.arange(half, dtype=sigma.dtype, device=sigma.device) / 4.0
    arg = torch.log(sigma)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=1)


class ScoreNet(nn.Module):
    """Residual convolutional score network.

    ``depth`` 3x3 conv layers: an input conv, ``depth - 2`` residual convs and
    an output conv. Every hidden layer is scaled per channel by
    ``1 + Linear(embedding(log sigma))``. Padding is circular along views
    (the scan is periodic) and zero along detectors. The input is divided by
    ``sqrt(sigma^2 + data_std^2)`` and the output by ``sigma``.

    ``view_dilations`` gives each layer's dilation along the view axis, which
    widens the angular receptive field without more layers.
    """

    def __init__(self, channels: int = 32, depth: int = 4, embed_dim: int = 16,
                 data_std: float = 0.5, view_dilations: tuple[int, ...] | None = None):
        super().__init__()
        if depth < 2:
            raise ValueError("score network needs at least two conv layers")
        dil = tuple(view_dilations) if view_dilations is not None else (1,) * depth
        if len(dil) != depth or min(dil) < 1:
            raise ValueError("need one positive view dilation per layer")
        self.channels = channels
        self.depth = depth
        self.embed_dim = embed_dim
        self.data_std = data_std
        self.view_dilations = dil
        self.conv_in = nn.Conv2d(1, channels, 3, dilation=(dil[0], 1))
        self.convs = nn.ModuleList(nn.Conv2d(channels, channels, 3, dilation=(d, 1))
                                   for d in dil[1:-1])
        self.conv_out = nn.Conv2d(channels, 1, 3, dilation=(dil[-1], 1))
        self.scales = nn.ModuleList(nn.Linear(embed_dim, channels) for _ in range(depth - 1))
        for conv in (self.conv_in, *self.convs, self.conv_out):
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)
        for lin in self.scales:
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    @property
    def descriptor(self) -> dict:
        return {"channels": self.channels, "depth": self.depth,
                "embed_dim": self.embed_dim, "data_std": self.data_std,
                "view_dilations": ",".join(map(str, self.view_dilations))}

    @staticmethod
    def _pad(h, d=1):
        h = F.pad(h, (0, 0, d, d), mode="circular")
        return F.pad(h, (1, 1, 0, 0))

    def forward(self, x: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
        emb = _sigma_embedding(sigma, self.embed_dim)
        c_in = torch.rsqrt(sigma**2 + self.data_std**2)
        h = (x * c_in[:, None, None])[:, None]
        dil = self.view_dilations
        h = self.conv_in(self._pad(h, dil[0]))
        h = F.silu(h * (1.0 + self.scales[0](emb))[:, :, None, None])
        for conv, lin, d in zip(self.convs, self.scales[1:], dil[1:-1]):
            r = conv(self._pad(h, d)) * (1.0 + lin(emb))[:, :, None, None]
            h = h + F.silu(r)
        out = self.conv_out(self._pad(h, dil[-1]))[:, 0]
        return out / sigma[:, None, None]


class GaussianScoreNet(nn.Module):
    """Exact score of ``N(mean, (s2 + sigma^2) I)``."""

    def __init__(self, mean, s2: float):
        super().__init__()
        if s2 < 0:
            raise ValueError("data variance must be nonnegative")
        self.register_buffer("mean", torch.as_tensor(np.asarray(mean, dtype=np.float64)))
        self.s2 = float(s2)

    def forward(self, x, sigma):
        var = self.s2 + sigma**2
        return -(x - self.mean) / var.reshape(-1, *([1] * (x.ndim - 1)))


class LinearScoreNet(nn.Module):
    """Learnable Gaussian family ``-(x - m) / (exp(log_s2) + sigma^2)``."""

    def __init__(self, shape, log_s2: float = 0.0):
        super().__init__()
        self.mean = nn.Parameter(torch.zeros(shape, dtype=torch.float64))
        self.log_s2 = nn.Parameter(torch.tensor(float(log_s2), dtype=torch.float64))

    def forward(self, x, sigma):
        var = torch.exp(self.log_s2) + sigma**2
        return -(x - self.mean) / var.reshape(-1, *([1] * (x.ndim - 1)))


class ZeroScoreNet(nn.Module):
    def forward(self, x, sigma):
        return torch.zeros_like(x)


class ScoreModel(nn.Module):
    """A score network bound to its schedule, data normalization and view support.

    With ``view_mask`` set, the model only lives on the kept view rows: it
    gathers them into a compact sinogram, evaluates the network there, and
    returns zeros on every dropped row.
    """

    def __init__(self, net: nn.Module, schedule: NoiseSchedule, scale: float = 1.0,
                 view_mask: SubsampleMask | None = None):
        super().__init__()
        self.net = net
        self.schedule = schedule
        self.scale = float(scale)
        self.view_mask = view_mask

    @property
    def dtype(self):
        for t in (*self.net.parameters(), *self.net.buffers()):
            return t.dtype
        return torch.float64

    def forward(self, x: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
        if self.view_mask is None:
            return self.net(x, sigma)
        idx = torch.as_tensor(self.view_mask.indices)
        out = torch.zeros_like(x)
        out[:, idx] = self.net(x[:, idx], sigma)
        return out

    @torch.no_grad()
    def evaluate(self, x, sigma) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        lead = x.shape[:-2]
        flat = torch.as_tensor(x.reshape(-1, *x.shape[-2:]), dtype=self.dtype)
        sig = torch.as_tensor(np.broadcast_to(np.asarray(sigma, dtype=np.float64).reshape(-1),
                                              (flat.shape[0],)).copy(), dtype=self.dtype)
        out = self.forward(flat, sig)
        return out.to(torch.float64).numpy().reshape(*lead, *x.shape[-2:])

    def score_at(self, x, t: int) -> np.ndarray:
        return self.evaluate(x, self.schedule.sigma_at(t))


def gaussian_analytic_score(mean, s2: float, schedule: NoiseSchedule) -> ScoreModel:
    return ScoreModel(GaussianScoreNet(mean, s2), schedule)


def zero_score(schedule: NoiseSchedule) -> ScoreModel:
    return ScoreModel(ZeroScoreNet(), schedule)


# ---------------------------------------------------------------------------
# denoising score matching


def dsm_loss(model: ScoreModel, x0, t, z) -> torch.Tensor:
    """Denoising score matching with weight ``lambda(t) = sigma(t)^2``.

    ``mean_b sigma_b^2 * || S(x0_b + sigma_b z_b, sigma_b) + z_b / sigma_b ||^2``,
    summed over pixels and averaged over the batch.
    """
    x0 = torch.as_tensor(x0, dtype=model.dtype)
    z = torch.as_tensor(z, dtype=model.dtype)
    if x0.shape[0] == 0:
        raise ValueError("dsm loss needs a nonempty batch")
    if x0.shape != z.shape:
        raise ValueError("noise and data shapes differ")
    sigma = torch.as_tensor(np.asarray(model.schedule.sigma_at(np.asarray(t))), dtype=model.dtype)
    sigma = sigma.reshape(-1).expand(x0.shape[0])
    s = sigma[:, None, None]
    residual = s * model(x0 + s * z, sigma) + z
    return residual.pow(2).sum(dim=(1, 2)).mean()


def dsm_loss_and_grad(model: ScoreModel, x0, t, z) -> tuple[float, np.ndarray]:
    """Loss value and its gradient flattened in ``model.parameters()`` order."""
    params = [p for p in model.parameters() if p.requires_grad]
    loss = dsm_loss(model, x0, t, z)
    grads = torch.autograd.grad(loss, params)
    return float(loss.detach()), torch.cat([g.reshape(-1) for g in grads]).detach().numpy()


def flat_parameters(model: nn.Module) -> np.ndarray:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()]).to(torch.float64).numpy()


@torch.no_grad()
def set_flat_parameters(model: nn.Module, flat) -> None:
    flat = np.array(flat, dtype=np.float64)
    offset = 0
    for p in model.parameters():
        n = p.numel()
        if offset + n > flat.size:
            raise ValueError("parameter vector is too short")
        p.copy_(torch.as_tensor(flat[offset:offset + n]).reshape(p.shape))
        offset += n
    if offset != flat.size:
        raise ValueError("parameter vector is too long")


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    warmup_steps: int = 5000
    grad_clip: float = 1.0
    batch_size: int = 8
    total_steps: int = 100_000
    seed: int = 0
    crop_views: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "grad_clip", "batch_size", "total_steps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be nonnegative")
        if self.crop_views < 0:
            raise ValueError("crop_views must be nonnegative")

    def rate_at(self, step: int) -> float:
        """Learning rate for the 1-based optimizer ``step``: linear warmup, then flat."""
        if self.warmup_steps == 0:
            return self.learning_rate
        return self.learning_rate * min(1.0, step / self.warmup_steps)


@dataclass
class TrainResult:
    model: ScoreModel
    losses: list[float] = field(default_factory=list)
    rates: list[float] = field(default_factory=list)

    def write_trace(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "learning_rate", "loss"])
            for k, (lr, loss) in enumerate(zip(self.rates, self.losses), start=1):
                writer.writerow([k, f"{lr:.8g}", f"{loss:.8g}"])


def train_score_model(
    dataset,
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    net: nn.Module | None = None,
    view_mask: SubsampleMask | None = None,
    normalize: bool = True,
) -> TrainResult:
    """Fit a score model by denoising score matching with Adam.

    ``dataset`` is an array of full-view sinograms ``(N, views, detectors)``.
    With ``view_mask`` the model is trained on ``x * mask`` (sparse-view
    prior) and the noise is confined to the kept rows. Sinograms are divided
    by the dataset maximum when ``normalize`` is set; the constant is stored
    on the returned model.

    With ``cfg.crop_views`` set, each batch item is a random periodic window
    of that many (kept) view rows and the loss is taken on the network
    directly. Dropped rows contribute nothing to the masked loss, so this is
    the same objective restricted to a window.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] == 0:
        raise ValueError("dataset must be a nonempty stack of sinograms")
    scale = float(np.max(np.abs(data))) if normalize else 1.0
    if scale == 0:
        scale = 1.0
    data = data / scale
    if view_mask is not None:
        data = apply_mask(data, view_mask)
        support = view_mask.rows
    else:
        support = None

    torch.manual_seed(cfg.seed)
    if net is None:
        net = ScoreNet()
    model = ScoreModel(net, schedule, scale=scale, view_mask=view_mask)
    target = model
    if cfg.crop_views:
        data = extract_sparse(data, view_mask) if view_mask is not None else data
        if cfg.crop_views > data.shape[1]:
            raise ValueError(f"crop of {cfg.crop_views} views exceeds {data.shape[1]} rows")
        support = None
        target = ScoreModel(net, schedule)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.rate_at(1))
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model)

    for step in range(1, cfg.total_steps + 1):
        lr = cfg.rate_at(step)
        for group in opt.param_groups:
            group["lr"] = lr
        idx = rng.integers(0, data.shape[0], size=cfg.batch_size)
        batch = data[idx]
        if cfg.crop_views:
            start = rng.integers(0, data.shape[1], size=cfg.batch_size)
            rows = (start[:, None] + np.arange(cfg.crop_views)) % data.shape[1]
            batch = np.take_along_axis(batch, rows[:, :, None], axis=1)
        t = rng.integers(0, schedule.steps, size=cfg.batch_size)
        z = rng.standard_normal(batch.shape)
        if support is not None:
            if np.any(batch * (1.0 - support)):
                raise AssertionError("sparse-view batch has nonzero dropped rows")
            z = z * support
        opt.zero_grad()
        loss = dsm_loss(target, batch, t, z)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {step}")
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        result.losses.append(value)
        result.rates.append(lr)
        if step % 500 == 0:
            log.info("step %d  loss %.4f", step, np.mean(result.losses[-100:]))
    model.eval()
    return result


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = "MSDIFF-CHECKPOINT 1"


def save_checkpoint(path, model: ScoreModel) -> None:
    """Text header of ``key = value`` lines, a blank line, then float64 parameters."""
    if not isinstance(model.net, ScoreNet):
        raise TypeError("only ScoreNet models can be checkpointed")
    params = flat_parameters(model)
    header = {**model.net.descriptor,
              "sigma_min": repr(model.schedule.sigma_min),
              "sigma_max": repr(model.schedule.sigma_max),
              "steps": model.schedule.steps,
              "scale": repr(model.scale),
              "view_mask": model.view_mask.to_text() if model.view_mask else "none",
              "params": params.size}
    text = _CKPT_MAGIC + "\n" + "".join(f"{k} = {v}\n" for k, v in header.items()) + "\n"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(text.encode("ascii") + params.astype("<f8").tobytes())


def load_checkpoint(path) -> ScoreModel:
    data = Path(path).read_bytes()
    end = data.find(b"\n\n")
    if end < 0:
        raise ValueError(f"{path}: checkpoint header is not terminated")
    lines = data[:end].decode("ascii").splitlines()
    if not lines or lines[0] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    header = {}
    for line in lines[1:]:
        key, _, value = line.partition("=")
        header[key.strip()] = value.strip()
    payload = data[end + 2:]
    count = int(header["params"])
    if len(payload) != 8 * count:
        raise ValueError(f"{path}: expected {count} parameters, found {len(payload) / 8}")
    dil = header.get("view_dilations")
    net = ScoreNet(int(header["channels"]), int(header["depth"]),
                   int(header["embed_dim"]), float(header["data_std"]),
                   tuple(int(d) for d in dil.split(",")) if dil else None)
    schedule = NoiseSchedule(float(header["sigma_min"]), float(header["sigma_max"]),
                             int(header["steps"]))
    mask = None if header["view_mask"] == "none" else SubsampleMask.from_text(header["view_mask"])
    model = ScoreModel(net, schedule, scale=float(header["scale"]), view_mask=mask)
    set_flat_parameters(model, np.frombuffer(payload, dtype="<f8"))
    model.eval()
    return model
