"""Training loop, optimizer step and inference."""

from __future__ import annotations

import csv
import math
import hashlib
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..dataset import LoadedDataset, load_dataset
from ..errors import DatasetError, NonFiniteLossError, ShapeError
from ..io import read_image
from ..sensor import DepthMap, SensorModel
from .checkpoint import save_checkpoint
from .imaging import rescale_target, resize_bilinear, unscale_target
from .loss import LossSpec, composite_loss
from .net import ReconNet


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    input_size: tuple | None = None   # (H, W); None keeps the dataset crop
    schedule: str = "constant"        # or "cosine": per-step decay to zero over the run
    warmup_steps: int = 0             # linear ramp from lr/warmup to lr
    # Optional mirror augmentation. Mirroring u maps the light layout onto
    # itself with two lights exchanged, hence the channel permutation.
    hflip: bool = False
    hflip_channels: tuple = (0, 2, 1)
    loss: LossSpec = field(default_factory=LossSpec)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1) or not self.eps > 0:
            raise ValueError("invalid Adam moments")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")
        if self.warmup_steps < 0:
            raise ValueError("warmup steps must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["input_size"] = None if self.input_size is None else list(self.input_size)
        d["hflip_channels"] = list(self.hflip_channels)
        return d


def make_optimizer(net: torch.nn.Module, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
    return torch.optim.Adam(net.parameters(), lr=lr, betas=tuple(betas), eps=eps)


def lr_factor(step: int, total: int, schedule: str = "constant", warmup: int = 0) -> float:
    """Multiplier on the base learning rate for 0-based ``step`` of ``total``."""
    f = min(1.0, (step + 1) / warmup) if warmup > 0 else 1.0
    if schedule == "cosine":
        f *= 0.5 * (1.0 + math.cos(math.pi * step / total))
    return f


def set_lr(optimizer, lr: float) -> None:
    for g in optimizer.param_groups:
        g["lr"] = lr


def _norm(tensors) -> float:
    sq = sum(float((t.detach().double() ** 2).sum()) for t in tensors if t is not None)
    return sq ** 0.5


def backward_and_step(net, batch: torch.Tensor, targets: torch.Tensor, spec: LossSpec, optimizer):
    """One Adam step on the composite loss; returns ``(loss, terms)`` as floats."""
    optimizer.zero_grad(set_to_none=False)
    pred = net(batch)
    loss, terms = composite_loss(pred, targets, spec)
    if not torch.isfinite(loss):
        pn = _norm(net.parameters())
        raise NonFiniteLossError(f"non-finite loss {float(loss.detach())} (param norm {pn:.6g})")
    loss.backward()
    grads = [p.grad for p in net.parameters()]
    if not all(bool(torch.isfinite(g).all()) for g in grads if g is not None):
        raise NonFiniteLossError(
            f"non-finite gradient (param norm {_norm(net.parameters()):.6g}, grad norm {_norm(grads):.6g})")
    optimizer.step()
    return float(loss.detach()), {k: float(v.detach()) for k, v in terms.items()}


def parameter_hash(net: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in net.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def prepare_inputs(images: np.ndarray, size=None) -> torch.Tensor:
    """(N, H, W, 3) floats in [0, 1] -> N x 3 x H' x W' float32 tensor."""
    if size is not None and tuple(size) != images.shape[1:3]:
        images = np.stack([resize_bilinear(im, size[0], size[1]) for im in images])
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=np.float32))


def prepare_targets(codes: np.ndarray, out_h: int, out_w: int, spec: LossSpec) -> torch.Tensor:
    """uint8 depth codes -> N x 1 x out_h x out_w network targets."""
    ys = [rescale_target(resize_bilinear(c.astype(np.float64), out_h, out_w), spec.target_lo, spec.target_hi)
          for c in codes]
    return torch.from_numpy(np.stack(ys)[:, None].astype(np.float32))


def outputs_to_codes(out: torch.Tensor, crop_h: int, crop_w: int, spec_range=(10.0, 1000.0)) -> np.ndarray:
    """Network outputs -> uint8 codes at crop resolution."""
    y = out.detach().double().cpu().numpy()[:, 0]
    codes = []
    for m in y:
        up = resize_bilinear(m, crop_h, crop_w)
        c = unscale_target(up, *spec_range)
        codes.append(np.floor(np.clip(c, 0.0, 255.0) + 0.5).astype(np.uint8))
    return np.stack(codes)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    depth: float
    grad: float
    ssim: float
    test_l1_mm: float


@dataclass
class TrainResult:
    net: ReconNet
    metrics: list
    baseline_l1_mm: float
    checkpoints: list
    parameter_hash: str


def mean_l1_mm(pred_codes: np.ndarray, true_codes: np.ndarray, valid: np.ndarray, scale: float) -> float:
    diff = np.abs(pred_codes.astype(np.float64) - true_codes.astype(np.float64))[:, valid]
    return float(diff.mean() * scale)


def evaluate_split(net: ReconNet, ds: LoadedDataset, idx: np.ndarray, cfg: TrainConfig, batch: int = 16):
    h, w = ds.valid.shape
    codes = []
    net.eval()
    with torch.no_grad():
        for s in range(0, len(idx), batch):
            x = prepare_inputs(ds.images[idx[s:s + batch]], cfg.input_size)
            codes.append(outputs_to_codes(net(x), h, w, (cfg.loss.target_lo, cfg.loss.target_hi)))
    net.train()
    return np.concatenate(codes) if codes else np.zeros((0, h, w), np.uint8)


def train(net: ReconNet, dataset_path, cfg: TrainConfig, out_dir=None, log=None) -> TrainResult:
    """Train on the dataset's train split; metrics and per-epoch checkpoints go to ``out_dir``."""
    torch.use_deterministic_algorithms(True)
    ds = load_dataset(dataset_path) if not isinstance(dataset_path, LoadedDataset) else dataset_path
    tr, te = ds.indices("train"), ds.indices("test")
    if len(tr) == 0:
        raise DatasetError("dataset has no training records")
    model = SensorModel.from_dict(ds.manifest["sensor"])
    if ds.valid.shape != (model.crop_size, model.crop_size):
        raise DatasetError("dataset mask does not match the manifest sensor crop")
    if tuple(net.target_range) != (cfg.loss.target_lo, cfg.loss.target_hi):
        raise ValueError("network and loss disagree on the target range")
    x_all = prepare_inputs(ds.images, cfg.input_size)
    net.check_input(x_all[:1])
    oh, ow = x_all.shape[2] // 2, x_all.shape[3] // 2
    y_all = prepare_targets(ds.depth, oh, ow, cfg.loss)
    scale = model.depth_scale
    baseline = mean_l1_mm(np.zeros_like(ds.depth[te]), ds.depth[te], ds.valid, scale) if len(te) else float("nan")

    torch.manual_seed(cfg.seed)
    opt = make_optimizer(net, cfg.lr, cfg.betas, cfg.eps)
    steps_per_epoch = -(-len(tr) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    rng = np.random.default_rng(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics, ckpts = [], []
    net.train()
    for epoch in range(1, cfg.epochs + 1):
        order = tr[rng.permutation(len(tr))]
        sums = np.zeros(4)
        nb = 0
        for s in range(0, len(order), cfg.batch_size):
            b = torch.from_numpy(order[s:s + cfg.batch_size])
            set_lr(opt, cfg.lr * lr_factor(step, total_steps, cfg.schedule, cfg.warmup_steps))
            step += 1
            xb, yb = x_all[b], y_all[b]
            if cfg.hflip:
                flip = torch.from_numpy(rng.random(len(b)) < 0.5)
                if flip.any():
                    xb, yb = xb.clone(), yb.clone()
                    xb[flip] = xb[flip].flip(-1)[:, list(cfg.hflip_channels)]
                    yb[flip] = yb[flip].flip(-1)
            loss, terms = backward_and_step(net, xb, yb, cfg.loss, opt)
            sums += (loss, terms["depth"], terms["grad"], terms["ssim"])
            nb += 1
        sums /= nb
        test_l1 = float("nan")
        if len(te):
            test_l1 = mean_l1_mm(evaluate_split(net, ds, te, cfg), ds.depth[te], ds.valid, scale)
        m = EpochMetrics(epoch, *sums.tolist(), test_l1)
        metrics.append(m)
        if log is not None:
            log(m)
        if out is not None:
            path = out / f"epoch_{epoch:03d}.dtnn"
            save_checkpoint(net, path, {"epoch": epoch, "train": cfg.to_dict()})
            ckpts.append(path)
            write_metrics_csv(out / "metrics.csv", metrics)
    return TrainResult(net, metrics, baseline, ckpts, parameter_hash(net))


def overfit_single(net: ReconNet, image: np.ndarray, codes: np.ndarray, steps: int = 500,
                   lr: float = 3e-3, warmup: int = 50, schedule: str = "cosine",
                   spec: LossSpec = LossSpec()) -> list:
    """Fit one (image, depth codes) pair; returns the per-step composite loss.

    ``history[0]`` is the loss of the initial parameters.
    """
    x = prepare_inputs(np.asarray(image, dtype=np.float32)[None])
    net.check_input(x)
    y = prepare_targets(np.asarray(codes)[None], x.shape[2] // 2, x.shape[3] // 2, spec)
    opt = make_optimizer(net, lr)
    history = []
    for k in range(steps):
        set_lr(opt, lr * lr_factor(k, steps, schedule, warmup))
        history.append(backward_and_step(net, x, y, spec, opt)[0])
    with torch.no_grad():
        history.append(float(composite_loss(net(x), y, spec)[0]))
    return history


def write_metrics_csv(path, metrics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "depth_l1", "grad_l1", "ssim", "test_L1_mm"])
        for m in metrics:
            w.writerow([m.epoch, f"{m.train_loss:.9g}", f"{m.depth:.9g}", f"{m.grad:.9g}",
                        f"{m.ssim:.9g}", f"{m.test_l1_mm:.9g}"])


@dataclass
class Prediction:
    depth: DepthMap
    latency_ms: float


def predict(net: ReconNet, image, model: SensorModel, valid=None, input_size=None) -> Prediction:
    """Depth codes at crop resolution for one RGB image (path or HxWx3 array).

    Full-frame sensor images are cropped first. Latency covers preprocessing,
    the forward pass and decoding.
    """
    img = read_image(image) if isinstance(image, (str, Path)) else np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an RGB image, got shape {img.shape}")
    t0 = time.perf_counter()
    if img.shape[:2] == (model.image_height, model.image_width) and \
            img.shape[:2] != (model.crop_size, model.crop_size):
        img = model.crop(img)
    if img.shape[:2] != (model.crop_size, model.crop_size):
        raise ShapeError(f"image {img.shape[1]}x{img.shape[0]} matches neither the sensor frame nor its crop")
    x = img.astype(np.float32) / 255.0 if img.dtype == np.uint8 else img.astype(np.float32)
    x = prepare_inputs(x[None], input_size)
    net.check_input(x)
    net.eval()
    with torch.no_grad():
        out = net(x)
    codes = outputs_to_codes(out, model.crop_size, model.crop_size, net.target_range)[0]
    latency = (time.perf_counter() - t0) * 1e3
    mask = np.ones(codes.shape, bool) if valid is None else np.asarray(valid, bool)
    return Prediction(DepthMap(codes, mask, model.max_depression), latency)
