"""Localization network (encoder-decoder, per-pixel foreground logits), the
count-regression baseline, one-step training, and checkpoint I/O."""

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .blobs import CPM
from .loss import lcfcn_loss

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, message, batch_ids=()):
        super().__init__(f"{message} (batch: {list(batch_ids)})")
        self.batch_ids = list(batch_ids)


def _conv_block(c_in, c_out):
    groups = min(8, c_out)
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.GroupNorm(groups, c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.GroupNorm(groups, c_out),
        nn.ReLU(inplace=True),
    )


class LocalizerModel(nn.Module):
    """Small U-shaped fully convolutional net; input H x W -> logits H x W."""

    def __init__(self, in_channels=1, depth=4, base_channels=32, channel_cap=128):
        super().__init__()
        self.in_channels = in_channels
        self.depth = depth
        self.base_channels = base_channels
        self.channel_cap = channel_cap

        widths = [min(base_channels * 2 ** i, channel_cap)
                  for i in range(depth + 1)]
        self.encoders = nn.ModuleList()
        c_prev = in_channels
        for width in widths[:-1]:
            self.encoders.append(_conv_block(c_prev, width))
            c_prev = width
        self.bottleneck = _conv_block(c_prev, widths[-1])
        self.decoders = nn.ModuleList()
        c_prev = widths[-1]
        for width in reversed(widths[:-1]):
            self.decoders.append(_conv_block(c_prev + width, width))
            c_prev = width
        self.head = nn.Conv2d(c_prev, 1, 1)

    def config(self):
        return {
            "kind": "localizer",
            "in_channels": self.in_channels,
            "depth": self.depth,
            "base_channels": self.base_channels,
            "channel_cap": self.channel_cap,
        }

    def forward(self, x):
        h, w = x.shape[-2:]
        multiple = 2 ** self.depth
        pad_h = (-h) % multiple
        pad_w = (-w) % multiple
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")

        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x)[:, 0, :h, :w]


class GlanceModel(nn.Module):
    """Global count regressor: conv features, average pool, scalar head."""

    def __init__(self, in_channels=1, base_channels=16):
        super().__init__()
        self.in_channels = in_channels
        self.base_channels = base_channels
        c = base_channels
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, c, 3, padding=1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(c, 2 * c, 3, padding=1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * c, 4 * c, 3, padding=1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        )
        self.head = nn.Linear(4 * c, 1)

    def config(self):
        return {
            "kind": "glance",
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
        }

    def forward(self, x):
        feats = self.features(x)
        pooled = feats.mean(dim=(2, 3))
        return self.head(pooled)[:, 0]


def _image_tensor(image, in_channels, dtype=torch.float32):
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] != in_channels:
        raise ValueError(
            f"expected H x W x {in_channels} image, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype)


def batch_tensor(images, in_channels):
    return torch.stack([_image_tensor(img, in_channels) for img in images])


def forward(model: LocalizerModel, image) -> CPM:
    """Probability map for one image; deterministic in eval mode."""
    model.eval()
    with torch.no_grad():
        logits = model(_image_tensor(image, model.in_channels)[None])
    return CPM(torch.sigmoid(logits)[0].numpy())


def glance_forward(model: GlanceModel, image) -> float:
    """Raw (unclamped) count regression for one image."""
    model.eval()
    with torch.no_grad():
        pred = model(_image_tensor(image, model.in_channels)[None])
    return float(pred[0])


def glance_count(model: GlanceModel, image) -> float:
    """Reported count: clamped to >= 0 and rounded to an integer."""
    return float(round(max(0.0, glance_forward(model, image))))


def make_optimizer(model, lr, weight_decay):
    return torch.optim.Adam(model.parameters(), lr=lr, weight_decay=weight_decay)


def train_step(model, batch, optimizer, blob_threshold=0.5, connectivity=4):
    """One gradient step on a batch of (image, PseudoPointSet, RegionPartition).

    Only the masked loss contributes; a non-finite loss aborts with the ids
    of the offending batch.
    """
    model.train()
    images = [item[0] for item in batch]
    logits = model(batch_tensor(images, model.in_channels))
    total = logits.new_zeros(())
    for i, (_, points, partition) in enumerate(batch):
        total = total + lcfcn_loss(logits[i], points, partition,
                                   blob_threshold=blob_threshold,
                                   connectivity=connectivity)
    loss = total / len(batch)
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            "non-finite loss",
            batch_ids=[item[1].image_id for item in batch])
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def _build_model(model_config):
    kind = model_config.get("kind")
    cfg = {k: v for k, v in model_config.items() if k != "kind"}
    if kind == "localizer":
        return LocalizerModel(**cfg)
    if kind == "glance":
        return GlanceModel(**cfg)
    raise ValueError(f"unknown model kind {kind!r}")


def save_checkpoint(path, model, optimizer=None, extra=None):
    """Self-describing checkpoint: model config echo, parameters, optimizer
    state, and any caller-provided resume metadata."""
    payload = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "model_config": model.config(),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer else None,
        "torch_rng_state": torch.get_rng_state(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Returns (model, payload); refuses checkpoints from other versions."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("checkpoint_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {version} not supported "
            f"(expected {CHECKPOINT_VERSION})")
    model = _build_model(payload["model_config"])
    model.load_state_dict(payload["model_state"])
    return model, payload
