"""Identification network: conv trunk, 512-wide bottleneck, classifier and an
optional noise-adaptation layer for generated samples."""
from __future__ import annotations

import logging
from collections import Counter, OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DatasetBundle, ImagePipeline, ImageRecord, PreprocessConfig
from .loss import gated_loss
from .optim import NumericError, apply_sgd_update, seeded

logger = logging.getLogger(__name__)

ARCHITECTURES = ("small_convnet", "resnet_style")


@dataclass
class BackboneConfig:
    n_classes: int
    architecture: str = "small_convnet"
    embedding_dim: int = 512
    extra_class: bool = False
    noise_adapter: bool = False
    input_size: int = 224
    dropout: float = 0.5
    channels: tuple[int, ...] = (32, 64, 128, 256)
    pretrained_path: Optional[str] = None

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")

    @property
    def out_dim(self) -> int:
        return self.n_classes + int(self.extra_class)

    def to_json(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def _small_trunk(channels: Sequence[int]) -> nn.Sequential:
    layers = []
    c_in = 3
    for i, c in enumerate(channels):
        layers.append((f"block{i + 1}", nn.Sequential(
            nn.Conv2d(c_in, c, 3, padding=1, bias=False),
            nn.BatchNorm2d(c),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        )))
        c_in = c
    layers.append(("pool", nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten())))
    return nn.Sequential(OrderedDict(layers))


def _resnet_trunk(pretrained_path: Optional[str]) -> tuple[nn.Sequential, int]:
    import torchvision

    net = torchvision.models.resnet50(weights=None)
    if pretrained_path:
        state = torch.load(pretrained_path, map_location="cpu")
        missing, _ = net.load_state_dict(state, strict=False)
        logger.info("loaded %s (missing keys: %d)", pretrained_path, len(missing))
    stages = [(n, m) for n, m in net.named_children() if n not in ("fc", "avgpool")]
    stages.append(("pool", nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten())))
    return nn.Sequential(OrderedDict(stages)), 2048


class ReidNet(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.architecture == "small_convnet":
            self.trunk = _small_trunk(cfg.channels)
            feat_dim = cfg.channels[-1]
        else:
            self.trunk, feat_dim = _resnet_trunk(cfg.pretrained_path)
        self.feat_dim = feat_dim
        self.bottleneck = nn.Sequential(
            nn.Linear(feat_dim, cfg.embedding_dim),
            nn.BatchNorm1d(cfg.embedding_dim),
        )
        self.dropout = nn.Dropout(cfg.dropout)
        self.classifier = nn.Linear(cfg.embedding_dim, cfg.out_dim)
        self.adapter = nn.Linear(cfg.out_dim, cfg.out_dim) if cfg.noise_adapter else None
        self._init()

    def _init(self):
        for m in self.trunk.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        nn.init.kaiming_normal_(self.bottleneck[0].weight, mode="fan_out")
        nn.init.zeros_(self.bottleneck[0].bias)
        nn.init.normal_(self.classifier.weight, std=0.001)
        nn.init.zeros_(self.classifier.bias)
        if self.adapter is not None:
            with torch.no_grad():
                self.adapter.weight.copy_(torch.eye(self.cfg.out_dim))
                self.adapter.bias.zero_()

    def forward(self, x: torch.Tensor, check_finite: bool = False):
        """Return ``(pooled features, bottleneck embedding, logits)``."""
        h = x
        for name, stage in self.trunk.named_children():
            h = stage(h)
            if check_finite and not torch.isfinite(h).all():
                raise NumericError(f"non-finite activation in trunk.{name}")
        emb = self.bottleneck(h)
        logits = self.classifier(self.dropout(emb))
        if check_finite:
            for name, t in (("bottleneck", emb), ("classifier", logits)):
                if not torch.isfinite(t).all():
                    raise NumericError(f"non-finite activation in {name}")
        return h, emb, logits

    def log_probs(self, x: torch.Tensor, generated: Optional[torch.Tensor] = None,
                  check_finite: bool = False) -> torch.Tensor:
        _, _, logits = self(x, check_finite=check_finite)
        return self.adapt(F.log_softmax(logits, dim=1), generated)

    def adapt(self, log_probs: torch.Tensor, generated: Optional[torch.Tensor]) -> torch.Tensor:
        """Affine map on generated rows' log-probabilities, then renormalize."""
        if self.adapter is None or generated is None or not bool(generated.any()):
            return log_probs
        gen = generated.bool()
        adapted = F.log_softmax(self.adapter(log_probs[gen]), dim=1)
        out = log_probs.clone()
        out[gen] = adapted
        return out


@dataclass
class ModelState:
    net: ReidNet
    config: BackboneConfig
    training_step: int = 0
    momentum: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def named_segments(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.net.state_dict().items()}

    def flat_parameters(self) -> np.ndarray:
        return torch.cat([p.detach().reshape(-1) for p in self.net.parameters()]).numpy()


@dataclass
class EmbeddingMatrix:
    values: np.ndarray
    row_ids: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.row_ids):
            raise ValueError("values must be N x M with one row id per row")
        if not np.isfinite(self.values).all():
            raise NumericError("embedding contains non-finite entries")

    @property
    def shape(self):
        return self.values.shape


def init_model(cfg: BackboneConfig, seed: int = 0) -> ModelState:
    with seeded(seed):
        net = ReidNet(cfg)
    return ModelState(net=net, config=cfg)


def forward_probs(model: ModelState, batch: torch.Tensor, generated: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Class probabilities (rows sum to one); eval mode, no gradient."""
    if batch.shape[-1] != model.config.input_size or batch.shape[-2] != model.config.input_size:
        raise ValueError(f"batch spatial size {tuple(batch.shape[-2:])} != input_size {model.config.input_size}")
    model.net.eval()
    with torch.no_grad():
        lp = model.net.log_probs(batch, generated, check_finite=True)
    return lp.exp()


def train_feature_model(bundle: DatasetBundle, cfg: BackboneConfig, epochs: int = 40, lr: float = 0.001,
                        momentum: float = 0.9, seed: int = 0, preprocess: Optional[PreprocessConfig] = None,
                        batch_size: int = 32, weight_decay: float = 5e-4,
                        records: Optional[Sequence[ImageRecord]] = None, workers: int = 1) -> ModelState:
    """Stage-1 identity classifier trained with plain cross-entropy."""
    records = list(bundle.train if records is None else records)
    counts = Counter(bundle.class_index[r.identity] for r in records)
    empty = [c for c in range(bundle.n_identities) if counts[c] == 0]
    if empty:
        raise ValueError(f"classes without training images: {empty[:10]}")
    state = init_model(cfg, seed)
    if epochs <= 0:
        return state
    pre = preprocess or PreprocessConfig(resize_to=cfg.input_size, crop_to=cfg.input_size)
    pipe = ImagePipeline(records, pre, workers=workers)
    labels = torch.from_numpy(bundle.labels(records))
    eye = torch.eye(cfg.out_dim)
    with seeded(seed + 1):
        for epoch in range(epochs):
            state.net.train()
            losses = []
            for idx, x in pipe.epoch_batches(batch_size, seed, epoch):
                lp = state.net.log_probs(x)
                loss = gated_loss(lp, eye[labels[idx]], torch.zeros(len(idx)))
                state.net.zero_grad(set_to_none=True)
                loss.backward()
                apply_sgd_update(state.net.named_parameters(), state.momentum, lr, momentum, weight_decay)
                state.training_step += 1
                losses.append(loss.item())
            state.history.append({"epoch": epoch, "loss": float(np.mean(losses))})
            logger.debug("stage-1 epoch %d loss %.4f", epoch, state.history[-1]["loss"])
    return state


def extract_features(model: ModelState, records: Sequence[ImageRecord], preprocess: Optional[PreprocessConfig] = None,
                     layer: str = "pool", batch_size: int = 128) -> EmbeddingMatrix:
    """Eval-mode features; ``layer`` is ``pool`` (trunk output) or ``bottleneck``."""
    records = list(records)
    if not records:
        raise ValueError("no records to embed")
    if layer not in ("pool", "bottleneck"):
        raise ValueError(f"unknown feature layer {layer!r}")
    pre = preprocess or PreprocessConfig(resize_to=model.config.input_size, crop_to=model.config.input_size)
    pipe = ImagePipeline(records, pre)
    model.net.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            x = pipe.batch(range(start, min(start + batch_size, len(records))), mode="eval")
            pooled, emb, _ = model.net(x, check_finite=True)
            out.append((pooled if layer == "pool" else emb).double().numpy())
    return EmbeddingMatrix(np.concatenate(out), [r.image_id for r in records])
