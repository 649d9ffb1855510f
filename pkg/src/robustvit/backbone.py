"""Vision transformer backbone with per-block token taps.

The forward pass exposes the patch and class tokens of every block so that
intermediate classifiers and token-distance analyses can consume them. The
final classification head operates on the class token produced by the last
block.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from .errors import CheckpointError, ConfigurationError
from .metrics import accuracy

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    num_classes: int = 2
    channels: int = 3
    mlp_ratio: float = 4.0
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.depth < 2:
            raise ConfigurationError("depth must be >= 2 (intermediate + final block)")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.num_classes < 2:
            raise ConfigurationError("need at least two classes")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class ImageBatch:
    """A batch of images in [0,1] pixel space, optionally labeled."""

    pixels: torch.Tensor  # (B, C, H, W)
    labels: torch.Tensor | None = None  # (B,) int64

    def __post_init__(self) -> None:
        if self.pixels.dim() != 4:
            raise ConfigurationError(f"pixels must be 4D, got shape {tuple(self.pixels.shape)}")
        if self.pixels.numel() and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ConfigurationError("pixel values must lie in [0, 1]")
        if self.labels is not None:
            if self.labels.shape != (self.pixels.shape[0],):
                raise ConfigurationError("labels must be one id per image")
            self.labels = self.labels.long()

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def to(self, device: torch.device | str) -> "ImageBatch":
        labels = None if self.labels is None else self.labels.to(device)
        return ImageBatch(self.pixels.to(device), labels)


@dataclass
class TokenTrace:
    """Per-block tokens recorded during one forward pass.

    ``patch_tokens[i]`` has shape (B, N, D) and ``class_tokens[i]`` shape
    (B, D) for block i+1; both lists have one entry per block. ``logits`` and
    ``probs`` come from the final head applied to the last class token.
    """

    patch_tokens: list[torch.Tensor]
    class_tokens: list[torch.Tensor]
    logits: torch.Tensor
    probs: torch.Tensor


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, c = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = self.dropout(attn.softmax(dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(b, t, c)
        return self.proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, dropout: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class VisionTransformer(nn.Module):
    """ViT classifier whose blocks can be tapped via :func:`forward_with_taps`."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = nn.Conv2d(
            config.channels, d, kernel_size=config.patch_size, stride=config.patch_size
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_patches + 1, d))
        self.embed_dropout = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(
            TransformerBlock(d, config.num_heads, config.mlp_ratio, config.dropout)
            for _ in range(config.depth)
        )
        # final head: norm + linear over the last class token
        self.head = nn.Sequential(nn.LayerNorm(d), nn.Linear(d, config.num_classes))
        self._init_weights()

    def _init_weights(self) -> None:
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)

    def embed(self, pixels: torch.Tensor) -> torch.Tensor:
        """Patch + position embedding, class token prepended at index 0."""
        b = pixels.shape[0]
        tokens = self.patch_embed(pixels).flatten(2).transpose(1, 2)  # (B, N, D)
        cls = self.cls_token.expand(b, -1, -1)
        tokens = torch.cat([cls, tokens], dim=1) + self.pos_embed
        return self.embed_dropout(tokens)

    def validate_batch(self, pixels: torch.Tensor) -> None:
        cfg = self.config
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if tuple(pixels.shape[1:]) != expected:
            raise ConfigurationError(
                f"batch shape {tuple(pixels.shape[1:])} does not match config {expected}"
            )

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        self.validate_batch(pixels)
        tokens = self.embed(pixels)
        for block in self.blocks:
            tokens = block(tokens)
        return self.head(tokens[:, 0])


def forward_with_taps(model: VisionTransformer, batch: ImageBatch) -> TokenTrace:
    """Run a forward pass recording every block's patch and class tokens."""
    model.validate_batch(batch.pixels)
    tokens = model.embed(batch.pixels)
    patch_tokens: list[torch.Tensor] = []
    class_tokens: list[torch.Tensor] = []
    for block in model.blocks:
        tokens = block(tokens)
        class_tokens.append(tokens[:, 0])
        patch_tokens.append(tokens[:, 1:])
    logits = model.head(class_tokens[-1])
    probs = F.softmax(logits, dim=-1)
    return TokenTrace(patch_tokens, class_tokens, logits, probs)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_step_epochs: int = 10
    seed: int = 0
    device: str | None = None


def learning_rate_at(epoch: int, cfg: TrainConfig) -> float:
    """LR schedule: multiplicative decay every ``lr_step_epochs`` epochs."""
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_step_epochs)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    accuracy: float  # train accuracy, fraction in [0,1]
    val_accuracy: float | None = None


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)


def _run_epoch(model, loader, optimizer, device) -> tuple[float, float]:
    total_loss, n = 0.0, 0
    preds, trues = [], []
    for pixels, labels in loader:
        pixels, labels = pixels.to(device), labels.to(device)
        logits = model(pixels)
        loss = F.cross_entropy(logits, labels)
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"non-finite training loss ({loss.item()}); lower the learning rate or check the data"
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        total_loss += loss.item() * len(labels)
        n += len(labels)
        preds.append(logits.argmax(dim=1).cpu())
        trues.append(labels.cpu())
    return total_loss / n, accuracy(torch.cat(preds), torch.cat(trues))


@torch.no_grad()
def evaluate_model(model: nn.Module, dataset: Dataset, batch_size: int = 256, device=None) -> float:
    """Clean accuracy (fraction) of any image->logits classifier on a dataset."""
    device = device if device is not None else next(model.parameters()).device
    was_training = model.training
    model.eval()
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    preds, trues = [], []
    for pixels, labels in loader:
        logits = model(pixels.to(device))
        preds.append(logits.argmax(dim=1).cpu())
        trues.append(labels)
    model.train(was_training)
    return accuracy(torch.cat(preds), torch.cat(trues))


def train_backbone(
    model: VisionTransformer,
    dataset: Dataset,
    cfg: TrainConfig,
    val_dataset: Dataset | None = None,
) -> TrainLog:
    """Cross-entropy training of the full ViT (all blocks + final head).

    Adam with the step-decay schedule of :func:`learning_rate_at`. Raises on
    an empty dataset and aborts on a non-finite loss.
    """
    if len(dataset) == 0:  # type: ignore[arg-type]
        raise ValueError("cannot train on an empty dataset")
    device = torch.device(cfg.device) if cfg.device else next(model.parameters()).device
    model.to(device)
    log = TrainLog()
    if cfg.epochs == 0:
        return log
    generator = torch.Generator().manual_seed(cfg.seed)
    loader = DataLoader(
        dataset, batch_size=cfg.batch_size, shuffle=True, generator=generator, drop_last=False
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    for epoch in range(cfg.epochs):
        lr = learning_rate_at(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        mean_loss, train_acc = _run_epoch(model, loader, optimizer, device)
        val_acc = None
        if val_dataset is not None and len(val_dataset) > 0:  # type: ignore[arg-type]
            val_acc = evaluate_model(model, val_dataset, device=device)
        log.epochs.append(EpochStats(epoch, lr, mean_loss, train_acc, val_acc))
    model.eval()
    return log


def save_checkpoint(model: VisionTransformer, path) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.config),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path, expected_config: BackboneConfig | None = None) -> VisionTransformer:
    """Rebuild a backbone from a checkpoint written by :func:`save_checkpoint`."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types on corrupt files
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a backbone checkpoint")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format {payload['format_version']} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    config = BackboneConfig(**payload["config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError("checkpoint config does not match the expected config")
    model = VisionTransformer(config)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint weights do not fit the stored config: {exc}") from exc
    model.eval()
    return model


def import_pretrained_weights(
    model: VisionTransformer, state_dict: dict, strict: bool = False
) -> tuple[list[str], list[str]]:
    """Copy shape-compatible tensors from an external state dict.

    Returns (loaded, skipped) key lists; hook for seeding the toy backbone
    from externally pretrained weights.
    """
    own = model.state_dict()
    loaded, skipped = [], []
    for key, value in state_dict.items():
        if key in own and own[key].shape == value.shape:
            own[key] = value
            loaded.append(key)
        else:
            skipped.append(key)
    if strict and skipped:
        raise CheckpointError(f"weights not importable: {skipped[:5]}...")
    model.load_state_dict(own)
    return loaded, skipped
