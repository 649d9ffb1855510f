"""Intermediate MLP heads over patch tokens and the self-ensemble fusion rule.

Each head classifies one block's patch tokens; the ensemble fuses the head
predictions with the backbone's final classifier by majority vote, either
over all heads or over a randomly drawn subset that always includes the
final classifier.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset, TensorDataset

from .backbone import (
    CHECKPOINT_FORMAT_VERSION,
    BackboneConfig,
    ImageBatch,
    TrainConfig,
    TrainLog,
    EpochStats,
    VisionTransformer,
    forward_with_taps,
    learning_rate_at,
    load_checkpoint,
    save_checkpoint,
)
from .errors import CheckpointError, ConfigurationError
from .metrics import accuracy

INPUT_MODES = ("flatten", "mean")
TIE_BREAKS = ("final_classifier", "lowest_block")


@dataclass(frozen=True)
class HeadConfig:
    """A 4-layer MLP classifier attached to one block's patch tokens."""

    block_index: int  # 1-based, in [1, depth-1]
    input_mode: str = "flatten"  # flatten all N*D token values, or mean-pool to D
    hidden_dims: tuple[int, int, int] = (512, 256, 128)
    dropout: float = 0.1

    def __post_init__(self) -> None:
        if self.block_index < 1:
            raise ConfigurationError("block_index is 1-based and must be >= 1")
        if self.input_mode not in INPUT_MODES:
            raise ConfigurationError(f"input_mode must be one of {INPUT_MODES}")
        if len(self.hidden_dims) != 3:
            raise ConfigurationError("heads are 4-layer MLPs: exactly three hidden widths")


class IntermediateHead(nn.Module):
    def __init__(self, cfg: HeadConfig, num_patches: int, embed_dim: int, num_classes: int):
        super().__init__()
        self.cfg = cfg
        self.num_patches = num_patches
        self.embed_dim = embed_dim
        self.num_classes = num_classes
        in_dim = num_patches * embed_dim if cfg.input_mode == "flatten" else embed_dim
        dims = (in_dim, *cfg.hidden_dims)
        layers: list[nn.Module] = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(d_in, d_out), nn.GELU(), nn.Dropout(cfg.dropout)]
        layers.append(nn.Linear(dims[-1], num_classes))
        self.net = nn.Sequential(*layers)

    def forward(self, patch_tokens: torch.Tensor) -> torch.Tensor:
        if patch_tokens.dim() != 3 or patch_tokens.shape[1] != self.num_patches:
            raise ConfigurationError(
                f"expected patch tokens (B, {self.num_patches}, {self.embed_dim}), "
                f"got {tuple(patch_tokens.shape)}"
            )
        if self.cfg.input_mode == "flatten":
            x = patch_tokens.flatten(1)
        else:
            x = patch_tokens.mean(dim=1)
        return self.net(x)


@torch.no_grad()
def extract_patch_tokens(
    backbone: VisionTransformer,
    dataset: Dataset,
    block_indices: Sequence[int],
    batch_size: int = 256,
) -> tuple[dict[int, torch.Tensor], torch.Tensor]:
    """Cache the requested blocks' patch tokens for a whole dataset.

    The backbone is run in eval mode under no_grad; it is left untouched.
    Token caches live in memory, which is fine at toy scale.
    """
    depth = backbone.config.depth
    for idx in block_indices:
        if not 1 <= idx <= depth - 1:
            raise ConfigurationError(
                f"block {idx} cannot carry a head (valid: 1..{depth - 1})"
            )
    was_training = backbone.training
    backbone.eval()
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    tokens: dict[int, list[torch.Tensor]] = {i: [] for i in block_indices}
    labels: list[torch.Tensor] = []
    for pixels, batch_labels in loader:
        trace = forward_with_taps(backbone, ImageBatch(pixels, batch_labels))
        for idx in block_indices:
            tokens[idx].append(trace.patch_tokens[idx - 1].cpu())
        labels.append(batch_labels)
    backbone.train(was_training)
    return {i: torch.cat(parts) for i, parts in tokens.items()}, torch.cat(labels)


@dataclass
class HeadTrainingResult:
    heads: dict[int, IntermediateHead]
    logs: dict[int, TrainLog]
    val_accuracy: dict[int, float] = field(default_factory=dict)


def train_heads(
    backbone: VisionTransformer,
    dataset: Dataset,
    block_indices: Sequence[int],
    train_cfg: TrainConfig,
    val_dataset: Dataset | None = None,
    input_mode: str = "flatten",
    hidden_dims: tuple[int, int, int] = (512, 256, 128),
    dropout: float = 0.1,
) -> HeadTrainingResult:
    """Train one MLP head per requested block on cached patch tokens.

    The backbone stays frozen: tokens are extracted once under no_grad and
    only head parameters are optimized (Adam, step-decayed LR).
    """
    if len(set(block_indices)) != len(block_indices):
        raise ConfigurationError("duplicate block indices requested")
    if len(dataset) == 0:  # type: ignore[arg-type]
        raise ValueError("cannot train heads on an empty dataset")
    cfg = backbone.config
    train_tokens, train_labels = extract_patch_tokens(backbone, dataset, block_indices)
    val_tokens: dict[int, torch.Tensor] = {}
    val_labels: torch.Tensor | None = None
    if val_dataset is not None and len(val_dataset) > 0:  # type: ignore[arg-type]
        val_tokens, val_labels = extract_patch_tokens(backbone, val_dataset, block_indices)

    result = HeadTrainingResult(heads={}, logs={})
    for idx in block_indices:
        head_cfg = HeadConfig(idx, input_mode, tuple(hidden_dims), dropout)
        head = IntermediateHead(head_cfg, cfg.num_patches, cfg.embed_dim, cfg.num_classes)
        torch.manual_seed(train_cfg.seed + idx)  # distinct, reproducible init per head
        head.apply(_init_linear)
        log = _train_single_head(head, train_tokens[idx], train_labels, train_cfg)
        head.eval()
        result.heads[idx] = head
        result.logs[idx] = log
        if val_labels is not None:
            with torch.no_grad():
                preds = head(val_tokens[idx]).argmax(dim=1)
            result.val_accuracy[idx] = accuracy(preds, val_labels)
    return result


def _init_linear(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        nn.init.zeros_(module.bias)


def _train_single_head(
    head: IntermediateHead, tokens: torch.Tensor, labels: torch.Tensor, cfg: TrainConfig
) -> TrainLog:
    log = TrainLog()
    if cfg.epochs == 0:
        return log
    generator = torch.Generator().manual_seed(cfg.seed)
    loader = DataLoader(
        TensorDataset(tokens, labels), batch_size=cfg.batch_size, shuffle=True, generator=generator
    )
    optimizer = torch.optim.Adam(head.parameters(), lr=cfg.lr)
    for epoch in range(cfg.epochs):
        lr = learning_rate_at(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        head.train()
        total_loss, n = 0.0, 0
        preds, trues = [], []
        for batch_tokens, batch_labels in loader:
            logits = head(batch_tokens)
            loss = F.cross_entropy(logits, batch_labels)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite head loss at block {head.cfg.block_index}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += loss.item() * len(batch_labels)
            n += len(batch_labels)
            preds.append(logits.argmax(dim=1))
            trues.append(batch_labels)
        log.epochs.append(
            EpochStats(epoch, lr, total_loss / n, accuracy(torch.cat(preds), torch.cat(trues)))
        )
    return log


@dataclass
class FusionConfig:
    kind: str = "majority_all"  # or "majority_random_subset"
    subset_size: int | None = None  # c, only for the random-subset kind
    tie_break: str = "final_classifier"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("majority_all", "majority_random_subset"):
            raise ConfigurationError(f"unknown fusion kind {self.kind!r}")
        if self.tie_break not in TIE_BREAKS:
            raise ConfigurationError(f"tie_break must be one of {TIE_BREAKS}")
        if self.kind == "majority_random_subset" and self.subset_size is None:
            raise ConfigurationError("majority_random_subset requires subset_size (c)")


@dataclass
class EnsemblePrediction:
    """Per-batch ensemble output.

    Members are ordered by ascending block index with the final classifier
    last. ``participating`` holds the member positions that entered the vote
    for this batch (the random subset is redrawn per batch).
    """

    member_blocks: list[int | None]  # block index per member; None = final classifier
    member_labels: np.ndarray  # (n_members, B)
    member_probs: np.ndarray  # (n_members, B, K)
    participating: list[int]
    fused_label: np.ndarray  # (B,)


def majority_vote(
    labels: Sequence[int], tie_break: str = "final_classifier", final_label: int | None = None
) -> int:
    """Modal label of the vote vector; exact ties resolved by ``tie_break``.

    ``final_classifier`` follows ``final_label`` when it is among the tied
    labels and otherwise falls back to the smallest tied class id, so the
    result never depends on input ordering. ``lowest_block`` interprets the
    sequence as ascending block order and follows the earliest member whose
    label is tied.
    """
    if len(labels) == 0:
        raise ValueError("cannot vote over an empty label list")
    if tie_break not in TIE_BREAKS:
        raise ConfigurationError(f"tie_break must be one of {TIE_BREAKS}")
    counts = Counter(int(l) for l in labels)
    top = max(counts.values())
    tied = sorted(label for label, count in counts.items() if count == top)
    if len(tied) == 1:
        return tied[0]
    if tie_break == "final_classifier":
        if final_label is not None and int(final_label) in tied:
            return int(final_label)
        return tied[0]
    for label in labels:  # lowest_block: first member in block order holding a tied label
        if int(label) in tied:
            return int(label)
    raise AssertionError("unreachable")


class SelfEnsemble:
    """Backbone + intermediate heads fused into one classifier."""

    def __init__(
        self,
        backbone: VisionTransformer,
        heads: Mapping[int, IntermediateHead],
        fusion: FusionConfig | None = None,
    ):
        depth = backbone.config.depth
        for idx in heads:
            if not 1 <= idx <= depth - 1:
                raise ConfigurationError(f"head block {idx} out of range 1..{depth - 1}")
        self.backbone = backbone
        self.heads = dict(sorted(heads.items()))
        self.fusion = fusion or FusionConfig()
        if self.fusion.kind == "majority_random_subset":
            c = self.fusion.subset_size
            if not 1 <= c <= max(self.num_heads - 1, 0):
                raise ConfigurationError(
                    f"subset size c={c} must lie in 1..{self.num_heads - 1}"
                )
        self._rng = np.random.default_rng(self.fusion.seed)

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    @property
    def head_blocks(self) -> list[int]:
        return list(self.heads)

    def reseed(self, seed: int) -> None:
        """Reset the subset RNG (single-writer: callers own the draw order)."""
        self._rng = np.random.default_rng(seed)

    @torch.no_grad()
    def member_distributions(self, batch: ImageBatch) -> tuple[list[int | None], np.ndarray]:
        """Probability distribution of every member: heads in block order, final last."""
        self.backbone.eval()
        trace = forward_with_taps(self.backbone, batch)
        probs = []
        blocks: list[int | None] = []
        for idx, head in self.heads.items():
            head.eval()
            probs.append(F.softmax(head(trace.patch_tokens[idx - 1]), dim=-1).cpu().numpy())
            blocks.append(idx)
        probs.append(trace.probs.cpu().numpy())
        blocks.append(None)
        return blocks, np.stack(probs)  # (n_members, B, K)

    def predict(self, batch: ImageBatch, allow_single: bool = False) -> EnsemblePrediction:
        """Fuse member predictions for one batch.

        With no heads configured the ensemble degenerates to the vanilla
        backbone, which must be requested explicitly via ``allow_single``.
        For the random-subset strategy, one subset of c heads (plus the final
        classifier) is drawn per call.
        """
        if self.num_heads == 0 and not allow_single:
            raise ConfigurationError(
                "ensemble has no intermediate heads; pass allow_single=True for vanilla behavior"
            )
        blocks, member_probs = self.member_distributions(batch)
        member_labels = member_probs.argmax(axis=2)  # (n_members, B)
        n_members = member_labels.shape[0]
        final_pos = n_members - 1
        if self.fusion.kind == "majority_random_subset" and self.num_heads > 1:
            chosen = self._rng.choice(self.num_heads, size=self.fusion.subset_size, replace=False)
            participating = sorted(int(i) for i in chosen) + [final_pos]
        else:
            participating = list(range(n_members))
        fused = np.empty(member_labels.shape[1], dtype=np.int64)
        for sample in range(member_labels.shape[1]):
            votes = [int(member_labels[pos, sample]) for pos in participating]
            fused[sample] = majority_vote(
                votes, self.fusion.tie_break, final_label=int(member_labels[final_pos, sample])
            )
        return EnsemblePrediction(blocks, member_labels, member_probs, participating, fused)


def save_ensemble(ensemble: SelfEnsemble, directory) -> None:
    """Persist backbone checkpoint, per-head weights, and the fusion config."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ensemble.backbone, directory / "backbone.pt")
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "backbone": "backbone.pt",
        "fusion": asdict(ensemble.fusion),
        "heads": [],
    }
    for idx, head in ensemble.heads.items():
        filename = f"head_{idx:02d}.pt"
        torch.save(
            {
                "format_version": CHECKPOINT_FORMAT_VERSION,
                "head_config": asdict(head.cfg),
                "num_patches": head.num_patches,
                "embed_dim": head.embed_dim,
                "num_classes": head.num_classes,
                "state_dict": head.state_dict(),
            },
            directory / filename,
        )
        manifest["heads"].append({"block_index": idx, "file": filename})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_ensemble(directory, expected_config: BackboneConfig | None = None) -> SelfEnsemble:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no ensemble manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    backbone = load_checkpoint(directory / manifest["backbone"], expected_config)
    heads: dict[int, IntermediateHead] = {}
    for entry in manifest["heads"]:
        payload = torch.load(directory / entry["file"], map_location="cpu", weights_only=True)
        head_cfg_dict = dict(payload["head_config"])
        head_cfg_dict["hidden_dims"] = tuple(head_cfg_dict["hidden_dims"])
        head = IntermediateHead(
            HeadConfig(**head_cfg_dict),
            payload["num_patches"],
            payload["embed_dim"],
            payload["num_classes"],
        )
        head.load_state_dict(payload["state_dict"])
        head.eval()
        heads[entry["block_index"]] = head
    fusion_dict = dict(manifest["fusion"])
    return SelfEnsemble(backbone, heads, FusionConfig(**fusion_dict))
