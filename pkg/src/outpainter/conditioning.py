"""Caption and visual embeddings, their fusion, and cross-attention context
assembly.

The denoiser attends over a single context matrix.  Under the default dual
mode that context is the token-axis concatenation of (projected) visual
tokens with the fused caption tokens; two alternative assemblies compress
everything through the fusion MLP or concatenate all three token blocks
directly.  Ablation flags null out individual components by replacing them
with zeros before fusion or concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .captions import Caption, CaptionKind
from .validation import ValidationError, check_image

SOURCE_GLOBAL = "text_global"
SOURCE_LOCAL = "text_local"
SOURCE_VISUAL = "visual"

FUSION_MODES = ("dual", "all_in_mlp", "all_in_xattn")

ABLATION_LABELS = ("gc", "llm", "clip", "all")


@dataclass(frozen=True)
class TokenEmbeddings:
    """A (tokens, dim) matrix tagged with where it came from."""

    data: np.ndarray
    source: str

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValidationError(f"embeddings must be 2-dimensional, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("embeddings contain non-finite values")
        if self.source not in (SOURCE_GLOBAL, SOURCE_LOCAL, SOURCE_VISUAL):
            raise ValidationError(f"unknown embedding source {self.source!r}")
        object.__setattr__(self, "data", arr)

    @property
    def tokens(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def encode_text(caption: Caption, encoder) -> TokenEmbeddings:
    """Encode a caption; global captions are tagged as the global source."""
    source = SOURCE_GLOBAL if caption.kind is CaptionKind.GLOBAL else SOURCE_LOCAL
    return TokenEmbeddings(encoder.encode(caption.text), source)


def encode_visual(image, encoder) -> TokenEmbeddings:
    check_image(image)
    return TokenEmbeddings(encoder.encode(image), SOURCE_VISUAL)


@dataclass(frozen=True)
class AblationFlags:
    """Which conditioning components stay live; at least one must."""

    use_global: bool = True
    use_local: bool = True
    use_visual: bool = True

    def __post_init__(self):
        if not (self.use_global or self.use_local or self.use_visual):
            raise ValidationError("at least one conditioning component must stay enabled")

    @classmethod
    def from_labels(cls, labels) -> "AblationFlags":
        """Build flags from ablation labels: gc, llm, clip, or all."""
        use_global, use_local, use_visual = True, True, True
        for label in labels or ():
            if label == "gc":
                use_global = False
            elif label == "llm":
                use_local = False
            elif label == "clip":
                use_visual = False
            elif label == "all":
                use_local = False
                use_visual = False
            else:
                raise ValidationError(
                    f"unknown ablation label {label!r}; expected one of {ABLATION_LABELS}"
                )
        return cls(use_global, use_local, use_visual)

    def to_dict(self) -> dict:
        return {
            "use_global": self.use_global,
            "use_local": self.use_local,
            "use_visual": self.use_visual,
        }


class FusionMLP(nn.Module):
    """Per-token fusion: concatenate `parts` token blocks along the feature
    axis, then two linear layers with a GELU in between."""

    def __init__(self, parts: int, embed_dim: int, hidden: int | None = None):
        super().__init__()
        self.parts = int(parts)
        self.embed_dim = int(embed_dim)
        self.hidden = int(hidden) if hidden else int(embed_dim)
        self.layer1 = nn.Linear(self.parts * self.embed_dim, self.hidden)
        self.act = nn.GELU()
        self.layer2 = nn.Linear(self.hidden, self.embed_dim)

    def forward(self, *blocks: torch.Tensor) -> torch.Tensor:
        if len(blocks) != self.parts:
            raise ValidationError(f"fusion expects {self.parts} blocks, got {len(blocks)}")
        shapes = {tuple(b.shape) for b in blocks}
        if len(shapes) != 1:
            raise ValidationError(f"fusion blocks must share a shape, got {sorted(shapes)}")
        if blocks[0].shape[-1] != self.embed_dim:
            raise ValidationError(
                f"fusion expects feature dim {self.embed_dim}, got {blocks[0].shape[-1]}"
            )
        return self.layer2(self.act(self.layer1(torch.cat(blocks, dim=-1))))


class Conditioner(nn.Module):
    """Assembles the cross-attention context from the three token blocks.

    Mode determines the context length: 2L for dual (visual block plus fused
    text block), L when everything is compressed through the MLP, 3L when all
    blocks are concatenated directly (parameter-free).  The visual projection
    is bias-free so a nulled visual component stays exactly zero in the
    context.
    """

    def __init__(
        self,
        tokens: int,
        embed_dim: int,
        mode: str = "dual",
        hidden: int | None = None,
        flags: AblationFlags | None = None,
    ):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ValidationError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
        self.tokens = int(tokens)
        self.embed_dim = int(embed_dim)
        self.mode = mode
        self.hidden = None if hidden is None else int(hidden)
        self.flags = flags or AblationFlags()
        if mode == "dual":
            self.fusion = FusionMLP(2, embed_dim, hidden)
            self.visual_projection = nn.Linear(embed_dim, embed_dim, bias=False)
        elif mode == "all_in_mlp":
            self.fusion = FusionMLP(3, embed_dim, hidden)
            self.visual_projection = None
        else:
            self.fusion = None
            self.visual_projection = None

    @property
    def context_len(self) -> int:
        if self.mode == "dual":
            return 2 * self.tokens
        if self.mode == "all_in_mlp":
            return self.tokens
        return 3 * self.tokens

    def _check_block(self, block: torch.Tensor, name: str) -> torch.Tensor:
        if block.shape[-2] != self.tokens or block.shape[-1] != self.embed_dim:
            raise ValidationError(
                f"{name} block must end in ({self.tokens}, {self.embed_dim}), "
                f"got {tuple(block.shape)}"
            )
        return block

    def fuse_captions(self, global_block: torch.Tensor, local_block: torch.Tensor) -> torch.Tensor:
        if self.fusion is None or self.fusion.parts != 2:
            raise ValidationError(f"mode {self.mode!r} has no two-block caption fusion")
        return self.fusion(self._check_block(global_block, "global"),
                           self._check_block(local_block, "local"))

    def forward(
        self,
        global_block: torch.Tensor,
        local_block: torch.Tensor,
        visual_block: torch.Tensor,
    ) -> torch.Tensor:
        g = self._check_block(global_block, "global")
        l = self._check_block(local_block, "local")
        v = self._check_block(visual_block, "visual")
        if not self.flags.use_global:
            g = torch.zeros_like(g)
        if not self.flags.use_local:
            l = torch.zeros_like(l)
        if not self.flags.use_visual:
            v = torch.zeros_like(v)

        if self.mode == "dual":
            fused = self.fusion(g, l)
            visual = self.visual_projection(v)
            return torch.cat([visual, fused], dim=-2)
        if self.mode == "all_in_mlp":
            return self.fusion(g, l, v)
        return torch.cat([v, g, l], dim=-2)


def as_tensor(emb: TokenEmbeddings, expected_source: str | None = None,
              dtype=torch.float32) -> torch.Tensor:
    if expected_source is not None and emb.source != expected_source:
        raise ValidationError(f"expected {expected_source} embeddings, got {emb.source}")
    return torch.as_tensor(emb.data, dtype=dtype)


def build_context(
    conditioner: Conditioner,
    global_emb: TokenEmbeddings,
    local_emb: TokenEmbeddings,
    visual_emb: TokenEmbeddings,
) -> torch.Tensor:
    """Context matrix from tagged embeddings, with source validation."""
    dtype = next(conditioner.parameters(), torch.empty(0)).dtype
    return conditioner(
        as_tensor(global_emb, SOURCE_GLOBAL, dtype),
        as_tensor(local_emb, SOURCE_LOCAL, dtype),
        as_tensor(visual_emb, SOURCE_VISUAL, dtype),
    )
