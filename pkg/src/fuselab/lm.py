"""Tiny decoder-only language model with per-layer fusion hook points.

The input sequence is the visual-token block followed by text tokens (learned
absolute positions over the whole sequence). Internal fusion hooks fire at
their aligned layers: "pre" hooks update the hidden state before the block,
"post" hooks after it, and "parallel" hooks add their branch alongside the
block's output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ConfigError, LengthError
from .layers import LayerNorm, Linear, TransformerBlock
from .rng import Rng


@dataclass
class LMConfig:
    depth: int = 12
    hidden: int = 128
    heads: int = 4
    vocab_size: int = 64
    max_seq: int = 192
    mlp_ratio: int = 2  # lean feed-forward keeps desk-scale steps fast

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")

    def to_dict(self) -> dict:
        return {"depth": self.depth, "hidden": self.hidden, "heads": self.heads,
                "vocab_size": self.vocab_size, "max_seq": self.max_seq,
                "mlp_ratio": self.mlp_ratio}

    @classmethod
    def from_dict(cls, d: dict) -> "LMConfig":
        return cls(**d)


@dataclass(frozen=True)
class SequenceLayout:
    """Positions of the visual block and text block within one sequence."""

    n_visual: int
    n_text: int

    @property
    def visual_span(self) -> tuple[int, int]:
        return (0, self.n_visual)

    @property
    def text_span(self) -> tuple[int, int]:
        return (self.n_visual, self.n_visual + self.n_text)

    @property
    def total(self) -> int:
        return self.n_visual + self.n_text


class DecoderLM:
    def __init__(self, cfg: LMConfig, store: ParamStore, prefix: str, rng: Rng):
        self.cfg = cfg
        self.tok_emb = store.add(f"{prefix}.tok_emb",
                                 rng.truncated_normal((cfg.vocab_size, cfg.hidden)))
        self.pos_emb = store.add(f"{prefix}.pos_emb",
                                 rng.truncated_normal((cfg.max_seq, cfg.hidden)))
        self.blocks = [
            TransformerBlock(store, f"{prefix}.blocks.{i}", cfg.hidden, cfg.heads,
                             cfg.mlp_ratio, rng)
            for i in range(cfg.depth)
        ]
        self.ln_f = LayerNorm(store, f"{prefix}.ln_f", cfg.hidden)
        self.head = Linear(store, f"{prefix}.head", cfg.hidden, cfg.vocab_size, rng)

    def forward(self, visual: Tensor, text_ids: np.ndarray,
                hooks: dict | None = None) -> tuple[Tensor, SequenceLayout]:
        """Causal decode over [visual; text]; returns (logits, layout)."""
        hooks = hooks or {}
        text_ids = np.asarray(text_ids, dtype=np.int64)
        layout = SequenceLayout(n_visual=visual.shape[0], n_text=len(text_ids))
        if layout.total > self.cfg.max_seq:
            raise LengthError(
                f"sequence of {layout.total} tokens exceeds max_seq {self.cfg.max_seq}")
        for lm_layer in hooks:
            if not (1 <= lm_layer <= self.cfg.depth):
                raise ConfigError(f"hook at LM layer {lm_layer} outside depth {self.cfg.depth}")

        parts = [visual]
        if layout.n_text:
            parts.append(ad.embedding(self.tok_emb.tensor, text_ids))
        x = parts[0] if len(parts) == 1 else ad.concat_tokendim(parts)
        x = ad.add(x, ad.slice_rows(self.pos_emb.tensor, 0, layout.total))

        for i, block in enumerate(self.blocks, start=1):
            hook = hooks.get(i)
            if hook is None:
                x = block(x, causal=True)
            elif hook.placement == "pre":
                x = block(hook.apply(x), causal=True)
            elif hook.placement == "post":
                x = hook.apply(block(x, causal=True))
            elif hook.placement == "parallel":
                x = ad.add(block(x, causal=True), hook.branch(x))
            else:
                raise ConfigError(f"unknown hook placement '{hook.placement}'")

        return self.head(self.ln_f(x)), layout

    def loss_from_logits(self, logits: Tensor, layout: SequenceLayout,
                         text_ids: np.ndarray, answer_start: int) -> Tensor:
        """Next-token cross-entropy restricted to answer positions.

        ``answer_start`` is the index within the text block where answer
        tokens begin; the loss covers predicting text_ids[answer_start:].
        """
        text_ids = np.asarray(text_ids, dtype=np.int64)
        n = layout.total
        targets = np.zeros(n, dtype=np.int64)
        mask = np.zeros(n, dtype=bool)
        base = layout.n_visual
        for j in range(answer_start - 1, len(text_ids) - 1):
            targets[base + j] = text_ids[j + 1]
            mask[base + j] = True
        return ad.cross_entropy(logits, targets, mask)
