"""Count-conditioned prompt encoder.

A prompt is a bag of (class, count) targets plus a background id. Each
target becomes one token whose embedding is the concatenation of a
learned class embedding and a learned count embedding; the background
contributes a single context token. Counts are embedded as integers, not
text, so the counting mechanism is isolated from language modeling.
"""

from __future__ import annotations

import torch
from torch import nn

from .latents import Conditioning
from .scenes import BACKGROUND_COLORS, ClassVocabulary, PromptSpec

__all__ = ["PromptEncoder", "encode_prompt"]


class PromptEncoder(nn.Module):
    """Embedding tables for class, count, and background tokens.

    Token layout: token 0 is the background context token; tokens
    1..K are class tokens in ascending class-id order. Class token
    embedding = [class slice | count slice], each ``embed_dim // 2`` wide.
    """

    def __init__(self, vocab: ClassVocabulary, embed_dim: int = 64, max_count: int = 10):
        super().__init__()
        if embed_dim % 2 != 0:
            raise ValueError("embed_dim must be even (class/count halves)")
        self.vocab = vocab
        self.embed_dim = embed_dim
        self.max_count = max_count
        half = embed_dim // 2
        self.class_embed = nn.Embedding(len(vocab), half)
        self.count_embed = nn.Embedding(max_count + 1, half)
        self.background_embed = nn.Embedding(len(BACKGROUND_COLORS), embed_dim)
        self._index_of = {c.class_id: i for i, c in enumerate(vocab.classes)}

    def forward(self, prompt: PromptSpec) -> Conditioning:
        device = self.class_embed.weight.device
        rows = [self.background_embed(torch.tensor(prompt.background_id, device=device))]
        token_classes: dict[int, int | None] = {0: None}
        for tok, (class_id, count) in enumerate(prompt.sorted_targets(), start=1):
            if class_id not in self._index_of:
                raise KeyError(f"class id {class_id} not in vocabulary")
            if not 1 <= count <= self.max_count:
                raise ValueError(f"count {count} outside encoder range [1, {self.max_count}]")
            cls_vec = self.class_embed(torch.tensor(self._index_of[class_id], device=device))
            cnt_vec = self.count_embed(torch.tensor(count, device=device))
            rows.append(torch.cat([cls_vec, cnt_vec]))
            token_classes[tok] = class_id
        return Conditioning(token_embeddings=torch.stack(rows), token_classes=token_classes)


def encode_prompt(prompt: PromptSpec, encoder: PromptEncoder) -> Conditioning:
    """Encode a prompt with the model's embedding tables (no grad)."""
    with torch.no_grad():
        return encoder(prompt)
