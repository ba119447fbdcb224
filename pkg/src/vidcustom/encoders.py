"""Frozen stand-ins for the text encoder and the appearance image encoder."""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .unet import Attention, FeedForward, sinusoidal

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"


class TextSequence(NamedTuple):
    embeddings: torch.Tensor  # (B, tokens, text_dim)
    token_ids: torch.Tensor  # (B, tokens)


def load_vocabulary(path=None) -> list[str]:
    """One token per line; the line number is the token id."""
    if path is None:
        text = resources.files("vidcustom").joinpath("vocab.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    words = [w.strip() for w in text.splitlines() if w.strip()]
    if len(set(words)) != len(words):
        raise ValueError("vocabulary contains duplicate tokens")
    for special in (PAD, UNK, BOS, EOS):
        if special not in words:
            raise ValueError(f"vocabulary lacks {special}")
    return words


class VocabularyTable(nn.Module):
    """Token embedding rows: a frozen base block plus appended pseudo-word rows."""

    def __init__(self, words: list[str], dim: int, generator: torch.Generator):
        super().__init__()
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        self.register_buffer("base", torch.randn(len(words), dim, generator=generator))
        self.pseudo = nn.ParameterList()

    @property
    def dim(self) -> int:
        return self.base.shape[1]

    def __len__(self):
        return len(self.words)

    def rows(self) -> torch.Tensor:
        if not len(self.pseudo):
            return self.base
        return torch.cat([self.base, *[p[None] for p in self.pseudo]], dim=0)

    @property
    def frozen_mask(self) -> torch.Tensor:
        mask = torch.ones(len(self.words), dtype=torch.bool)
        for i, p in enumerate(self.pseudo):
            mask[self.base.shape[0] + i] = not p.requires_grad
        return mask

    def token_id(self, word: str) -> int:
        return self.index.get(word.lower(), self.index[UNK])

    def tokenize(self, prompt: str, length: int) -> list[int]:
        ids = [self.index[BOS]] + [self.token_id(w) for w in prompt.lower().split()] + [self.index[EOS]]
        if len(ids) > length:
            raise ValueError(f"prompt has {len(ids)} tokens, limit is {length}")
        return ids + [self.index[PAD]] * (length - len(ids))


def add_pseudo_word(table: VocabularyTable, word: str, init_token) -> tuple[int, VocabularyTable]:
    """Append a trainable row for ``word`` copied from an existing token's row."""
    init_id = table.index.get(init_token) if isinstance(init_token, str) else init_token
    if init_id is None or not 0 <= int(init_id) < len(table):
        raise KeyError(f"unknown init token {init_token!r}")
    word = word.lower()
    if word in table.index:
        raise ValueError(f"token {word!r} already in vocabulary")
    row = table.rows()[int(init_id)].detach().clone()
    table.pseudo.append(nn.Parameter(row, requires_grad=True))
    table.words.append(word)
    table.index[word] = len(table.words) - 1
    return table.index[word], table


class TextEncoder(nn.Module):
    """Embedding lookup + fixed positions + one causal attention block, all frozen.

    Causal masking means a token only influences its own and later positions.
    """

    def __init__(self, words, dim=64, heads=4, max_tokens=16, seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.max_tokens = max_tokens
        self.table = VocabularyTable(words, dim, gen)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 1)
            self.norm1 = nn.LayerNorm(dim)
            self.attn = Attention(dim, heads, causal=True)
            self.norm2 = nn.LayerNorm(dim)
            self.ff = FeedForward(dim, mult=2)
            self.norm_out = nn.LayerNorm(dim)
        self.register_buffer("positions", sinusoidal(torch.arange(max_tokens), dim).float())
        self.requires_grad_(False)

    @property
    def dim(self):
        return self.table.dim

    def tokenize(self, prompts) -> torch.Tensor:
        if isinstance(prompts, str):
            prompts = [prompts]
        return torch.tensor([self.table.tokenize(p, self.max_tokens) for p in prompts], dtype=torch.long)

    def encode_text(self, token_ids: torch.Tensor) -> TextSequence:
        if token_ids.ndim == 1:
            token_ids = token_ids[None]
        if (token_ids < 0).any() or (token_ids >= len(self.table)).any():
            raise KeyError("token id outside vocabulary")
        rows = self.table.rows()
        x = F.embedding(token_ids, rows) + self.positions[: token_ids.shape[1]].to(rows.dtype)
        x = x + self.attn(self.norm1(x))
        x = x + self.ff(self.norm2(x))
        return TextSequence(self.norm_out(x), token_ids)

    def encode(self, prompts) -> torch.Tensor:
        return self.encode_text(self.tokenize(prompts)).embeddings

    def null(self, batch: int = 1) -> torch.Tensor:
        """Embedding of the empty prompt, used as the unconditional branch."""
        return self.encode([""] * batch)


class ImageEncoder(nn.Module):
    """Three strided convs + global average pool -> (B, 1, cond_dim)."""

    def __init__(self, in_channels=4, hw=(8, 8), cond_dim=32, seed=0):
        super().__init__()
        self.hw = tuple(hw)
        self.in_channels = in_channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv2d(in_channels, 16, 3, stride=2, padding=1), nn.GELU(),
                nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.GELU(),
                nn.Conv2d(32, cond_dim, 3, stride=2, padding=1),
            )
        self.cond_dim = cond_dim
        self.requires_grad_(False)

    def encode_image(self, frame: torch.Tensor) -> torch.Tensor:
        """``frame`` is (H, W, C) or (B, H, W, C) channels-last latent."""
        if frame.ndim == 3:
            frame = frame[None]
        if frame.ndim != 4 or tuple(frame.shape[1:]) != (*self.hw, self.in_channels):
            raise ValueError(f"frame shape {tuple(frame.shape)} does not match {(*self.hw, self.in_channels)}")
        y = self.net(frame.permute(0, 3, 1, 2).to(self.net[0].weight.dtype)).mean(dim=(2, 3))
        return F.layer_norm(y, (self.cond_dim,))[:, None, :]
