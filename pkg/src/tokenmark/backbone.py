"""Toy vision encoder and causal language model.

Both are deliberately small so the region mechanism can be trained on a CPU.
Visual tokens are laid out frame-major, then row-major, and always precede
the text in the language model's input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from . import vocab
from .errors import CapacityError, DimensionError, ValidationError
from .numerics import LayerNorm, LinearLayer, Tensor


def sinusoidal_grid_encoding(h: int, w: int, dim: int) -> np.ndarray:
    """Fixed 2-D sin/cos encoding, shape (h, w, dim): half the channels for rows, half for columns.

    Frequencies are spread evenly over (0, pi] relative to the grid length, so
    two different cells on a short axis get nearly orthogonal codes.
    """
    half = dim // 2
    enc = np.zeros((h, w, dim))

    def one_axis(n, channels):
        k = (channels + 1) // 2
        m = max(k + 1, -(-n // 2))
        freq = math.pi * np.arange(1, k + 1) / m
        angle = np.arange(n)[:, None] * freq
        table = np.zeros((n, channels))
        table[:, 0::2] = np.sin(angle)
        table[:, 1::2] = np.cos(angle[:, : channels // 2])
        return table

    enc[:, :, :half] = one_axis(h, half)[:, None, :]
    enc[:, :, half:] = one_axis(w, dim - half)[None, :, :]
    return enc


def extract_patches(video: np.ndarray, patch: int) -> np.ndarray:
    """(..., 3, H0, W0) -> (..., H, W, 3*p*p), patch vector ordered channel, row, column."""
    *lead, c, h0, w0 = video.shape
    if h0 % patch or w0 % patch:
        raise DimensionError(f"frame {h0}x{w0} is not divisible by patch size {patch}")
    h, w = h0 // patch, w0 // patch
    x = video.reshape(*lead, c, h, patch, w, patch)
    n = len(lead)
    axes = tuple(range(n)) + (n + 1, n + 3, n, n + 2, n + 4)
    return x.transpose(axes).reshape(*lead, h, w, c * patch * patch)


class VisionEncoder:
    def __init__(self, patch: int, d_model: int, grid: tuple[int, int], rng: np.random.Generator):
        self.patch = patch
        self.grid = grid
        self.embed = LinearLayer(3 * patch * patch, d_model, rng)
        self.position = sinusoidal_grid_encoding(*grid, d_model)

    def parameters(self) -> dict[str, Tensor]:
        return {f"embed.{k}": v for k, v in self.embed.parameters().items()}

    def encode_tokens(self, video: np.ndarray) -> Tensor:
        """(..., T, 3, H0, W0) -> channel-last tokens (..., T, H, W, D)."""
        patches = extract_patches(np.asarray(video, dtype=np.float64), self.patch)
        if patches.shape[-3:-1] != self.grid:
            raise DimensionError(f"video gives a {patches.shape[-3:-1]} grid, encoder expects {self.grid}")
        return nx.add(self.embed(Tensor(patches)), Tensor(self.position))

    def encode_frames(self, video: np.ndarray) -> Tensor:
        """(T, 3, H0, W0) -> V with shape (T, D, H, W); frames are encoded independently."""
        tokens = self.encode_tokens(video)
        n = tokens.ndim
        return nx.transpose(tokens, tuple(range(n - 3)) + (n - 1, n - 3, n - 2))


class Block:
    """Pre-norm transformer block with causal multi-head attention and a GELU MLP."""

    def __init__(self, d_model: int, n_heads: int, mlp_ratio: int, rng: np.random.Generator,
                 init_std: float, n_layers: int):
        if d_model % n_heads:
            raise ValidationError(f"d_model {d_model} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        resid_std = init_std / math.sqrt(2 * n_layers)
        self.ln1 = LayerNorm(d_model)
        self.query = LinearLayer(d_model, d_model, rng, std=init_std)
        # a key bias only shifts every score of a query equally, so it is left out
        self.key = LinearLayer(d_model, d_model, rng, std=init_std, bias=False)
        self.value = LinearLayer(d_model, d_model, rng, std=init_std)
        self.out = LinearLayer(d_model, d_model, rng, std=resid_std)
        self.ln2 = LayerNorm(d_model)
        self.fc = LinearLayer(d_model, mlp_ratio * d_model, rng, std=init_std)
        self.proj = LinearLayer(mlp_ratio * d_model, d_model, rng, std=resid_std)

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for name in ("ln1", "query", "key", "value", "out", "ln2", "fc", "proj"):
            for k, v in getattr(self, name).parameters().items():
                params[f"{name}.{k}"] = v
        return params

    def __call__(self, x: Tensor) -> Tensor:
        *lead, L, D = x.shape
        h = self.n_heads
        n = len(lead)
        y = self.ln1(x)
        q, k, v = (nx.transpose(layer(y).reshape(*lead, L, h, D // h), tuple(range(n)) + (n + 1, n, n + 2))
                   for layer in (self.query, self.key, self.value))  # (..., h, L, dh)
        att = nx.causal_attention(q, k, v)
        att = nx.transpose(att, tuple(range(n)) + (n + 1, n, n + 2)).reshape(*lead, L, D)
        x = nx.add(x, self.out(att))
        return nx.add(x, self.proj(nx.gelu(self.fc(self.ln2(x)))))


class ToyLM:
    """Causal transformer over a sequence of input embeddings."""

    def __init__(self, vocab_size: int, d_model: int, n_layers: int, n_heads: int, max_len: int,
                 rng: np.random.Generator, mlp_ratio: int = 4, init_std: float = 0.02):
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.token_embed = nx.parameter(rng.normal(0.0, init_std, size=(vocab_size, d_model)))
        self.pos_embed = nx.parameter(rng.normal(0.0, init_std, size=(max_len, d_model)))
        self.blocks = [Block(d_model, n_heads, mlp_ratio, rng, init_std, n_layers) for _ in range(n_layers)]
        self.ln_f = LayerNorm(d_model)
        self.head = LinearLayer(d_model, vocab_size, rng, std=init_std)

    def parameters(self) -> dict[str, Tensor]:
        params = {"token_embed": self.token_embed, "pos_embed": self.pos_embed}
        for i, block in enumerate(self.blocks):
            params.update({f"blocks.{i}.{k}": v for k, v in block.parameters().items()})
        params.update({f"ln_f.{k}": v for k, v in self.ln_f.parameters().items()})
        params.update({f"head.{k}": v for k, v in self.head.parameters().items()})
        return params

    def embed_tokens(self, ids) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValidationError("token id outside the vocabulary")
        return nx.embedding(self.token_embed, ids)

    def forward(self, x: Tensor, logits_from: int = 0) -> tuple[Tensor, Tensor]:
        """Run (..., L, D) embeddings; return final states and logits for positions >= ``logits_from``.

        Position p receives the learned positional embedding p, so visual tokens of
        frame t sit at the offset t*H*W and frames are distinguishable.
        """
        L = x.shape[-2]
        if L > self.max_len:
            raise CapacityError(f"sequence length {L} exceeds the maximum {self.max_len}")
        h = nx.add(x, nx.getitem(self.pos_embed, slice(0, L)))
        for block in self.blocks:
            h = block(h)
        h = self.ln_f(h)
        tail = h if logits_from == 0 else nx.getitem(h, (Ellipsis, slice(logits_from, None), slice(None)))
        return h, self.head(tail)


def llm_loss(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean next-token cross-entropy over the positions selected by ``loss_mask``."""
    return nx.cross_entropy(logits, targets, loss_mask)


@dataclass(frozen=True)
class PromptTemplate:
    """Instruction (with ``<region>`` slots) and answer, laid out as
    ``<bos> instruction answer <eos> <pad>...``. Logit j predicts token j+1;
    only answer tokens and the closing ``<eos>`` are supervised.
    """

    instruction: tuple[int, ...]
    answer: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.instruction) + len(self.answer) + 2

    def placeholder_positions(self) -> list[int]:
        return [i + 1 for i, tok in enumerate(self.instruction) if tok == vocab.REGION_ID]

    def build(self, text_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (input ids, next-token targets, loss mask), each of length ``text_len``."""
        if self.length > text_len:
            raise CapacityError(f"prompt needs {self.length} tokens, text length is {text_len}")
        seq = [vocab.BOS_ID, *self.instruction, *self.answer, vocab.EOS_ID]
        ids = np.full(text_len, vocab.PAD_ID, dtype=np.int64)
        ids[: len(seq)] = seq
        targets = np.full(text_len, vocab.PAD_ID, dtype=np.int64)
        targets[:-1] = ids[1:]
        mask = np.zeros(text_len, dtype=bool)
        first = len(self.instruction)  # logit at the last instruction token predicts answer[0]
        mask[first: first + len(self.answer) + 1] = True
        return ids, targets, mask
