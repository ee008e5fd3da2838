"""General/specific query fusion decoder.

One layer: concatenated self-attention over [denoising | general | specific]
queries, then shared query-to-text and query-to-image cross-attention and a
shared FFN (all row-wise, so applying them to the split partitions or to the
concatenation is the same computation), then unshared box heads and the
logit-space box update.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import refine_boxes
from .nn import MLP, Attention, LayerNorm, Linear, Module
from .queries import ClassificationHead, QueryBank
from .tensor import ShapeError, Tensor

TRAINABLE_GROUPS = ("self_attn", "box_head_general", "box_head_specific")


def _frequencies(d: int) -> np.ndarray:
    n = max(1, d // 8)
    return np.pi * (16.0 ** (np.arange(n) / max(n - 1, 1)))


def sine_encoding(boxes: np.ndarray, d: int) -> np.ndarray:
    """Sinusoidal embedding of (cx, cy, w, h) rows, zero-padded to width ``d``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    ang = boxes[:, :, None] * _frequencies(d)
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(len(boxes), -1)[:, :d]
    if enc.shape[1] < d:
        enc = np.pad(enc, ((0, 0), (0, d - enc.shape[1])))
    return enc


def sine_encoding_tensor(boxes: Tensor, d: int) -> Tensor:
    """:func:`sine_encoding` with a gradient back to the boxes."""
    freqs = _frequencies(d)
    ang = boxes.data[:, :, None] * freqs
    n = len(boxes.data)

    def bw(g):
        full = np.zeros((n, 4 * 2 * len(freqs)))
        width = min(d, full.shape[1])
        full[:, :width] = g[:, :width]
        full = full.reshape(n, 4, 2, len(freqs))
        return ((full[:, :, 0] * np.cos(ang) - full[:, :, 1] * np.sin(ang)) * freqs).sum(axis=2),
    return T.op(sine_encoding(boxes.data, d), [boxes], bw)


class FusionLayer(Module):
    def __init__(self, rng, d: int, heads: int, ffn: int | None = None):
        self.self_attn = Attention(rng, d, heads)
        self.norm1 = LayerNorm(d)
        self.text_attn = Attention(rng, d, heads)
        self.norm2 = LayerNorm(d)
        self.image_attn = Attention(rng, d, heads)
        self.norm3 = LayerNorm(d)
        self.ffn = MLP(rng, d, ffn or 2 * d, d)
        self.norm4 = LayerNorm(d)
        self.box_head_general = MLP(rng, d, d, 4, zero_last=True)
        self.box_head_specific = MLP(rng, d, d, 4, zero_last=True)
        self._d = d

    def __call__(self, queries: Tensor, boxes: Tensor, n_first: int, text: Tensor,
                 image_keys: Tensor, image_values: Tensor, mask=None) -> tuple[Tensor, Tensor]:
        """Update concatenated rows; the first ``n_first`` rows use the general box head."""
        n = queries.shape[0]
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (n, n):
                raise ShapeError(f"mask shape {mask.shape} does not match {n} queries")
        if n == 0:
            return queries, boxes
        pos = sine_encoding_tensor(boxes, self._d)
        qk = queries + pos
        x = self.norm1(queries + self.self_attn(qk, qk, queries, mask))
        x = self.norm2(x + self.text_attn(x, text, text))
        x = self.norm3(x + self.image_attn(x + pos, image_keys, image_values))
        x = self.norm4(x + self.ffn(x))
        parts = []
        if n_first:
            parts.append(self.box_head_general(x[:n_first]))
        if n - n_first:
            parts.append(self.box_head_specific(x[n_first:]))
        delta = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
        return x, refine_boxes(boxes, delta)


@dataclass
class DecodeOutput:
    bank: QueryBank
    trajectory: list[QueryBank]
    logits: Tensor
    layer_logits: list[Tensor]

    def partition_logits(self, layer: int = -1) -> dict[str, Tensor]:
        lg = self.layer_logits[layer]
        b = self.trajectory[layer]
        a, m = b.n_dn, b.n_dn + b.n_general
        return {"dn": lg[:a], "general": lg[a:m], "specific": lg[m:]}


class DecoderStack(Module):
    def __init__(self, rng, d: int = 64, heads: int = 4, n_layers: int = 6, d_text: int = 16):
        self.text_in = Linear(rng, d_text, d)
        self.layers = [FusionLayer(rng, d, heads) for _ in range(n_layers)]
        self.cls_head = ClassificationHead(rng, d, d_text)
        self._d = d

    def image_memory(self, tokens: np.ndarray, token_boxes: np.ndarray) -> tuple[Tensor, Tensor]:
        return Tensor(tokens + sine_encoding(token_boxes, self._d)), Tensor(tokens)

    def text_memory(self, text: Tensor) -> Tensor:
        return self.text_in(text)

    def trainable_groups(self) -> dict[str, Module]:
        return {f"layers.{i}.{g}": getattr(layer, g)
                for i, layer in enumerate(self.layers) for g in TRAINABLE_GROUPS}


def _concat_rows(bank: QueryBank) -> tuple[Tensor, Tensor]:
    qs = [t for t in (bank.dn_queries, bank.general_queries, bank.specific_queries) if t is not None]
    bs = [t for t in (bank.dn_boxes, bank.general_boxes, bank.specific_boxes) if t is not None]
    qs = [t for t in qs if t.shape[0]] or qs[-1:]
    bs = [t for t in bs if t.shape[0]] or bs[-1:]
    if len(qs) == 1:
        return qs[0], bs[0]
    return T.concat(qs, axis=0), T.concat(bs, axis=0)


def fusion_layer_forward(layer: FusionLayer, qb: QueryBank, image_keys: Tensor, image_values: Tensor,
                         text_memory: Tensor, mask=None) -> QueryBank:
    """One fusion layer on a :class:`QueryBank`; partitions keep their sizes."""
    q, b = _concat_rows(qb)
    total = qb.n_dn + qb.n_general + qb.n_specific
    if mask is not None and np.asarray(mask).shape != (total, total):
        raise ShapeError(f"mask shape {np.asarray(mask).shape} != {(total, total)}")
    q, b = layer(q, b, qb.n_dn + qb.n_general, text_memory, image_keys, image_values, mask)
    return qb.replace(q, b)


def decode(stack: DecoderStack, qb: QueryBank, image_keys: Tensor, image_values: Tensor, text: Tensor,
           mask=None, n_layers: int | None = None) -> DecodeOutput:
    """Run the stack; logits rows follow [dn | general | specific] order per layer.

    ``DecodeOutput.logits`` holds only the general and specific rows of the final layer.
    """
    layers = stack.layers if n_layers is None else stack.layers[:n_layers]
    memory = stack.text_memory(text)
    trajectory, layer_logits = [], []
    for layer in layers:
        qb = fusion_layer_forward(layer, qb, image_keys, image_values, memory, mask)
        trajectory.append(qb)
        q, _ = _concat_rows(qb)
        layer_logits.append(stack.cls_head(q, text))
    if not layers:
        q, _ = _concat_rows(qb)
        layer_logits.append(stack.cls_head(q, text))
    final = layer_logits[-1][qb.n_dn:]
    return DecodeOutput(qb, trajectory or [qb], final, layer_logits)


def freeze_mask(stack: DecoderStack) -> set[str]:
    """Parameter names that stay trainable during fusion fine-tuning."""
    return {f"{prefix}.{name}" for prefix, mod in stack.trainable_groups().items()
            for name, _ in mod.named_parameters()}


def apply_freeze(stack: DecoderStack) -> set[str]:
    keep = freeze_mask(stack)
    for name, p in stack.named_parameters():
        p.requires_grad = name in keep
    return keep
