"""The detector: query construction, fusion decoding, losses and inference."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .decoder import DecodeOutput, DecoderStack, decode
from .denoising import NoisePoint, denoising_attention_mask
from .evaluator import OPEN_ENDED, OPEN_SET, Detection
from .geometry import Box
from .losses import CostWeights, Terms, denoising_loss, grounding_loss, total_loss, zero_generation
from .nn import Module
from .queries import QueryBank, QueryBuilder, interpolate_points
from .tensor import Tensor
from .world import FeaturePyramid

GENERAL_BUILDER_PARTS = ("adapter", "adapter_norm", "point_box_head", "learnable")
SPECIFIC_BUILDER_PARTS = ("enc_proj", "enc_box_head", "specific_bank")


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    heads: int = 4
    layers: int = 6
    d_text: int = 16
    n_learnable: int = 900
    n_specific: int = 300
    add_point_feature: bool = False
    aux_loss: bool = True
    topk: int = 100


@dataclass(frozen=True)
class Toggles:
    gs_fusion: bool = True
    ranked_queries: bool = True
    denoising_points: bool = True


@dataclass
class ForwardResult:
    out: DecodeOutput
    proposal_logits: Tensor
    proposal_boxes: Tensor
    dn_points: list = field(default_factory=list)
    general_points: list = field(default_factory=list)


def _empty(d: int) -> Tensor:
    return Tensor(np.zeros((0, d)))


def _sum_terms(terms: Sequence[Terms]) -> Terms | None:
    if not terms:
        return None
    loss = terms[0].loss
    for t in terms[1:]:
        loss = loss + t.loss
    return Terms(loss, sum(t.cls for t in terms), sum(t.l1 for t in terms), sum(t.giou for t in terms),
                 terms[-1].assignment)


class Detector(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.builder = QueryBuilder(rng, cfg.dim, cfg.n_learnable, cfg.n_specific, cfg.add_point_feature)
        self.decoder = DecoderStack(rng, cfg.dim, cfg.heads, cfg.layers, cfg.d_text)
        self._cfg = cfg

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    # --- trainable-set management ------------------------------------------
    def set_stage(self, stage: str, gs_fusion: bool = True) -> list[T.Tensor]:
        """Mark parameters trainable for ``pretrain`` or ``finetune``; returns them.

        Fine-tuning keeps only each layer's self-attention and two box heads in
        the decoder, plus the point adapter, point box head and learnable bank.
        """
        from .decoder import apply_freeze

        for p in self.parameters():
            p.requires_grad = False
        b = self.builder
        if stage == "pretrain":
            self.decoder.set_trainable(True)
            for n in SPECIFIC_BUILDER_PARTS:
                _set(getattr(b, n), True)
        elif stage == "finetune":
            apply_freeze(self.decoder)
            if gs_fusion:
                for n in GENERAL_BUILDER_PARTS:
                    _set(getattr(b, n), True)
        else:
            raise ValueError(f"unknown stage {stage!r}")
        return [p for p in self.parameters() if p.requires_grad]

    # --- forward -------------------------------------------------------------
    def forward(self, fp: FeaturePyramid, text_emb: np.ndarray, prompts: Sequence | None = None,
                dn_points: Sequence[NoisePoint] | None = None, dn_groups: Sequence[int] = (),
                toggles: Toggles = Toggles()) -> ForwardResult:
        d = self._cfg.dim
        text = Tensor(np.asarray(text_emb, dtype=np.float64))
        cls_head = self.decoder.cls_head
        keys, values = self.decoder.image_memory(fp.tokens(), fp.token_boxes())
        sq, sb, prop_logits, _ = self.builder.specific_partition(fp, cls_head, text)
        bank = QueryBank(_empty(d), Tensor(np.zeros((0, 4))), sq, sb)
        general_points: list = []
        dn_ordered: list = []
        sizes: list[int] = []
        if toggles.gs_fusion and prompts:
            xs = [p.x for p in prompts]
            ys = [p.y for p in prompts]
            feats = Tensor(interpolate_points(fp, xs, ys))
            boxes, _, _ = self.builder.point_boxes(feats, xs, ys, cls_head, text)
            gq, gb, gsc, order = self.builder.general_partition(
                feats, boxes, [p.score for p in prompts], toggles.ranked_queries)
            bank.general_queries, bank.general_boxes = gq, gb
            bank.general_scores, bank.general_source = gsc, order
            general_points = [prompts[i] for i in order]
        if toggles.gs_fusion and toggles.denoising_points and dn_points:
            qs, bs = [], []
            start = 0
            for g in dn_groups:
                pts = list(dn_points[start:start + g])
                start += g
                xs = [p.x for p in pts]
                ys = [p.y for p in pts]
                feats = Tensor(interpolate_points(fp, xs, ys))
                boxes, score_logit, _ = self.builder.point_boxes(feats, xs, ys, cls_head, text)
                for p, s in zip(pts, score_logit.data):
                    p.score = float(1.0 / (1.0 + np.exp(-s)))
                q, b, _, order = self.builder.general_partition(
                    feats, boxes, score_logit.data, toggles.ranked_queries)
                qs.append(q)
                bs.append(b)
                dn_ordered.extend(pts[i] for i in order)
                sizes.append(len(order))
            bank.dn_queries = T.concat(qs, 0) if len(qs) > 1 else qs[0]
            bank.dn_boxes = T.concat(bs, 0) if len(bs) > 1 else bs[0]
            bank.dn_group_sizes = sizes
        mask = None
        if sizes:
            mask = denoising_attention_mask(bank.n_general, bank.n_specific, sizes)
        out = decode(self.decoder, bank, keys, values, text, mask)
        return ForwardResult(out, prop_logits, sb, dn_ordered, general_points)

    # --- training loss -------------------------------------------------------
    def loss(self, res: ForwardResult, gt_boxes: np.ndarray, gt_labels, weights: CostWeights = CostWeights(),
             dn_weight: float = 1.0, proposal_loss: bool = True, generation_hook=zero_generation,
             include_empty_general: bool = False):
        out = res.out
        layers = range(len(out.trajectory)) if self._cfg.aux_loss else [len(out.trajectory) - 1]
        spec, gen, dn = [], [], []
        for li in layers:
            lg = out.partition_logits(li)
            bank = out.trajectory[li]
            spec.append(grounding_loss(bank.specific_boxes, lg["specific"], gt_boxes, gt_labels, weights))
            gen.append(grounding_loss(bank.general_boxes, lg["general"], gt_boxes, gt_labels, weights))
            if bank.n_dn:
                dn.append(denoising_loss(bank.dn_boxes, lg["dn"], res.dn_points, gt_boxes, gt_labels, weights))
        if proposal_loss:
            spec.append(grounding_loss(res.proposal_boxes, res.proposal_logits, gt_boxes, gt_labels, weights))
        return total_loss(_sum_terms(gen), _sum_terms(spec), _sum_terms(dn), generation_hook,
                          dn_weight=dn_weight, n_general=out.bank.n_general,
                          include_empty_general=include_empty_general)

    # --- inference -----------------------------------------------------------
    def detect_from(self, fp: FeaturePyramid, image_id: int, table_embeddings: np.ndarray, mode: str,
                    predefined: Sequence[int], prompts: Sequence | None, toggles: Toggles) -> list[Detection]:
        """Detections for one image.

        Open-set: specific queries score the predefined categories, general
        queries the predefined plus discovered ones.  Open-ended: both score
        only the discovered categories and carry label embeddings.
        """
        discovered = sorted({int(p.proposed_label) for p in (prompts or []) if p.proposed_label >= 0}) \
            if toggles.gs_fusion or mode == OPEN_ENDED else []
        if mode == OPEN_ENDED:
            vocab = discovered
            spec_ids = gen_ids = vocab
        else:
            vocab = sorted(set(predefined) | set(discovered))
            spec_ids, gen_ids = sorted(set(predefined)), vocab
        if not vocab:
            return []
        col = {c: i for i, c in enumerate(vocab)}
        with T.no_grad():
            res = self.forward(fp, table_embeddings[vocab], prompts if toggles.gs_fusion else None,
                               toggles=Toggles(toggles.gs_fusion, toggles.ranked_queries, False))
        out = res.out
        lg = out.partition_logits(-1)
        cand = []
        for part, ids, boxes in (("specific", spec_ids, out.bank.specific_boxes),
                                 ("general", gen_ids, out.bank.general_boxes)):
            if not ids or boxes.shape[0] == 0:
                continue
            cols = [col[c] for c in ids]
            prob = 1.0 / (1.0 + np.exp(-lg[part].data[:, cols]))
            q, k = np.nonzero(np.ones_like(prob, dtype=bool))
            for qi, ki, s in zip(q, k, prob.ravel()):
                cand.append((-s, len(cand), boxes.data[qi], ids[ki]))
        cand.sort(key=lambda c: (c[0], c[1]))
        dets = []
        for neg_s, _, box, label in cand[: self._cfg.topk]:
            if mode == OPEN_ENDED:
                dets.append(Detection(image_id, Box(*box), -neg_s, -1, table_embeddings[label]))
            else:
                dets.append(Detection(image_id, Box(*box), -neg_s, int(label)))
        return dets


def _set(mod, flag: bool):
    if isinstance(mod, Module):
        mod.set_trainable(flag)
    else:
        mod.requires_grad = flag
