"""Flat dotted-key run configuration stored as one JSON document."""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path

from .denoising import DenoisingConfig
from .losses import CostWeights
from .model import ModelConfig, Toggles
from .prompts import PromptConfig
from .tensor import ConfigurationError

DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "runs/default",
    "data.seed": 7,
    "data.n_train": 2000,
    "data.n_eval": 500,
    "data.buckets": [2, 4, 6],
    "data.category_mix": [0.1, 0.3, 0.6],
    "data.n_objects": [0, 6],
    "data.d_text": 16,
    "data.grid": 16,
    "data.levels": 2,
    "data.vocab_keep": 0.5,
    "dn.lambda1": 1.0,
    "dn.lambda2": 1.0,
    "dn.groups": 3,
    "dn.enabled": True,
    "queries.n_learnable": 900,
    "queries.n_specific": 300,
    "general_query.add_point_feature": False,
    "decoder.layers": 6,
    "decoder.dim": 64,
    "decoder.heads": 4,
    "decoder.aux_loss": True,
    "loss.w_class": 2.0,
    "loss.w_l1": 5.0,
    "loss.w_giou": 2.0,
    "loss.dn_weight": 1.0,
    "loss.include_empty_general": False,
    "prompt.fidelity": 0.9,
    "prompt.threshold": 0.3,
    "prompt.max_points": 20,
    "prompt.label_noise": 0.1,
    "optim.lr": 1e-3,
    "optim.pretrain_steps": 5000,
    "optim.steps": 5000,
    "optim.batch": 8,
    "optim.checkpoint_every": 1000,
    "ablation.gs_fusion": True,
    "ablation.ranked_queries": True,
    "ablation.denoising_points": True,
    "eval.per_class_cap": 1000,
    "eval.topk": 100,
}


class RunConfig:
    """Validated mapping of dotted keys; unknown keys are rejected."""

    def __init__(self, values: dict | None = None, env: bool = True):
        self.values = copy.deepcopy(DEFAULTS)
        self.update(values or {})
        if env and os.environ.get("OWQF_SEED"):
            self.values["seed"] = int(os.environ["OWQF_SEED"])

    @classmethod
    def load(cls, path, env: bool = True) -> "RunConfig":
        doc = json.loads(Path(path).read_text())
        if not isinstance(doc, dict):
            raise ConfigurationError(f"{path}: config must be a JSON object")
        return cls(doc, env)

    def update(self, values: dict) -> "RunConfig":
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in values.items():
            self.values[k] = copy.deepcopy(v)
        return self

    def replace(self, **values) -> "RunConfig":
        out = RunConfig(self.values, env=False)
        return out.update({k.replace("__", "."): v for k, v in values.items()})

    def __getitem__(self, key):
        return self.values[key]

    def dumps(self) -> str:
        return json.dumps(self.values, indent=1, sort_keys=True) + "\n"

    @property
    def out_dir(self) -> Path:
        return Path(self["out_dir"])

    def model_config(self) -> ModelConfig:
        return ModelConfig(dim=self["decoder.dim"], heads=self["decoder.heads"], layers=self["decoder.layers"],
                           d_text=self["data.d_text"], n_learnable=self["queries.n_learnable"],
                           n_specific=self["queries.n_specific"],
                           add_point_feature=self["general_query.add_point_feature"],
                           aux_loss=self["decoder.aux_loss"], topk=self["eval.topk"])

    def toggles(self) -> Toggles:
        fusion = bool(self["ablation.gs_fusion"])
        return Toggles(fusion, fusion and bool(self["ablation.ranked_queries"]),
                       fusion and bool(self["ablation.denoising_points"]) and bool(self["dn.enabled"]))

    def denoising(self) -> DenoisingConfig:
        return DenoisingConfig(self["dn.lambda1"], self["dn.lambda2"], self["dn.groups"], self["seed"],
                               self["dn.enabled"])

    def weights(self) -> CostWeights:
        return CostWeights(self["loss.w_class"], self["loss.w_l1"], self["loss.w_giou"])

    def prompt(self) -> PromptConfig:
        return PromptConfig(self["prompt.fidelity"], self["prompt.threshold"], self["prompt.max_points"],
                            self["prompt.label_noise"], grid=self["data.grid"])
