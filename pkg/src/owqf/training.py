"""Two-stage training, checkpoints, evaluation and the ablation runner.

Stage one trains the specific-only detector end to end; stage two freezes
everything except each layer's self-attention and box heads (plus the point
query builder) and fine-tunes with general queries and denoising points.
"""
from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .denoising import group_sizes, sample_group
from .evaluator import OPEN_ENDED, SCHEMA, EvalReport, evaluate_mode
from .model import Detector, Toggles
from .nn import Adam
from .prompts import PromptConfig, PromptPoint, simulate_prompts
from .tensor import Tape
from .world import CategoryTable, Dataset, FeaturePyramid, Scene, World, generate_dataset, read_scenes, \
    read_table, write_dataset

log = logging.getLogger(__name__)

BASELINE = Toggles(False, False, False)
ABLATION_ROWS = (
    Toggles(False, False, False),
    Toggles(True, False, False),
    Toggles(True, True, False),
    Toggles(True, True, True),
)


class TrainingDiverged(RuntimeError):
    pass


# --- data ---------------------------------------------------------------------

def dataset_paths(cfg: RunConfig) -> dict[str, Path]:
    root = cfg.out_dir / "data"
    return {"train": root / "train.jsonl", "eval": root / "eval.jsonl", "table": root / "categories.json"}


def build_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    seed = int(cfg["data.seed"])
    table = CategoryTable.build(tuple(cfg["data.buckets"]), cfg["data.d_text"], seed)
    mix = tuple(cfg["data.category_mix"])
    n_obj = tuple(cfg["data.n_objects"])
    train = generate_dataset(seed, cfg["data.n_train"], table, n_obj, mix)
    evald = generate_dataset(seed, cfg["data.n_eval"], table, n_obj, mix, first_id=cfg["data.n_train"])
    return train, evald


def generate(cfg: RunConfig) -> dict[str, Path]:
    paths = dataset_paths(cfg)
    train, evald = build_datasets(cfg)
    write_dataset(train, paths["train"], paths["table"])
    write_dataset(evald, paths["eval"], paths["table"])
    return paths


class Workspace:
    """Datasets, the feature renderer and per-image caches."""

    def __init__(self, cfg: RunConfig, train: Dataset, evald: Dataset):
        self.cfg = cfg
        self.train = train
        self.eval = evald
        self.table = train.table
        self.world = World(self.table, cfg["decoder.dim"], cfg["data.levels"], cfg["data.grid"], cfg["data.seed"])
        self._pyramids: dict[int, FeaturePyramid] = {}
        self._prompts: dict[tuple, list[PromptPoint]] = {}

    @classmethod
    def from_config(cls, cfg: RunConfig, require_files: bool = False) -> "Workspace":
        paths = dataset_paths(cfg)
        if all(p.exists() for p in paths.values()):
            table = read_table(paths["table"])
            return cls(cfg, Dataset(table, read_scenes(paths["train"]), cfg["data.seed"]),
                       Dataset(table, read_scenes(paths["eval"]), cfg["data.seed"]))
        if require_files:
            raise FileNotFoundError(f"dataset not found under {paths['train'].parent}; run `owqf generate` first")
        return cls(cfg, *build_datasets(cfg))

    def pyramid(self, scene: Scene) -> FeaturePyramid:
        fp = self._pyramids.get(scene.image_id)
        if fp is None:
            fp = self._pyramids[scene.image_id] = self.world.render(scene)
        return fp

    def prompts(self, scene: Scene, pcfg: PromptConfig | None = None) -> list[PromptPoint]:
        pcfg = pcfg or self.cfg.prompt()
        key = (scene.image_id, pcfg)
        pts = self._prompts.get(key)
        if pts is None:
            pts = self._prompts[key] = simulate_prompts(scene, pcfg, self.cfg["data.seed"], len(self.table))
        # callers may rescore points; hand out copies
        return [PromptPoint(p.x, p.y, p.score, p.proposed_label) for p in pts]


# --- checkpoints --------------------------------------------------------------

def save_checkpoint(path, model: Detector, meta: dict):
    """Parameters as a zip of .npy members (fixed timestamps) plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in model.state_dict().items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        state = {k: z[k].copy() for k in z.files}
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return state, meta


def model_from_checkpoint(path, cfg: RunConfig | None = None) -> tuple[Detector, dict, RunConfig]:
    state, meta = load_checkpoint(path)
    if cfg is None:
        cfg = RunConfig(meta.get("config", {}), env=False)
    model = Detector(cfg.model_config(), seed=cfg["seed"])
    model.load_state_dict(state)
    return model, meta, cfg


# --- training -----------------------------------------------------------------

@dataclass
class StageLog:
    stage: str
    losses: list[float] = field(default_factory=list)


def _batches(rng: np.random.Generator, n: int, batch: int):
    order = np.zeros(0, dtype=np.intp)
    while True:
        while len(order) < batch:
            order = np.concatenate([order, rng.permutation(n)])
        yield order[:batch]
        order = order[batch:]


def sample_vocab(labels, n_categories: int, keep: float, rng: np.random.Generator) -> list[int]:
    """Categories present in the image plus each absent one with probability ``keep``."""
    present = set(int(c) for c in labels)
    draw = rng.random(n_categories) < keep
    return [c for c in range(n_categories) if c in present or draw[c]]


def image_loss(model: Detector, ws: Workspace, scene: Scene, toggles: Toggles, dn_seed,
               cfg: RunConfig, stage: str):
    """Forward + loss for one training image; the caller owns the tape."""
    fp = ws.pyramid(scene)
    vocab = sample_vocab(scene.gt_labels, len(ws.table), cfg["data.vocab_keep"],
                         np.random.default_rng([*dn_seed, 6]))
    col = {c: i for i, c in enumerate(vocab)}
    prompts = ws.prompts(scene) if toggles.gs_fusion and stage == "finetune" else None
    dn, sizes = None, ()
    use_dn = stage == "finetune" and toggles.gs_fusion and toggles.denoising_points
    if use_dn and scene.gt_boxes:
        dcfg = cfg.denoising()
        dn = sample_group(scene.gt_boxes, dcfg, np.random.default_rng(dn_seed))
        sizes = group_sizes(len(scene.gt_boxes), dcfg)
    res = model.forward(fp, ws.table.embeddings[vocab], prompts, dn, sizes, toggles)
    return model.loss(res, scene.boxes_array(), [col[int(c)] for c in scene.gt_labels], cfg.weights(), cfg["loss.dn_weight"],
                      include_empty_general=cfg["loss.include_empty_general"])


def train_stage(model: Detector, ws: Workspace, stage: str, toggles: Toggles, cfg: RunConfig,
                steps: int | None = None, checkpoint_dir: Path | None = None,
                progress: Callable[[int, float], None] | None = None) -> StageLog:
    """Run one stage; aborts with :class:`TrainingDiverged` on a non-finite loss."""
    steps = cfg["optim.pretrain_steps" if stage == "pretrain" else "optim.steps"] if steps is None else steps
    params = model.set_stage(stage, toggles.gs_fusion)
    opt = Adam(params, lr=cfg["optim.lr"])
    seed = int(cfg["seed"])
    stage_id = 0 if stage == "pretrain" else 1
    batches = _batches(np.random.default_rng([seed, stage_id, 11]), len(ws.train), int(cfg["optim.batch"]))
    every = int(cfg["optim.checkpoint_every"])
    out = StageLog(stage)
    last_good = (0, math.nan)
    for step in range(1, steps + 1):
        idx = next(batches)
        opt.zero_grad()
        total = 0.0
        for j, i in enumerate(idx):
            scene = ws.train.scenes[int(i)]
            with Tape() as tape:
                rep = image_loss(model, ws, scene, toggles, [seed, stage_id, step, j, 5], cfg, stage)
            if not math.isfinite(rep.total):
                raise TrainingDiverged(
                    f"{stage} loss became non-finite at step {step} (image {scene.image_id}); "
                    f"last finite step {last_good[0]} had loss {last_good[1]:.6g}")
            tape.backward(rep.loss, np.full_like(rep.loss.data, 1.0 / len(idx)))
            total += rep.total
        opt.step()
        mean = total / len(idx)
        last_good = (step, mean)
        out.losses.append(mean)
        if progress is not None:
            progress(step, mean)
        if checkpoint_dir is not None and every > 0 and step % every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"{stage}_{step:06d}.npz", model,
                            {"schema": SCHEMA, "stage": stage, "step": step})
    opt.zero_grad()
    return out


def pretrain(cfg: RunConfig, ws: Workspace, checkpoint_dir: Path | None = None, progress=None):
    model = Detector(cfg.model_config(), seed=cfg["seed"])
    curve = train_stage(model, ws, "pretrain", BASELINE, cfg, checkpoint_dir=checkpoint_dir, progress=progress)
    return model, curve


def finetune(cfg: RunConfig, ws: Workspace, pretrained: dict[str, np.ndarray], toggles: Toggles,
             checkpoint_dir: Path | None = None, progress=None):
    model = Detector(cfg.model_config(), seed=cfg["seed"])
    model.load_state_dict(pretrained)
    curve = train_stage(model, ws, "finetune", toggles, cfg, checkpoint_dir=checkpoint_dir, progress=progress)
    return model, curve


def curve_json(curves: Sequence[StageLog], toggles: Toggles, seed: int) -> str:
    doc = {"schema": SCHEMA, "seed": seed, "toggles": asdict(toggles),
           "stages": {c.stage: [float(v) for v in c.losses] for c in curves}}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


# --- evaluation ---------------------------------------------------------------

class Predictor:
    """Adapter giving a trained detector the ``detect(scene, ...)`` interface."""

    def __init__(self, model: Detector, ws: Workspace, toggles: Toggles, prompt_cfg: PromptConfig | None = None,
                 prompt_override: dict[int, list[PromptPoint]] | None = None):
        self.model = model
        self.ws = ws
        self.toggles = toggles
        self.prompt_cfg = prompt_cfg or ws.cfg.prompt()
        self.prompt_override = prompt_override or {}

    def prompts_for(self, scene: Scene) -> list[PromptPoint]:
        if scene.image_id in self.prompt_override:
            return [PromptPoint(p.x, p.y, p.score, p.proposed_label) for p in self.prompt_override[scene.image_id]]
        return self.ws.prompts(scene, self.prompt_cfg)

    def detect(self, scene: Scene, mode: str, predefined: Sequence[int], prompts=None):
        pts = self.prompts_for(scene) if prompts is None else prompts
        return self.model.detect_from(self.ws.pyramid(scene), scene.image_id, self.ws.table.embeddings, mode,
                                      predefined, pts, self.toggles)


def evaluate(model: Detector, ws: Workspace, toggles: Toggles, mode: str | None,
             predefined: Sequence[int] | None, prompt_cfg: PromptConfig | None = None,
             prompt_override: dict | None = None) -> EvalReport:
    predictor = Predictor(model, ws, toggles, prompt_cfg, prompt_override)
    if mode == OPEN_ENDED:
        predefined = []
    return evaluate_mode(predictor, ws.eval, mode, predefined, ws.cfg["eval.per_class_cap"])


# --- ablation -----------------------------------------------------------------

def ablate(cfg: RunConfig, ws: Workspace | None = None, progress=None) -> dict:
    """Pretrain once, then fine-tune and evaluate the four ablation rows from that state."""
    ws = ws or Workspace.from_config(cfg)
    base, _ = pretrain(cfg, ws, progress=progress)
    state = base.state_dict()
    all_ids = list(range(len(ws.table)))
    rows = []
    for toggles in ABLATION_ROWS:
        model, _ = finetune(cfg, ws, state, toggles, progress=progress)
        rep = evaluate(model, ws, toggles, "open-set", all_ids)
        rows.append({"toggles": asdict(toggles), "ap": rep.ap, "ap_r": rep.ap_r, "ap_c": rep.ap_c,
                     "ap_f": rep.ap_f})
    return {"schema": SCHEMA, "seed": int(cfg["seed"]), "rows": rows}
