"""Command-line entry point: ``owqf generate|train|eval|ablate``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .config import RunConfig
from .evaluator import OPEN_ENDED, OPEN_SET, SCHEMA
from .model import Toggles
from .prompts import load_prompt_file
from .tensor import ConfigurationError
from .training import TrainingDiverged, Workspace, ablate, curve_json, evaluate, finetune, generate, \
    model_from_checkpoint, pretrain, save_checkpoint

log = logging.getLogger("owqf")


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _dumps(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _progress(stage_name):
    def report(step, loss):
        if step == 1 or step % 50 == 0:
            log.info("%s step %d loss %.4f", stage_name, step, loss)
    return report


def read_category_list(path, names: list[str]) -> list[int]:
    """A JSON list of category ids or names, or one id/name per line."""
    text = Path(path).read_text()
    try:
        items = json.loads(text)
    except json.JSONDecodeError:
        items = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not isinstance(items, list):
        raise ConfigurationError(f"{path}: category list must be a list")
    ids = []
    for it in items:
        if isinstance(it, int) or (isinstance(it, str) and it.isdigit()):
            k = int(it)
        elif it in names:
            k = names.index(it)
        else:
            raise ConfigurationError(f"{path}: unknown category {it!r}")
        if not 0 <= k < len(names):
            raise ConfigurationError(f"{path}: category id {k} out of range")
        ids.append(k)
    return sorted(set(ids))


def cmd_generate(cfg: RunConfig, args) -> int:
    paths = generate(cfg)
    manifest = {"schema": SCHEMA, "seed": cfg["data.seed"],
                "files": {k: {"path": p.name, "sha256": hashlib.sha256(p.read_bytes()).hexdigest()}
                          for k, p in sorted(paths.items())}}
    out = _write(paths["train"].parent / "manifest.json", _dumps(manifest))
    print(out)
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    ws = Workspace.from_config(cfg, require_files=True)
    out = cfg.out_dir
    toggles = cfg.toggles()
    base, c1 = pretrain(cfg, ws, out / "checkpoints", _progress("pretrain"))
    model, c2 = finetune(cfg, ws, base.state_dict(), toggles, out / "checkpoints", _progress("finetune"))
    meta = {"schema": SCHEMA, "config": cfg.values, "toggles": asdict(toggles)}
    save_checkpoint(out / "model.npz", model, meta)
    _write(out / "loss_curve.json", curve_json([c1, c2], toggles, int(cfg["seed"])))
    print(out / "model.npz")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    mode = args.mode or OPEN_SET
    ws = Workspace.from_config(cfg, require_files=True)
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.out_dir / "model.npz"
    model, meta, _ = model_from_checkpoint(ckpt, cfg)
    toggles = Toggles(**meta["toggles"]) if "toggles" in meta else cfg.toggles()
    predefined: list[int] = []
    if mode == OPEN_ENDED:
        if args.category_list:
            log.warning("open-ended mode ignores the category list %s", args.category_list)
    elif args.category_list:
        predefined = read_category_list(args.category_list, ws.table.names)
    override = load_prompt_file(args.prompts) if args.prompts else None
    report = evaluate(model, ws, toggles, mode, predefined, prompt_override=override)
    out = _write(cfg.out_dir / f"report_{mode}.json", report.dumps())
    print(out)
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    table = ablate(cfg, progress=None)
    out = _write(cfg.out_dir / "ablation.json", _dumps(table))
    print(out)
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="owqf", description="Open-world query-fusion detector at desk scale.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON config with flat dotted keys")
    p.add_argument("--mode", choices=[OPEN_SET, OPEN_ENDED], help="evaluation mode (eval only)")
    p.add_argument("--category-list", help="predefined categories for open-set evaluation")
    p.add_argument("--prompts", help="JSON file of user-supplied point prompts")
    p.add_argument("--checkpoint", help="model checkpoint (default: <out>/model.npz)")
    p.add_argument("--out", help="output directory, overrides out_dir")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config)
    except (ConfigurationError, json.JSONDecodeError) as e:
        parser.error(str(e))
    except OSError as e:
        parser.error(f"cannot read config: {e}")
    if args.out:
        cfg = cfg.replace(out_dir=args.out)
    if args.command == "eval" and (args.mode or OPEN_SET) == OPEN_SET and not args.category_list:
        parser.error("open-set evaluation needs --category-list (or use --mode open-ended)")
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigurationError as e:
        parser.error(str(e))
    except TrainingDiverged as e:
        log.error("%s", e)
        return 1
    except OSError as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
