"""Command-line front end: train, sample, edit, evaluate and inspect toy R-DiT runs.

    python -m apps.cli.rdit_cli train --config ingest/run_config.yaml --steps 200
    python -m apps.cli.rdit_cli generate --config ingest/run_config.yaml --scene ingest/scenes/sample.yaml
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

# Ensure project root is on Python path for imports
sys.path.insert(0, str(Path(__file__).resolve().parents[2]))

from core.checkpoint import load_checkpoint, restore_training, save_checkpoint, training_checkpoint
from core.conditioning import Vocabulary, conditioning_from_scene
from core.config import RunConfig, load_run_config
from core.diagnostics import latent_to_ppm, write_mask_dump
from core.edit_filter import filter_edit_pair, make_edit_pair
from core.errors import ConfigError, RDitError
from core.evaluation import (compare_disentanglement, disentanglement_scenes, evaluate_disentanglement,
                             evaluate_editing, evaluate_generation, heldout_scenes, write_report)
from core.geometry_bank import fit_geometry_bank, scene_geometry_samples
from core.ingest_utils import load_scene_folder
from core.metrics import identity_consistency
from core.rdit import RDiT, prepare_sequence
from core.sampler import edit_sample, euler_sample
from core.scene_parser import (EditPairRecord, SceneParser, dump_geometry_bank, dump_scenes,
                               parse_geometry_bank)
from core.scene_world import SceneSpec, oracle_detect, render_scene, sample_scene
from core.trainer import new_train_state, train

logger = logging.getLogger("rdit")

CHECKPOINT_NAME = "checkpoint.rdit"
EVAL_TASKS = ("generation", "editing", "identity", "disentanglement")


# ---------------------------------------------------------------- helpers

def _resolve_config(args) -> RunConfig:
    config = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
        config.sampler.seed = args.seed
    if getattr(args, "out", None):
        config.paths.output_dir = args.out
    if args.command == "train" and args.steps is not None:
        config.train.steps = args.steps
    elif getattr(args, "steps", None) is not None:
        config.sampler.steps = args.steps
    if getattr(args, "cfg", None) is not None:
        config.sampler.cfg_scale = args.cfg
    config.validate()
    logging.basicConfig(level=config.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logger.info(f"resolved config:\n{config.dump()}")
    return config


def _load_scenes(path: Optional[str], what: str) -> List[SceneSpec]:
    if not path:
        raise ConfigError(f"--{what} is required for this command")
    p = Path(path)
    doc = load_scene_folder(p) if p.is_dir() else SceneParser.from_file(p)
    if not doc.scenes:
        raise ConfigError(f"{path} contains no scenes")
    return doc.scenes


def _pick(scenes: List[SceneSpec], index: int) -> SceneSpec:
    if not -len(scenes) <= index < len(scenes):
        raise ConfigError(f"--index {index} out of range for {len(scenes)} scenes")
    return scenes[index]


def _checkpoint_path(args, config: RunConfig) -> Path:
    if getattr(args, "checkpoint", None):
        return Path(args.checkpoint)
    if config.paths.checkpoint:
        return Path(config.paths.checkpoint)
    return config.output_dir / CHECKPOINT_NAME


def _load_model(path: Path, config: RunConfig):
    ckpt = load_checkpoint(path)
    vocab = Vocabulary(tuple(ckpt.vocab)) if ckpt.vocab else Vocabulary.default()
    model = RDiT(config.model, len(vocab), np.random.default_rng([config.seed, 0]))
    model.load_state_dict(ckpt.tensors)
    return model, vocab


def _load_bank(config: RunConfig):
    if not config.paths.geometry_bank:
        return None
    return parse_geometry_bank(Path(config.paths.geometry_bank).read_text())


def _write_latent(latent, out_dir: Path, stem: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / f"{stem}.npy", latent.values)
    (out_dir / f"{stem}.ppm").write_bytes(latent_to_ppm(latent))
    logger.info(f"wrote {out_dir / stem}.npy and .ppm")


# ---------------------------------------------------------------- commands

def cmd_train(args, config: RunConfig) -> int:
    out_dir = config.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(config.dump())
    vocab = Vocabulary.default()
    model = RDiT(config.model, len(vocab), np.random.default_rng([config.seed, 0]))
    state = new_train_state(model, config.train, config.seed)
    ckpt_path = out_dir / CHECKPOINT_NAME
    resume = args.resume or config.paths.checkpoint
    if resume:
        restore_training(load_checkpoint(resume), model, state)
        logger.info(f"resuming from step {state.step}")

    def checkpoint(s):
        save_checkpoint(ckpt_path, training_checkpoint(model, s, config.to_dict(), vocab))

    train(model, state, config.train, config.dropout, config.world, config.dataset, vocab, config.seed,
          out_dir=out_dir, checkpoint=checkpoint, bank=_load_bank(config))
    checkpoint(state)
    return 0


def cmd_generate(args, config: RunConfig) -> int:
    model, vocab = _load_model(_checkpoint_path(args, config), config)
    spec = _pick(_load_scenes(args.scene, "scene"), args.index)
    cond = conditioning_from_scene(spec, vocab, with_layout=not args.no_layout, prompt_len=config.model.prompt_len)
    latent = euler_sample(model, cond, config.sampler)
    _write_latent(latent, config.output_dir, "generated")
    for det in oracle_detect(latent, config.world.detector()):
        logger.info(f"detected {det.triplet} confidence {det.confidence:.3f}")
    return 0


def cmd_edit(args, config: RunConfig) -> int:
    model, vocab = _load_model(_checkpoint_path(args, config), config)
    source_spec = _pick(_load_scenes(args.source, "source"), args.index)
    target_spec = _pick(_load_scenes(args.scene, "scene"), args.index) if args.scene else source_spec
    if not source_spec.instances or not target_spec.instances:
        raise ConfigError("edit needs source and target scenes with at least one instance")
    source = render_scene(source_spec)
    cond = conditioning_from_scene(target_spec, vocab, prompt_len=config.model.prompt_len)
    edited = edit_sample(model, source, cond, config.sampler)
    _write_latent(edited, config.output_dir, "edited")
    inst = source_spec.instances[0]
    report = filter_edit_pair(source, edited, target_spec.instances[0].triplet, (inst.subject_box, inst.object_box),
                              threshold=config.world.identity_threshold, detector=config.world.detector())
    detected = (report.detected.subject_box, report.detected.object_box) if report.detected else None
    identity = identity_consistency(source, edited, (inst.subject_box, inst.object_box), detected)
    logger.info(f"edit {report.reason}: hoi correct {report.hoi_correct}, identity {identity.score}")
    return 0


def cmd_eval(args, config: RunConfig) -> int:
    model, vocab = _load_model(_checkpoint_path(args, config), config)
    count = args.count or config.dataset.eval_targets
    seed = config.dataset.eval_seed
    detector = config.world.detector()
    if args.task == "generation":
        frame = evaluate_generation(model, heldout_scenes(config.world, count, seed), vocab, config.sampler, detector)
    elif args.task in ("editing", "identity"):
        frame = evaluate_editing(model, heldout_scenes(config.world, count, seed), vocab, config.sampler, detector,
                                 same_action=args.task == "identity", seed=seed)
    else:
        scenes = disentanglement_scenes(config.world, count, seed)
        frame = evaluate_disentanglement(model, scenes, vocab, config.sampler, detector)
        if args.ablation:
            ablated_config = replace(config, model=replace(config.model, use_hoi_rope=False))
            ablated, _ = _load_model(Path(args.ablation), ablated_config)
            other = evaluate_disentanglement(ablated, scenes, vocab, config.sampler, detector)
            write_report(compare_disentanglement(frame, other), config.output_dir / "eval_disentanglement_sign_test.csv")
    write_report(frame, config.output_dir / f"eval_{args.task}.csv")
    return 0


def cmd_dump_mask(args, config: RunConfig) -> int:
    vocab = Vocabulary.default()
    model = RDiT(config.model, len(vocab), np.random.default_rng([config.seed, 0]))
    spec = _pick(_load_scenes(args.scene, "scene"), args.index)
    cond = conditioning_from_scene(spec, vocab, with_layout=not args.no_layout, prompt_len=config.model.prompt_len)
    prepared = prepare_sequence(model, cond, with_source=args.editing)
    write_mask_dump(prepared.mask, config.output_dir)
    return 0


def cmd_fit_geometry(args, config: RunConfig) -> int:
    if args.scene:
        scenes = _load_scenes(args.scene, "scene")
    else:
        rng = np.random.default_rng([config.seed, 4])
        scenes = [sample_scene(rng, config.world) for _ in range(args.count)]
    bank = fit_geometry_bank(scene_geometry_samples(scenes))
    path = config.output_dir / "geometry_bank.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_geometry_bank(bank))
    logger.info(f"geometry bank with {len(bank.entries)} classes written to {path}")
    return 0


def cmd_sample_layout(args, config: RunConfig) -> int:
    bank_path = args.bank or config.paths.geometry_bank
    if not bank_path:
        raise ConfigError("--bank or paths.geometry_bank is required for sample-layout")
    bank = parse_geometry_bank(Path(bank_path).read_text())
    spec = _pick(_load_scenes(args.scene, "scene"), args.index)
    if not 0 <= args.instance < len(spec.instances):
        raise ConfigError(f"--instance {args.instance} out of range for a scene with {len(spec.instances)} instances")
    inst = spec.instances[args.instance]
    if inst.object_only:
        raise ConfigError(f"--instance {args.instance} is object-only; sample-layout needs an interaction")
    rng = np.random.default_rng([config.seed, 5])
    proposals = []
    for _ in range(args.count):
        bs, bo = bank.sample_layout((inst.action, inst.object), inst.subject_box, inst.object_box, rng, mode=args.mode)
        instances = list(spec.instances)
        instances[args.instance] = replace(inst, subject_box=bs.rounded(4), object_box=bo.rounded(4))
        proposals.append(replace(spec, instances=tuple(instances)))
    path = config.output_dir / "layouts.yaml"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_scenes(proposals))
    logger.info(f"{len(proposals)} layouts written to {path}")
    return 0


def cmd_make_scenes(args, config: RunConfig) -> int:
    rng = np.random.default_rng([config.seed, 6])
    scenes = [sample_scene(rng, config.world) for _ in range(args.count)]
    pairs = []
    if args.edit_pairs:
        bank = _load_bank(config)
        for spec in scenes:
            target = make_edit_pair(spec, rng, bank=bank)
            if target is spec:
                continue
            index = next(i for i, (a, b) in enumerate(zip(spec.instances, target.instances)) if a != b)
            src = spec.instances[index]
            report = filter_edit_pair(render_scene(spec), render_scene(target), target.instances[index].triplet,
                                      (src.subject_box, src.object_box), threshold=config.world.identity_threshold,
                                      detector=config.world.detector())
            if report.keep:
                pairs.append(EditPairRecord(spec, target, {"subject_box": report.detected.subject_box,
                                                           "object_box": report.detected.object_box}))
        logger.info(f"kept {len(pairs)} of {len(scenes)} edit pairs")
        scenes = []
    path = config.output_dir / ("edit_pairs.yaml" if args.edit_pairs else "scenes.yaml")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_scenes(scenes, pairs))
    logger.info(f"wrote {path}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "edit": cmd_edit,
    "eval": cmd_eval,
    "dump-mask": cmd_dump_mask,
    "fit-geometry": cmd_fit_geometry,
    "sample-layout": cmd_sample_layout,
    "make-scenes": cmd_make_scenes,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdit", description="Toy relational diffusion transformer")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="run config YAML")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (overrides paths.output_dir)")
        return p

    p = add("train", "train a model")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")

    for name, help_text in (("generate", "sample an image for a scene"), ("edit", "edit a source scene")):
        p = add(name, help_text)
        p.add_argument("--checkpoint")
        p.add_argument("--scene")
        p.add_argument("--index", type=int, default=0)
        p.add_argument("--steps", type=int, help="sampler steps")
        p.add_argument("--cfg", type=float, help="guidance scale")
        if name == "generate":
            p.add_argument("--no-layout", action="store_true")
        else:
            p.add_argument("--source", required=True)

    p = add("eval", "evaluate a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--task", choices=EVAL_TASKS, default="generation")
    p.add_argument("--count", type=int)
    p.add_argument("--ablation", help="checkpoint trained without HOI RoPE, for the disentanglement sign test")
    p.add_argument("--steps", type=int, help="sampler steps")
    p.add_argument("--cfg", type=float, help="guidance scale")

    p = add("dump-mask", "write the attention mask of a scene as PGM and CSV")
    p.add_argument("--scene", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--editing", action="store_true", help="include the source image stream")
    p.add_argument("--no-layout", action="store_true")

    p = add("fit-geometry", "fit a geometry bank")
    p.add_argument("--scene", help="scene file or folder; sampled from the world when omitted")
    p.add_argument("--count", type=int, default=2000)

    p = add("sample-layout", "propose layouts from a geometry bank")
    p.add_argument("--bank")
    p.add_argument("--scene", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--instance", type=int, default=0)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--mode", choices=("large", "small", "both"))

    p = add("make-scenes", "sample scenes or filtered edit pairs")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--edit-pairs", action="store_true")
    return parser


def error_line(exc: Exception) -> str:
    return "ERROR " + json.dumps({"kind": type(exc).__name__, "message": str(exc)})


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _resolve_config(args)
        return COMMANDS[args.command](args, config)
    except (RDitError, OSError) as exc:
        print(error_line(exc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
