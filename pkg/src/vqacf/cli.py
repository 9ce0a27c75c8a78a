"""Command-line entry point wiring the full pipeline.

Subcommands mirror the pipeline stages 1:1: gen-data, train-vqa, train-cf,
explain, eval, export-study. Every run writes a manifest next to its outputs;
nothing is shared between runs except files.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .checkpoints import CheckpointError
from .config import Config, ConfigError, config_hash, config_to_dict, load_config
from .eval_metrics import (
    CounterfactualRecord,
    build_metrics_report,
    export_panels,
    export_study_bundle,
    generate_records,
    save_report,
)
from .generator import build_language_embedding, composite, generate, load_generator
from .gradcam import grad_cam, to_attention_map
from .objectives import TrainingDivergenceError
from .synth_data import (
    BalanceError,
    PlacementError,
    TemplateExhaustionError,
    VocabularyError,
    generate_dataset,
    load_dataset,
    save_dataset,
    tokenize,
)
from .training import train_cf, train_vqa
from .vqa_core import InputError, load_vqa, vqa_forward

OUTPUT_ROOT_ENV = "VQACF_OUT_ROOT"

_PIPELINE_ERRORS = (
    ConfigError,
    CheckpointError,
    TrainingDivergenceError,
    PlacementError,
    TemplateExhaustionError,
    BalanceError,
    VocabularyError,
    InputError,
    FileNotFoundError,
    ValueError,
    OSError,
)


def _git_commit() -> str | None:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5
        )
        return out.stdout.strip() or None
    except Exception:
        return None


def _resolve_out(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root:
        return Path(root) / command
    raise ConfigError(f"--out is required (or set {OUTPUT_ROOT_ENV})")


def write_run_manifest(
    out_dir: Path, command: str, config: Config | None, outputs: list[str], argv: list[str]
) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "config": config_to_dict(config) if config is not None else None,
        "config_hash": config_hash(config) if config is not None else None,
        "package_version": __version__,
        "git_commit": _git_commit(),
        "timestamp_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "outputs": outputs,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def _load_splits(data_dir: str, splits: list[str]):
    return {split: load_dataset(data_dir, split) for split in splits}


def cmd_gen_data(args, argv) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.dataset.train_seed = args.seed
        config.dataset.val_seed = args.seed + 10_000_019
    out = _resolve_out(args, "gen-data")
    splits = generate_dataset(config.dataset)
    save_dataset(splits, out, config.dataset)
    outputs = [str(out / split / "manifest.jsonl") for split in splits]
    write_run_manifest(out, "gen-data", config, outputs, argv)
    print(f"wrote {sum(len(v) for v in splits.values())} samples to {out}")
    return 0


def cmd_train_vqa(args, argv) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.vqa_train.seed = args.seed
    out = _resolve_out(args, "train-vqa")
    splits = _load_splits(args.data, ["train", "val"])
    model, metrics = train_vqa(
        splits["train"], splits["val"], config.dataset,
        config.vqa_train, config.model, out_dir=out,
    )
    with open(out / "vqa_metrics.json", "w") as fh:
        json.dump(metrics["final"], fh, indent=2)
    write_run_manifest(out, "train-vqa", config, [str(out / "vqa.pt")], argv)
    final = metrics["final"]
    print(f"val accuracy: {final.get('val_accuracy', float('nan')):.4f}")
    return 0


def cmd_train_cf(args, argv) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.cf_train.seed = args.seed
    out = _resolve_out(args, "train-cf")
    splits = _load_splits(args.data, ["train"])
    vqa = load_vqa(args.vqa_checkpoint)
    train_cf(
        splits["train"], vqa, config.cf_train,
        generator_config=config.generator_config(),
        discriminator_config=config.discriminator_config(),
        out_dir=out,
    )
    outputs = [str(out / "generator.pt"), str(out / "discriminator.pt")]
    write_run_manifest(out, "train-cf", config, outputs, argv)
    print(f"generator checkpoint: {out / 'generator.pt'}")
    return 0


def cmd_explain(args, argv) -> int:
    out = _resolve_out(args, "explain")
    vqa = load_vqa(args.vqa_checkpoint)
    gen = load_generator(args.gen_checkpoint)
    image = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
    tokens = tokenize(args.question, vqa.question_vocab)
    h, w = image.shape[:2]

    result = vqa_forward(vqa, image, tokens)
    attention = to_attention_map(grad_cam(result.conv_activations, result.logit_gradient()), h, w)
    language = build_language_embedding(result.q_bar, result.a_bar, m=gen.config.resolved_m())
    raw = generate(image, attention, language, gen)
    counterfactual = np.clip(composite(raw, image, attention), 0.0, 1.0).astype(np.float32)
    result_cf = vqa_forward(vqa, counterfactual, tokens)
    attention_cf = to_attention_map(
        grad_cam(result_cf.conv_activations, result_cf.logit_gradient()), h, w
    )

    record = CounterfactualRecord(
        sample_id=Path(args.image).stem,
        split="explain",
        question_type="adhoc",
        question_text=args.question,
        image=image,
        attention=attention,
        generated=raw,
        counterfactual=counterfactual,
        attention_counterfactual=attention_cf,
        answer=result.predicted,
        answer_counterfactual=result_cf.predicted,
        answer_text=vqa.answer_vocab[result.predicted],
        answer_counterfactual_text=vqa.answer_vocab[result_cf.predicted],
        target_mask=np.zeros((h, w), dtype=bool),
    )
    manifest = export_panels([record], out)
    write_run_manifest(out, "explain", None, [m["panel"] for m in manifest], argv)
    print(f"answer: {record.answer_text}")
    print(f"counterfactual answer: {record.answer_counterfactual_text}")
    print(f"panel: {manifest[0]['panel']}")
    return 0


def _build_records(args, config: Config, splits: list[str]):
    vqa = load_vqa(args.vqa_checkpoint)
    gen = load_generator(args.gen_checkpoint)
    data = _load_splits(args.data, splits)
    records = []
    for split, samples in data.items():
        records.extend(generate_records(samples, vqa, gen, split))
    return records


def cmd_eval(args, argv) -> int:
    config = load_config(args.config)
    out = _resolve_out(args, "eval")
    splits = ["train", "val"] if args.split == "both" else [args.split]
    records = _build_records(args, config, splits)
    report = build_metrics_report(records, attention_threshold=config.eval.attention_threshold)
    paths = save_report(report, out)
    panel_records = records[: config.eval.panels]
    export_panels(panel_records, out / "panels", opacity=config.eval.panel_opacity)
    write_run_manifest(out, "eval", config, [paths["json"], paths["text"]], argv)
    print(Path(paths["text"]).read_text())
    return 0


def cmd_export_study(args, argv) -> int:
    config = load_config(args.config)
    n = args.n if args.n is not None else config.study.n
    seed = args.seed if args.seed is not None else config.study.seed
    out = _resolve_out(args, "export-study")
    records = _build_records(args, config, [args.split])
    bundle_path = export_study_bundle(records, n=n, seed=seed, out_dir=out)
    write_run_manifest(out, "export-study", config, [str(bundle_path)], argv)
    print(f"bundle: {bundle_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vqacf",
        description="Counterfactual image explanations for VQA models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, out=True, seed=True):
        if config:
            p.add_argument("--config", default=None, help="YAML config file (defaults apply)")
        if out:
            p.add_argument("--out", default=None, help=f"output directory (or ${OUTPUT_ROOT_ENV})")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="seed override")

    p = sub.add_parser("gen-data", help="generate the synthetic shapes-VQA dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-vqa", help="train the VQA model")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.set_defaults(func=cmd_train_vqa)

    p = sub.add_parser("train-cf", help="train the counterfactual generator")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vqa-checkpoint", required=True)
    p.set_defaults(func=cmd_train_cf)

    p = sub.add_parser("explain", help="explain one image-question pair")
    common(p, config=False, seed=False)
    p.add_argument("--image", required=True, help="RGB image file")
    p.add_argument("--question", required=True)
    p.add_argument("--vqa-checkpoint", required=True)
    p.add_argument("--gen-checkpoint", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("eval", help="batch evaluation and metrics report")
    common(p, seed=False)
    p.add_argument("--data", required=True)
    p.add_argument("--vqa-checkpoint", required=True)
    p.add_argument("--gen-checkpoint", required=True)
    p.add_argument("--split", choices=["train", "val", "both"], default="both")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-study", help="export a rater study bundle")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vqa-checkpoint", required=True)
    p.add_argument("--gen-checkpoint", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.set_defaults(func=cmd_export_study)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except _PIPELINE_ERRORS as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
