"""Command-line entry point: reproducible runs with structured config echoes.

Every command writes its resolved configuration (including the seed) to
``config.json`` in the run directory and its results to ``metrics.json``;
reruns with identical arguments produce byte-identical metric files.  Errors
from the pipeline land in ``error.json`` plus a machine-readable line on
stderr, with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import baselines as bl
from .data import (
    VideoRecord,
    ViewKind,
    ViewLabel,
    WindowConfig,
    build_detection_samples,
    build_selector_samples,
    load_manifest,
    write_manifest,
)
from .detector import (
    AggregatorConfig,
    DetectorTrainConfig,
    HeadConfig,
    TrainSettings,
    load_checkpoint,
    save_checkpoint,
    train_detector,
)
from .encoders import EncoderBank, InputMask, build_vocab, save_vocab
from .errors import ViewSwitchError
from .metrics import (
    AGREEMENT_PRESETS,
    AnnotationInstance,
    EvalReport,
    balanced_report,
    filter_instances,
    mean_pairwise_kappa,
    scenario_csv,
    significance,
)
from .pseudolabel import (
    PseudoLabelMode,
    frame_accuracy,
    load_pseudo_label_tracks,
    pseudo_label_video,
    write_pseudo_labels,
)
from .selector import (
    JointFinetuneConfig,
    LimitedLabelSet,
    candidate_position_budget,
    finetune_selector,
    fresh_selector,
    init_from_detector,
)
from .synth import (
    GRAMMAR_PRESETS,
    CentroidClipClassifier,
    generate_corpus,
    grammar_to_dict,
    load_grammar,
    simulate_annotator_votes,
)

_CONFIG_SECTIONS = {
    "windowing": {"past_frames_s", "past_narrations_s", "delta_s", "frame_rate"},
    "model": {
        "preset",
        "num_layers",
        "num_heads",
        "model_dim",
        "feedforward_dim",
        "dropout",
        "max_base_positions",
        "head_hidden_dims",
    },
    "train": {
        "seed",
        "epochs",
        "batch_size",
        "learning_rate",
        "weight_decay",
        "patience",
        "val_fraction",
        "stride_s",
        "vocab_size",
    },
    "eval": {"agreement_threshold", "n_resamples", "by_scenario", "stride_s"},
    "paths": {"manifest", "out", "checkpoint", "labels", "votes", "oracle", "test_manifest"},
}


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ViewSwitchError("config file must hold a JSON object")
    for section, keys in cfg.items():
        if section not in _CONFIG_SECTIONS:
            raise ViewSwitchError(f"unknown config section {section!r}")
        unknown = set(keys) - _CONFIG_SECTIONS[section]
        if unknown:
            raise ViewSwitchError(
                f"unknown keys in config section {section!r}: {sorted(unknown)}"
            )
    return cfg


def _pick(flag_value, config: dict, section: str, key: str, default):
    if flag_value is not None:
        return flag_value
    return config.get(section, {}).get(key, default)


def _window_from(args, config) -> WindowConfig:
    return WindowConfig(
        past_frames_s=float(
            _pick(getattr(args, "tf", None), config, "windowing", "past_frames_s", 8.0)
        ),
        past_narrations_s=float(
            _pick(getattr(args, "tn", None), config, "windowing", "past_narrations_s", 32.0)
        ),
        delta_s=float(
            _pick(getattr(args, "delta", None), config, "windowing", "delta_s", 2.0)
        ),
        frame_rate=float(
            _pick(getattr(args, "rate", None), config, "windowing", "frame_rate", 4.0)
        ),
    )


def _aggregator_from(args, config) -> AggregatorConfig:
    preset = _pick(getattr(args, "model_preset", None), config, "model", "preset", "desk")
    base = AggregatorConfig.desk_preset() if preset == "desk" else AggregatorConfig()
    over = {}
    for flag, key in (("layers", "num_layers"), ("heads", "num_heads"), ("dim", "model_dim")):
        val = _pick(getattr(args, flag, None), config, "model", key, None)
        if val is not None:
            over[key] = int(val)
    return replace(base, **over) if over else base


def _train_settings_from(args, config) -> TrainSettings:
    return TrainSettings(
        seed=int(_pick(args.seed, config, "train", "seed", 0)),
        epochs=int(_pick(args.epochs, config, "train", "epochs", 30)),
        batch_size=int(_pick(args.batch_size, config, "train", "batch_size", 32)),
        learning_rate=float(_pick(args.lr, config, "train", "learning_rate", 1e-3)),
        weight_decay=float(_pick(args.weight_decay, config, "train", "weight_decay", 0.01)),
        patience=_pick(args.patience, config, "train", "patience", 10),
    )


def _write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _echo_config(out_dir: Path, command: str, payload: dict) -> None:
    _write_json(out_dir / "config.json", {"command": command, **payload})


def _jsonable(obj):
    if hasattr(obj, "value"):
        return obj.value
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth_gen(args) -> int:
    config = _load_config_file(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(_pick(args.seed, config, "train", "seed", 0))

    if args.grammar in GRAMMAR_PRESETS:
        overrides = {}
        if args.video_steps is not None:
            overrides["video_steps"] = int(args.video_steps)
        grammar = GRAMMAR_PRESETS[args.grammar](**overrides)
    else:
        grammar = load_grammar(args.grammar)
        if args.video_steps is not None:
            grammar = replace(grammar, video_steps=int(args.video_steps))

    records, oracle = generate_corpus(
        grammar, n_videos=int(args.n_videos), seed=seed, multiview=args.multiview
    )
    write_manifest(records, out / "manifest.jsonl")
    _write_json(out / "oracle.json", oracle.to_dict())

    window = _window_from(args, config)
    if args.multiview:
        from .selector import write_limited_labels

        sel_samples = build_selector_samples(records, window)
        write_limited_labels(sel_samples, out / "labels.jsonl")

    if args.with_votes:
        det_samples = build_detection_samples(records, window)
        ids = [f"{s.video_id}@{s.t:.3f}" for s in det_samples]
        votes = simulate_annotator_votes(
            [s.target.kind for s in det_samples],
            error_prob=float(args.vote_error),
            seed=seed + 7,
            instance_ids=ids,
        )
        with open(out / "votes.jsonl", "w", encoding="utf-8") as fh:
            for inst in votes:
                fh.write(
                    json.dumps(
                        {"instance_id": inst.instance_id, "votes": [v.value for v in inst.votes]}
                    )
                    + "\n"
                )

    switches = 0
    steps = 0
    for rec in records:
        kinds = [s.label.kind for s in rec.view_track]
        switches += sum(a != b for a, b in zip(kinds, kinds[1:]))
        steps += max(len(kinds) - 1, 1)
    _echo_config(
        out,
        "synth-gen",
        {
            "seed": seed,
            "n_videos": int(args.n_videos),
            "grammar": grammar_to_dict(grammar),
            "multiview": bool(args.multiview),
            "with_votes": bool(args.with_votes),
            "windowing": _jsonable(window),
        },
    )
    _write_json(
        out / "metrics.json",
        {
            "n_videos": len(records),
            "total_duration_s": sum(r.duration_s for r in records),
            "track_change_rate": switches / steps,
        },
    )
    return 0


def _attach_tracks(records: list[VideoRecord], tracks: dict) -> list[VideoRecord]:
    out = []
    for rec in records:
        if rec.video_id in tracks:
            out.append(rec.with_view_track(tracks[rec.video_id]))
        else:
            out.append(rec)
    return out


def cmd_pseudo_label(args) -> int:
    config = _load_config_file(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = load_manifest(args.manifest)
    oracle_path = args.oracle or str(Path(args.manifest).parent / "oracle.json")
    with open(oracle_path, "r", encoding="utf-8") as fh:
        classifier = CentroidClipClassifier.from_dict(json.load(fh))
    mode = PseudoLabelMode(args.mode)
    sets = [
        pseudo_label_video(
            rec,
            classifier,
            mode,
            threshold=float(args.threshold),
            min_shot_len_s=float(args.min_shot_len),
        )
        for rec in records
    ]
    write_pseudo_labels(sets, out / "pseudo_labels.jsonl")
    metrics: dict = {"mode": mode.value, "n_videos": len(records)}
    if all(r.view_track is not None for r in records):
        accs = [frame_accuracy(p, r) for p, r in zip(sets, records)]
        metrics["mean_frame_accuracy"] = sum(accs) / len(accs)
    _echo_config(
        out,
        "pseudo-label",
        {
            "manifest": args.manifest,
            "mode": mode.value,
            "threshold": float(args.threshold),
            "min_shot_len_s": float(args.min_shot_len),
            "oracle": oracle_path,
        },
    )
    _write_json(out / "metrics.json", metrics)
    return 0


def _input_mask_from_drops(drops: list[str]) -> InputMask:
    return InputMask(
        frames="F" not in drops,
        past_narrations="N" not in drops,
        next_narration="Nprime" not in drops,
    )


def cmd_train_detector(args, drops: list[str] | None = None) -> int:
    config = _load_config_file(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = load_manifest(args.manifest)
    if args.pseudo_labels:
        records = _attach_tracks(records, load_pseudo_label_tracks(args.pseudo_labels))
    window = _window_from(args, config)
    settings = _train_settings_from(args, config)
    mask = _input_mask_from_drops(drops or [])
    cfg = DetectorTrainConfig(
        window=window,
        aggregator=_aggregator_from(args, config),
        head=HeadConfig(),
        train=settings,
        val_fraction=float(_pick(args.val_fraction, config, "train", "val_fraction", 0.2)),
        stride_s=_pick(args.stride, config, "train", "stride_s", None),
        input_mask=mask,
        vocab_size=int(_pick(args.vocab_size, config, "train", "vocab_size", 4096)),
    )
    result = train_detector(records, cfg)
    save_checkpoint(
        out / "checkpoint.pt",
        result.model,
        component="detector",
        history=result.history,
        extra_config={"window": window, "input_mask": mask, "train": settings},
    )
    save_vocab(result.vocab, out / "vocab.json")
    best = max(
        (h.get("val_balanced_accuracy", float("nan")) for h in result.history),
        default=float("nan"),
    )
    _echo_config(
        out,
        "train-detector",
        {
            "manifest": args.manifest,
            "pseudo_labels": args.pseudo_labels,
            "windowing": _jsonable(window),
            "aggregator": _jsonable(cfg.aggregator),
            "train": _jsonable(settings),
            "input_mask": _jsonable(mask),
            "val_fraction": cfg.val_fraction,
        },
    )
    _write_json(
        out / "metrics.json",
        {
            "history": result.history,
            "best_val_balanced_accuracy": best,
            "n_epochs_run": len(result.history),
            "val_video_ids": result.val_video_ids,
        },
    )
    return 0


def cmd_finetune_selector(args) -> int:
    config = _load_config_file(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = load_manifest(args.manifest)
    window = _window_from(args, config)
    settings = _train_settings_from(args, config)
    budget = candidate_position_budget(window)

    detector, det_cfg, _ = load_checkpoint(args.checkpoint, expected_component="detector")
    if args.from_scratch:
        model = fresh_selector(detector, budget, seed=settings.seed)
    else:
        model = init_from_detector(detector, budget, seed=settings.seed)

    labels = LimitedLabelSet.from_file(args.labels, records, window)
    joint = JointFinetuneConfig(alpha=float(args.alpha)) if args.alpha is not None else None
    history = finetune_selector(
        model,
        labels,
        settings,
        joint=joint,
        subsample_n=int(args.labels_n) if args.labels_n is not None else None,
        subsample_seed=settings.seed,
    )
    save_checkpoint(
        out / "checkpoint.pt",
        model,
        component="selector",
        history=history,
        extra_config={"window": window, "train": settings},
    )
    _echo_config(
        out,
        "finetune-selector",
        {
            "manifest": args.manifest,
            "checkpoint": args.checkpoint,
            "labels": args.labels,
            "labels_n": args.labels_n,
            "from_scratch": bool(args.from_scratch),
            "alpha": args.alpha,
            "windowing": _jsonable(window),
            "train": _jsonable(settings),
        },
    )
    _write_json(
        out / "metrics.json",
        {
            "history": history,
            "n_labels_available": labels.count,
            "n_labels_used": min(labels.count, int(args.labels_n)) if args.labels_n else labels.count,
        },
    )
    return 0


def _load_votes(path: str) -> dict[str, AnnotationInstance]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            out[obj["instance_id"]] = AnnotationInstance(
                instance_id=obj["instance_id"],
                votes=tuple(ViewKind(v) for v in obj["votes"]),
            )
    return out


def _fresh_bank_for(records, seed: int, window: WindowConfig) -> EncoderBank:
    from .detector import derive_bank_config

    torch.manual_seed(seed)
    cfg = DetectorTrainConfig(window=window)
    bank_cfg = derive_bank_config(cfg, records[0].feature_dim)
    return EncoderBank(bank_cfg, build_vocab(records))


def cmd_eval(args) -> int:
    config = _load_config_file(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = load_manifest(args.manifest)
    window = _window_from(args, config)
    seed = int(_pick(args.seed, config, "train", "seed", 0))
    stride = _pick(args.stride, config, "eval", "stride_s", None)

    model = None
    bank = None
    task = args.task
    if args.system == "model":
        if not args.checkpoint:
            raise ViewSwitchError("--system model requires --checkpoint")
        model, ckpt_cfg, _ = load_checkpoint(args.checkpoint)
        bank = model.bank
        if task == "auto":
            task = "select" if model.aggregator_config.max_candidate_positions > 0 else "detect"
    else:
        name = bl.BaselineName(args.system.split(":", 1)[1])
        if task == "auto":
            task = "select" if name == bl.BaselineName.VN_SIM else "detect"

    if task == "select":
        samples = build_selector_samples(records, window, stride)
    else:
        samples = build_detection_samples(records, window, stride)
    if not samples:
        raise ViewSwitchError("no evaluable instances in the manifest")

    agreement = None
    if args.agreement_threshold:
        if not args.votes:
            raise ViewSwitchError("--agreement-threshold requires --votes")
        votes = _load_votes(args.votes)
        instances = []
        keyed = []
        for s in samples:
            base = s.base if hasattr(s, "base") else s
            key = f"{base.video_id}@{base.t:.3f}"
            if key in votes:
                instances.append(votes[key])
                keyed.append(s)
        threshold = AGREEMENT_PRESETS.get(args.agreement_threshold)
        if threshold is None:
            threshold = float(args.agreement_threshold)
        accepted = filter_instances(instances, threshold)
        accepted_ids = {a.instance_id: a for a in accepted}
        filtered = []
        for s, inst in zip(keyed, instances):
            acc = accepted_ids.get(inst.instance_id)
            if acc is None:
                continue
            base = s.base if hasattr(s, "base") else s
            new_base = replace(base, target=ViewLabel(acc.accepted_label, 1.0))
            if hasattr(s, "base"):
                s = replace(s, base=new_base)
            else:
                s = new_base
            filtered.append(s)
        samples = filtered
        if not samples:
            raise ViewSwitchError("agreement filter rejected every instance")
        agreement = mean_pairwise_kappa(instances)

    def predict_with(system: str):
        if system == "model":
            return model.predict_many(samples)
        name = bl.BaselineName(system.split(":", 1)[1])
        index = None
        needs_encoder = name in {
            bl.BaselineName.RETRIEVAL_F,
            bl.BaselineName.RETRIEVAL_N,
            bl.BaselineName.RETRIEVAL_NPRIME,
            bl.BaselineName.VN_SIM,
        }
        enc_bank = bank
        if needs_encoder:
            train_records = load_manifest(args.train_manifest) if args.train_manifest else records
            if enc_bank is None:
                enc_bank = _fresh_bank_for(train_records, seed, window)
            train_samples = build_detection_samples(train_records, window, stride)
            index = bl.build_retrieval_index(train_samples, enc_bank)
        spec = bl.BaselineSpec(name=name, rng_seed=seed, train_index=index, bank=enc_bank)
        return bl.evaluate_baseline(spec, samples)

    preds = predict_with(args.system)
    report = balanced_report(preds, samples, by_scenario=bool(args.by_scenario))
    if args.compare:
        other = predict_with(args.compare)
        sig = significance(
            preds, other, samples, n_resamples=int(args.n_resamples), seed=seed
        )
        report = replace(report, significance=sig)
    if agreement is not None:
        report = replace(report, annotator_agreement=agreement)

    _echo_config(
        out,
        "eval",
        {
            "manifest": args.manifest,
            "system": args.system,
            "checkpoint": args.checkpoint,
            "task": task,
            "windowing": _jsonable(window),
            "seed": seed,
            "agreement_threshold": args.agreement_threshold,
            "by_scenario": bool(args.by_scenario),
            "compare": args.compare,
            "n_resamples": int(args.n_resamples),
        },
    )
    _write_json(out / "metrics.json", {"report": report.to_dict(), "n_instances": len(samples)})
    if args.by_scenario:
        with open(out / "scenarios.csv", "w", encoding="utf-8") as fh:
            fh.write(scenario_csv(report))
    return 0


def cmd_ablate(args) -> int:
    drops = args.drop or []
    if set(drops) >= {"F", "N", "Nprime"}:
        raise ViewSwitchError("cannot drop every input")
    rc = cmd_train_detector(args, drops=drops)
    if rc != 0:
        return rc
    out = Path(args.out)
    if args.test_manifest:
        records = load_manifest(args.test_manifest)
        config = _load_config_file(args.config)
        window = _window_from(args, config)
        model, _, _ = load_checkpoint(out / "checkpoint.pt")
        samples = build_detection_samples(records, window)
        preds = model.predict_many(samples, input_mask=_input_mask_from_drops(drops))
        report = balanced_report(preds, samples)
        with open(out / "metrics.json", "r", encoding="utf-8") as fh:
            metrics = json.load(fh)
        metrics["ablation"] = {"dropped": sorted(drops), "report": report.to_dict()}
        _write_json(out / "metrics.json", metrics)
    return 0


def cmd_sweep(args) -> int:
    chosen = [name for name in ("tf_values", "tn_values", "labels_n_values") if getattr(args, name)]
    if len(chosen) != 1:
        raise ViewSwitchError("exactly one of --tf/--tn/--labels-n must be given")
    param = chosen[0]
    values = [float(v) for v in getattr(args, param).split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = _load_config_file(args.config)
    rows = []

    if param in ("tf_values", "tn_values"):
        if not args.test_manifest:
            raise ViewSwitchError("window sweeps require --test-manifest")
        records = load_manifest(args.manifest)
        test_records = load_manifest(args.test_manifest)
        settings = _train_settings_from(args, config)
        for value in values:
            window = _window_from(args, config)
            if param == "tf_values":
                window = replace(window, past_frames_s=value)
            else:
                window = replace(window, past_narrations_s=value)
            cfg = DetectorTrainConfig(
                window=window,
                aggregator=_aggregator_from(args, config),
                train=settings,
                val_fraction=float(_pick(args.val_fraction, config, "train", "val_fraction", 0.2)),
            )
            result = train_detector(records, cfg)
            samples = build_detection_samples(test_records, window)
            preds = result.model.predict_many(samples)
            report = balanced_report(preds, samples)
            rows.append({"value": value, "report": report.to_dict()})
    else:
        if not (args.checkpoint and args.labels and args.test_manifest):
            raise ViewSwitchError(
                "--labels-n sweeps require --checkpoint, --labels, and --test-manifest"
            )
        records = load_manifest(args.manifest)
        test_records = load_manifest(args.test_manifest)
        window = _window_from(args, config)
        settings = _train_settings_from(args, config)
        budget = candidate_position_budget(window)
        labels = LimitedLabelSet.from_file(args.labels, records, window)
        test_samples = build_selector_samples(test_records, window)
        for value in values:
            detector, _, _ = load_checkpoint(args.checkpoint, expected_component="detector")
            model = init_from_detector(detector, budget, seed=settings.seed)
            finetune_selector(
                model,
                labels,
                settings,
                subsample_n=int(value),
                subsample_seed=settings.seed,
            )
            preds = model.predict_many(test_samples)
            report = balanced_report(preds, test_samples)
            rows.append({"value": value, "report": report.to_dict()})

    _echo_config(
        out,
        "sweep",
        {
            "param": param,
            "values": values,
            "manifest": args.manifest,
            "test_manifest": args.test_manifest,
            "checkpoint": args.checkpoint,
            "labels": args.labels,
        },
    )
    _write_json(out / "metrics.json", {"sweep": rows})
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_window_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tf", type=float, default=None, help="past-frame window, seconds")
    p.add_argument("--tn", type=float, default=None, help="past-narration window, seconds")
    p.add_argument("--delta", type=float, default=None, help="prediction interval, seconds")
    p.add_argument("--rate", type=float, default=None, help="frame sample rate, fps")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    p.add_argument("--stride", type=float, default=None)
    p.add_argument("--vocab-size", dest="vocab_size", type=int, default=None)
    p.add_argument("--model-preset", dest="model_preset", choices=("desk", "paper"), default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viewswitch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-videos", dest="n_videos", type=int, default=20)
    p.add_argument("--grammar", default="deterministic-cue",
                   help=f"preset ({', '.join(GRAMMAR_PRESETS)}) or JSON file")
    p.add_argument("--multiview", action="store_true")
    p.add_argument("--with-votes", dest="with_votes", action="store_true")
    p.add_argument("--vote-error", dest="vote_error", type=float, default=0.15)
    p.add_argument("--video-steps", dest="video_steps", type=int, default=None)
    p.add_argument("--config", default=None)
    _add_window_flags(p)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("pseudo-label", help="pseudo-label a manifest with the oracle classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("shot", "clip"), default="shot")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-shot-len", dest="min_shot_len", type=float, default=2.0)
    p.add_argument("--oracle", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("train-detector", help="pretext-train the switch detector")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pseudo-labels", dest="pseudo_labels", default=None)
    p.add_argument("--config", default=None)
    _add_window_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("finetune-selector", help="fine-tune the view selector")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labels-n", dest="labels_n", type=int, default=None)
    p.add_argument("--from-scratch", dest="from_scratch", action="store_true")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--config", default=None)
    _add_window_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune_selector)

    p = sub.add_parser("eval", help="evaluate a model or baseline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--system", required=True, help="'model' or 'baseline:<name>'")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--task", choices=("auto", "detect", "select"), default="auto")
    p.add_argument("--train-manifest", dest="train_manifest", default=None)
    p.add_argument("--agreement-threshold", dest="agreement_threshold", default=None)
    p.add_argument("--votes", default=None)
    p.add_argument("--by-scenario", dest="by_scenario", action="store_true")
    p.add_argument("--compare", default=None, help="baseline:<name> for significance")
    p.add_argument("--n-resamples", dest="n_resamples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--stride", type=float, default=None)
    p.add_argument("--config", default=None)
    _add_window_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate with dropped input groups")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--drop", action="append", choices=("F", "N", "Nprime"), default=None)
    p.add_argument("--test-manifest", dest="test_manifest", default=None)
    p.add_argument("--pseudo-labels", dest="pseudo_labels", default=None)
    p.add_argument("--config", default=None)
    _add_window_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=lambda a: cmd_ablate(a))

    p = sub.add_parser("sweep", help="window-duration or label-count sweeps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--test-manifest", dest="test_manifest", default=None)
    p.add_argument("--tf", dest="tf_values", default=None, help="comma-separated values")
    p.add_argument("--tn", dest="tn_values", default=None, help="comma-separated values")
    p.add_argument("--labels-n", dest="labels_n_values", default=None, help="comma-separated values")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--labels", default=None)
    p.add_argument("--config", default=None)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(1)  # run-to-run reproducibility of reductions
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ViewSwitchError, OSError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        out = getattr(args, "out", None)
        if out:
            try:
                _write_json(Path(out) / "error.json", record)
            except OSError:
                pass
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
