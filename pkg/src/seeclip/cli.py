"""``seeclip`` command line: train, evaluate, protocol, generate, diagnose, make-synthetic, plot."""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pydantic

from . import archive
from .archive import ArchiveError
from .backend import BackendError, make_backend
from .config import ConfigError, RunConfig, effective_config, load_config
from .data import (DatasetError, OSDGSplit, build_losdo_splits, load_dataset, make_synthetic_dataset,
                   save_dataset, synthetic_unknown_names)
from .evaluation import (dump_attention_maps, evaluate_split, lemma1_diagnostic,
                         protocol_markdown, run_losdo_protocol, source_arrays)
from .plotting import plot_inputs
from .pseudo import (PerturbationConfig, build_joint_condition, build_negative_prompt,
                     build_positive_prompt, generate_pseudo_unknowns, perturb_semantic_tokens)
from .trainer import DivergenceError, checkpoint_load, checkpoint_save, mock_generator_for, train, write_log

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 1, 2, 3


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config, args.set or (), args.seed)
    if args.out:
        cfg = cfg.model_copy(update={"output_dir": args.out})
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg: RunConfig):
    if cfg.dataset.path:
        ds = load_dataset(cfg.dataset.path)
        unknown = cfg.dataset.unknown_classes or []
    else:
        spec = cfg.synthetic_spec()
        ds = make_synthetic_dataset(spec)
        unknown = cfg.dataset.unknown_classes if cfg.dataset.unknown_classes is not None \
            else synthetic_unknown_names(spec)
    return ds, unknown


def _backend(cfg: RunConfig):
    spec = cfg.backend_spec()
    if spec.kind == "external":
        raise ConfigError("the external backend needs encoder callables; use the Python API "
                          "(seeclip.backend.ExternalBackend)")
    return make_backend(spec)


def _split(cfg: RunConfig, ds, unknown) -> OSDGSplit:
    splits = build_losdo_splits(ds, unknown)
    t = cfg.dataset.target_domain
    if t is None:
        return splits[-1]
    if isinstance(t, int):
        if not 0 <= t < len(splits):
            raise ConfigError(f"target_domain {t} out of range")
        return splits[t]
    if t not in ds.domain_names:
        raise ConfigError(f"target_domain {t!r} not among {list(ds.domain_names)}")
    return splits[ds.domain_names.index(t)]


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _manifest(out: Path, command: str, cfg: RunConfig, **extra) -> None:
    doc = {"command": command, "config": effective_config(cfg),
           "created": datetime.now(timezone.utc).isoformat(), **extra}
    _write_json(out / f"{command}_manifest.json", doc)


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg)
    ds, unknown = _dataset(cfg)
    backend = _backend(cfg)
    split = _split(cfg, ds, unknown)
    X, y, doms, names = source_arrays(split, backend)
    state = checkpoint_load(args.resume) if args.resume else None
    state, log = train(X, y, doms, class_names=split.known_classes, domain_names=names,
                       hyper=cfg.hyperparams(), backend=backend, state=state, max_steps=args.max_steps)
    write_log(log, out / "train_log.jsonl", append=bool(args.resume))
    checkpoint_save(state, out / "checkpoint.star",
                    {"target_domain": split.domain_names[split.target_domain]})
    _manifest(out, "train", cfg, step=state.step, target_domain=split.domain_names[split.target_domain])
    print(json.dumps({"checkpoint": str(out / "checkpoint.star"), "steps": state.step}))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg)
    ds, unknown = _dataset(cfg)
    backend = _backend(cfg)
    split = _split(cfg, ds, unknown)
    state = checkpoint_load(args.checkpoint)
    report = evaluate_split(split, state, backend, transductive=args.transductive)
    _write_json(out / "eval_report.json", report.to_dict())
    _manifest(out, "evaluate", cfg, checkpoint=str(args.checkpoint))
    print(json.dumps({k: report.to_dict()[k] for k in ("target_domain", "closed_acc", "h_score")}))
    return 0


def cmd_protocol(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg)
    ds, unknown = _dataset(cfg)
    result = run_losdo_protocol(ds, unknown, cfg.hyperparams(), _backend(cfg), keep_logs=True)
    _write_json(out / "protocol_reports.json", result.to_dict())
    (out / "protocol_summary.md").write_text(protocol_markdown(result, "Leave-one-domain-out"))
    logs = out / "protocol_logs"
    logs.mkdir(exist_ok=True)
    for report, log in zip(result.reports, result.logs):
        write_log(log, logs / f"{report.target_domain}.jsonl")
    _manifest(out, "protocol", cfg)
    print(protocol_markdown(result), end="")
    return 0


def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg)
    if cfg.generation.backend != "mock":
        raise ConfigError("the external generator needs a transport; use the Python API "
                          "(seeclip.pseudo.ExternalGenerationBackend)")
    state = checkpoint_load(args.checkpoint)
    sigma = cfg.generation.sigma
    pert = PerturbationConfig(sigma=sigma, seed=cfg._seed(cfg.generation.seed))
    cache = os.environ.get("SEECLIP_CACHE")
    gen = mock_generator_for(state, cfg.backend.N)
    if cache:
        gen.cache_dir = Path(cache)
    negative = build_negative_prompt(state.class_names)
    payloads, labels, domains, records = [], [], [], []
    for s, dom_name in enumerate(state.domain_names):
        positive = build_positive_prompt(dom_name)
        for j in range(args.count):
            src = (s * args.count + j) % state.n_classes
            request = (s, j)
            tilde = perturb_semantic_tokens(state.ema[src], pert, request)
            cond = build_joint_condition(positive, negative, tilde, state.model.projections,
                                         cfg.generation.steps, cfg.generation.guidance,
                                         sigma=sigma, seed=pert.seed, domain_name=dom_name)
            for ps in generate_pseudo_unknowns(cond, src, 1, gen, label=state.n_classes,
                                               domain_id=s, request=request):
                payloads.append(ps.payload)
                labels.append(ps.label)
                domains.append(s)
                records.append({"positive_text": cond.positive_text, "negative_text": cond.negative_text,
                                "domain": dom_name, **ps.provenance})
    archive.save(out / "pseudo_samples.star", {
        "payloads": np.stack(payloads), "labels": np.array(labels, dtype=np.int64),
        "domains": np.array(domains, dtype=np.int64)})
    _write_json(out / "pseudo_manifest.json", {
        "count_per_domain": args.count, "guidance_scale": cfg.generation.guidance,
        "denoising_steps": cfg.generation.steps, "samples": records,
        "created": datetime.now(timezone.utc).isoformat()})
    print(json.dumps({"pseudo_samples": len(payloads)}))
    return 0


def cmd_diagnose(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg)
    ds, unknown = _dataset(cfg)
    backend = _backend(cfg)
    split = _split(cfg, ds, unknown)
    state = checkpoint_load(args.checkpoint)
    report = lemma1_diagnostic(state, backend)
    _write_json(out / "lemma1.json", report.to_dict())
    step = max(1, len(split.target) // max(1, args.samples))
    picked = list(split.target[::step])[: args.samples]
    dump_attention_maps(state, picked, out / "attention", backend)
    _manifest(out, "diagnose", cfg, checkpoint=str(args.checkpoint))
    print(json.dumps({"mean_gain": report.mean_gain, "attention_maps": len(picked)}))
    return 0


def cmd_make_synthetic(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg)
    ds = make_synthetic_dataset(cfg.synthetic_spec())
    save_dataset(ds, out / "dataset.star")
    _manifest(out, "make-synthetic", cfg, samples=len(ds))
    print(json.dumps({"dataset": str(out / "dataset.star"), "samples": len(ds)}))
    return 0


def cmd_plot(args) -> int:
    written = plot_inputs(args.inputs, args.out or "plots")
    print(json.dumps({"figures": [str(p) for p in written]}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seeclip", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML/JSON run config")
            p.add_argument("--seed", type=int, help="override every seed in the config")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="dotted-path override, e.g. hyper.learning_rate=0.0001 (repeatable)")
        p.add_argument("--out", help="output directory")
        return p

    p = common(sub.add_parser("train", help="train on the configured split"))
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, help="stop after this many steps")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("evaluate", help="evaluate a checkpoint on its target domain"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--transductive", action="store_true", help="domain token from the target batch")
    p.set_defaults(func=cmd_evaluate)

    common(sub.add_parser("protocol", help="leave-one-domain-out train + evaluate")).set_defaults(func=cmd_protocol)

    p = common(sub.add_parser("generate", help="write pseudo-unknown samples"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=3, help="samples per source domain")
    p.set_defaults(func=cmd_generate)

    p = common(sub.add_parser("diagnose", help="prompt discrepancy report and attention CSVs"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=6)
    p.set_defaults(func=cmd_diagnose)

    common(sub.add_parser("make-synthetic", help="write the synthetic dataset archive")).set_defaults(
        func=cmd_make_synthetic)

    p = common(sub.add_parser("plot", help="figures from logs, attention CSVs and reports"), config=False)
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_plot)
    return parser


def _fail(code: str, message: str, exit_code: int) -> int:
    sys.stderr.write(json.dumps({"error": code, "message": message, "exit_code": exit_code}) + "\n")
    return exit_code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, pydantic.ValidationError) as exc:
        return _fail("config_error", str(exc), EXIT_CONFIG)
    except DatasetError as exc:
        return _fail(exc.code, str(exc), EXIT_DATA)
    except (BackendError, ArchiveError, FileNotFoundError) as exc:
        return _fail("data_error", str(exc), EXIT_DATA)
    except (DivergenceError, FloatingPointError) as exc:
        return _fail("numeric_divergence", str(exc), EXIT_DIVERGENCE)


if __name__ == "__main__":
    sys.exit(main())
