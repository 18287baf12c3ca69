"""Command-line experiment driver.

Every command writes one run directory holding ``manifest.json``,
``result.json`` and, where a model is produced, ``checkpoint.bin`` and
``curves.jsonl``.  Secret keys live in a separate file and are never copied
into run outputs.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import os
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .attacks import AttackSpec, evaluate_attack, run_attack
from .corpus import KeySpec, TextCorpus, build_trigger_set, builtin_corpus, gen_key
from .model import InsertionPlan, ModelConfig, init_model, load, save
from .trainer import TrainConfig, pretrain, train_watermark, validation_loss
from .verifier import verify

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"
CHECKPOINT = "checkpoint.bin"
CURVES = "curves.jsonl"
RESULT = "result.json"


class CLIError(Exception):
    """An error reported to the user as JSON; ``field`` names the culprit when known."""

    def __init__(self, message: str, field: str | None = None, kind: str = "UsageError"):
        super().__init__(message)
        self.field = field
        self.kind = kind


def load_schema(name: str) -> dict:
    text = resources.files("passmark").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def default_config() -> dict:
    return json.loads(resources.files("passmark").joinpath("schemas", "default.json").read_text())


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def validate(doc, schema_name: str) -> None:
    validator = jsonschema.Draft202012Validator(load_schema(schema_name))
    err = jsonschema.exceptions.best_match(validator.iter_errors(doc))
    if err is not None:
        where = ".".join(str(p) for p in err.absolute_path)
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            where = ".".join(filter(None, [where, *extra]))
        raise CLIError(f"{schema_name} field {where or '<root>'!r}: {err.message}", field=where or None,
                       kind="SchemaError")


def resolve_config(path: str | None, seed: int | None = None, omega: str | None = None,
                   mode: str | None = None) -> dict:
    """Defaults, overlaid by the config file, overlaid by command-line flags."""
    user = {"version": SCHEMA_VERSION}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise CLIError(f"config file not found: {path}", field="--config") from None
        except json.JSONDecodeError as exc:
            raise CLIError(f"config file is not valid JSON: {exc}", field="--config") from None
    validate(user, "config")
    cfg = _merge(default_config(), user)
    if seed is not None:
        cfg["seed"] = seed
    if omega is not None:
        cfg["watermark"]["omega"] = omega
    if mode is not None:
        cfg["verify"]["mode"] = mode
    validate(cfg, "config")
    return cfg


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_corpus(cfg: dict) -> TextCorpus:
    path, splits = cfg["corpus"]["path"], tuple(cfg["corpus"]["splits"])
    if path is None:
        return TextCorpus(builtin_corpus().tokens, splits) if splits != (0.9, 0.05) else builtin_corpus()
    if not Path(path).is_file():
        raise CLIError(f"corpus file not found: {path}", field="corpus.path")
    return TextCorpus(Path(path).read_bytes(), splits)


def read_key(path) -> KeySpec:
    try:
        return KeySpec(Path(path).read_text().strip())
    except FileNotFoundError:
        raise CLIError(f"key file not found: {path}", field="--key-file") from None
    except ValueError as exc:
        raise CLIError(f"key file {path}: {exc}", field="--key-file") from None


def write_secret(path: Path, key: KeySpec) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as f:
        f.write(key.hex + "\n")


def load_checkpoint(path):
    if path is None:
        raise CLIError("a checkpoint path is required", field="--checkpoint")
    if not Path(path).is_file():
        raise CLIError(f"checkpoint not found: {path}", field="--checkpoint")
    return load(path)


def _train_config(section: dict, seed: int) -> TrainConfig:
    fields = {k: v for k, v in section.items() if k not in ("omega", "key_len")}
    return TrainConfig(seed=seed, **fields)


def trigger_prompts(reference, corpus: TextCorpus, vcfg: dict) -> np.ndarray:
    cands = corpus.fixed_windows(vcfg["n_candidates"], vcfg["prompt_len"], split="heldout")
    try:
        trig = build_trigger_set(reference, cands, vcfg["percentile"], gen_len=vcfg["gen_len"])
    except ValueError as exc:
        raise CLIError(str(exc), field="verify.percentile") from None
    return trig.prompts


class Run:
    """Collects manifest fields and writes the run directory."""

    def __init__(self, command: str, out_dir, cfg: dict):
        self.dir = Path(out_dir)
        if (self.dir / MANIFEST).exists():
            raise CLIError(f"run directory already holds a manifest: {self.dir}", field="--out-dir")
        self.dir.mkdir(parents=True, exist_ok=True)
        self.t0 = time.time()
        self.manifest = {"schema_version": SCHEMA_VERSION, "command": command, "config": cfg,
                         "seed": cfg["seed"], "inputs": {}, "outputs": {}, "version": __version__}

    def input(self, name: str, path) -> None:
        self.manifest["inputs"][name] = {"path": str(path), "sha256": file_sha256(path)}

    def path(self, name: str) -> Path:
        self.manifest["outputs"][name] = name
        return self.dir / name

    def write_json(self, name: str, doc) -> None:
        self.path(name).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def finish(self, **extra) -> dict:
        self.manifest.update(extra)
        self.manifest["wall_clock"] = time.time() - self.t0
        (self.dir / MANIFEST).write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")
        return self.manifest


def cmd_pretrain(args) -> dict:
    cfg = resolve_config(args.config, args.seed)
    corpus = load_corpus(cfg)
    run = Run("pretrain", args.out_dir, cfg)
    mcfg = ModelConfig(seed=cfg["seed"], **cfg["model"])
    tcfg = _train_config(cfg["pretrain"], cfg["seed"])
    initial = validation_loss(init_model(mcfg), corpus, seq_len=tcfg.seq_len)
    model, curve = pretrain(mcfg, corpus, tcfg)
    final = validation_loss(model, corpus, seq_len=tcfg.seq_len)
    save(model, run.path(CHECKPOINT))
    curve.to_jsonl(run.path(CURVES))
    run.write_json(RESULT, {"initial_val_ce": initial, "val_ce": final, "val_ppl": math.exp(final),
                            "param_count": model.num_parameters()})
    run.manifest["checkpoint_sha256"] = file_sha256(run.dir / CHECKPOINT)
    return run.finish(omega=None)


def cmd_watermark(args) -> dict:
    cfg = resolve_config(args.config, args.seed, args.omega)
    corpus = load_corpus(cfg)
    host = load_checkpoint(args.checkpoint)
    wcfg = cfg["watermark"]
    try:
        plan = InsertionPlan.parse(wcfg["omega"])
    except ValueError as exc:
        raise CLIError(str(exc), field="--omega") from None
    if len(plan) != host.config.n_layers:
        raise CLIError(f"omega has {len(plan)} entries but the checkpoint has {host.config.n_layers} layers",
                       field="--omega")
    run = Run("watermark", args.out_dir, cfg)
    run.input("host", args.checkpoint)

    key_path = Path(args.key_file) if args.key_file else run.dir.parent / f"{run.dir.name}.key"
    if key_path.exists():
        key = read_key(key_path)
    else:
        key = gen_key(np.random.default_rng([cfg["seed"], 1]), wcfg["key_len"])
        write_secret(key_path, key)

    wm, curve = train_watermark(host, plan, corpus, key, _train_config(wcfg, cfg["seed"]))
    save(wm, run.path(CHECKPOINT))
    curve.to_jsonl(run.path(CURVES))
    host_ce = validation_loss(host, corpus)
    wm_ce = validation_loss(wm, corpus)
    run.write_json(RESULT, {"host_val_ce": host_ce, "val_ce": wm_ce, "val_ppl": math.exp(wm_ce),
                            "val_ce_rel_change": (wm_ce - host_ce) / host_ce,
                            "param_count": wm.num_parameters()})
    run.manifest["checkpoint_sha256"] = file_sha256(run.dir / CHECKPOINT)
    return run.finish(omega=list(plan.counts), key_file=str(key_path))


def cmd_verify(args) -> dict:
    cfg = resolve_config(args.config, args.seed, mode=args.mode)
    vcfg = cfg["verify"]
    if args.key_file is None:
        raise CLIError("verification needs --key-file", field="--key-file")
    key = read_key(args.key_file)
    model = load_checkpoint(args.checkpoint)
    reference = load_checkpoint(args.reference) if args.reference else model
    corpus = load_corpus(cfg)
    run = Run("verify", args.out_dir, cfg)
    run.input("checkpoint", args.checkpoint)
    if args.reference:
        run.input("reference", args.reference)
    prompts = trigger_prompts(reference, corpus, vcfg)
    v = verify(model, prompts, key, np.random.default_rng([cfg["seed"], 2]), vcfg["gen_len"],
               vcfg["mode"], vcfg["n_samples"], vcfg["alpha"])
    doc = v.result.to_dict()
    validate(doc, "verification_result")
    run.write_json(RESULT, doc)
    with open(run.path("entropies.jsonl"), "w") as f:
        for r in v.positives + v.negatives:
            f.write(r.to_json() + "\n")
    return run.finish(omega=list(model.plan.counts), n_prompts=len(prompts))


def cmd_attack(args) -> dict:
    cfg = resolve_config(args.config, args.seed)
    if args.kind is not None:
        cfg["attack"]["kind"] = args.kind
    if args.prune_ratio is not None:
        cfg["attack"]["prune_ratio"] = args.prune_ratio
    validate(cfg, "config")
    if args.key_file is None:
        raise CLIError("attack evaluation needs --key-file", field="--key-file")
    key = read_key(args.key_file)
    model = load_checkpoint(args.checkpoint)
    acfg = cfg["attack"]
    if acfg["kind"] in ("layer-removal", "fine-prune") and not model.passthrough:
        raise CLIError(f"{acfg['kind']} needs a checkpoint with passthrough layers; "
                       "this one has no passthrough layers", field="attack.kind",
                       kind="NoPassthroughError")
    corpus = load_corpus(cfg)
    reference = load_checkpoint(args.reference) if args.reference else model
    run = Run("attack", args.out_dir, cfg)
    run.input("checkpoint", args.checkpoint)
    spec = AttackSpec(seed=cfg["seed"], **acfg)
    t0 = time.time()
    post = run_attack(model, corpus, spec)
    elapsed = time.time() - t0
    save(post, run.path(CHECKPOINT))
    prompts = trigger_prompts(reference, corpus, cfg["verify"])
    report = evaluate_attack(model, post, prompts, key, corpus, cfg["seed"], cfg["verify"]["gen_len"],
                             spec, elapsed)
    doc = report.to_dict()
    validate(doc, "attack_report")
    run.write_json(RESULT, doc)
    run.manifest["checkpoint_sha256"] = file_sha256(run.dir / CHECKPOINT)
    return run.finish(omega=list(model.plan.counts), attack=acfg["kind"])


def _numeric_leaves(doc, prefix: str = ""):
    if isinstance(doc, bool):
        return
    if isinstance(doc, (int, float)):
        yield prefix, float(doc)
    elif isinstance(doc, dict):
        for k in sorted(doc):
            if k in ("roc", "spec"):
                continue
            yield from _numeric_leaves(doc[k], f"{prefix}.{k}" if prefix else k)


def mean_std(values):
    """Mean and sample standard deviation (n - 1); std is None for one value."""
    x = np.asarray(values, dtype=np.float64)
    return float(x.mean()), (float(x.std(ddof=1)) if x.size > 1 else None)


def aggregate(run_dirs) -> list[dict]:
    groups: dict[tuple, dict[str, list[float]]] = {}
    versions = set()
    for d in run_dirs:
        d = Path(d)
        if not (d / MANIFEST).is_file():
            raise CLIError(f"missing manifest in run directory {d}", field=str(d))
        man = json.loads((d / MANIFEST).read_text())
        versions.add(man.get("schema_version"))
        if len(versions) > 1:
            raise CLIError(f"inconsistent schema versions across runs: {sorted(map(str, versions))}",
                           field=str(d))
        result = json.loads((d / RESULT).read_text()) if (d / RESULT).is_file() else {}
        omega = man.get("omega")
        placement = ",".join(map(str, omega)) if omega else ""
        key = (placement, man["command"], man.get("attack") or "")
        bucket = groups.setdefault(key, {})
        for name, value in _numeric_leaves(result):
            bucket.setdefault(name, []).append(value)
    rows = []
    for (placement, command, attack), metrics in sorted(groups.items()):
        for name, values in metrics.items():
            m, s = mean_std(values)
            rows.append({"placement": placement, "command": command, "attack": attack, "metric": name,
                         "n": len(values), "mean": m, "std": s})
    return rows


def cmd_report(args) -> dict:
    if not args.runs:
        raise CLIError("report needs at least one run directory", field="runs")
    rows = aggregate(args.runs)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["placement", "command", "attack", "metric", "n", "mean", "std"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "std": "" if r["std"] is None else r["std"]})
    (out / "report.json").write_text(json.dumps(rows, indent=2) + "\n")
    return {"rows": len(rows), "out_dir": str(out)}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message, field="argv")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="passmark", description="Passthrough-layer watermarking experiments.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, checkpoint=False, key=False):
        sp.add_argument("--config", help="JSON run configuration (defaults fill missing fields)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir", required=True)
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
        if key:
            sp.add_argument("--key-file")
        return sp

    common(sub.add_parser("pretrain", help="train a host language model"))
    wm = common(sub.add_parser("watermark", help="inject and train passthrough layers"), True, True)
    wm.add_argument("--omega", help="per-layer passthrough counts, e.g. 0,1,0,0")
    v = common(sub.add_parser("verify", help="measure watermark extraction"), True, True)
    v.add_argument("--mode", choices=["whitebox", "blackbox"])
    v.add_argument("--reference", help="checkpoint used to pick low-entropy trigger prompts")
    a = common(sub.add_parser("attack", help="run a removal attack and score it"), True, True)
    a.add_argument("--kind", choices=["finetune", "layer-removal", "fine-prune"])
    a.add_argument("--prune-ratio", type=float)
    a.add_argument("--reference", help="checkpoint used to pick low-entropy trigger prompts")
    r = sub.add_parser("report", help="aggregate run directories into mean/std tables")
    r.add_argument("runs", nargs="*")
    r.add_argument("--out-dir", required=True)
    return p


COMMANDS = {"pretrain": cmd_pretrain, "watermark": cmd_watermark, "verify": cmd_verify,
            "attack": cmd_attack, "report": cmd_report}


def main(argv=None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        summary = COMMANDS[command](args)
    except CLIError as exc:
        _emit_error(command, exc.kind, str(exc), exc.field)
        return 2
    except Exception as exc:  # every failure leaves the process as a JSON error
        _emit_error(command, type(exc).__name__, str(exc), None)
        return 1
    print(json.dumps({"status": "ok", "command": command,
                      "out_dir": summary.get("out_dir", args.out_dir)}))
    return 0


def _emit_error(command, kind, message, field):
    sys.stderr.write(json.dumps({"status": "error", "command": command, "error": kind,
                                 "message": message, "field": field}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
