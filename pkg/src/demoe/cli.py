"""Batch command-line interface.

Subcommands: synth, curate, train, infer, analyze, eval, macs. Every
subcommand accepts ``--config FILE`` (flat ``key = value`` text); explicit
flags override file values, which override defaults. Each run echoes its
effective configuration to ``config.txt`` in the output directory, writes a
``files.json`` manifest of produced artifacts, and renders its figures next
to the delimited reports. Exit codes: 0 success, 1 usage error, 2 runtime
failure (partial outputs are removed).

The default output root is ``./runs`` or the ``DEMOE_OUT_ROOT`` environment
variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Manifest, balance_dataset, load_image, mse_histogram_subsample, save_image
from .figures import save_class_psnr_bars, save_loss_curve, save_similarity_bars
from .inference import evaluate_manifest, restore_image, summarize
from .macs import count_params_macs, router_overhead
from .net import ArchConfig, FUSION_MODES
from .reports import aggregate_mean, emit_csv, emit_json, emit_table
from .similarity import similarity_report
from .synth import FAMILIES, generate_toy_dataset
from .train import LossConfig, TrainConfig, stage1_train, stage2_finetune

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# option plumbing: every option has (name, type, default); CLI flags override
# config-file values, which override defaults


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"cannot parse boolean value {text!r}")


class Opt:
    def __init__(self, name, typ, default, help="", choices=None, required=False):
        self.name = name
        self.typ = typ
        self.default = default
        self.help = help
        self.choices = choices
        self.required = required

    def add_to(self, parser):
        flag = "--" + self.name.replace("_", "-")
        if self.typ is bool:
            parser.add_argument(flag, dest=self.name, action="store_const", const=True,
                                default=None, help=self.help)
            parser.add_argument("--no-" + self.name.replace("_", "-"), dest=self.name,
                                action="store_const", const=False, default=None,
                                help=argparse.SUPPRESS)
        else:
            parser.add_argument(flag, dest=self.name, type=self.typ, default=None,
                                choices=self.choices, help=self.help)

    def coerce(self, text: str):
        if self.typ is bool:
            return _parse_bool(text)
        value = self.typ(text)
        if self.choices and value not in self.choices:
            raise UsageError(f"{self.name}: {value!r} not in {self.choices}")
        return value


def _load_config_file(path) -> dict:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from exc
    for i, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{i}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    return values


def resolve_options(args, opts: list) -> dict:
    """Merge CLI flags, config-file values, and defaults into one dict."""
    file_vals = _load_config_file(args.config) if getattr(args, "config", None) else {}
    known = {o.name for o in opts} | {"config"}
    unknown = set(file_vals) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    for o in opts:
        given = getattr(args, o.name, None)
        if given is not None:
            out[o.name] = given
        elif o.name in file_vals:
            out[o.name] = o.coerce(file_vals[o.name])
        else:
            out[o.name] = o.default
        if out[o.name] is None and o.required:
            raise UsageError(f"missing required option --{o.name.replace('_', '-')}")
    return out


def _echo_config(ws, command: str, cfg: dict) -> None:
    lines = [f"# effective configuration for `demoe {command}`"]
    for k, v in cfg.items():
        if v is None:
            continue
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    (ws.dir / "config.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# output workspace


def _out_root() -> Path:
    return Path(os.environ.get("DEMOE_OUT_ROOT", "runs"))


class Workspace:
    """Snapshot-based tracker: knows which files a run created, for cleanup."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._before = {p for p in self.dir.rglob("*") if p.is_file()}

    def cleanup(self) -> None:
        for p in sorted(self.dir.rglob("*"), reverse=True):
            if p.is_file() and p not in self._before:
                try:
                    p.unlink()
                except OSError:
                    pass

    def write_files_manifest(self) -> None:
        files = sorted(
            str(p.relative_to(self.dir))
            for p in self.dir.rglob("*")
            if p.is_file() and p.name != "files.json"
        )
        (self.dir / "files.json").write_text(json.dumps({"files": files}, indent=1) + "\n")


class _Tracker:
    """Cleanup helper for commands that write individual files (single infer)."""

    def __init__(self):
        self.paths = []

    def add(self, path) -> Path:
        p = Path(path)
        self.paths.append((p, p.exists()))
        return p

    def cleanup(self) -> None:
        for p, existed in self.paths:
            if not existed and p.exists():
                try:
                    p.unlink()
                except OSError:
                    pass


# ---------------------------------------------------------------------------
# shared builders


_ARCH_OPTS = [
    Opt("preset", str, "toy", "architecture preset", choices=("toy", "full")),
    Opt("width", int, None, "base channel width (overrides preset)"),
    Opt("levels", int, None, "encoder/decoder scales"),
    Opt("enc_blocks", int, None, "blocks per encoder level"),
    Opt("mid_blocks", int, None, "middle blocks"),
    Opt("dec_blocks", int, None, "mixture blocks per decoder level"),
    Opt("experts", int, None, "number of experts / degradation classes"),
    Opt("k", int, None, "top-k experts at inference"),
    Opt("fusion", str, None, "mixture fusion mode", choices=FUSION_MODES),
]


def _arch_from(cfg: dict) -> ArchConfig:
    base = ArchConfig.toy() if cfg["preset"] == "toy" else ArchConfig.full_scale()
    over = {}
    mapping = {
        "width": "base_width",
        "levels": "num_levels",
        "enc_blocks": "enc_blocks_per_level",
        "mid_blocks": "mid_blocks",
        "dec_blocks": "dec_blocks_per_level",
        "experts": "num_experts",
        "k": "top_k",
        "fusion": "fusion_mode",
    }
    for key, field in mapping.items():
        if cfg.get(key) is not None:
            over[field] = cfg[key]
    try:
        return replace(base, **over)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _per_class_psnr(records) -> dict:
    per_class: dict[int, tuple] = {}
    for label in sorted({r["label"] for r in records}):
        sub = [r for r in records if r["label"] == label]
        per_class[label] = (
            float(np.mean([r["psnr_in"] for r in sub])),
            float(np.mean([r["psnr_out"] for r in sub])),
        )
    return per_class


def _emit_eval_outputs(ws, records, weights, stem="metrics"):
    agg = aggregate_mean(records)
    emit_json(records, ws.dir / f"{stem}.json", aggregate=agg)
    emit_csv(records, ws.dir / f"{stem}.csv", aggregate=agg)
    (ws.dir / "weights.json").write_text(
        json.dumps({"router_weights": weights}, indent=1) + "\n"
    )
    summary = summarize(records)
    (ws.dir / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    save_class_psnr_bars(
        _per_class_psnr(records), ws.dir / "psnr_by_class.png", class_names=FAMILIES
    )
    return summary


# ---------------------------------------------------------------------------
# subcommand handlers


SYNTH_OPTS = [
    Opt("per_class", int, 100, "images per degradation class"),
    Opt("classes", int, 5, "number of degradation classes (1-5)"),
    Opt("size", int, 32, "square image size"),
    Opt("seed", int, 0, "generation seed"),
    Opt("out", str, None, "output directory"),
]


def cmd_synth(args, holder):
    cfg = resolve_options(args, SYNTH_OPTS)
    ws = Workspace(cfg["out"] or _out_root() / "synth")
    holder.append(ws)
    cfg["out"] = str(ws.dir)
    manifest = generate_toy_dataset(
        cfg["per_class"], cfg["size"], cfg["seed"], ws.dir, classes=cfg["classes"]
    )
    _echo_config(ws, "synth", cfg)
    ws.write_files_manifest()
    print(f"wrote {len(manifest)} records to {ws.dir / 'manifest.json'}")
    print(f"per-class counts: {manifest.counts()}")
    return EXIT_OK


CURATE_OPTS = [
    Opt("manifest", str, None, "input manifest", required=True),
    Opt("op", str, None, "curation operation", choices=("subsample", "balance"), required=True),
    Opt("bins", int, 4, "MSE histogram bins (subsample)"),
    Opt("per_bin", int, 1400, "records kept per surviving bin (subsample)"),
    Opt("drop_tail", bool, True, "drop the sparse highest bin (subsample)"),
    Opt("targets", str, None, "per-class counts for balance, e.g. 0:3850,1:4018"),
    Opt("seed", int, 0, "curation seed"),
    Opt("out", str, None, "output directory"),
]


def _parse_targets(text: str) -> dict:
    targets = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            cls, cnt = part.split(":")
            targets[int(cls)] = int(cnt)
        except ValueError as exc:
            raise UsageError(f"bad target spec {part!r} (expected label:count)") from exc
    if not targets:
        raise UsageError("balance needs at least one label:count target")
    return targets


def cmd_curate(args, holder):
    cfg = resolve_options(args, CURATE_OPTS)
    ws = Workspace(cfg["out"] or _out_root() / "curate")
    holder.append(ws)
    cfg["out"] = str(ws.dir)
    manifest = Manifest.load(cfg["manifest"])
    if cfg["op"] == "subsample":
        curated = mse_histogram_subsample(
            manifest, cfg["bins"], cfg["per_bin"], cfg["drop_tail"], cfg["seed"]
        )
    else:
        if not cfg["targets"]:
            raise UsageError("--targets is required for the balance operation")
        curated = balance_dataset(manifest, _parse_targets(cfg["targets"]), cfg["seed"])
    curated.rebased(ws.dir).save(ws.dir / "manifest.json")
    _echo_config(ws, "curate", cfg)
    ws.write_files_manifest()
    print(f"curated manifest: {len(curated)} records -> {ws.dir / 'manifest.json'}")
    print(f"per-class counts: {curated.counts()}")
    return EXIT_OK


TRAIN_OPTS = _ARCH_OPTS + [
    Opt("manifest", str, None, "training manifest", required=True),
    Opt("test_manifest", str, None, "held-out manifest for post-stage evaluation"),
    Opt("stage", str, "both", "which stage(s) to run", choices=("1", "2", "both")),
    Opt("ckpt_in", str, None, "stage-1 checkpoint (when running stage 2 alone)"),
    Opt("epochs", int, 30, "epochs per stage"),
    Opt("batch", int, 8, "batch size"),
    Opt("patch", int, 32, "training patch size"),
    Opt("seed", int, 0, "training seed"),
    Opt("lr0", float, 1e-3, "initial learning rate"),
    Opt("lr_min", float, 1e-6, "final learning rate"),
    Opt("weight_decay", float, 0.0, "decoupled weight decay"),
    Opt("hflip", bool, True, "horizontal flip augmentation"),
    Opt("vflip", bool, True, "vertical flip augmentation"),
    Opt("router_noise", float, 0.0, "stddev of Gaussian noise on router logits (stage 1)"),
    Opt("pixel_weight", float, 1.0, "pixel loss weight"),
    Opt("class_weight", float, 0.001, "classification loss weight"),
    Opt("out", str, None, "output directory"),
]


def _history_rows(history):
    return [
        {"epoch": i, "loss": loss, "lr": lr}
        for i, (loss, lr) in enumerate(zip(history["epoch_loss"], history["epoch_lr"]))
    ]


def cmd_train(args, holder):
    cfg = resolve_options(args, TRAIN_OPTS)
    ws = Workspace(cfg["out"] or _out_root() / "train")
    holder.append(ws)
    cfg["out"] = str(ws.dir)
    arch = _arch_from(cfg)
    tcfg = TrainConfig(
        patch_size=cfg["patch"],
        batch_size=cfg["batch"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        hflip=cfg["hflip"],
        vflip=cfg["vflip"],
        lr0=cfg["lr0"],
        lr_min=cfg["lr_min"],
        weight_decay=cfg["weight_decay"],
        router_noise_sigma=cfg["router_noise"],
    )
    lcfg = LossConfig(pixel_weight=cfg["pixel_weight"], class_weight=cfg["class_weight"])
    manifest = Manifest.load(cfg["manifest"])
    manifest.validate_files(num_classes=arch.num_experts)
    test_manifest = Manifest.load(cfg["test_manifest"]) if cfg["test_manifest"] else None

    summary = {}
    stage1 = None
    if cfg["stage"] in ("1", "both"):
        print(f"stage 1: {len(manifest)} records, {tcfg.epochs} epochs")
        stage1, hist1 = stage1_train(manifest, arch, tcfg, lcfg)
        save_checkpoint(stage1, ws.dir / "stage1.dmoe")
        rows = _history_rows(hist1)
        emit_json(rows, ws.dir / "history_stage1.json")
        emit_csv(rows, ws.dir / "history_stage1.csv")
        save_loss_curve(hist1, ws.dir / "loss_stage1.png", title="stage 1 loss")
        if test_manifest is not None:
            records, _, _ = evaluate_manifest(stage1, test_manifest)
            summary["stage1"] = summarize(records)
            print(f"stage 1 eval: {summary['stage1']}")
    if cfg["stage"] in ("2", "both"):
        if stage1 is None:
            if not cfg["ckpt_in"]:
                raise UsageError("stage 2 alone needs --ckpt-in pointing at a stage-1 checkpoint")
            stage1 = load_checkpoint(cfg["ckpt_in"])
        print(f"stage 2: finetuning {arch.num_experts} experts")
        stage2, hist2 = stage2_finetune(stage1, manifest, tcfg)
        save_checkpoint(stage2, ws.dir / "stage2.dmoe")
        rows = _history_rows(hist2)
        emit_json(rows, ws.dir / "history_stage2.json")
        emit_csv(rows, ws.dir / "history_stage2.csv")
        save_loss_curve(hist2, ws.dir / "loss_stage2.png", title="stage 2 loss")
        if test_manifest is not None:
            records, _, _ = evaluate_manifest(stage2, test_manifest)
            summary["stage2"] = summarize(records)
            print(f"stage 2 eval: {summary['stage2']}")
    if summary:
        (ws.dir / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    _echo_config(ws, "train", cfg)
    ws.write_files_manifest()
    return EXIT_OK


INFER_OPTS = [
    Opt("ckpt", str, None, "checkpoint file", required=True),
    Opt("k", int, None, "top-k experts (default: checkpoint setting)"),
    Opt("expert", int, None, "manual expert override id"),
    Opt("input", str, None, "input image (single mode); flag --in"),
    Opt("out", str, None, "output image (single mode) or directory (batch mode)"),
    Opt("manifest", str, None, "manifest for batch mode"),
]


def cmd_infer(args, holder):
    cfg = resolve_options(args, INFER_OPTS)
    ckpt = load_checkpoint(cfg["ckpt"])
    if cfg["input"]:
        if not cfg["out"]:
            raise UsageError("single-image mode needs --out for the restored image")
        tracker = _Tracker()
        holder.append(tracker)
        img = load_image(cfg["input"])
        restored, weights = restore_image(ckpt, img, k=cfg["k"], override=cfg["expert"])
        out_path = tracker.add(cfg["out"])
        out_path.parent.mkdir(parents=True, exist_ok=True)
        save_image(restored, out_path)
        meta = {
            "config": {k: v for k, v in cfg.items() if v is not None},
            "router_weights": [float(x) for x in weights],
            "files": [str(out_path)],
        }
        tracker.add(str(out_path) + ".meta.json").write_text(json.dumps(meta, indent=1) + "\n")
        print(f"restored {cfg['input']} -> {out_path}")
        print(f"router weights: {[round(float(x), 4) for x in weights]}")
        return EXIT_OK
    if not cfg["manifest"]:
        raise UsageError("infer needs either --in IMAGE or --manifest MANIFEST")
    ws = Workspace(cfg["out"] or _out_root() / "infer")
    holder.append(ws)
    cfg["out"] = str(ws.dir)
    manifest = Manifest.load(cfg["manifest"])
    records, weights, failures = evaluate_manifest(
        ckpt, manifest, k=cfg["k"], override=cfg["expert"], save_dir=ws.dir / "restored"
    )
    if records:
        summary = _emit_eval_outputs(ws, records, weights)
        print(f"batch inference summary: {summary}")
    for path, err in failures:
        print(f"failed: {path}: {err}", file=sys.stderr)
    _echo_config(ws, "infer", cfg)
    ws.write_files_manifest()
    return EXIT_RUNTIME if failures else EXIT_OK


ANALYZE_OPTS = [
    Opt("ckpt_a", str, None, "first checkpoint", required=True),
    Opt("ckpt_b", str, None, "second checkpoint", required=True),
    Opt("bandwidth", str, "median", "RBF bandwidth: 'median' or a positive number"),
    Opt("threshold", float, 0.7, "high-correlation flag threshold"),
    Opt("out", str, None, "output directory"),
]


def cmd_analyze(args, holder):
    cfg = resolve_options(args, ANALYZE_OPTS)
    ws = Workspace(cfg["out"] or _out_root() / "analyze")
    holder.append(ws)
    cfg["out"] = str(ws.dir)
    bandwidth = cfg["bandwidth"]
    if bandwidth != "median":
        try:
            bandwidth = float(bandwidth)
        except ValueError as exc:
            raise UsageError(f"--bandwidth must be 'median' or a number, got {bandwidth!r}") from exc
    a = load_checkpoint(cfg["ckpt_a"])
    b = load_checkpoint(cfg["ckpt_b"])
    report = similarity_report(a, b, bandwidth=bandwidth, threshold=cfg["threshold"])
    (ws.dir / "report.json").write_text(report.to_json() + "\n")
    (ws.dir / "report.txt").write_text(report.to_table())
    save_similarity_bars(report, ws.dir / "similarity_pearson.png", metric="mean_corr")
    save_similarity_bars(report, ws.dir / "similarity_cka.png", metric="cka")
    _echo_config(ws, "analyze", cfg)
    ws.write_files_manifest()
    flagged = sum(1 for l in report.layers if l.high_corr)
    print(f"analyzed {len(report.layers)} layers; {flagged} above R > {cfg['threshold']}")
    print(f"report: {ws.dir / 'report.json'}")
    return EXIT_OK


EVAL_OPTS = [
    Opt("ckpt", str, None, "checkpoint file", required=True),
    Opt("manifest", str, None, "evaluation manifest", required=True),
    Opt("k", int, None, "top-k experts"),
    Opt("expert", int, None, "manual expert override id"),
    Opt("out", str, None, "output directory"),
]


def cmd_eval(args, holder):
    cfg = resolve_options(args, EVAL_OPTS)
    ws = Workspace(cfg["out"] or _out_root() / "eval")
    holder.append(ws)
    cfg["out"] = str(ws.dir)
    ckpt = load_checkpoint(cfg["ckpt"])
    manifest = Manifest.load(cfg["manifest"])
    records, weights, failures = evaluate_manifest(ckpt, manifest, k=cfg["k"], override=cfg["expert"])
    if records:
        summary = _emit_eval_outputs(ws, records, weights)
        print(f"evaluation summary: {summary}")
    for path, err in failures:
        print(f"failed: {path}: {err}", file=sys.stderr)
    _echo_config(ws, "eval", cfg)
    ws.write_files_manifest()
    return EXIT_RUNTIME if failures else EXIT_OK


MACS_OPTS = _ARCH_OPTS + [
    Opt("ckpt", str, None, "take the architecture from a checkpoint instead of flags"),
    Opt("height", int, 256, "input height"),
    Opt("width_px", int, 256, "input width"),
    Opt("out", str, None, "output directory"),
]


def cmd_macs(args, holder):
    cfg = resolve_options(args, MACS_OPTS)
    ws = Workspace(cfg["out"] or _out_root() / "macs")
    holder.append(ws)
    cfg["out"] = str(ws.dir)
    arch = load_checkpoint(cfg["ckpt"]).config if cfg["ckpt"] else _arch_from(cfg)
    hw = (cfg["height"], cfg["width_px"])
    rows = []
    for k in range(1, arch.experts_per_block + 1):
        cc = count_params_macs(arch, hw, k=k)
        rows.append(
            {
                "network": "mixture",
                "k": k,
                "params": cc.params,
                "active_params": cc.active_params,
                "macs": cc.macs,
            }
        )
    base = count_params_macs(arch.baseline(), hw)
    rows.append(
        {
            "network": "baseline",
            "k": 1,
            "params": base.params,
            "active_params": base.active_params,
            "macs": base.macs,
        }
    )
    router = router_overhead(arch, hw)
    k1 = count_params_macs(arch, hw, k=1)
    result = {
        "input": list(hw),
        "rows": rows,
        "router": {"params": router.params, "macs": router.macs},
        "router_overhead_identity": bool(k1.macs - router.macs == base.macs),
    }
    (ws.dir / "macs.json").write_text(json.dumps(result, indent=1) + "\n")
    table = emit_table(rows)
    (ws.dir / "macs.txt").write_text(table)
    print(table, end="")
    print(f"router overhead: {router.params} params, {router.macs} MACs")
    print(f"identity macs(k=1) - router == baseline: {result['router_overhead_identity']}")
    _echo_config(ws, "macs", cfg)
    ws.write_files_manifest()
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser assembly and entry point

_COMMANDS = {
    "synth": (cmd_synth, SYNTH_OPTS, "generate the synthetic degraded/clean dataset"),
    "curate": (cmd_curate, CURATE_OPTS, "subsample or balance a dataset manifest"),
    "train": (cmd_train, TRAIN_OPTS, "run the two-stage training procedure"),
    "infer": (cmd_infer, INFER_OPTS, "restore images with a trained checkpoint"),
    "analyze": (cmd_analyze, ANALYZE_OPTS, "compare two checkpoints' weights (Pearson / CKA)"),
    "eval": (cmd_eval, EVAL_OPTS, "compute PSNR/SSIM/router metrics over a manifest"),
    "macs": (cmd_macs, MACS_OPTS, "analytic parameter and MAC accounting"),
}


def build_parser() -> _Parser:
    parser = _Parser(prog="demoe", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_fn, opts, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=str, default=None, help="flat key = value config file")
        for o in opts:
            if o.name == "input":
                p.add_argument("--in", dest="input", type=str, default=None, help=o.help)
            else:
                o.add_to(p)
    return parser


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    handler = _COMMANDS[args.command][0]
    holder: list = []
    try:
        return handler(args, holder)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        for ws in holder:
            ws.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
