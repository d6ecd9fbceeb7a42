"""``pae`` command line: data generation, pretraining, MPA, tuning, checks and reports.

Exit codes: 0 success, 1 validation error (bad arguments, config, inputs),
2 numeric failure (divergence, eigensolver breakdown, failed oracle check).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path


from . import analysis, oracles
from .backbone import ViTConfig, load_backbone, pretrain_source, save_backbone
from .kld import load_system
from .mpa import run_mpa
from .spectral import save_masks
from .synth_data import PlantedTaskSpec, generate_dataset, load_dataset, save_dataset, source_spec
from .tensor_core.errors import NumericError, PaeError
from .tensor_core.io import load_tensor, save_tensor, sha256_file
from .trainer import TrainConfig, speedup, train, write_outputs

log = logging.getLogger("pae")

SOURCE_PREFIX = "source_"


class UsageError(PaeError, ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- manifest

def write_manifest(out_dir, subcommand: str, args, files, timings: dict,
                   config: TrainConfig | None = None, seed: int | None = None) -> Path:
    """``manifest.json`` listing every output with its sha256 (the manifest itself excluded)."""
    out = Path(out_dir)
    entries = {}
    for f in sorted(set(Path(p) for p in files)):
        entries[str(f.relative_to(out))] = sha256_file(f)
    payload = {
        "subcommand": subcommand,
        "config_path": getattr(args, "config", None),
        "config": config.__dict__ if config is not None else None,
        "seed": seed,
        "output_dir": str(out),
        "checksums": entries,
        "timings": timings,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _config(args) -> TrainConfig:
    if not args.config:
        raise UsageError("--config is required")
    return TrainConfig.from_file(args.config)


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    t0 = time.perf_counter()
    out = Path(args.out)
    spec = PlantedTaskSpec(seed=args.seed, n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
                           signal_amp=args.signal_amp, noise_amp=args.noise_amp)
    files = save_dataset(generate_dataset(spec), out)
    if args.source:
        src = source_spec(args.seed, signal_amp=args.signal_amp, noise_amp=args.noise_amp)
        files += save_dataset(generate_dataset(src), out, prefix=SOURCE_PREFIX)
    write_manifest(out, "gen-data", args, files, {"seconds": time.perf_counter() - t0}, seed=args.seed)
    print(f"wrote dataset to {out}")
    return 0


def cmd_pretrain_source(args) -> int:
    t0 = time.perf_counter()
    cfg = _config(args).vit() if args.config else ViTConfig()
    data = load_dataset(args.data, prefix=SOURCE_PREFIX)
    split = data["train"]
    backbone = pretrain_source(cfg, split.images, split.labels, steps=args.steps, lr=args.lr,
                               seed=args.seed, source_task=f"planted-source-seed{data.spec.seed}")
    files = save_backbone(backbone, args.out)
    write_manifest(args.out, "pretrain-source", args, files, {"seconds": time.perf_counter() - t0},
                   seed=args.seed)
    print(f"backbone {backbone.digest()[:16]} written to {args.out}")
    return 0


def cmd_mpa_init(args) -> int:
    cfg = _config(args)
    backbone = load_backbone(args.backbone)
    split = load_dataset(args.data)["train"]
    res = run_mpa(backbone, split.images, split.labels, cfg.classes, cfg.prompt_t, cfg.w, cfg.r,
                  cfg.batch, cfg.seed, copy=cfg.copy_init)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    ranking = out / "ranking.csv"
    with ranking.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mask_id", "origin_row", "origin_col", "loss"])
        for mask_id, loss in res.ranking.entries:
            r, c = res.masks[mask_id].origin
            w.writerow([mask_id, r, c, repr(loss)])
    files.append(ranking)
    save_tensor(out / "init_prompts.paet", res.prompts)
    files.append(out / "init_prompts.paet")
    save_masks(res.masks, out / "masks")
    files += sorted((out / "masks").iterdir())
    summary = out / "mpa_summary.json"
    summary.write_text(json.dumps({
        "schema": 1, "top_ids": res.ranking.top(cfg.prompt_t), "masks": len(res.masks),
        "batch_index": [int(i) for i in res.batch_index], "probe": res.ranking.probe,
        "probe_train_accuracy": res.probe.train_accuracy,
    }, indent=2, sort_keys=True) + "\n")
    files.append(summary)
    write_manifest(out, "mpa-init", args, files,
                   {"phase1_seconds": res.phase1_seconds, "phase2_seconds": res.phase2_seconds},
                   config=cfg, seed=cfg.seed)
    print(f"top-{cfg.prompt_t} masks: {res.ranking.top(cfg.prompt_t)} (phase I {res.phase1_seconds:.2f}s)")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    backbone = load_backbone(args.backbone)
    data = load_dataset(args.data)
    tr, va = data["train"], data["val"]
    digest = backbone.digest()
    result = train(cfg, backbone, tr.images, tr.labels, va.images, va.labels)
    if backbone.digest() != digest:
        raise NumericError("backbone weights changed during tuning")
    out = Path(args.out)
    (out / "config.txt").parent.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    files = write_outputs(result, out) + [out / "config.txt"]
    write_manifest(out, "train", args, files, result.timings, config=cfg, seed=cfg.seed)
    s = result.summary()
    if result.status != "ok":
        print(f"run failed: {result.failure}", file=sys.stderr)
        return 2
    print(f"final val acc {s['final_val_acc']:.2f}%  epochs_to_best {s['epochs_to_best']}  "
          f"oscillation {s['oscillation_score']}")
    return 0


def cmd_gradcheck(args) -> int:
    rows = oracles.run_all(args.seed)
    width = max(len(r.suite) + len(r.check) for r in rows) + 3
    print(f"{'suite / check':<{width}} {'error':>12} {'tolerance':>10}  result")
    for r in rows:
        label = f"{r.suite} / {r.check}"
        print(f"{label:<{width}} {r.error:>12.3e} {r.tolerance:>10.1e}  {'PASS' if r.passed else 'FAIL'}")
    suites = sorted({r.suite for r in rows})
    failed = sorted({r.suite for r in rows if not r.passed})
    print(f"{len(suites) - len(failed)}/{len(suites)} oracle suites passed")
    return 0 if not failed else 2


def cmd_analyze(args) -> int:
    run = Path(args.run)
    out = Path(args.out) if args.out else run / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    system = load_system(run / "checkpoint" / "koopman")
    prompts = load_tensor(run / "checkpoint" / "prompts.paet")
    reports = analysis.spectrum_report(system)
    M = analysis.prompt_cka_matrix(list(prompts))
    files = [analysis.write_spectrum_json(reports, out / "spectrum.json"),
             analysis.write_cka_csv(M, out / "cka.csv")]
    corr = analysis.distance_spearman(M) if len(prompts) >= 3 else float("nan")
    stats = out / "analysis.json"
    stats.write_text(json.dumps({"schema": 1, "cka_distance_spearman": corr,
                                 "spectral_radius": [r.spectral_radius for r in reports]},
                                indent=2, sort_keys=True) + "\n")
    files.append(stats)
    write_manifest(out, "analyze", args, files, {})
    for r in reports:
        print(f"{r.tag}: spectral radius {r.spectral_radius:.4f}, mean |lambda| {r.mean_abs:.4f}")
    print(f"CKA vs layer distance (Spearman): {corr:.3f}")
    return 0


def cmd_compare(args) -> int:
    if len(args.summaries) < 2:
        raise UsageError("compare needs at least two summary files (baseline first)")
    loaded = []
    for path in args.summaries:
        s = json.loads(Path(path).read_text())
        if s.get("schema") != 1:
            raise UsageError(f"{path}: unsupported summary schema {s.get('schema')!r}")
        if not s.get("val_curve"):
            raise UsageError(f"{path}: summary has no validation curve (status {s.get('status')})")
        loaded.append((path, s))
    base = loaded[0][1]
    rows = []
    for path, s in loaded:
        rows.append({
            "summary": str(path), "final_val_acc": s["final_val_acc"],
            "epochs_to_best": s["epochs_to_best"],
            "speedup": speedup(base["val_curve"], s["val_curve"]),
            "oscillation_score": s["oscillation_score"],
        })
    print(f"{'summary':<40} {'final_acc':>9} {'ep_best':>7} {'speedup':>8} {'oscill':>10}")
    for r in rows:
        osc = "n/a" if r["oscillation_score"] is None else f"{r['oscillation_score']:.4f}"
        print(f"{r['summary'][-40:]:<40} {r['final_val_acc']:>9.2f} {r['epochs_to_best']:>7d} "
              f"{r['speedup']:>8.3f} {osc:>10}")
    if args.out:
        Path(args.out).write_text(json.dumps({"schema": 1, "rows": rows}, indent=2, sort_keys=True) + "\n")
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("gen-data", help="write a planted-frequency dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-train", type=int, default=PlantedTaskSpec.n_train)
    g.add_argument("--n-val", type=int, default=PlantedTaskSpec.n_val)
    g.add_argument("--n-test", type=int, default=PlantedTaskSpec.n_test)
    g.add_argument("--signal-amp", type=float, default=PlantedTaskSpec.signal_amp)
    g.add_argument("--noise-amp", type=float, default=PlantedTaskSpec.noise_amp)
    g.add_argument("--no-source", dest="source", action="store_false",
                   help="skip the class-disjoint source split")
    g.set_defaults(fn=cmd_gen_data)

    g = sub.add_parser("pretrain-source", help="pretrain and freeze a backbone on the source split")
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="take the architecture from a train config")
    g.add_argument("--steps", type=int, default=150)
    g.add_argument("--lr", type=float, default=2e-3)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_pretrain_source)

    g = sub.add_parser("mpa-init", help="rank frequency masks and build initial prompts")
    for name in ("--config", "--backbone", "--data", "--out"):
        g.add_argument(name, required=True)
    g.set_defaults(fn=cmd_mpa_init)

    g = sub.add_parser("train", help="tune prompts on the downstream split")
    for name in ("--config", "--backbone", "--data", "--out"):
        g.add_argument(name, required=True)
    g.set_defaults(fn=cmd_train)

    g = sub.add_parser("gradcheck", help="run every oracle comparison")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gradcheck)

    g = sub.add_parser("analyze", help="Koopman spectrum and prompt CKA of a trained run")
    g.add_argument("--run", required=True)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_analyze)

    g = sub.add_parser("compare", help="speedup and oscillation across summaries, baseline first")
    g.add_argument("summaries", nargs="+")
    g.add_argument("--out")
    g.set_defaults(fn=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"pae: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except NumericError as exc:
        print(f"pae: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (PaeError, OSError, KeyError, ValueError) as exc:
        print(f"pae: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
