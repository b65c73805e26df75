"""Command-line runner: ``run`` trains presets, ``verify`` runs the oracle
suites and ``compare`` tabulates finished runs.

Output layout under the output root (``--out``, else ``$ECGAN_LAB_OUT``,
else ``./runs``)::

    <root>/<preset>/seed<k>/metrics.jsonl   best.npz   last.npz   samples.png
    <root>/<preset>/summary.json
    <root>/compare/table.txt   table.csv

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
METRICS = ("frechet", "intra_frechet", "condition_accuracy", "classifier_entropy_score")

log = logging.getLogger("ecgan_lab")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``section.key=value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(value: str, current):
    if isinstance(current, bool):
        v = value.lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(int(s) for s in value.replace(",", " ").split())
    return value


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise UsageError("need at least one seed")
    return seeds


@dataclasses.dataclass
class ExperimentConfig:
    preset: str
    dataset: str = "ring8"
    seeds: list[int] = dataclasses.field(default_factory=lambda: [0])
    out_root: Path = Path("runs")
    n_data: int = 50_000
    train: dict = dataclasses.field(default_factory=dict)
    loss: dict = dataclasses.field(default_factory=dict)
    net: dict = dataclasses.field(default_factory=dict)

    def run_dir(self) -> Path:
        return self.out_root / self.preset


def out_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get("ECGAN_LAB_OUT") or "runs")


def _apply_settings(cfg: ExperimentConfig, settings: dict[str, str]) -> None:
    from .losses import LossWeights
    from .networks import NetConfig
    from .trainer import TrainConfig

    known = {
        "train": {f.name: f.default for f in dataclasses.fields(TrainConfig)},
        "loss": {f.name: f.default for f in dataclasses.fields(LossWeights)},
        "net": {f.name: f.default for f in dataclasses.fields(NetConfig)
                if f.name not in ("data_shape", "num_classes")},
    }
    for key, value in settings.items():
        section, _, name = key.partition(".")
        if section == "run" and name in ("preset", "dataset", "n_data", "seeds"):
            if name == "seeds":
                cfg.seeds = _parse_seeds(value)
            elif name == "n_data":
                cfg.n_data = int(value)
            else:
                setattr(cfg, name, value)
            continue
        if section not in known or name not in known[section]:
            raise UsageError(f"unknown config key {key!r}")
        try:
            default = known[section][name]
            if default is dataclasses.MISSING:
                default = ""
            getattr(cfg, section)[name] = _coerce(value, default)
        except ValueError as err:
            raise UsageError(f"bad value for {key}: {err}") from None


def build_experiment(args: argparse.Namespace) -> ExperimentConfig:
    from .variants import PRESET_NAMES

    settings = parse_config_file(args.config) if args.config else {}
    cfg = ExperimentConfig(preset=settings.pop("run.preset", "") or "", out_root=out_root(args.out))
    _apply_settings(cfg, settings)
    if args.preset:
        cfg.preset = args.preset
    if args.dataset:
        cfg.dataset = args.dataset
    if args.seeds:
        cfg.seeds = _parse_seeds(args.seeds)
    if args.n_data:
        cfg.n_data = args.n_data
    if args.steps is not None:
        cfg.train["n_iter"] = args.steps
    if args.eval_every is not None:
        cfg.train["eval_every"] = args.eval_every
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    _apply_settings(cfg, overrides)
    if cfg.preset not in PRESET_NAMES:
        raise UsageError(f"unknown preset {cfg.preset!r}; valid names: {', '.join(PRESET_NAMES)}")
    # a run shorter than the eval interval still gets one terminal evaluation
    n_iter = cfg.train.get("n_iter")
    if n_iter is not None and n_iter > 0 and cfg.train.get("eval_every", 1000) > n_iter:
        cfg.train["eval_every"] = n_iter
    return cfg


# ---------------------------------------------------------------------------
# artifacts


def save_samples_png(path: Path, model, num_classes: int, sample_shape, noise_dim: int,
                     seed: int, oracle=None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .data import to_uint8
    from .trainer import generate

    if len(sample_shape) == 1:
        labels = np.repeat(np.arange(num_classes), 250)
        x = generate(model, labels, noise_dim, seed)
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.scatter(x[:, 0], x[:, 1], c=labels, cmap="tab10", s=2)
        if oracle is not None:
            ax.scatter(oracle.means[:, 0], oracle.means[:, 1], marker="x", c="k", s=30)
        ax.set_aspect("equal")
        ax.set_title("generated samples by class")
    else:
        per_class = 8
        labels = np.repeat(np.arange(num_classes), per_class)
        imgs = to_uint8(generate(model, labels, noise_dim, seed))
        fig, axes = plt.subplots(num_classes, per_class,
                                 figsize=(per_class, num_classes), squeeze=False)
        for ax, img in zip(axes.ravel(), imgs):
            ax.imshow(img.squeeze(-1) if img.shape[-1] == 1 else img,
                      cmap="gray" if img.shape[-1] == 1 else None)
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def aggregate(per_seed: list[dict]) -> dict:
    """Mean and sample standard deviation (0 for one seed) of each best metric."""
    out = {}
    for m in METRICS:
        vals = [r["best"][m] for r in per_seed if r["best"] and r["best"][m] is not None]
        vals = [v for v in vals if not math.isnan(v)]
        if not vals:
            out[m] = {"mean": None, "std": None, "n": 0}
            continue
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out[m] = {"mean": float(np.mean(vals)), "std": std, "n": len(vals)}
    return out


def run_experiment(cfg: ExperimentConfig, force: bool = False) -> dict:
    from .data import make_dataset
    from .trainer import TrainConfig, default_net_config, train
    from .variants import make_preset

    run_dir = cfg.run_dir()
    if run_dir.exists() and any(run_dir.iterdir()):
        if not force:
            raise FileExistsError(f"{run_dir} already has artifacts; pass --force to overwrite")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    preset = make_preset(cfg.preset, cfg.loss)
    data = make_dataset(cfg.dataset, n=cfg.n_data, seed=0)
    per_seed = []
    for seed in cfg.seeds:
        tcfg = TrainConfig(**{**cfg.train, "seed": seed})
        net = default_net_config(data, **cfg.net)
        seed_dir = run_dir / f"seed{seed}"
        t0 = time.time()
        log.info("%s seed %d: %d steps on %s", preset.name, seed, tcfg.n_iter, cfg.dataset)
        res = train(tcfg, preset, data, net_config=net, out_dir=seed_dir)
        save_samples_png(seed_dir / "samples.png", res.state.generator_ema, data.num_classes,
                         data.sample_shape, net.noise_dim, seed, data.oracle)
        per_seed.append({
            "seed": seed,
            "best": dataclasses.asdict(res.best) if res.best else None,
            "last": dataclasses.asdict(res.history[-1]) if res.history else None,
            "class_coverage": res.extras[-1].get("class_coverage") if res.extras else None,
            "seconds": round(time.time() - t0, 2),
        })
    summary = {
        "preset": preset.name,
        "dataset": cfg.dataset,
        "seeds": cfg.seeds,
        "weights": dataclasses.asdict(preset.weights),
        "train": {**cfg.train},
        "per_seed": per_seed,
        "aggregate": aggregate(per_seed),
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


# ---------------------------------------------------------------------------
# verify


def _verify(kind: str, args) -> bool:
    from . import checks

    if kind == "duality":
        t0 = time.time()
        rep = checks.duality_suite(seed=args.seed)
        ok = rep.passed == rep.instances
        print(f"duality: {rep.passed}/{rep.instances} instances pass "
              f"(max gibbs gap {rep.max_gibbs_gap:.2e}, max |gap - KL| {rep.max_kl_mismatch:.2e}, "
              f"{time.time() - t0:.1f}s) {'PASS' if ok else 'FAIL'}")
        for f in rep.failures[:10]:
            print("  " + f)
        return ok
    if kind == "entropy-bound":
        reports = checks.entropy_bound_battery(seed=args.seed)
        for r in reports:
            print(json.dumps(r.as_record()))
        violations = sum(int(r.violations.sum()) for r in reports)
        rate = violations / len(reports)
        ok = rate < 0.01
        print(f"entropy-bound: {violations}/{len(reports)} trials exceed H(X) + 3 SE "
              f"({rate:.1%}) {'PASS' if ok else 'FAIL'}")
        return ok
    if kind == "gradients":
        rep = checks.gradient_check(seed=args.seed)
        ok = rep.worst <= 1e-5
        errs = ", ".join(f"{k} {v:.2e}" for k, v in rep.max_rel_error.items())
        print(f"gradients: {rep.n_parameters} parameters, max relative error {errs} "
              f"{'PASS' if ok else 'FAIL'}")
        return ok
    if kind == "equivalence":
        rep = checks.equivalence_suite(seed=args.seed)
        ok = not rep.failures
        print(f"equivalence: {rep.trials - sum('discrepancy' in f for f in rep.failures)}/"
              f"{rep.trials} triples match (max {rep.max_discrepancy:.2e}); "
              f"bias perturbation changed output in {rep.bias_changes_output}/{rep.trials}; "
              f"module max {rep.module_max_discrepancy:.2e} {'PASS' if ok else 'FAIL'}")
        for f in rep.failures[:10]:
            print("  " + f)
        return ok
    raise UsageError(f"unknown verify kind {kind!r}")


# ---------------------------------------------------------------------------
# compare


def _fmt(stat: dict) -> str:
    if stat["mean"] is None:
        return "n/a"
    return f"{stat['mean']:.4f} ± {stat['std']:.4f}"


def write_tables(summaries: list[dict], out_dir: Path) -> tuple[Path, Path]:
    from .variants import ABLATION_ORDER

    rows = sorted(summaries, key=lambda s: (ABLATION_ORDER.get(s["preset"], 99), s["preset"]))
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = out_dir / "table.csv", out_dir / "table.txt"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["order", "preset", "seeds"]
                   + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")])
        for s in rows:
            agg = s["aggregate"]
            w.writerow([ABLATION_ORDER.get(s["preset"], ""), s["preset"], len(s["seeds"])]
                       + [agg[m][k] for m in METRICS for k in ("mean", "std")])
    header = ["order", "preset", "seeds", *METRICS]
    body = [[str(ABLATION_ORDER.get(s["preset"], "")), s["preset"], str(len(s["seeds"]))]
            + [_fmt(s["aggregate"][m]) for m in METRICS] for s in rows]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header, *body]]
    txt_path.write_text("\n".join(lines) + "\n")
    return txt_path, csv_path


# ---------------------------------------------------------------------------
# entry point


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", help="ring<K> or a path to an image folder / record file")
    p.add_argument("--steps", type=int, help="generator steps (train.n_iter)")
    p.add_argument("--eval-every", type=int, help="evaluation interval (train.eval_every)")
    p.add_argument("--seeds", help="comma-separated seeds, e.g. 1,2")
    p.add_argument("--n-data", type=int, help="mixture samples to draw for ring datasets")
    p.add_argument("--config", help="key=value file (train.lr_d=0.0004, loss.alpha=1, ...)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out", help="output root (default $ECGAN_LAB_OUT or ./runs)")
    p.add_argument("--force", action="store_true", help="overwrite existing run artifacts")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecgan-lab", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one preset for one or more seeds")
    run.add_argument("--preset", help="preset name, e.g. ECGAN-UC")
    _add_run_options(run)

    ver = sub.add_parser("verify", help="run an oracle suite")
    ver.add_argument("kind", choices=["duality", "entropy-bound", "gradients", "equivalence"])
    ver.add_argument("--seed", type=int, default=0)

    cmp_ = sub.add_parser("compare", help="tabulate presets, training any that are missing")
    cmp_.add_argument("presets", nargs="+", help="two or more preset names")
    cmp_.add_argument("--no-train", action="store_true", help="only load existing summaries")
    _add_run_options(cmp_)
    return parser


def _cmd_run(args) -> int:
    cfg = build_experiment(args)
    summary = run_experiment(cfg, force=args.force)
    for m, stat in summary["aggregate"].items():
        print(f"{summary['preset']} {m}: {_fmt(stat)}")
    print(f"artifacts in {cfg.run_dir()}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    from .variants import PRESET_NAMES

    names = list(dict.fromkeys(p for item in args.presets for p in item.split(",") if p))
    if len(names) < 2:
        raise UsageError("compare needs at least two presets")
    unknown = [n for n in names if n not in PRESET_NAMES]
    if unknown:
        raise UsageError(f"unknown preset(s) {unknown}; valid names: {', '.join(PRESET_NAMES)}")
    root = out_root(args.out)
    missing = [root / n / "summary.json" for n in names if not (root / n / "summary.json").exists()]
    if missing and args.no_train:
        print("missing artifacts:", file=sys.stderr)
        for m in missing:
            print(f"  {m}", file=sys.stderr)
        return EXIT_FAIL
    summaries = []
    for n in names:
        path = root / n / "summary.json"
        if not path.exists():
            args.preset = n
            run_experiment(build_experiment(args), force=args.force)
        summaries.append(json.loads(path.read_text()))
    txt, _ = write_tables(summaries, root / "compare")
    print(txt.read_text(), end="")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "verify":
            return EXIT_OK if _verify(args.kind, args) else EXIT_FAIL
        return _cmd_compare(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (FileExistsError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as err:
        # invalid config values rejected by the dataclasses
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
