"""Command-line entry point: ``tidespl {gen,train,eval,gradcheck,dump-latents}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datafile, evaluation, synthdata
from . import numerics as nx
from .model import ConfigError, ModelConfig, TiDeSPLVAE, load_checkpoint, strict_from_dict
from .objectives import total_loss
from .training import TrainConfig, TrainingError, train

log = logging.getLogger("tidespl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PROTOCOLS = ("reconstruction", "scene", "movie", "points")


class CLIError(Exception):
    def __init__(self, msg: str, code: int = EXIT_USAGE):
        self.code = code
        super().__init__(msg)


@dataclass
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: dict | None = None
    evaluation: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        cfg = strict_from_dict(cls, data)
        if not isinstance(cfg.model, ModelConfig):
            cfg.model = ModelConfig.from_dict(cfg.model)
        if not isinstance(cfg.train, TrainConfig):
            cfg.train = TrainConfig.from_dict({"seed": cfg.seed, **cfg.train})
        if cfg.dataset is not None:
            if not isinstance(cfg.dataset, dict) or set(cfg.dataset) - {"kind", "spec", "path"}:
                raise ConfigError("dataset must be a mapping with keys from {kind, spec, path}")
        if not isinstance(cfg.evaluation, dict):
            raise ConfigError("evaluation must be a mapping")
        return cfg

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "dataset": self.dataset,
            "evaluation": self.evaluation,
            "seed": self.seed,
            "output_dir": self.output_dir,
        }


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise CLIError(f"cannot read {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise CLIError(f"{path}: invalid JSON: {e}") from None


def load_config(path) -> ExperimentConfig:
    try:
        return ExperimentConfig.from_dict(read_json(path))
    except (ConfigError, TypeError) as e:
        raise CLIError(f"{path}: {e}") from None


def _prepare_out(path: Path, overwrite: bool, is_dir: bool = True) -> None:
    if path.exists() and not overwrite:
        raise CLIError(f"{path} already exists; use --overwrite to replace it")
    if is_dir:
        path.mkdir(parents=True, exist_ok=True)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)


# -------------------------------------------------------------- data files


def write_bundle(bundle: synthdata.DatasetBundle, out: Path) -> dict[str, str]:
    hashes = {}
    for name in synthdata.PARTITIONS:
        if name not in bundle.partitions:
            continue
        data = datafile.encode(bundle[name], {"manifest": bundle.manifest, "partition": name})
        (out / f"{name}.nspk").write_bytes(data)
        hashes[name] = evaluation.sha256(data)
    (out / "manifest.json").write_text(dumps({"manifest": bundle.manifest, "sha256": hashes}))
    return hashes


def read_bundle(path) -> tuple[synthdata.DatasetBundle, str]:
    """Load a directory of partition files (or a single file as "train" and
    "test").  Returns the bundle and a hash over all file bytes."""
    path = Path(path)
    files = {}
    if path.is_dir():
        for name in synthdata.PARTITIONS:
            f = path / f"{name}.nspk"
            if f.exists():
                files[name] = f
        if "train" not in files:
            raise CLIError(f"{path}: no train.nspk found", EXIT_DATA)
    elif path.is_file():
        files = {"train": path, "test": path}
    else:
        raise CLIError(f"{path}: no such data file or directory", EXIT_DATA)
    parts, manifest, blobs = {}, {}, []
    for name, f in files.items():
        try:
            raw = f.read_bytes()
            sf = datafile.decode(raw)
        except datafile.DataFormatError as e:
            raise CLIError(f"{f}: {e}", EXIT_DATA) from None
        except OSError as e:
            raise CLIError(f"cannot read {f}: {e}", EXIT_DATA) from None
        blobs.append(raw)
        parts[name] = sf.partition
        manifest = sf.meta.get("manifest", manifest)
    return synthdata.DatasetBundle(parts, manifest), evaluation.sha256(b"".join(blobs))


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    spec = {}
    if args.config:
        spec = read_json(args.config)
    if args.seed is not None:
        spec["seed"] = args.seed
    try:
        spec_obj = synthdata.spec_from_dict(args.kind, spec)
    except (ConfigError, TypeError) as e:
        raise CLIError(str(e)) from None
    out = Path(args.out)
    _prepare_out(out, args.overwrite)
    bundle = synthdata.generate(args.kind, spec_obj)
    if args.shuffle is not None:
        bundle = synthdata.shuffle_time(bundle, args.shuffle)
    hashes = write_bundle(bundle, out)
    for name, h in hashes.items():
        print(f"{name}: {len(bundle[name])} trials  sha256 {h}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data_path = args.data or (cfg.dataset or {}).get("path")
    if data_path:
        bundle, data_hash = read_bundle(data_path)
    elif cfg.dataset and "kind" in cfg.dataset:
        try:
            bundle = synthdata.generate(cfg.dataset["kind"], dict(cfg.dataset.get("spec", {})))
        except (ConfigError, TypeError) as e:
            raise CLIError(f"dataset: {e}") from None
        data_hash = evaluation.sha256(datafile.encode(bundle["train"]))
    else:
        raise CLIError("no data: pass --data or set dataset in the config")
    if bundle.n_neurons != cfg.model.n_neurons:
        raise CLIError(f"config/data mismatch: model.n_neurons={cfg.model.n_neurons} but the data has "
                       f"{bundle.n_neurons} neurons")
    out = Path(args.out or cfg.output_dir or "run")
    _prepare_out(out, args.overwrite)
    (out / "config.json").write_text(dumps(cfg.to_dict()))
    try:
        res = train(cfg.model, cfg.train, bundle["train"], out, meta={"dataset_sha256": data_hash})
    except TrainingError as e:
        raise CLIError(str(e), EXIT_NUMERIC) from None
    except ValueError as e:
        raise CLIError(str(e), EXIT_DATA) from None
    (out / "hashes.json").write_text(dumps({"dataset_sha256": data_hash,
                                            "checkpoint_sha256": evaluation.sha256(res.checkpoint)}))
    if res.records:
        print(json.dumps(res.records[-1]))
    print(f"checkpoint: {out / 'final.ckpt'}")
    return EXIT_OK


def _load_ckpt(path) -> tuple[TiDeSPLVAE, str]:
    path = Path(path)
    try:
        raw = path.read_bytes()
        model, _ = load_checkpoint(path)
    except OSError as e:
        raise CLIError(f"cannot read checkpoint {path}: {e}", EXIT_DATA) from None
    except ValueError as e:
        raise CLIError(f"{path}: {e}", EXIT_DATA) from None
    return model, evaluation.sha256(raw)


def _window_frames(seconds: float, bundle, frame_len: int) -> int:
    bin_ms = float(bundle.manifest.get("spec", {}).get("bin_ms", 1.0))
    return int(round(seconds * 1000.0 / (frame_len * bin_ms)))


def _headline(res) -> float:
    return res.r_squared if isinstance(res, evaluation.ReconstructionScore) else res.accuracy


def run_eval(model, bundle, protocol, which="both", markov_order=None, window_s=1.0,
             fit_on_train=False, frame_len=4):
    if protocol == "reconstruction":
        return evaluation.evaluate_reconstruction(model, bundle, which, markov_order, fit_on_train)
    if protocol == "scene":
        return evaluation.evaluate_scene(model, bundle, which, markov_order)
    if protocol == "movie":
        return evaluation.evaluate_movie(model, bundle, _window_frames(window_s, bundle, frame_len), which,
                                         markov_order, frame_len)
    if protocol == "points":
        return evaluation.evaluate_points(model, bundle, which)
    raise CLIError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")


def cmd_eval(args) -> int:
    if args.protocol not in PROTOCOLS:
        raise CLIError(f"unknown protocol {args.protocol!r}; expected one of {PROTOCOLS}")
    bundle, data_hash = read_bundle(args.data)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [None]
    if seeds != [None] and "{seed}" not in args.checkpoint:
        raise CLIError("--seeds needs a checkpoint path containing '{seed}'")
    results, hashes = {}, {}
    for seed in seeds:
        path = args.checkpoint if seed is None else args.checkpoint.replace("{seed}", str(seed))
        model, ck_hash = _load_ckpt(path)
        if model.config.n_neurons != bundle.n_neurons:
            raise CLIError(f"checkpoint expects {model.config.n_neurons} neurons, data has {bundle.n_neurons}")
        key = args.protocol if seed is None else f"{args.protocol}/seed{seed}"
        try:
            results[key] = run_eval(model, bundle, args.protocol, args.latents, args.markov_order,
                                    args.window, args.fit_on_train)
        except (ValueError, IndexError) as e:
            raise CLIError(str(e), EXIT_DATA) from None
        hashes[key] = ck_hash
    if len(seeds) > 1:
        vals = np.array([_headline(r) for r in results.values()])
        results["aggregate"] = {"mean": float(vals.mean()),
                                "stderr": float(vals.std(ddof=1) / np.sqrt(len(vals))),
                                "n": len(vals)}
    ck = next(iter(hashes.values())) if len(hashes) == 1 else evaluation.sha256("".join(hashes.values()).encode())
    echo = {"protocol": args.protocol, "latents": args.latents, "markov_order": args.markov_order,
            "window_s": args.window, "fit_on_train": args.fit_on_train, "seeds": seeds,
            "checkpoint_sha256": hashes}
    text = evaluation.metrics_report(results, data_hash, ck, echo)
    if args.out:
        out = Path(args.out)
        _prepare_out(out, args.overwrite, is_dir=False)
        out.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def gradcheck_report(n_neurons=4, seq_len=3, latent_dim=4, state_dim=4, batch=2, negatives=2,
                     seed=0, eps=1e-6, config: dict | None = None) -> dict[str, float]:
    """Per-parameter max relative gradient error of the full objective on a
    toy batch of ``batch`` pairs plus ``negatives`` extra windows."""
    mc = ModelConfig(**{"n_neurons": n_neurons, "latent_dim": latent_dim, "state_dim": state_dim,
                        "seq_len": seq_len, "max_offset": min(1, seq_len - 1), **(config or {})})
    rng = np.random.default_rng(seed)
    model = TiDeSPLVAE(mc, rng)
    rows = 2 * batch + negatives
    x = rng.poisson(1.5, size=(mc.seq_len, rows, mc.n_neurons)).astype(float)
    noise = rng.standard_normal((mc.seq_len, rows, mc.style_dim))

    def f():
        traj = model.unroll(x, training=True, noise=noise)
        return total_loss(model, traj, x, batch).total

    return nx.grad_check_per_param(f, model.params, eps)


def cmd_gradcheck(args) -> int:
    overrides = read_json(args.config) if args.config else {}
    if not isinstance(overrides, dict):
        raise CLIError("gradcheck config must be a JSON object")
    dims = {k: overrides.pop(k) for k in ("n_neurons", "seq_len", "latent_dim", "state_dim", "batch", "negatives", "seed")
            if k in overrides}
    try:
        report = gradcheck_report(**dims, eps=args.eps, config=overrides)
    except (ConfigError, TypeError) as e:
        raise CLIError(str(e)) from None
    except (nx.GradCheckError, nx.NonFiniteError) as e:
        print(f"FAIL {e}")
        return EXIT_NUMERIC
    groups: dict[str, float] = {}
    for name, err in report.items():
        g = name.split(".")[0]
        groups[g] = max(groups.get(g, 0.0), err)
    for name, err in sorted(report.items()):
        print(f"{name:24s} {err:.3e}")
    for g, err in sorted(groups.items()):
        print(f"group {g:18s} {err:.3e}")
    worst = max(report.values())
    ok = worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'} max relative error {worst:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_dump_latents(args) -> int:
    model, ck_hash = _load_ckpt(args.checkpoint)
    bundle, data_hash = read_bundle(args.data)
    if args.partition not in bundle.partitions:
        raise CLIError(f"data has no {args.partition!r} partition", EXIT_DATA)
    part = bundle[args.partition]
    if part.n_neurons != model.config.n_neurons:
        raise CLIError(f"checkpoint expects {model.config.n_neurons} neurons, data has {part.n_neurons}")
    out = Path(args.out)
    _prepare_out(out, args.overwrite, is_dir=False)
    try:
        evaluation.dump_latents(model, part, out, args.markov_order,
                                {"manifest": bundle.manifest, "partition": args.partition,
                                 "checkpoint_sha256": ck_hash, "dataset_sha256": data_hash},
                                overwrite=True)
    except OSError as e:
        raise CLIError(str(e), EXIT_DATA) from None
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tidespl", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--kind", choices=sorted(synthdata.SPECS), required=True)
    g.add_argument("--config", help="JSON file with generator spec fields")
    g.add_argument("--seed", type=int, help="overrides the generator seed")
    g.add_argument("--shuffle", type=int, metavar="SEED", help="also shuffle time within each trial")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True, help="experiment JSON (model, train, dataset, ...)")
    t.add_argument("--data", help="data directory or file (overrides the config)")
    t.add_argument("--out", help="run directory (overrides output_dir)")
    t.add_argument("--overwrite", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True, help="checkpoint path; may contain {seed} with --seeds")
    e.add_argument("--data", required=True)
    e.add_argument("--protocol", default="reconstruction", help=f"one of {', '.join(PROTOCOLS)}")
    e.add_argument("--latents", choices=evaluation.LATENT_BLOCKS, default="both")
    e.add_argument("--markov-order", type=int, default=None, help="antecedent steps per inference window")
    e.add_argument("--window", type=float, default=1.0, help="movie protocol tolerance in seconds")
    e.add_argument("--seeds", help="comma-separated seeds for mean/stderr aggregation")
    e.add_argument("--fit-on-train", action="store_true", help="fit the regression on train latents")
    e.add_argument("--out", help="also write the report here")
    e.add_argument("--overwrite", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    c.add_argument("--config", help="JSON with toy dims and model config overrides")
    c.add_argument("--eps", type=float, default=1e-6)
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("dump-latents", help="write per-step latents to a data file")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--partition", default="test")
    d.add_argument("--markov-order", type=int, default=None)
    d.add_argument("--out", required=True)
    d.add_argument("--overwrite", action="store_true")
    d.set_defaults(func=cmd_dump_latents)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, nx.NonFiniteError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
