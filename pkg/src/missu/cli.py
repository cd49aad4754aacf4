"""``missu`` command line entry point.

Errors are reported as a single JSON line on stderr with a nonzero exit code.
Set MISSU_DETERMINISTIC=1 for deterministic kernels and 64-bit training.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .complexity import compare_graphs, format_side_by_side
from .config import ConfigError, ModelConfig, PhantomSpec, RunConfig, load_run_config, reference_config
from .io import load_checkpoint, read_mask, read_volume, write_mask, write_volume
from .metrics import evaluate
from .model import build_model
from .synth import Sample, generate_phantom, zscore_normalize
from .trainer import (
    TrainState,
    configure_determinism,
    format_ablation,
    predict,
    run_ablation,
    run_training,
    torch_dtype,
)

DATA_MANIFEST = "manifest.json"


class CliError(Exception):
    pass


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _hash_files(paths) -> dict[str, str]:
    return {str(p): git_blob_hash(Path(p).read_bytes()) for p in sorted(map(str, paths))}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _run_manifest(command: str, config: dict, seed, inputs, outputs) -> dict:
    hashes = _hash_files(inputs)
    # content-only, so the same inputs in another directory hash the same
    combined = hashlib.sha1("".join(f"{Path(k).name}:{v}\n" for k, v in hashes.items()).encode()).hexdigest()
    return {
        "tool": f"missu {__version__}",
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": hashes,
        "input_hash": combined,
        "outputs": sorted(Path(p).name for p in outputs),
    }


def cmd_gen_data(args) -> None:
    spec = PhantomSpec.from_dict(json.loads(Path(args.spec).read_text())) if args.spec else PhantomSpec()
    if args.seed is not None:
        spec = spec.replace(seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cases, outputs = [], []
    for i in range(args.count):
        s = generate_phantom(spec, i)
        vol, seg = out / f"case_{i:04d}.mvol", out / f"case_{i:04d}.mseg"
        write_volume(s.volume, vol)
        write_mask(s.mask, seg)
        cases.append({"volume": vol.name, "mask": seg.name})
        outputs += [vol, seg]
    manifest = _run_manifest("gen-data", {"phantom": spec.to_dict(), "count": args.count},
                             spec.seed, [args.spec] if args.spec else [], outputs)
    manifest["cases"] = cases
    _write_json(out / DATA_MANIFEST, manifest)
    print(json.dumps({"written": len(cases), "out": str(out)}))


def load_data_dir(path: str | Path) -> list[Sample]:
    path = Path(path)
    mf = path / DATA_MANIFEST
    if mf.exists():
        cases = json.loads(mf.read_text())["cases"]
        pairs = [(path / c["volume"], path / c["mask"]) for c in cases]
    else:
        pairs = [(v, v.with_suffix(".mseg")) for v in sorted(path.glob("*.mvol"))]
    samples = []
    for vol, seg in pairs:
        samples.append(Sample(zscore_normalize(read_volume(vol)), read_mask(seg)))
    if not samples:
        raise CliError(f"no samples found in {path}")
    return samples


def _resolve_config(args) -> RunConfig:
    run = load_run_config(args.config) if args.config else RunConfig()
    train_over = {k: v for k, v in (("max_iters", args.max_iters), ("seed", args.seed),
                                    ("lr0", args.lr0), ("batch_size", args.batch_size))
                  if v is not None}
    if configure_determinism():
        train_over["dtype"] = "float64"
    run.train = run.train.replace(**train_over)
    return run


def cmd_train(args) -> None:
    run = _resolve_config(args)
    data = load_data_dir(args.data)
    out = Path(args.out)
    state = None
    if args.resume:
        ckpt = load_checkpoint(args.resume, expected_config=run.model)
        state = TrainState.from_checkpoint(ckpt, run.train)
    state, records = run_training(run.model, run.train, data, out, state=state)
    inputs = [p for p in Path(args.data).iterdir() if p.is_file()]
    if args.config:
        inputs.append(Path(args.config))
    manifest = _run_manifest("train", run.to_dict(), run.train.seed, inputs,
                             sorted(p for p in out.iterdir() if p.name != "manifest.json"))
    _write_json(out / "manifest.json", manifest)
    last = records[-1] if records else None
    print(json.dumps({"steps": state.step, "final": last, "checkpoint": str(out / "final.ckpt")}))


def cmd_infer(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.model_config
    if cfg.msf_mode == "ms_output" and "theta_p" not in ckpt.group_names():
        raise CliError("checkpoint lacks theta_p, which ms_output mode needs at inference")
    dtype = torch_dtype(ckpt.train_config.dtype)
    model = build_model(cfg, dtype=dtype, inference=True)
    model.load_params(ckpt.params)
    vol = read_volume(args.volume)
    if vol.spatial_shape != cfg.input_shape or vol.channels != cfg.in_channels:
        raise CliError(f"volume {vol.data.shape} does not match model input "
                       f"({cfg.in_channels}, {cfg.input_shape})")
    pred = predict(model, zscore_normalize(vol).data)
    write_mask(pred, args.out, spacing=vol.spacing)
    print(json.dumps({"prediction": str(args.out), "labels": np.bincount(pred.ravel()).tolist()}))


def cmd_eval(args) -> None:
    pred, truth = read_mask(args.pred), read_mask(args.truth)
    report = evaluate(pred, truth, args.num_classes)
    print(json.dumps(report.to_dict(), sort_keys=True))


def cmd_ablate(args) -> None:
    run = _resolve_config(args)
    data = load_data_dir(args.data)
    n_eval = max(1, int(round(len(data) * args.eval_fraction)))
    if len(data) - n_eval < 1:
        raise CliError("ablation needs at least two samples")
    train_set, eval_set = data[:-n_eval], data[-n_eval:]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    rows = run_ablation(run.model, run.train, train_set, eval_set, seeds)
    report = {"seeds": seeds, "train_cases": len(train_set), "eval_cases": len(eval_set),
              "hausdorff_units": "voxels", "rows": [r.to_dict() for r in rows]}
    text = format_ablation(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "ablation.json", report)
        (out / "ablation.txt").write_text(text + "\n")
    print(text)


def cmd_complexity(args) -> None:
    if args.reference_scale:
        cfg = reference_config()
    elif args.config:
        cfg = load_run_config(args.config).model
    else:
        cfg = ModelConfig()
    print(json.dumps({"config": cfg.to_dict(), **compare_graphs(cfg)}, sort_keys=True))
    if args.text:
        print(format_side_by_side(cfg))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="missu", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic phantoms")
    g.add_argument("--spec", help="PhantomSpec JSON file")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=4)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    def train_flags(sp):
        sp.add_argument("--config", help="JSON file with 'model' and 'train' sections")
        sp.add_argument("--data", required=True)
        sp.add_argument("--max-iters", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--lr0", type=float)
        sp.add_argument("--batch-size", type=int)

    t = sub.add_parser("train", help="train a model")
    train_flags(t)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="segment one volume")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--volume", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score a predicted mask")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--num-classes", type=int, default=4)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the seven-row ablation grid")
    train_flags(a)
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--eval-fraction", type=float, default=0.25)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("complexity", help="training vs inference graph parameter/FLOP counts")
    c.add_argument("--config")
    c.add_argument("--reference-scale", action="store_true")
    c.add_argument("--text", action="store_true", help="also print a side-by-side table")
    c.set_defaults(func=cmd_complexity)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, ConfigError, ValueError, KeyError, OSError, RuntimeError) as exc:
        msg = str(exc).replace("\n", " ")
        print(json.dumps({"error": type(exc).__name__, "message": msg}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
