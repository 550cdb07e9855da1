"""``poems`` command line: train, evaluate, interpret, synth, bench, check.

Exit codes: 0 success, 1 verification or metric failure, 2 usage / input
error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import data as D
from . import evaluation as E
from . import interpret as I
from . import objective as O
from ._accel import backend_name
from .config import RunConfig
from .errors import ContractError, IngestionError, NumericError, PoemsError
from .persist import load_model, save_model

log = logging.getLogger("poems")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
CONFIG_SNAPSHOT = "config.txt"


class UsageError(PoemsError):
    module = "cli"


def _out_dir(args, default: Optional[Path] = None) -> Path:
    out = Path(args.out) if args.out else default
    if out is None:
        raise UsageError("--out is required for this command")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    return RunConfig.load(args.config, args.set or [])


def _prepared_data(cfg: RunConfig):
    """Load, align, split and standardise the configured omics."""
    paths = cfg.get_list("data.paths")
    if not paths:
        raise UsageError("no omic files configured (data.paths)")
    names = cfg.get_list("data.omics") or [Path(p).stem for p in paths]
    if len(names) != len(paths):
        raise UsageError(f"{len(names)} omic names for {len(paths)} data paths")
    mats = [D.load_omics_csv(p, n) for p, n in zip(paths, names)]
    label_path = cfg.get("data.labels")
    labels = D.load_labels(label_path) if label_path else None
    ds = D.align(mats, labels)
    if ds.dropped:
        log.warning("dropped %d sample(s) missing from some input", len(ds.dropped))
    sp = D.split(ds, cfg.get_int("data.split_seed"))
    std, _ = D.standardize(ds, sp)
    return std, sp


def _run_dir(args) -> Path:
    run = Path(args.run)
    if not (run / CONFIG_SNAPSHOT).exists():
        raise IngestionError(f"{run} holds no {CONFIG_SNAPSHOT}; pass the output directory of 'poems train'")
    return run


def _check_model_matches(model, ds):
    if list(model.omics) != ds.omics or model.feature_dims != [m.values.shape[1] for m in ds.matrices]:
        raise ContractError(
            f"model omics {model.omics} / dims {model.feature_dims} do not match the data "
            f"{ds.omics} / {[m.values.shape[1] for m in ds.matrices]}"
        )


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.set("train.seed", args.seed)
    if args.epochs is not None:
        cfg.set("train.epochs", args.epochs)
    out = _out_dir(args)
    tc = cfg.train_config()
    cfg.write(out / CONFIG_SNAPSHOT)
    ds, sp = _prepared_data(cfg)
    every = max(1, args.log_every)

    def progress(epoch, hist, _model):
        if (epoch + 1) % every == 0:
            log.info("epoch %d train %.6g val %.6g", epoch + 1, hist.train[-1].total, hist.val[-1].total)

    model, hist = O.train(ds, sp, tc, callback=progress)
    save_model(model, out / "model", config=tc.as_dict(),
               extra={"best_epoch": hist.best_epoch + 1, "stop_reason": hist.stop_reason})
    hist.write_csv(out / "history.csv")
    (out / "split.json").write_text(json.dumps(sp.as_dict()) + "\n", encoding="utf-8")
    print(f"trained {hist.n_epochs} epochs ({hist.stop_reason}), best epoch {hist.best_epoch + 1}, "
          f"val total {hist.val[hist.best_epoch].total!r}")
    print(f"wrote {out}")
    return EXIT_OK


def _load_run(args):
    run = _run_dir(args)
    cfg = RunConfig.load(run / CONFIG_SNAPSHOT, args.set or [])
    ds, sp = _prepared_data(cfg)
    model = load_model(run / "model")
    _check_model_matches(model, ds)
    return run, cfg, ds, sp, model


def cmd_evaluate(args) -> int:
    run, cfg, ds, sp, model = _load_run(args)
    if ds.labels is None:
        raise ContractError("evaluation needs a labels file (data.labels)")
    out = _out_dir(args, run / "eval")
    seeds = [args.seed] if args.seed is not None else list(cfg.get_int_list("eval.seeds"))
    rep = E.evaluate(model, ds, sp, seeds, cfg.get_int("eval.knn_k"))
    rep.write(out / "eval_summary.txt", out / "eval_per_seed.csv")
    print("\n".join(rep.summary_lines()))
    return EXIT_OK


def cmd_interpret(args) -> int:
    run, cfg, ds, sp, model = _load_run(args)
    out = _out_dir(args, run / "interpret")
    rows = np.arange(ds.n_samples)
    _, _, fused = O.fused_posterior(model, ds.values(rows))
    k = ds.n_classes if ds.labels is not None else max(1, min(model.latent_dim, ds.n_samples))
    seed = args.seed if args.seed is not None else cfg.get_int_list("eval.seeds")[0]
    clusters = E.kmeans(fused.mu, k, seed=seed)
    written = I.write_all(model, ds, rows, clusters, out, cfg.get_int("interpret.top_k"))
    for name in sorted(written):
        print(f"wrote {written[name]}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.set("synth.seed", args.seed)
    out = _out_dir(args)
    spec = D.SynthSpec(
        n_samples=cfg.get_int("synth.n_samples"),
        feature_dims=cfg.get_int_list("synth.feature_dims"),
        latent_dim=cfg.get_int("synth.latent_dim"),
        n_classes=cfg.get_int("synth.n_classes"),
        active_per_feature=cfg.get_int("synth.active_per_feature"),
        separation=cfg.get_float("synth.separation"),
        noise_scale=cfg.get_float("synth.noise_scale"),
        seed=cfg.get_int("synth.seed"),
    )
    ds, loadings, labels = D.synth_generate(spec)
    paths = []
    for m, W in zip(ds.matrices, loadings):
        p = (out / f"{m.name}.csv").resolve()
        D.write_omics_csv(m, p)
        paths.append(str(p))
        np.savetxt(out / f"true_loadings_{m.name}.csv", W, fmt="%.17g", delimiter=",")
    D.write_labels(ds.sample_ids, [ds.label_names[c] for c in labels], out / "labels.csv")
    cfg.set("data.omics", ",".join(ds.omics))
    cfg.set("data.paths", ",".join(paths))
    cfg.set("data.labels", str((out / "labels.csv").resolve()))
    cfg.write(out / CONFIG_SNAPSHOT)
    print(f"wrote {len(paths)} omic file(s), labels and {CONFIG_SNAPSHOT} to {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench_decoder

    cfg = _config(args)
    res = bench_decoder(cfg.get_int("bench.n"), cfg.get_int("bench.d"), cfg.get_int("bench.k"),
                        cfg.get_int("bench.hidden"), cfg.get_int("bench.repeats"),
                        args.seed if args.seed is not None else cfg.get_int("bench.seed"))
    lines = res.lines()
    print("\n".join(lines))
    if args.out:
        out = _out_dir(args)
        (out / "bench.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK if res.max_deviation <= 1e-10 else EXIT_FAIL


def cmd_check(args) -> int:
    from . import check as C

    results = C.run_all()
    if args.inject_kl_sign_error:
        results.append(C.check_gradients(kl_sign=-1.0))
    lines = [r.line() for r in results]
    print("\n".join(lines))
    if args.out:
        out = _out_dir(args)
        (out / "check.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="seed override for the command")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="poems", description="Gated product-of-experts multi-omics VAE with sparse decoding")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model on configured omics")
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--log-every", type=int, default=100, help="progress log interval in epochs")
    t.set_defaults(fn=cmd_train)

    for name, fn, hlp in (("evaluate", cmd_evaluate, "clustering and KNN metrics of a trained run"),
                          ("interpret", cmd_interpret, "biomarker, gating and correlation reports")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--run", required=True, help="output directory of 'poems train'")
        s.set_defaults(fn=fn)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset with planted loadings")
    s.set_defaults(fn=cmd_synth)
    s = sub.add_parser("bench", parents=[common], help="time batched vs per-feature decoding")
    s.set_defaults(fn=cmd_bench)
    s = sub.add_parser("check", parents=[common], help="run the verification suite")
    s.add_argument("--inject-kl-sign-error", action="store_true",
                   help="also run the gradient check with a planted KL sign error (must fail)")
    s.set_defaults(fn=cmd_check)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    log.debug("kernel backend: %s", backend_name())
    try:
        return args.fn(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (PoemsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
