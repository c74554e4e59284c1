"""Command-line entry point: ``spherefm <command> [flags]``.

Exit codes: 0 success, 2 configuration or usage error, 3 IO error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import alignlab, datasets, evalsuite, invariants, sampler, trainer, velocitynet
from ._fileio import sha256_file
from .config import RunConfig, constants_table, load_config
from .errors import ChecksumMismatch, ConfigError, FormatVersionMismatch, NonFinite, SphereFMError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("spherefm")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _flag(p, name, key, **kw):
    kw.setdefault("metavar", name.lstrip("-").upper().replace("-", "_"))
    p.add_argument(name, dest=key, default=None, **kw)


def _switch(p, name, key, value, help):
    p.add_argument(name, dest=key, action="store_const", const=value, default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file; flags override its values")
    _flag(common, "--seed", "run.seed", help="global seed")
    _flag(common, "--jobs", "run.jobs", help="worker processes where a command can parallelize")
    common.add_argument("-v", "--verbose", action="store_true")

    manifold = _Parser(add_help=False)
    _flag(manifold, "--n-patches", "manifold.n_patches", help="patches per field (N)")
    _flag(manifold, "--dim", "manifold.dim", help="patch dimension (C)")
    _flag(manifold, "--radius", "manifold.radius", help="sphere radius; default sqrt(C)")

    parser = _Parser(prog="spherefm", description="Flow matching on products of hyperspheres.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common, manifold], help="generate a synthetic dataset")
    _flag(g, "--kind", "datasets.kind", help="vmf or checkerboard")
    _flag(g, "--n", "datasets.n", help="number of samples")
    _flag(g, "--components", "datasets.components", help="vMF mixture components")
    _flag(g, "--kappa", "datasets.kappa", help="vMF concentration")
    _flag(g, "--weights", "datasets.weights", help="comma-separated mixture weights")
    _flag(g, "--resolution", "datasets.resolution", help="checkerboard band count")
    g.add_argument("--out", required=True, help="dataset file to write")

    t = sub.add_parser("train", parents=[common, manifold], help="train a velocity network")
    t.add_argument("--data", required=True, help="dataset file")
    t.add_argument("--out", required=True, help="directory for checkpoints and loss.csv")
    _flag(t, "--steps", "trainer.total_steps", help="optimizer steps")
    _flag(t, "--batch-size", "trainer.batch_size")
    _flag(t, "--lr", "trainer.lr")
    _flag(t, "--beta1", "trainer.beta1")
    _flag(t, "--beta2", "trainer.beta2")
    _flag(t, "--weight-decay", "trainer.weight_decay")
    _flag(t, "--grad-clip", "trainer.grad_clip")
    _flag(t, "--warmup-steps", "trainer.warmup_steps")
    _flag(t, "--ema-decay", "trainer.ema_decay")
    _flag(t, "--checkpoint-every", "trainer.checkpoint_every")
    _flag(t, "--log-every", "trainer.log_every")
    _flag(t, "--resume", "trainer.resume", help="checkpoint to resume from")
    _flag(t, "--hidden", "velocitynet.hidden", help="comma-separated hidden widths")
    _flag(t, "--activation", "velocitynet.activation")
    _switch(t, "--conditional", "velocitynet.conditional", "true", "condition on dataset labels")
    _switch(t, "--reverse-time", "flowpath.reverse_time", "true", "data at t=0, prior at t=1")

    s = sub.add_parser("sample", parents=[common, manifold], help="draw samples from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True, help="sample batch file to write")
    _flag(s, "--n", "sampler.n_samples", help="number of samples")
    _flag(s, "--steps", "sampler.steps", help="integration steps")
    _flag(s, "--method", "sampler.method", help="euler_projection or rodrigues")
    _flag(s, "--shift", "flowpath.shift", help="timestep shift")
    _flag(s, "--label", "sampler.label", help="class label for a conditional model")
    _switch(s, "--no-ema", "sampler.use_ema", "false", "use the raw weights instead of the EMA")
    _switch(s, "--raw-ema", "sampler.ema_debias", "false", "skip EMA debiasing")
    _switch(s, "--reverse-time", "flowpath.reverse_time", "true", "integrate in the reversed convention")

    e = sub.add_parser("eval", parents=[common], help="compare generated samples with a reference")
    e.add_argument("--gen", required=True, help="sample batch or dataset file")
    e.add_argument("--ref", required=True, help="sample batch or dataset file")
    e.add_argument("--out", required=True, help="report CSV to write")
    _flag(e, "--bandwidth", "evalsuite.bandwidth", help="kernel bandwidth in radians; default median heuristic")
    _flag(e, "--permutations", "evalsuite.n_permutations")

    c = sub.add_parser("check", parents=[common], help="run invariant sweeps")
    c.add_argument("--suite", action="append", choices=sorted(invariants.SUITES), help="repeatable; default all")
    c.add_argument("--scale", type=float, default=1.0, help="multiply trial counts")
    c.add_argument("--inject-fault", metavar="SUITE", help=argparse.SUPPRESS)

    k = sub.add_parser("conflict", parents=[common], help="MSE vs cosine alignment experiment")
    _flag(k, "--seeds", "alignlab.seeds", help="number of seeds")
    _flag(k, "--steps", "alignlab.steps")
    _flag(k, "--lambda-align", "alignlab.lambda_align")
    k.add_argument("--out", required=True, help="CSV to write")

    p = sub.add_parser("probe", parents=[common], help="decoder output deviation under latent rescaling")
    p.add_argument("--decoder", choices=("linear", "direction"), default="linear")
    _flag(p, "--alphas", "alignlab.alphas", help="comma-separated scale factors")
    p.add_argument("--patches", type=int, default=4)
    p.add_argument("--features", type=int, default=16)
    p.add_argument("--out", required=True, help="CSV to write")

    sc = sub.add_parser("show-config", parents=[common], help="print the effective configuration")
    sc.add_argument("--table", action="store_true", help="print the defaults table with provenance instead")
    return parser


def _flags(ns) -> dict:
    return {k: v for k, v in vars(ns).items() if "." in k}


def _write_manifest(path: Path, command: str, cfg: RunConfig, outputs: dict, extra: dict | None = None) -> Path:
    body = {
        "command": command,
        "config": cfg.as_dict(),
        "config_sources": cfg.sources,
        "outputs": {name: {"path": Path(p).name, "sha256": sha256_file(p)} for name, p in outputs.items()},
        **(extra or {}),
    }
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _load_any(path) -> tuple[np.ndarray, np.ndarray | None, float]:
    """Samples, labels (if any) and radius from a dataset or sample batch file."""
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii", "replace").strip()
    if magic == datasets.DATASET_MAGIC:
        ds = datasets.load_dataset(path)
        return ds.samples, ds.labels, ds.radius
    if magic == sampler.SAMPLES_MAGIC:
        x, header = sampler.load_samples(path)
        return x, None, header["radius"]
    raise ChecksumMismatch(f"{path}: not a dataset or sample batch file")


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{what}: file not found: {path}")
    return path


def cmd_gen_data(ns, cfg: RunConfig) -> int:
    n_patches, dim, radius = cfg.get("manifold", "n_patches"), cfg.get("manifold", "dim"), cfg.radius
    d = cfg.values["datasets"]
    if d["kind"] == "vmf":
        k = d["components"]
        if k < 1:
            raise ConfigError(f"components: must be >= 1, got {k}")
        weights = d["weights"] if d["weights"] is not None else (1.0 / k,) * k
        if len(weights) != k:
            raise ConfigError(f"weights: expected {k} values, got {len(weights)}")
        means = datasets.default_means(k, dim, d["means_seed"])
        comps = [datasets.VMFComponent(m, d["kappa"], w) for m, w in zip(means, weights)]
        ds = datasets.gen_vmf_mixture(d["n"], n_patches, dim, radius, comps, cfg.seed)
    else:
        ds = datasets.gen_checkerboard_s2(d["n"], d["resolution"], radius, cfg.seed)
    out = Path(ns.out)
    datasets.save_dataset(ds, out)
    _write_manifest(_manifest_path(out), "gen-data", cfg, {"dataset": out})
    print(f"wrote {len(ds)} samples to {out}")
    return EXIT_OK


def cmd_train(ns, cfg: RunConfig) -> int:
    ds = datasets.load_dataset(_require(ns.data, "data"))
    explicit = {k for k, src in cfg.sources["manifold"].items() if src != "default"}
    for key, actual in (("n_patches", ds.n_patches), ("dim", ds.dim)):
        if key in explicit and cfg.get("manifold", key) != actual:
            raise ConfigError(f"manifold.{key}: config says {cfg.get('manifold', key)} but the dataset has {actual}")
    cfg.set("manifold", "n_patches", ds.n_patches, cfg.sources["manifold"]["n_patches"])
    cfg.set("manifold", "dim", ds.dim, cfg.sources["manifold"]["dim"])
    spec = cfg.net_spec(ds.n_classes)
    resume = cfg.get("trainer", "resume")
    if resume is not None:
        _require(resume, "resume")
    res = trainer.run_training(ds, cfg.train_config(), ns.out, spec, resume=resume)
    losses = np.asarray(res.losses)
    _write_manifest(Path(ns.out) / "train.manifest.json", "train", cfg, {"checkpoint": res.checkpoint},
                    {"dataset": {"path": Path(ns.data).name, "sha256": sha256_file(ns.data)}})
    tail = float(losses[-100:].mean()) if losses.size else float("nan")
    print(f"trained to step {cfg.get('trainer', 'total_steps')}; recent loss {tail:.5f}; checkpoint {res.checkpoint}")
    return EXIT_OK


def cmd_sample(ns, cfg: RunConfig) -> int:
    ckpt = _require(ns.checkpoint, "checkpoint")
    net, meta, _ = velocitynet.load_checkpoint(ckpt)
    explicit = {k for k, src in cfg.sources["manifold"].items() if src != "default"}
    for key, actual in (("n_patches", net.spec.n_patches), ("dim", net.spec.dim)):
        if key in explicit and cfg.get("manifold", key) != actual:
            raise ConfigError(f"manifold.{key}: config says {cfg.get('manifold', key)} but the checkpoint has {actual}")
    radius = float(meta.get("radius", np.sqrt(net.spec.dim)))
    if "radius" in explicit and abs(cfg.radius - radius) > 1e-12 * radius:
        raise ConfigError(f"manifold.radius: config says {cfg.radius} but the checkpoint was trained at {radius}")
    scfg = cfg.sample_config()
    n = cfg.get("sampler", "n_samples")
    ckpt_id = sha256_file(ckpt)
    x, manifest = sampler.generate_batch(net, n, scfg, radius, checkpoint_id=ckpt_id)
    out = Path(ns.out)
    sampler.save_samples(out, x, radius, scfg.reverse_time, ckpt_id,
                         extra={"config_hash": manifest["config_hash"], "method": scfg.method})
    _write_manifest(_manifest_path(out), "sample", cfg, {"samples": out}, {"sampler": manifest})
    print(f"wrote {n} samples ({scfg.method}, T={scfg.steps}) to {out}")
    return EXIT_OK


def cmd_eval(ns, cfg: RunConfig) -> int:
    gen, _, r_gen = _load_any(_require(ns.gen, "gen"))
    ref, _, r_ref = _load_any(_require(ns.ref, "ref"))
    if gen.shape[1:] != ref.shape[1:]:
        raise ConfigError(f"gen fields {gen.shape[1:]} and ref fields {ref.shape[1:]} differ")
    if abs(r_gen - r_ref) > 1e-9 * r_ref:
        raise ConfigError(f"gen radius {r_gen} and ref radius {r_ref} differ")
    report = evalsuite.evaluate(gen, ref, r_ref, cfg.get("evalsuite", "bandwidth"),
                                cfg.get("evalsuite", "n_permutations"), cfg.seed)
    out = Path(ns.out)
    csv_path, summary = evalsuite.write_report(report, out)
    _write_manifest(_manifest_path(out), "eval", cfg, {"report": csv_path, "summary": summary})
    verdict = "within" if report.passes else "above"
    print(f"mmd2 {report.mmd2:.3e} {verdict} null 95% quantile {report.mmd2_null_95:.3e} "
          f"(h={report.bandwidth:.4f}); manifold residual {report.manifold_residual_max:.2e}")
    return EXIT_OK


def cmd_check(ns, cfg: RunConfig) -> int:
    if ns.inject_fault is not None and ns.inject_fault not in invariants.SUITES:
        raise ConfigError(f"--inject-fault: unknown suite {ns.inject_fault!r}")
    results = invariants.run_suites(ns.suite, seed=cfg.seed, inject_fault=ns.inject_fault, scale=ns.scale)
    for r in results:
        print(r.line())
    failed = sorted({r.suite for r in results if not r.passed})
    if failed:
        print(f"FAILED suites: {', '.join(failed)}")
        return 1
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_conflict(ns, cfg: RunConfig) -> int:
    ccfg = cfg.conflict_config()
    report = alignlab.conflict_experiment(ccfg, n_jobs=cfg.get("run", "jobs"))
    csv_path, summary = report.write(ns.out)
    _write_manifest(_manifest_path(Path(ns.out)), "conflict", cfg, {"csv": csv_path, "summary": summary},
                    {"summary": report.summary()})
    print(report.summary_text(), end="")
    return EXIT_OK


def cmd_probe(ns, cfg: RunConfig) -> int:
    rng = np.random.default_rng(cfg.seed)
    z = rng.standard_normal((ns.patches, ns.features))
    W = rng.standard_normal((ns.features, ns.features))
    dec = alignlab.linear_decoder(W)
    if ns.decoder == "direction":
        dec = alignlab.direction_decoder(alignlab.linear_decoder(W))
    res = alignlab.rescale_probe(dec, z, cfg.get("alignlab", "alphas"))
    out = Path(ns.out)
    out.write_text(res.to_csv())
    _write_manifest(_manifest_path(out), "probe", cfg, {"csv": out}, {"decoder": ns.decoder})
    for a, d in zip(res.alphas, res.deviations):
        print(f"alpha {a:g}: deviation {d:.6g}")
    return EXIT_OK


def cmd_show_config(ns, cfg: RunConfig) -> int:
    print(constants_table() if ns.table else cfg.to_ini(), end="\n")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "check": cmd_check,
    "conflict": cmd_conflict,
    "probe": cmd_probe,
    "show-config": cmd_show_config,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
        cfg = load_config(ns.config, _flags(ns))
        return COMMANDS[ns.command](ns, cfg)
    except NonFinite as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatVersionMismatch, ChecksumMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, SphereFMError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
