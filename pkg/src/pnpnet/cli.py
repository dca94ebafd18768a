"""Command-line interface: dataset generation, training, evaluation,
kernel inspection, standalone metrics, and the ablation harness.

Exit codes: 0 ok, 2 configuration error, 3 I/O or format error,
4 numeric failure, 5 shape mismatch, 6 constraint violation.
"""

from __future__ import annotations

import argparse
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def _force_single_thread():
    """Must run before numpy is imported to pin BLAS reduction order."""
    for var in _THREAD_VARS:
        os.environ[var] = "1"


# ---------------------------------------------------------------------------
# argument plumbing

def _add_common(sub):
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override one config key (repeatable)")
    sub.add_argument("--deterministic", action="store_true",
                     help="single-threaded numerics for bit-exact runs")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--data-dir", dest="data_dir")
    sub.add_argument("--out-dir", dest="out_dir")


def _resolve(args, extra=()):
    from .config import ConfigError, load_config
    overrides = {}
    for key in ("seed", "data_dir", "out_dir") + tuple(extra):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    for item in args.set:
        if "=" not in item:
            raise ConfigError("--set expects KEY=VALUE, got %r" % item)
        key, _, raw = item.partition("=")
        overrides[key.strip()] = raw.strip()
    if args.deterministic:
        overrides["deterministic"] = "true"
    return load_config(args.config, overrides)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pnpnet",
        description="Pull-push boundary refinement for volumetric segmentation.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate a synthetic PNPV dataset")
    _add_common(p)
    p.add_argument("--regime", choices=("A", "B", "C"))
    p.add_argument("--count", type=int)
    p.add_argument("--dim", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("train", help="train a model on a generated dataset")
    _add_common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("inspect-kernel",
                        help="dump edge-constrained kernels from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_inspect_kernel)

    p = subs.add_parser("metrics",
                        help="compare the labels of two PNPV volumes")
    p.add_argument("pred")
    p.add_argument("truth")
    p.add_argument("--n-classes", type=int, default=0,
                   help="class count (default: inferred from the volumes)")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_metrics)

    p = subs.add_parser("ablation",
                        help="train and evaluate baseline/+SDM/+CCM/+Both")
    _add_common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seeds", default="0",
                   help="comma-separated training seeds")
    p.add_argument("--variants", default="baseline,sdm,both",
                   help="subset of baseline,sdm,ccm,both")
    p.set_defaults(func=cmd_ablation)
    return parser


# ---------------------------------------------------------------------------
# commands

def _model_config(cfg, enable_sdm=None, enable_ccm=None):
    from .model import PnPConfig
    return PnPConfig(
        n_classes=cfg.n_classes, channels=cfg.channels, blocks=cfg.blocks,
        norm=cfg.norm, center_dim=cfg.center_dim, atlas_size=cfg.atlas_size,
        heads=cfg.heads, sdm_iters=cfg.sdm_iters, lambda_cc=cfg.lambda_cc,
        enable_sdm=cfg.enable_sdm if enable_sdm is None else enable_sdm,
        enable_ccm=cfg.enable_ccm if enable_ccm is None else enable_ccm)


def _gen_spec(cfg):
    from .synth import GenSpec
    return GenSpec(regime=cfg.regime, dims=cfg.dims, n_classes=cfg.n_classes,
                   count=cfg.count, sigma_b=cfg.sigma_b, noise=cfg.noise,
                   patch_count=cfg.patch_count,
                   patch_intensity=cfg.patch_intensity, jitter=cfg.jitter,
                   slabs=cfg.slabs, seed=cfg.seed)


def cmd_gen_data(args):
    cfg = _resolve(args, extra=("regime", "count", "dim"))
    from .config import write_config
    from .synth import generate_one
    from .volumes import write_manifest, write_volume
    os.makedirs(cfg.data_dir, exist_ok=True)
    spec = _gen_spec(cfg)
    names = []
    for i in range(spec.count):
        name = "sample_%03d.pnpv" % i
        write_volume(generate_one(spec, i), os.path.join(cfg.data_dir, name))
        names.append(name)
    write_manifest(os.path.join(cfg.data_dir, "manifest.txt"), names,
                   cfg.split, cfg.seed)
    write_config(cfg, os.path.join(cfg.data_dir, "config_resolved.txt"))
    print("wrote %d %s-regime volumes to %s" % (spec.count, spec.regime, cfg.data_dir))
    return 0


def _load_split(cfg, split):
    from .volumes import FormatError, read_manifest, read_volume
    manifest = os.path.join(cfg.data_dir, "manifest.txt")
    if not os.path.exists(manifest):
        raise FormatError("no manifest at %s (run gen-data first)" % manifest)
    names = read_manifest(manifest)[split]
    return [read_volume(os.path.join(cfg.data_dir, n)) for n in names]


def _save_checkpoint(model, opt, epoch, path):
    import numpy as np
    from .checkpoint import save_model
    extra = {"opt.t": np.array([opt.t], dtype=np.float32),
             "meta.epoch": np.array([epoch], dtype=np.float32)}
    for name in opt.m:
        extra["opt.m." + name] = opt.m[name]
        extra["opt.v." + name] = opt.v[name]
    save_model(model, path, extra=extra)


def _restore_optimizer(opt, extra):
    from .checkpoint import CheckpointError
    if "opt.t" not in extra:
        raise CheckpointError("checkpoint has no optimizer state; cannot resume")
    opt.t = int(extra["opt.t"][0])
    for name in opt.m:
        opt.m[name][...] = extra["opt.m." + name]
        opt.v[name][...] = extra["opt.v." + name]


def _train_loop(cfg, train_set, out_dir, model=None, resume=None, log_name="loss_log.csv"):
    import numpy as np
    from .checkpoint import load_model
    from .model import build_model, train_step
    from .optim import AdamW, warmup_cosine

    if model is None:
        model = build_model(_model_config(cfg), seed=cfg.seed)
    lr_mult = None
    if cfg.pull_lr_mult != 1.0:
        # boost the clustering / fusion parameters relative to the backbone
        # only modules exclusive to the clustering path, so variants without
        # it are untouched by the multiplier
        pull_prefixes = ("atlas.", "ccm8.", "ccm4.", "ccm2.",
                         "push_proj.", "head_hidden.")
        lr_mult = {p: cfg.pull_lr_mult for p in pull_prefixes}
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                lr_mult=lr_mult)
    start_epoch = 0
    if resume:
        extra = load_model(model, resume)
        _restore_optimizer(opt, extra)
        start_epoch = int(extra["meta.epoch"][0]) + 1

    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, log_name)
    mode = "a" if resume and os.path.exists(log_path) else "w"
    rows = []
    with open(log_path, mode) as log:
        if mode == "w":
            log.write("epoch,total,dice,ce,center\n")
        for epoch in range(start_epoch, cfg.epochs):
            order = np.random.default_rng([cfg.seed, 7000 + epoch]).permutation(len(train_set))
            lr_scale = warmup_cosine(epoch, cfg.epochs, cfg.warmup)
            sums = np.zeros(4)
            for i in order:
                sample = train_set[i]
                sums += train_step(model, opt, sample.image, sample.label,
                                   lr_scale=lr_scale)
            means = sums / max(len(train_set), 1)
            rows.append((epoch,) + tuple(means))
            log.write("%d,%.10f,%.10f,%.10f,%.10f\n" % rows[-1])
            log.flush()
            if cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0:
                _save_checkpoint(model, opt, epoch,
                                 os.path.join(out_dir, "checkpoint_ep%03d.pnpc" % epoch))
    _save_checkpoint(model, opt, cfg.epochs - 1,
                     os.path.join(out_dir, "checkpoint_final.pnpc"))
    return model, rows


def cmd_train(args):
    cfg = _resolve(args, extra=("epochs",))
    from .config import write_config
    train_set = _load_split(cfg, "train")
    if not train_set:
        from .config import ConfigError
        raise ConfigError("train split is empty")
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_config(cfg, os.path.join(cfg.out_dir, "config_resolved.txt"))
    _, rows = _train_loop(cfg, train_set, cfg.out_dir, resume=args.resume)
    if rows:
        print("final epoch %d: total=%.6f dice=%.6f ce=%.6f center=%.6f" % rows[-1])
    print("checkpoint: %s" % os.path.join(cfg.out_dir, "checkpoint_final.pnpc"))
    return 0


def _evaluate_model(cfg, model, cases):
    import numpy as np
    from .metrics import confusion, evaluate_case
    from .model import predict_labels
    results = []
    conf = np.zeros((cfg.n_classes, cfg.n_classes), dtype=np.int64)
    for i, sample in enumerate(cases):
        pred = predict_labels(model, sample.image)
        results.append(evaluate_case("case_%03d" % i, pred, sample.label,
                                     cfg.n_classes, sample.spacing))
        conf += confusion(pred, sample.label, cfg.n_classes)
    return results, conf


def cmd_eval(args):
    cfg = _resolve(args)
    from .checkpoint import load_model
    from .metrics import write_confusion, write_report
    from .model import build_model
    import numpy as np

    cases = _load_split(cfg, args.split)
    model = build_model(_model_config(cfg), seed=cfg.seed)
    load_model(model, args.checkpoint)
    results, conf = _evaluate_model(cfg, model, cases)
    os.makedirs(cfg.out_dir, exist_ok=True)
    report = os.path.join(cfg.out_dir, "metrics_%s.csv" % args.split)
    write_report(report, results, cfg.n_classes)
    write_confusion(os.path.join(cfg.out_dir, "confusion_%s.csv" % args.split),
                    conf)
    means = np.mean([r.mean_row()[:3] for r in results], axis=0)
    print("%s split (%d cases): dice=%.2f hd95=%.3f assd=%.3f"
          % (args.split, len(results), means[0], means[1], means[2]))
    print("report: %s" % report)
    return 0


def cmd_metrics(args):
    from .metrics import REPORT_HEADER, evaluate_case
    from .volumes import FormatError, read_volume
    pred = read_volume(args.pred)
    truth = read_volume(args.truth)
    if pred.label.shape != truth.label.shape:
        raise FormatError("label shapes differ: %r vs %r"
                          % (pred.label.shape, truth.label.shape))
    n = args.n_classes or int(max(pred.label.max(), truth.label.max())) + 1
    case = evaluate_case(args.pred, pred.label, truth.label, n, truth.spacing)
    print(REPORT_HEADER)
    for cls, (d, h, a, flag) in sorted(case.per_class.items()):
        print("%s,%d,%.4f,%.6f,%.6f,%d" % (args.pred, cls, d, h, a, int(flag)))
    d, h, a, flag = case.mean_row()
    print("%s,mean,%.4f,%.6f,%.6f,%d" % (args.pred, d, h, a, int(flag)))
    return 0


def cmd_inspect_kernel(args):
    import numpy as np
    from .checkpoint import load_tensors
    from .config import ConfigError
    from .sdm import ConstraintError, check_eid_kernel, corner_indices

    arrays = load_tensors(args.checkpoint)
    names = sorted(n for n in arrays
                   if (n.endswith(".alpha.free") or n.endswith(".beta.free"))
                   and not n.startswith(("opt.", "meta.")))
    if not names:
        raise ConfigError("no edge-constrained kernel tensors in %s" % args.checkpoint)
    corners = set(corner_indices())
    for name in names:
        stack = arrays[name]
        for ch in range(stack.shape[0]):
            kern = stack[ch]
            print("%s[%d]" % (name, ch))
            for z in range(3):
                for y in range(3):
                    cells = []
                    for x in range(3):
                        v = kern[z, y, x]
                        if (z, y, x) in corners:
                            cells.append("[%+d]" % int(round(v)) if v in (-1.0, 1.0)
                                         else "[%+.3f!]" % v)
                        else:
                            cells.append("%+.3f" % v)
                    print("  " + "  ".join(cells))
                print()
        try:
            check_eid_kernel(stack)
        except ConstraintError as exc:
            raise ConstraintError("%s: %s" % (name, exc))
    print("all %d kernel stacks satisfy the corner constraint" % len(names))
    return 0


def cmd_ablation(args):
    cfg = _resolve(args, extra=("epochs",))
    import numpy as np
    from .config import ConfigError, write_config
    from .model import build_model

    flags = {"baseline": (False, False), "sdm": (True, False),
             "ccm": (False, True), "both": (True, True)}
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in flags:
            raise ConfigError("unknown variant %r (choices: %s)"
                              % (v, ",".join(flags)))
    seeds = [int(s) for s in args.seeds.split(",")]

    train_set = _load_split(cfg, "train")
    test_set = _load_split(cfg, "test")
    if not train_set or not test_set:
        raise ConfigError("ablation needs non-empty train and test splits")
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_config(cfg, os.path.join(cfg.out_dir, "config_resolved.txt"))

    table = {}
    for variant in variants:
        sdm_on, ccm_on = flags[variant]
        per_seed = []
        for seed in seeds:
            run_cfg = _clone_cfg(cfg, seed=seed, enable_sdm=sdm_on, enable_ccm=ccm_on)
            run_dir = os.path.join(cfg.out_dir, "%s_seed%d" % (variant, seed))
            model = build_model(_model_config(run_cfg), seed=seed)
            _train_loop(run_cfg, train_set, run_dir, model=model)
            results, _ = _evaluate_model(run_cfg, model, test_set)
            per_seed.append(np.mean([r.mean_row()[:3] for r in results], axis=0))
        table[variant] = np.mean(per_seed, axis=0)

    out = os.path.join(cfg.out_dir, "ablation.csv")
    with open(out, "w") as fh:
        fh.write("variant,dice_pct,hd95_mm,assd_mm\n")
        for variant in variants:
            d, h, a = table[variant]
            fh.write("%s,%.4f,%.6f,%.6f\n" % (variant, d, h, a))
    print("variant      dice    hd95    assd")
    for variant in variants:
        d, h, a = table[variant]
        print("%-10s %7.2f %7.3f %7.3f" % (variant, d, h, a))
    print("table: %s" % out)
    return 0


def _clone_cfg(cfg, **updates):
    from .config import RunConfig
    clone = RunConfig(dict(cfg.items()))
    for key, val in updates.items():
        clone._values[key] = val
    return clone


# ---------------------------------------------------------------------------

def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    if "--deterministic" in argv:
        _force_single_thread()
    parser = build_parser()
    args = parser.parse_args(argv)

    from .checkpoint import CheckpointError, ShapeError
    from .config import ConfigError
    from .model import NumericError
    from .nn import ConfigError as BuildConfigError
    from .sdm import ConstraintError
    from .synth import ConfigError as GenConfigError
    from .tensor import DimensionError
    from .volumes import FormatError

    try:
        return args.func(args)
    except ConstraintError as exc:
        print("constraint violation: %s" % exc, file=sys.stderr)
        return 6
    except (ShapeError, DimensionError) as exc:
        print("shape mismatch: %s" % exc, file=sys.stderr)
        return 5
    except NumericError as exc:
        print("numeric failure: %s" % exc, file=sys.stderr)
        return 4
    except (ConfigError, GenConfigError, BuildConfigError) as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2
    except (FormatError, CheckpointError, OSError) as exc:
        print("i/o error: %s" % exc, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
