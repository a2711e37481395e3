"""Command-line entry point.

Subcommands:

    synth      write the synthetic two-class corpus
    train      train a model, writing metrics, checkpoints, and figures
    eval       score a checkpoint on one split
    gradcheck  finite-difference validation of every layer's gradients
    bench      timing for the forward/backward/optimizer stages
    stats      corpus counts and per-channel train statistics

Seeds resolve as: --seed flag, then the BCDNET_SEED environment variable,
then the config value, then 0. Exit codes: 0 success, 1 a validation
check failed (gradcheck), 2 bad input (config, paths, file formats).
"""

from __future__ import annotations

import argparse
import json
import os
import resource
import sys
import time

import numpy as np

from .autograd import Tape, grad_check, zero_grad
from .data import (
    SPLITS,
    AugmentPolicy,
    build_manifest,
    dataset_stats,
    iter_batches,
    make_synth_corpus,
)
from .errors import BadConfig, BcdnetError
from .model import (
    Model,
    ModelConfig,
    micro_config,
    model_from_checkpoint,
    save_checkpoint,
)
from .nn import BatchNorm2d, Conv2d, Dropout, Flatten, Linear, MaxPool2d, ReLU
from .optim import Adam, StepLR, softmax_cross_entropy, softmax_cross_entropy_data
from .plots import render_training_curves
from .tensor import Tensor, set_deterministic

METRICS_HEADER = "epoch,split,loss,accuracy,lr,epoch_wall_time_s,peak_rss_bytes"

TRAIN_DEFAULTS = {
    "epochs": 5,
    "batch_size": 8,
    "lr": 0.005,
    "step_size": 10,
    "gamma": 0.1,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "seed": 0,
    "fractions": [0.7, 0.2, 0.1],
    "deterministic": True,
}


def peak_rss_bytes():
    """High-water resident set size of this process, in bytes."""
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


def resolve_seed(flag_value, fallback):
    if flag_value is not None:
        return int(flag_value)
    env = os.environ.get("BCDNET_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise BadConfig(f"BCDNET_SEED must be an integer, got {env!r}")
    return int(fallback)


def load_train_config(path):
    """Read the training config JSON; omitted keys keep their defaults and
    an omitted "model" section selects the desk-scale preset."""
    cfg = dict(TRAIN_DEFAULTS)
    user = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise BadConfig(f"{path}: not valid JSON: {exc}")
        if not isinstance(user, dict):
            raise BadConfig(f"{path}: top level must be a JSON object")
    unknown = set(user) - set(TRAIN_DEFAULTS) - {"model", "augment"}
    if unknown:
        raise BadConfig(f"unknown train config keys: {sorted(unknown)}")
    cfg.update({k: v for k, v in user.items() if k in TRAIN_DEFAULTS})
    if "model" in user:
        model_cfg = ModelConfig.from_dict(user["model"])
    else:
        model_cfg = micro_config()
    model_cfg.validate()
    aug = dict(user.get("augment", {}))
    unknown = set(aug) - set(AugmentPolicy.__dataclass_fields__)
    if unknown:
        raise BadConfig(f"unknown augment keys: {sorted(unknown)}")
    aug.setdefault("target_hw", model_cfg.input_hw)
    for key in ("mean", "std"):
        if key in aug:
            aug[key] = tuple(float(v) for v in aug[key])
    policy = AugmentPolicy(**aug).validate()
    if policy.target_hw != model_cfg.input_hw:
        raise BadConfig(f"augment target_hw {policy.target_hw} must match "
                        f"model input_hw {model_cfg.input_hw}")
    fractions = cfg["fractions"]
    if not isinstance(fractions, (list, tuple)) or len(fractions) != 3:
        raise BadConfig(f"fractions must be a list of three numbers, got "
                        f"{fractions}")
    cfg["fractions"] = tuple(float(f) for f in fractions)
    return cfg, model_cfg, policy


def evaluate(model, manifest, split, batch_size, policy):
    """Mean loss and accuracy over one split in eval mode."""
    model.eval()
    loss_sum, correct, seen = 0.0, 0, 0
    for x, labels in iter_batches(manifest, split, batch_size, policy,
                                  train=False):
        logits = model.forward(x, None)
        loss, _, _ = softmax_cross_entropy_data(logits.data, labels)
        loss_sum += loss * len(labels)
        correct += int((logits.data.argmax(axis=1) == labels).sum())
        seen += len(labels)
    return loss_sum / seen, correct / seen


def cmd_synth(args):
    seed = resolve_seed(args.seed, 0)
    written = make_synth_corpus(args.out, per_class=args.per_class,
                                hw=args.hw, seed=seed)
    print(f"wrote {len(written)} images under {args.out} "
          f"(classes: blobs, stripes; {args.hw}x{args.hw}, seed {seed})")
    return 0


def cmd_train(args):
    cfg, model_cfg, policy = load_train_config(args.config)
    if args.epochs is not None:
        cfg["epochs"] = args.epochs
    if args.batch_size is not None:
        cfg["batch_size"] = args.batch_size
    seed = resolve_seed(args.seed, cfg["seed"])
    det = bool(cfg["deterministic"]) and not args.fast
    set_deterministic(det)
    if cfg["epochs"] < 1 or cfg["batch_size"] < 1:
        raise BadConfig("epochs and batch_size must be >= 1")

    os.makedirs(args.out, exist_ok=True)
    manifest = build_manifest(args.data, seed=seed, fractions=cfg["fractions"])
    manifest.to_tsv(os.path.join(args.out, "manifest.tsv"))

    model = Model(model_cfg, seed=seed)
    params = model.parameters()
    opt = Adam(params, lr=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"],
               eps=cfg["adam_eps"])
    sched = StepLR(opt, base_lr=cfg["lr"], step_size=cfg["step_size"],
                   gamma=cfg["gamma"])
    data_rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))

    counts = manifest.counts()
    print(f"data: {args.data} classes={manifest.classes} "
          f"train/val/test={[sum(counts[s]) for s in SPLITS]}")
    print(f"model: {len(model_cfg.blocks)} blocks, input "
          f"{model_cfg.input_hw}x{model_cfg.input_hw}, "
          f"{model.param_count()} trainable parameters "
          f"({'deterministic' if det else 'fast'} mode, seed {seed})")

    csv_rows = []
    plot_rows = []
    best_acc, best_epoch = -1.0, -1
    final = {}
    t_start = time.perf_counter()
    for epoch in range(cfg["epochs"]):
        lr = sched.apply(epoch)
        ep_t0 = time.perf_counter()
        model.train()
        loss_sum, correct, seen = 0.0, 0, 0
        for x, labels in iter_batches(manifest, "train", cfg["batch_size"],
                                      policy, rng=data_rng, train=True):
            tape = Tape()
            for p in params:
                tape.watch(p)
            logits = model.forward(x, tape)
            loss = softmax_cross_entropy(tape, logits, labels)
            zero_grad(params)
            tape.backward(loss)
            opt.step()
            bs = len(labels)
            loss_sum += loss.item() * bs
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            seen += bs
        tr_loss, tr_acc = loss_sum / seen, correct / seen
        va_loss, va_acc = evaluate(model, manifest, "val",
                                   cfg["batch_size"], policy)
        ep_wall = time.perf_counter() - ep_t0
        rss = peak_rss_bytes()
        # deterministic runs must produce byte-identical metrics, so the
        # two measured columns are written as 0 there; real numbers go to
        # stdout and run_summary.json either way
        wall_cell = "0" if det else repr(ep_wall)
        rss_cell = "0" if det else str(rss)
        for split, lv, av in (("train", tr_loss, tr_acc),
                              ("val", va_loss, va_acc)):
            csv_rows.append(f"{epoch},{split},{lv!r},{av!r},{lr!r},"
                            f"{wall_cell},{rss_cell}")
            plot_rows.append({"epoch": epoch, "split": split, "loss": lv,
                              "accuracy": av, "lr": lr})
        print(f"epoch {epoch} lr {lr:g} train loss {tr_loss:.4f} "
              f"acc {tr_acc:.4f} val loss {va_loss:.4f} acc {va_acc:.4f} "
              f"({ep_wall:.1f}s)")
        if va_acc > best_acc:
            best_acc, best_epoch = va_acc, epoch
            save_checkpoint(os.path.join(args.out, "best.ckpt"), model,
                            optimizer_state=opt.state())
        save_checkpoint(os.path.join(args.out, "last.ckpt"), model,
                        optimizer_state=opt.state())
        final = {"train_loss": tr_loss, "train_accuracy": tr_acc,
                 "val_loss": va_loss, "val_accuracy": va_acc}

    wall_total = time.perf_counter() - t_start
    with open(os.path.join(args.out, "metrics.csv"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in csv_rows:
            fh.write(row + "\n")
    render_training_curves(plot_rows,
                           os.path.join(args.out, "training_curves.png"))
    summary = {
        "batch_size": cfg["batch_size"],
        "best_epoch": best_epoch,
        "best_val_accuracy": best_acc,
        "data": args.data,
        "deterministic": det,
        "epochs": cfg["epochs"],
        "final": final,
        "out": args.out,
        "param_count": model.param_count(),
        "peak_rss_bytes": peak_rss_bytes(),
        "seed": seed,
        "wall_time_s": wall_total,
    }
    with open(os.path.join(args.out, "run_summary.json"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    with open(os.path.join(args.out, "DONE"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("ok\n")
    print(f"done: best val accuracy {best_acc:.4f} at epoch {best_epoch} "
          f"({wall_total:.1f}s, peak rss {peak_rss_bytes()} bytes)")
    return 0


def cmd_eval(args):
    set_deterministic(not args.fast)
    model, blob = model_from_checkpoint(args.ckpt)
    model.eval()
    seed = resolve_seed(args.seed, blob.get("seed", 0))
    manifest = build_manifest(args.data, seed=seed)
    mean = tuple(float(v) for v in args.mean.split(","))
    std = tuple(float(v) for v in args.std.split(","))
    policy = AugmentPolicy(target_hw=model.config.input_hw, mean=mean,
                           std=std).validate()
    loss, acc = evaluate(model, manifest, args.split, args.batch_size, policy)
    n = len(manifest.splits[args.split])
    print(f"split={args.split} n={n} loss={loss!r} accuracy={acc!r}")
    return 0


def gradcheck_entries(rng):
    """The seven layer instances exercised by the gradcheck command, all in
    double precision with shapes small enough for dense finite differences."""

    def t(shape):
        return Tensor.wrap(rng.normal(0.0, 1.0, size=shape))

    conv = Conv2d(3, 4, 3, stride=2, padding=1, dtype="double", rng=rng)
    lin = Linear(6, 5, dtype="double", rng=rng)
    bn = BatchNorm2d(3, dtype="double")
    bn.gamma.value.data[...] = rng.uniform(0.5, 1.5, size=3)
    bn.beta.value.data[...] = rng.uniform(-0.5, 0.5, size=3)
    drop = Dropout(0.3, seed=7)
    drop.pinned = True
    return [
        ("conv2d", conv, t((2, 3, 7, 7))),
        ("maxpool2d", MaxPool2d(2, 2), t((2, 3, 6, 6))),
        ("relu", ReLU(), t((4, 9))),
        ("linear", lin, t((3, 6))),
        ("batchnorm2d", bn, t((2, 3, 4, 4))),
        ("dropout", drop, t((3, 5, 5))),
        ("flatten", Flatten(), t((2, 3, 4, 4))),
    ]


def cmd_gradcheck(args):
    set_deterministic(not args.fast)
    rng = np.random.default_rng(np.random.SeedSequence(
        resolve_seed(args.seed, 0)))
    t0 = time.perf_counter()
    reports = []
    for name, layer, x in gradcheck_entries(rng):
        reports.append(grad_check(layer, x, eps=args.eps, tol=args.tol,
                                  rng=rng, name=name))
    for report in reports:
        print(report)
    elapsed = time.perf_counter() - t0
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed "
          f"(eps={args.eps:g}, tol={args.tol:g}, {elapsed:.1f}s)")
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_bench(args):
    set_deterministic(not args.fast)
    rng = np.random.default_rng(np.random.SeedSequence(
        resolve_seed(args.seed, 0)))
    model = Model(micro_config(), seed=0)
    model.train()
    params = model.parameters()
    opt = Adam(params)
    hw = model.config.input_hw
    x = Tensor.wrap(rng.standard_normal(
        (args.batch_size, 3, hw, hw)).astype(np.float32))
    labels = rng.integers(0, model.config.num_classes,
                          size=args.batch_size)

    fwd, bwd, step = [], [], []
    for rep in range(args.reps + 1):
        tape = Tape()
        for p in params:
            tape.watch(p)
        t0 = time.perf_counter()
        logits = model.forward(x, tape)
        t1 = time.perf_counter()
        loss = softmax_cross_entropy(tape, logits, labels)
        zero_grad(params)
        t2 = time.perf_counter()
        tape.backward(loss)
        t3 = time.perf_counter()
        opt.step()
        t4 = time.perf_counter()
        if rep == 0:
            continue  # warmup
        fwd.append((t1 - t0) * 1e3)
        bwd.append((t3 - t2) * 1e3)
        step.append((t4 - t3) * 1e3)

    mode = "deterministic" if not args.fast else "fast"
    print(f"# micro model, batch {args.batch_size}, {args.reps} reps, "
          f"{mode} mode")
    print("stage\treps\tmean_ms\tmin_ms")
    for stage, series in (("forward", fwd), ("backward", bwd),
                          ("adam_step", step)):
        print(f"{stage}\t{len(series)}\t{sum(series) / len(series):.3f}"
              f"\t{min(series):.3f}")
    if args.data:
        manifest = build_manifest(args.data, seed=resolve_seed(args.seed, 0))
        policy = AugmentPolicy(target_hw=hw)
        aug_rng = np.random.default_rng(np.random.SeedSequence(1))
        times = []
        seen = 0
        t_last = time.perf_counter()
        for xb, _ in iter_batches(manifest, "train", 1, policy,
                                  rng=aug_rng, train=True):
            now = time.perf_counter()
            times.append((now - t_last) * 1e3)
            t_last = now
            seen += 1
            if seen >= 64:
                break
        print(f"pipeline\t{len(times)}\t{sum(times) / len(times):.3f}"
              f"\t{min(times):.3f}")
    print(f"# peak rss: {peak_rss_bytes()} bytes")
    return 0


def cmd_stats(args):
    manifest = build_manifest(args.data, seed=resolve_seed(args.seed, 0))
    st = dataset_stats(manifest)
    print("class\tindex\ttrain\tval\ttest")
    counts = st["counts"]
    for ci, cname in enumerate(st["classes"]):
        print(f"{cname}\t{ci}\t{counts['train'][ci]}\t{counts['val'][ci]}"
              f"\t{counts['test'][ci]}")
    total = [sum(counts[s]) for s in SPLITS]
    print(f"total\t\t{total[0]}\t{total[1]}\t{total[2]}")
    print("channel\ttrain_mean\ttrain_std")
    for ci in range(3):
        print(f"{ci}\t{st['train_mean'][ci]!r}\t{st['train_std'][ci]!r}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="bcdnet",
        description="Train and inspect a small CNN classifier for two-class "
                    "image patches.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic two-class corpus")
    s.add_argument("--out", required=True, help="corpus root directory")
    s.add_argument("--per-class", type=int, default=40)
    s.add_argument("--hw", type=int, default=50, help="image side length")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True, help="corpus root directory")
    t.add_argument("--out", required=True, help="run output directory")
    t.add_argument("--config", default=None, help="training config JSON")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--fast", action="store_true",
                   help="allow BLAS kernels; drops bit-reproducibility")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on one split")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--batch-size", type=int, default=8)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--mean", default="0.5,0.5,0.5")
    e.add_argument("--std", default="0.5,0.5,0.5")
    e.add_argument("--fast", action="store_true")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck",
                       help="finite-difference check of every layer")
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--fast", action="store_true")
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="time the core training stages")
    b.add_argument("--data", default=None,
                   help="optional corpus for pipeline timing")
    b.add_argument("--batch-size", type=int, default=8)
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--seed", type=int, default=None)
    b.add_argument("--fast", action="store_true")
    b.set_defaults(func=cmd_bench)

    st = sub.add_parser("stats", help="corpus counts and train statistics")
    st.add_argument("--data", required=True)
    st.add_argument("--seed", type=int, default=None)
    st.set_defaults(func=cmd_stats)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BcdnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
