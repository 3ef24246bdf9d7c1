"""Command-line pipeline: train, decompose, compose, sweep, replace, eval,
gradcheck.

Every command resolves its config (file + --set overrides + MODA_SEED),
writes the resolved copy into the output directory, and puts all
artifacts there. Exit codes: 0 success, 1 metric/assertion failure,
2 usage/config/IO errors.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from . import rng as streams
from .compose import compose, module_metrics, reuse_accuracy
from .config import ConfigError, resolve, write_resolved
from .data import Dataset, make_blobs, read_idx, split_for_replacement, SplitPlan
from .decompose import compute_frequencies, decompose_all, extract_module
from .losses import LossWeights
from .nn import build_model, cnn_spec, mlp_spec
from .replace import ReplacementAssembly, evaluate_replacement, train_adaptation
from .serialize import (CheckpointError, load_checkpoint, load_module,
                        model_digest, save_checkpoint, save_module)
from .training import TrainConfig, evaluate, train


def _build_datasets(cfg) -> tuple[Dataset, Dataset]:
    if cfg["dataset.kind"] == "blobs":
        return make_blobs(cfg["dataset.classes"], cfg["dataset.per_class"],
                          dim=cfg["dataset.dim"], spread=cfg["dataset.spread"],
                          seed=cfg["dataset.seed"])
    if cfg["dataset.kind"] == "idx":
        for key in ("dataset.train_images", "dataset.train_labels",
                    "dataset.test_images", "dataset.test_labels"):
            if not cfg[key]:
                raise ConfigError(f"dataset.kind=idx requires {key}")
        train_ds = read_idx(cfg["dataset.train_images"], cfg["dataset.train_labels"])
        test_ds = read_idx(cfg["dataset.test_images"], cfg["dataset.test_labels"])
        limit = cfg["dataset.limit"]
        if limit and limit < len(train_ds):
            train_ds = train_ds.subset(np.arange(limit), name=train_ds.name + f"[:{limit}]")
        return train_ds, test_ds
    raise ConfigError(f"unknown dataset.kind {cfg['dataset.kind']!r}")


def _build_model(cfg, dataset: Dataset):
    shape = dataset.inputs.shape[1:]
    if cfg["model.conv_channels"]:
        if len(shape) != 3:
            raise ConfigError("model.conv_channels requires image-shaped inputs")
        spec = cnn_spec(shape, cfg["model.conv_channels"], cfg["model.hidden"],
                        dataset.class_count, seed=cfg["model.seed"])
    else:
        if len(shape) != 1:
            raise ConfigError("flat inputs required without conv channels")
        spec = mlp_spec(shape[0], cfg["model.hidden"], dataset.class_count,
                        seed=cfg["model.seed"])
    return build_model(spec)


def _train_config(cfg, weights: LossWeights | None = None) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"],
        learning_rate=cfg["train.learning_rate"], momentum=cfg["train.momentum"],
        weights=weights if weights is not None else LossWeights(
            alpha=cfg["loss.alpha"], beta=cfg["loss.beta"], gamma=cfg["loss.gamma"]),
        seed=cfg["train.seed"], shuffle=cfg["train.shuffle"],
        eval_every=cfg["train.eval_every"])


def _outdir(cfg) -> Path:
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / "resolved.cfg")
    return out


def _check_normalization(dataset: Dataset, norm) -> None:
    if dataset.normalization != norm:
        raise CheckpointError(
            f"dataset normalization {dataset.normalization} does not match "
            f"checkpoint normalization {norm}")


def _restrict(ds: Dataset, classes) -> Dataset:
    return ds.subset(np.isin(ds.labels, list(classes)))


def cmd_train(cfg) -> int:
    out = _outdir(cfg)
    train_ds, test_ds = _build_datasets(cfg)
    model = _build_model(cfg, train_ds)
    model, log = train(model, train_ds, _train_config(cfg), test_set=test_ds)
    digest = save_checkpoint(model, out / "checkpoint.moda",
                             normalization=train_ds.normalization)
    log.to_csv(out / "trainlog.csv")
    acc = evaluate(model, test_ds)
    print(f"checkpoint {out / 'checkpoint.moda'} digest 0x{digest:016x}")
    print(f"test accuracy {acc.accuracy:.4f}")
    return 0


def cmd_eval(cfg, checkpoint) -> int:
    out = _outdir(cfg)
    model, norm = load_checkpoint(checkpoint)
    train_ds, test_ds = _build_datasets(cfg)
    _check_normalization(test_ds, norm)
    result = evaluate(model, test_ds)
    payload = {"accuracy": result.accuracy,
               "per_class": result.per_class.tolist(),
               "counts": result.counts.tolist()}
    (out / "eval.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(json.dumps(payload))
    return 0


def cmd_decompose(cfg, checkpoint, tau_sweep=None) -> int:
    out = _outdir(cfg)
    model, norm = load_checkpoint(checkpoint)
    train_ds, _ = _build_datasets(cfg)
    _check_normalization(train_ds, norm)
    freq = compute_frequencies(model, train_ds)
    tau = cfg["decompose.tau"]
    modules = decompose_all(model, train_ds, tau, freq=freq)
    from .nn import count_params
    _, total = count_params(model)
    with open(out / "sizes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "weights", "size_ratio"])
        for m in modules:
            path = out / f"module_c{m.class_id}.moda"
            save_module(m, path)
            writer.writerow([m.class_id, m.weight_count(),
                             f"{m.weight_count() / total:.8f}"])
    print(f"wrote {len(modules)} modules to {out} (tau={tau})")

    if tau_sweep:
        taus = [float(t) for t in tau_sweep.split(",")]
        digest = model_digest(model)
        with open(out / "tau_sweep.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tau", "mean_module_size"])
            for t in sorted(taus):
                mods = [extract_module(model, freq, c, t, digest=digest)
                        for c in range(model.spec.class_count)]
                mean_size = float(np.mean([m.weight_count() / total for m in mods]))
                writer.writerow([t, f"{mean_size:.8f}"])
        print(f"tau sweep written to {out / 'tau_sweep.csv'}")
    return 0


def cmd_compose(cfg, checkpoint, module_paths) -> int:
    out = _outdir(cfg)
    model, norm = load_checkpoint(checkpoint)
    _, test_ds = _build_datasets(cfg)
    _check_normalization(test_ds, norm)
    modules = [load_module(p) for p in module_paths]
    cm = compose(modules, model)
    sub_test = _restrict(test_ds, cm.class_order)
    acc = reuse_accuracy(cm, sub_test)
    report = module_metrics(modules, model, reuse_acc=acc)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    print(f"reuse accuracy {acc:.4f} over classes {cm.class_order}")
    return 0


def _subtask_sets(n: int, k: int, cap: int, seed: int) -> list[tuple[int, ...]]:
    subsets = list(itertools.combinations(range(n), k))
    if cap and len(subsets) > cap:
        gen = streams.generator(seed, streams.STREAM_SWEEP + k)
        pick = gen.choice(len(subsets), size=cap, replace=False)
        subsets = [subsets[i] for i in sorted(pick)]
    return subsets


def cmd_sweep(cfg, checkpoint) -> int:
    out = _outdir(cfg)
    model, norm = load_checkpoint(checkpoint)
    train_ds, test_ds = _build_datasets(cfg)
    _check_normalization(test_ds, norm)
    modules = decompose_all(model, train_ds, cfg["decompose.tau"])
    by_class = {m.class_id: m for m in modules}

    rows = []
    for k in range(cfg["sweep.k_min"], cfg["sweep.k_max"] + 1):
        for classes in _subtask_sets(model.spec.class_count, k,
                                     cfg["sweep.max_subtasks"], cfg["sweep.seed"]):
            cm = compose([by_class[c] for c in classes], model)
            sub_test = _restrict(test_ds, classes)
            acc = reuse_accuracy(cm, sub_test)
            full_acc = evaluate(model, sub_test).accuracy
            report = module_metrics([by_class[c] for c in classes], model,
                                    reuse_acc=acc)
            rows.append({
                "subtask_id": "k%d-%s" % (k, "_".join(str(c) for c in classes)),
                "k": k,
                "classes": "|".join(str(c) for c in classes),
                "reuse_accuracy": f"{acc:.8f}",
                "full_model_accuracy": f"{full_acc:.8f}",
                "composed_size_ratio": f"{report.composed_size_ratio:.8f}",
                "composed_flops_ratio": f"{report.composed_flops_ratio:.8f}",
            })

    fields = ["subtask_id", "k", "classes", "reuse_accuracy",
              "full_model_accuracy", "composed_size_ratio", "composed_flops_ratio"]
    mean_row = {"subtask_id": "mean", "k": "", "classes": ""}
    for col in fields[3:]:
        mean_row[col] = f"{np.mean([float(r[col]) for r in rows]):.8f}"
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
        writer.writerow(mean_row)
    print(f"{len(rows)} sub-tasks written to {out / 'sweep.csv'}")
    return 0


def cmd_replace(cfg) -> int:
    out = _outdir(cfg)
    train_ds, test_ds = _build_datasets(cfg)
    plan = SplitPlan(strong_classes=cfg["replace.strong_classes"],
                     weak_classes=cfg["replace.weak_classes"],
                     target=cfg["replace.target"],
                     shared_fraction=cfg["replace.shared_fraction"],
                     overfit_fraction=cfg["replace.overfit_fraction"],
                     seed=cfg["replace.seed"])
    split = split_for_replacement(train_ds, test_ds, plan)

    # strong side: modular training on its full split, then extract the
    # target-class module
    strong = _build_model_for(cfg, split.strong_train, cfg["model.hidden"])
    strong, _ = train(strong, split.strong_train, _train_config(cfg))
    modules = decompose_all(strong, split.strong_train, cfg["decompose.tau"])
    strong_module = modules[plan.strong_classes.index(plan.target)]

    # weak side: plain cross-entropy training on the overfit split
    weak = _build_model_for(cfg, split.weak_train, cfg["replace.weak_hidden"])
    weak_cfg = TrainConfig(
        epochs=cfg["replace.weak_epochs"], batch_size=cfg["train.batch_size"],
        learning_rate=cfg["train.learning_rate"], momentum=cfg["train.momentum"],
        weights=LossWeights(0.0, 0.0, 0.0), seed=cfg["replace.seed"],
        shuffle=cfg["train.shuffle"])
    weak, _ = train(weak, split.weak_overfit_train, weak_cfg)

    weak_bytes_before = weak.param_bytes()
    asm = ReplacementAssembly(weak=weak, strong_module=strong_module,
                              target_index=plan.weak_classes.index(plan.target))
    adapt_log = train_adaptation(asm, split.weak_overfit_train,
                                 epochs=cfg["replace.adapt_epochs"],
                                 lr=cfg["replace.adapt_lr"],
                                 batch_size=cfg["replace.adapt_batch_size"],
                                 seed=cfg["replace.seed"])
    outcome = evaluate_replacement(asm, split.weak_test, adaptation_log=adapt_log)
    frozen_ok = weak.param_bytes() == weak_bytes_before

    (out / "replacement.json").write_text(
        outcome.to_json(weak_params_unchanged=frozen_ok,
                        target_class=plan.target) + "\n")
    print(f"target class {plan.target}: "
          f"pre {outcome.pre_target_accuracy:.4f} -> post {outcome.post_target_accuracy:.4f}; "
          f"non-target pre {outcome.pre_nontarget_accuracy:.4f} -> "
          f"post {outcome.post_nontarget_accuracy:.4f}")
    return 0


def _build_model_for(cfg, dataset: Dataset, hidden):
    shape = dataset.inputs.shape[1:]
    if cfg["model.conv_channels"]:
        spec = cnn_spec(shape, cfg["model.conv_channels"], hidden,
                        dataset.class_count, seed=cfg["model.seed"])
    else:
        spec = mlp_spec(shape[0], hidden, dataset.class_count,
                        seed=cfg["model.seed"])
    return build_model(spec)


def cmd_gradcheck(seed: int, instances: int) -> int:
    results = gc.run_all(seed=seed, instances=instances)
    print(gc.format_table(results))
    return 0 if all(r.passed for r in results) else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="moda",
        description="activation-driven modular training, decomposition, and reuse")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_cfg(p):
        p.add_argument("-c", "--config", help="config file (dotted keys)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key")

    p_train = sub.add_parser("train", help="train a modular model")
    add_cfg(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    add_cfg(p_eval)
    p_eval.add_argument("--checkpoint", required=True)

    p_dec = sub.add_parser("decompose", help="extract per-class modules")
    add_cfg(p_dec)
    p_dec.add_argument("--checkpoint", required=True)
    p_dec.add_argument("--tau", type=float, help="override decompose.tau")
    p_dec.add_argument("--tau-sweep", help="comma list of taus for a size sweep")

    p_comp = sub.add_parser("compose", help="merge modules into a k-class model")
    add_cfg(p_comp)
    p_comp.add_argument("--checkpoint", required=True)
    p_comp.add_argument("--modules", nargs="+", required=True)

    p_sweep = sub.add_parser("sweep", help="enumerate k-class sub-task compositions")
    add_cfg(p_sweep)
    p_sweep.add_argument("--checkpoint", required=True)

    p_rep = sub.add_parser("replace", help="run the module replacement experiment")
    add_cfg(p_rep)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--instances", type=int, default=20)

    args = parser.parse_args(argv)

    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed, args.instances)
        cfg = resolve(args.config, args.overrides)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "decompose":
            if args.tau is not None:
                cfg["decompose.tau"] = args.tau
            return cmd_decompose(cfg, args.checkpoint, tau_sweep=args.tau_sweep)
        if args.command == "compose":
            return cmd_compose(cfg, args.checkpoint, args.modules)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.checkpoint)
        if args.command == "replace":
            return cmd_replace(cfg)
        parser.error(f"unknown command {args.command}")
    except (ConfigError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
