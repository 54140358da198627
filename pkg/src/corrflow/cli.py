"""Command-line pipeline driver.

Each subcommand reads its settings from an optional key=value config file
plus flag overrides, creates a fresh run directory named by timestamp and
seed, and drops a resolved_config.json snapshot next to its outputs. On
failure one JSON object goes to stderr and the process exits with the code
attached to the error category; inputs are never modified in place.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from .checkpoint import load_checkpoint, load_stats, save_checkpoint, save_stats
from .correlation import CovarianceModel
from .actions import fit_normalization
from .data import EpisodeDataset
from .errors import ConfigError, CorrflowError, MissingInputError, SchemaError
from .inference import CompressionConfig, GripperStats, InpaintConfig, PolicyEngine
from .seeds import component_rng
from .training import TrainConfig, build_stack, train
from .world import (
    WORLD_LAYOUT,
    ScriptedEngine,
    default_world_spec,
    evaluate,
    generate_demos,
    rollout,
)

# core settings shared by the subcommands; name -> (type, default, help)
CORE_FIELDS = {
    "seed": (int, 0, "root seed; all component streams derive from it"),
    "H": (int, 30, "action chunk horizon"),
    "D": (int, 5, "action dimension"),
    "beta": (float, 0.5, "covariance shrinkage weight"),
    "n_samples": (int, 15, "noise/time draws per training example"),
    "denoise_steps": (int, 10, "Euler integration steps"),
    "execute_count": (int, 26, "actions executed per cycle"),
    "save_tail": (int, 4, "chunk rows carried into the next cycle"),
    "threshold": (float, 0.3, "inpainting time threshold"),
    "speedup": (float, 1.3, "compression velocity scale"),
}

TRAIN_FIELDS = {
    "steps": (int, 16000, "optimizer steps"),
    "batch_size": (int, 48, "chunks per optimizer step"),
    "learning_rate": (float, 0.05, "peak learning rate (cosine decayed)"),
    "hidden": (int, 384, "velocity network hidden width"),
    "encoder_features": (int, 150, "observation encoder feature count"),
    "noise": (str, "corr", "training noise source: corr or identity"),
    "val_fraction": (float, 0.1, "episodes held out for validation"),
}


def _parse_config_file(path):
    """key = value lines; '#' comments; unknown keys rejected."""
    known = {**CORE_FIELDS, **TRAIN_FIELDS}
    if not os.path.exists(path):
        raise MissingInputError(f"config file not found: {path}")
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            typ = known[key][0]
            try:
                out[key] = typ(value)
            except ValueError:
                raise ConfigError(
                    f"{path}:{lineno}: cannot parse {value!r} as {typ.__name__}"
                ) from None
    return out


def _resolve(args, names):
    """Merge config-file values and flag overrides for the listed names.

    Flags win over the file; the file wins over defaults. argparse stores
    None for flags the user did not pass, so the precedence is visible.
    """
    known = {**CORE_FIELDS, **TRAIN_FIELDS}
    file_values = _parse_config_file(args.config) if args.config else {}
    resolved = {}
    for name in names:
        flag = getattr(args, name, None)
        if flag is not None:
            resolved[name] = flag
        elif name in file_values:
            resolved[name] = file_values[name]
        else:
            resolved[name] = known[name][1]
    return resolved


def _make_run_dir(out_root, command, seed):
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = os.path.join(out_root, f"{command}-{stamp}-seed{seed}")
    path = base
    counter = 2
    while os.path.exists(path):
        path = f"{base}-{counter}"
        counter += 1
    os.makedirs(path)
    return path


def _write_resolved(run_dir, resolved):
    with open(os.path.join(run_dir, "resolved_config.json"), "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _select_tasks(spec_text):
    tasks = default_world_spec()
    if spec_text in (None, "all"):
        return tasks
    try:
        wanted = [int(tok) for tok in spec_text.split(",") if tok.strip() != ""]
    except ValueError:
        raise ConfigError(f"--tasks must be 'all' or comma-separated ids, got {spec_text!r}") from None
    by_id = {t.task_id: t for t in tasks}
    missing = [i for i in wanted if i not in by_id]
    if missing:
        raise ConfigError(f"unknown task ids {missing}; available {sorted(by_id)}")
    return [by_id[i] for i in wanted]


def _check_world_layout(resolved):
    # the built-in world has one fixed layout; H/D only vary for library use
    if resolved["H"] != WORLD_LAYOUT.horizon or resolved["D"] != WORLD_LAYOUT.dim:
        raise ConfigError(
            f"the synthetic world uses H={WORLD_LAYOUT.horizon}, D={WORLD_LAYOUT.dim}; "
            f"got H={resolved['H']}, D={resolved['D']}"
        )


def _engine_kwargs(resolved, args):
    execute = resolved["execute_count"]
    save = resolved["save_tail"]
    out_steps = int(round(execute / resolved["speedup"]))
    compression = CompressionConfig(
        in_steps=execute,
        out_steps=out_steps,
        speedup=resolved["speedup"],
        velocity_dim_range=WORLD_LAYOUT.velocity_dims,
        gripper_dims=WORLD_LAYOUT.gripper_dims,
    )
    return {
        "denoise_steps": resolved["denoise_steps"],
        "execute_count": execute,
        "save_count": save,
        "inpaint": InpaintConfig(time_threshold=resolved["threshold"]),
        "compression": compression,
        "use_tracker": not getattr(args, "no_tracker", False),
        "use_gripper_rule": not getattr(args, "no_gripper_rule", False),
    }


def _train_config(resolved):
    return TrainConfig(
        steps=resolved["steps"],
        batch_size=resolved["batch_size"],
        learning_rate=resolved["learning_rate"],
        n_samples=resolved["n_samples"],
        hidden=resolved["hidden"],
        encoder_features=resolved["encoder_features"],
        beta=resolved["beta"],
        noise=resolved["noise"],
        val_fraction=resolved["val_fraction"],
    )


def cmd_generate(args):
    resolved = _resolve(args, CORE_FIELDS)
    _check_world_layout(resolved)
    tasks = _select_tasks(args.tasks)
    run_dir = _make_run_dir(args.out, "generate", resolved["seed"])
    resolved.update({"tasks": [t.task_id for t in tasks], "episodes": args.episodes})
    dataset = generate_demos(tasks, args.episodes, root_seed=resolved["seed"])
    dataset_dir = os.path.join(run_dir, "dataset")
    dataset.save(dataset_dir)
    resolved["dataset"] = dataset_dir
    _write_resolved(run_dir, resolved)
    print(dataset_dir)
    return 0


def cmd_fit(args):
    resolved = _resolve(args, CORE_FIELDS)
    dataset = EpisodeDataset.load(args.dataset)
    layout = dataset.layout
    if (layout.horizon, layout.dim) != (resolved["H"], resolved["D"]):
        raise SchemaError(
            f"dataset layout ({layout.horizon}, {layout.dim}) does not match "
            f"configured H={resolved['H']}, D={resolved['D']}"
        )
    run_dir = _make_run_dir(args.out, "fit", resolved["seed"])
    normalizer = fit_normalization(dataset, layout)
    blocks = (normalizer.transform(b) for b in dataset.delta_chunk_blocks())
    covariance = CovarianceModel(beta=resolved["beta"]).fit(blocks)
    stats_path = os.path.join(run_dir, "stats.bin")
    save_stats(stats_path, normalizer, covariance)
    resolved["dataset"] = args.dataset
    resolved["stats"] = stats_path
    _write_resolved(run_dir, resolved)
    print(stats_path)
    return 0


def cmd_train(args):
    resolved = _resolve(args, {**CORE_FIELDS, **TRAIN_FIELDS})
    dataset = EpisodeDataset.load(args.dataset)
    config = _train_config(resolved)
    prefit = None
    if args.stats:
        header, normalizer, covariance = load_stats(args.stats)
        expected = (resolved["H"], resolved["D"], resolved["beta"])
        got = (header["H"], header["D"], header["beta"])
        if got != expected:
            raise SchemaError(
                f"statistics header (H, D, beta)={got} does not match configured {expected}"
            )
        prefit = (normalizer, covariance)
    run_dir = _make_run_dir(args.out, "train", resolved["seed"])
    stack = build_stack(dataset, config, root_seed=resolved["seed"], prefit=prefit)
    result = train(stack, dataset, config, root_seed=resolved["seed"])
    gripper = GripperStats(gripper_dims=stack.layout.gripper_dims).fit(dataset)
    ckpt_path = os.path.join(run_dir, "model.ckpt")
    save_checkpoint(ckpt_path, stack, gripper_stats=gripper, config=config,
                    root_seed=resolved["seed"])
    curves = {
        "loss_curve": [float(v) for v in result.loss_curve],
        "val_steps": [int(v) for v in result.val_steps],
        "val_losses": [float(v) for v in result.val_losses],
        "stage_accuracy": float(result.stage_accuracy),
        "val_stage_accuracy": None
        if result.val_stage_accuracy is None
        else float(result.val_stage_accuracy),
        "steps_run": int(result.steps_run),
    }
    with open(os.path.join(run_dir, "curves.json"), "w", encoding="utf-8") as fh:
        json.dump(curves, fh)
        fh.write("\n")
    resolved.update({"dataset": args.dataset, "stats": args.stats, "checkpoint": ckpt_path})
    _write_resolved(run_dir, resolved)
    print(ckpt_path)
    return 0


def cmd_rollout(args):
    resolved = _resolve(args, CORE_FIELDS)
    _check_world_layout(resolved)
    tasks = {t.task_id: t for t in default_world_spec()}
    if args.task not in tasks:
        raise ConfigError(f"unknown task id {args.task}; available {sorted(tasks)}")
    task = tasks[args.task]
    ckpt = load_checkpoint(args.checkpoint)
    run_dir = _make_run_dir(args.out, "rollout", resolved["seed"])
    episodes = []
    for idx in range(args.episodes):
        trace_path = os.path.join(run_dir, f"trace_ep{idx}.jsonl")
        engine = ckpt.build_engine(trace_path=trace_path, **_engine_kwargs(resolved, args))
        rng = component_rng(resolved["seed"], "rollout", idx)
        report, trace = rollout(engine, task, rng)
        episodes.append(
            {
                "episode": idx,
                "task_id": task.task_id,
                "q": report.q,
                "success": report.success,
                "satisfied": [bool(v) for v in report.satisfied],
                "steps": trace["steps"],
                "distance": trace["distance"],
                "reason": trace["reason"],
            }
        )
    summary = {
        "task_id": task.task_id,
        "episodes": episodes,
        "q": float(np.mean([e["q"] for e in episodes])),
    }
    with open(os.path.join(run_dir, "rollout.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    resolved.update({"checkpoint": args.checkpoint, "task": args.task,
                     "episodes": args.episodes})
    _write_resolved(run_dir, resolved)
    print(f"q_score {summary['q']:.4f}")
    return 0


def cmd_eval(args):
    resolved = _resolve(args, CORE_FIELDS)
    _check_world_layout(resolved)
    tasks = _select_tasks(args.tasks)
    if args.engine == "checkpoint":
        if not args.checkpoint:
            raise ConfigError("--engine checkpoint requires --checkpoint")
        ckpt = load_checkpoint(args.checkpoint)
        kwargs = _engine_kwargs(resolved, args)
        factory = lambda: ckpt.build_engine(**kwargs)  # noqa: E731
    elif args.engine == "scripted":
        factory = ScriptedEngine
    elif args.engine == "untrained":
        if not args.dataset:
            raise ConfigError("--engine untrained requires --dataset for statistics")
        dataset = EpisodeDataset.load(args.dataset)
        train_resolved = _resolve(args, {**CORE_FIELDS, **TRAIN_FIELDS})
        stack = build_stack(dataset, _train_config(train_resolved),
                            root_seed=resolved["seed"])
        gripper = GripperStats(gripper_dims=stack.layout.gripper_dims).fit(dataset)
        kwargs = _engine_kwargs(resolved, args)
        factory = lambda: PolicyEngine(stack, gripper_stats=gripper, **kwargs)  # noqa: E731
    else:
        raise ConfigError(f"unknown engine kind {args.engine!r}")
    run_dir = _make_run_dir(args.out, "eval", resolved["seed"])
    results = evaluate(factory, tasks, args.episodes, root_seed=resolved["seed"])
    with open(os.path.join(run_dir, "results.json"), "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")
    resolved.update(
        {
            "engine": args.engine,
            "checkpoint": args.checkpoint,
            "dataset": args.dataset,
            "tasks": [t.task_id for t in tasks],
            "episodes": args.episodes,
        }
    )
    _write_resolved(run_dir, resolved)
    print(f"q_score {results['q_score']:.4f}")
    return 0


def cmd_report(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not os.path.exists(args.results):
        raise MissingInputError(f"results file not found: {args.results}")
    with open(args.results, "r", encoding="utf-8") as fh:
        try:
            results = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"results file is not valid JSON: {exc}") from None
    if "tasks" not in results:
        raise SchemaError("results file has no 'tasks' section")
    seed = args.seed if args.seed is not None else 0
    run_dir = _make_run_dir(args.out, "report", seed)

    rows = results["tasks"]
    grid = np.full((len(rows), max(r["episodes"] for r in rows)), np.nan)
    for i, row in enumerate(rows):
        grid[i, : len(row["episode_q"])] = row["episode_q"]
    fig, ax = plt.subplots(figsize=(0.45 * grid.shape[1] + 2, 0.6 * len(rows) + 1.5))
    im = ax.imshow(grid, vmin=0.0, vmax=1.0, cmap="RdYlGn", aspect="auto")
    ax.set_yticks(range(len(rows)), [f"{r['task_id']}:{r['name']}" for r in rows])
    ax.set_xlabel("episode")
    ax.set_title(f"per-episode q (overall {results['q_score']:.3f})")
    fig.colorbar(im, ax=ax, label="q")
    fig.tight_layout()
    grid_path = os.path.join(run_dir, "q_grid.png")
    fig.savefig(grid_path, dpi=120)
    plt.close(fig)

    csv_path = os.path.join(run_dir, "q_table.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("task_id,name,episodes,q,success_rate,mean_steps,mean_distance\n")
        for r in rows:
            fh.write(
                f"{r['task_id']},{r['name']},{r['episodes']},{r['q']:.4f},"
                f"{r['success_rate']:.4f},{r['mean_steps']:.1f},{r['mean_distance']:.3f}\n"
            )

    outputs = [grid_path, csv_path]
    if args.trace:
        if not os.path.exists(args.trace):
            raise MissingInputError(f"trace file not found: {args.trace}")
        cycles, voted, raw = [], [], []
        with open(args.trace, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise SchemaError(f"trace line is not valid JSON: {exc}") from None
                cycles.append(rec["cycle"])
                voted.append(rec["stage"])
                raw.append(rec["raw_stage"])
        fig, ax = plt.subplots(figsize=(8, 3))
        ax.step(cycles, raw, where="post", alpha=0.5, label="raw prediction")
        ax.step(cycles, voted, where="post", label="voted stage")
        ax.set_xlabel("cycle")
        ax.set_ylabel("stage")
        ax.legend(loc="upper left")
        fig.tight_layout()
        trace_path = os.path.join(run_dir, "stage_trace.png")
        fig.savefig(trace_path, dpi=120)
        plt.close(fig)
        outputs.append(trace_path)

    _write_resolved(run_dir, {"results": args.results, "trace": args.trace, "seed": seed})
    for path in outputs:
        print(path)
    return 0


def _add_core_flags(sub, names):
    for name in names:
        typ, default, help_text = CORE_FIELDS.get(name) or TRAIN_FIELDS[name]
        flag = "--" + name.replace("_", "-") if len(name) > 1 else "--" + name
        # argparse default None so _resolve can tell flag from file/default
        sub.add_argument(flag, dest=name, type=typ, default=None,
                         help=f"{help_text} (default: {default})")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="corrflow",
        description="Correlated-noise flow-matching policy pipeline.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    def common(sub, core=CORE_FIELDS, extra=()):
        sub.add_argument("--config", default=None, help="key=value settings file")
        sub.add_argument("--out", default="runs", help="run directory root (default: runs)")
        _add_core_flags(sub, list(core) + list(extra))

    gen = subs.add_parser("generate", help="write a scripted demonstration dataset")
    common(gen)
    gen.add_argument("--tasks", default="all", help="comma-separated task ids or 'all'")
    gen.add_argument("--episodes", type=int, default=200,
                     help="episodes per task (default: 200)")
    gen.set_defaults(func=cmd_generate)

    fit = subs.add_parser("fit", help="fit normalization and correlation statistics")
    common(fit)
    fit.add_argument("--dataset", required=True, help="dataset directory")
    fit.set_defaults(func=cmd_fit)

    tr = subs.add_parser("train", help="train the velocity model and stage head")
    common(tr, extra=TRAIN_FIELDS)
    tr.add_argument("--dataset", required=True, help="dataset directory")
    tr.add_argument("--stats", default=None, help="statistics file from fit (optional)")
    tr.set_defaults(func=cmd_train)

    ro = subs.add_parser("rollout", help="run closed-loop episodes with per-cycle traces")
    common(ro)
    ro.add_argument("--checkpoint", required=True, help="checkpoint file from train")
    ro.add_argument("--task", type=int, default=0, help="task id (default: 0)")
    ro.add_argument("--episodes", type=int, default=1,
                    help="episodes to run (default: 1)")
    ro.add_argument("--no-tracker", action="store_true",
                    help="freeze the stage context at stage 0")
    ro.add_argument("--no-gripper-rule", action="store_true",
                    help="disable the gripper correction rule")
    ro.set_defaults(func=cmd_rollout)

    ev = subs.add_parser("eval", help="score q over tasks and write results.json")
    common(ev)
    ev.add_argument("--engine", choices=("checkpoint", "scripted", "untrained"),
                    default="checkpoint", help="policy under test (default: checkpoint)")
    ev.add_argument("--checkpoint", default=None, help="checkpoint file from train")
    ev.add_argument("--dataset", default=None,
                    help="dataset directory (required for --engine untrained)")
    ev.add_argument("--tasks", default="all", help="comma-separated task ids or 'all'")
    ev.add_argument("--episodes", type=int, default=20,
                    help="episodes per task (default: 20)")
    ev.add_argument("--no-tracker", action="store_true",
                    help="freeze the stage context at stage 0")
    ev.add_argument("--no-gripper-rule", action="store_true",
                    help="disable the gripper correction rule")
    ev.set_defaults(func=cmd_eval)

    rp = subs.add_parser("report", help="render plots and a CSV from results")
    rp.add_argument("--config", default=None, help="key=value settings file")
    rp.add_argument("--out", default="runs", help="run directory root (default: runs)")
    rp.add_argument("--results", required=True, help="results.json from eval")
    rp.add_argument("--trace", default=None, help="per-cycle trace.jsonl from rollout")
    rp.add_argument("--seed", type=int, default=None, help="seed tag for the run directory")
    rp.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CorrflowError as exc:
        payload = {
            "error": type(exc).__name__,
            "message": str(exc),
            "exit_code": exc.exit_code,
        }
        print(json.dumps(payload), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
