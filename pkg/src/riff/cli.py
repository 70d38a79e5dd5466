"""Experiment front door.

Subcommands: pretrain, riff-finetune, train-classifier, evaluate,
oracle-check, grid, report. Each run owns a directory
<out_root>/<name>/<seed>/ holding manifest.json, metrics.csv, and
checkpoints. The output root comes from --out or the RIFF_OUT env var.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import classifier as clf
from . import data, metrics, oracle, training
from .checkpoint import file_hash
from .numerics import finite_diff_grad, max_relative_error
from .policy import (
    PolicyConfig,
    PolicyParams,
    TokenSeq,
    load_policy,
    pretrain_mle,
    save_policy,
    snapshot,
)
from .training import RunConfig


class ConfigError(Exception):
    pass


CONFIG_DEFAULTS = {
    "name": "run",
    # synthetic task
    "task_vocab_size": 20,
    "num_labels": 2,
    "shots": 16,
    "task_pool": 128,
    "task_seed": 0,
    # rewriter
    "policy_embed_dim": 12,
    "policy_hidden_dim": 24,
    "policy_max_len": 24,
    "pretrain_pool": 128,
    "pretrain_epochs": 20,
    "pretrain_lr": 0.02,
    # classifier
    "classifier_embed_dim": 16,
    "tuning_mode": "all",
    "prompt_len": 0,
    "lora_rank": 2,
    "lora_alpha": 32.0,
    "cls_hidden": 16,
    "classifier_warmup_steps": 200,
    "classifier_warmup_lr": 0.01,
    # gradient-search
    "gs_k": 4,
    "gs_batch_size": 2,
    # checkpoints to reuse instead of building fresh models
    "policy_checkpoint": None,
    "classifier_checkpoint": None,
}


def load_config(source) -> dict:
    """Merge a config dict or JSON file over the defaults; unknown keys and
    type mismatches are configuration errors naming the field."""
    if isinstance(source, dict):
        raw = dict(source)
    else:
        if not os.path.exists(source):
            raise ConfigError(f"config file not found: {source}")
        try:
            with open(source, "r", encoding="utf-8") as f:
                raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    run_fields = set(RunConfig.__dataclass_fields__)
    merged = dict(CONFIG_DEFAULTS)
    merged.update({f: getattr(RunConfig(), f) for f in run_fields})
    for key, value in raw.items():
        if key not in merged:
            raise ConfigError(f"unknown config field {key!r}")
        merged[key] = value
    try:
        run_cfg = RunConfig.from_dict({k: merged[k] for k in run_fields})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    merged.update(run_cfg.to_dict())
    if merged["tuning_mode"] not in {m.value for m in clf.TuningMode}:
        raise ConfigError(f"unknown tuning_mode {merged['tuning_mode']!r}")
    return merged


def run_config_of(config: dict) -> RunConfig:
    return RunConfig.from_dict(
        {f: config[f] for f in RunConfig.__dataclass_fields__}
    )


def out_root(args) -> str:
    return args.out or os.environ.get("RIFF_OUT", "runs_out")


def run_dir_of(root: str, name: str, seed: int) -> str:
    return os.path.join(root, name, str(seed))


def build_task(config: dict) -> data.SyntheticTask:
    return data.gen_synthetic_task(
        config["task_vocab_size"],
        config["num_labels"],
        config["task_pool"],
        config["task_pool"] // 2,
        config["task_seed"],
    )


def build_split(config: dict, task: data.SyntheticTask) -> training.FewShotSplit:
    return training.fewshot_split(task.train, config["shots"], config["seed"])


def policy_config(config: dict) -> PolicyConfig:
    return PolicyConfig(
        vocab_size=config["task_vocab_size"],
        embed_dim=config["policy_embed_dim"],
        hidden_dim=config["policy_hidden_dim"],
        max_len=config["policy_max_len"],
    )


def classifier_config(config: dict) -> clf.ClassifierConfig:
    prompt_len = config["prompt_len"]
    if config["tuning_mode"] == "soft_prompt" and prompt_len == 0:
        prompt_len = 5  # desk-scale default prompt length
    return clf.ClassifierConfig(
        vocab_size=config["task_vocab_size"],
        num_labels=config["num_labels"],
        embed_dim=config["classifier_embed_dim"],
        prompt_len=prompt_len,
        lora_rank=config["lora_rank"],
        lora_alpha=config["lora_alpha"],
        cls_hidden=config["cls_hidden"],
    )


def pretrained_policy(config: dict) -> PolicyParams:
    """Rewriter pretrained on rule-based rewrite targets of a synthetic pool
    disjoint from the task split."""
    if config["policy_checkpoint"]:
        return load_policy(config["policy_checkpoint"])
    pool = data.gen_synthetic_task(
        config["task_vocab_size"],
        config["num_labels"],
        config["pretrain_pool"],
        0,
        config["task_seed"] + 7919,
    )
    corpus = data.gen_rewriter_corpus(pool.train, config["num_labels"], config["task_seed"] + 104729)
    init = PolicyParams.init_random(policy_config(config), seed=config["seed"] + 31)
    return pretrain_mle(
        init, corpus, epochs=config["pretrain_epochs"], lr=config["pretrain_lr"],
        seed=config["seed"] + 47,
    )


def warmed_classifier(config: dict, task, split) -> clf.ClassifierParams:
    """Classifier given plain supervised warmup so rewrite rewards carry signal."""
    if config["classifier_checkpoint"]:
        return clf.load_classifier(config["classifier_checkpoint"])
    params = clf.ClassifierParams.init_random(
        classifier_config(config), clf.TuningMode(config["tuning_mode"]), seed=config["seed"] + 59
    )
    if config["classifier_warmup_steps"] > 0:
        warm_cfg = replace(
            run_config_of(config),
            steps=config["classifier_warmup_steps"],
            lr=config["classifier_warmup_lr"],
        )
        checkpoints = training.train_classifier_augmented(
            params, None, task, split, m=0, mode=params.mode, cfg=warm_cfg
        )
        params = checkpoints[-1].params.copy()
    return params


def write_manifest(run_dir: str, config: dict, plan: dict, files: dict) -> None:
    os.makedirs(run_dir, exist_ok=True)
    manifest = {
        "config": config,
        "seed": config["seed"],
        "protocol": plan,
        "files": files,
    }
    with open(os.path.join(run_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def cmd_pretrain(args) -> int:
    config = load_config(args.config)
    run_dir = run_dir_of(out_root(args), config["name"], config["seed"])
    os.makedirs(run_dir, exist_ok=True)
    policy = pretrained_policy(config)
    path = os.path.join(run_dir, "policy_pretrained.ckpt")
    save_policy(path, policy)
    plan = {"pretrain_epochs": config["pretrain_epochs"], "pretrain_pool": config["pretrain_pool"]}
    write_manifest(run_dir, config, plan, {"policy_pretrained": file_hash(path)})
    print(f"pretrained rewriter saved to {path}")
    return 0


def cmd_riff_finetune(args) -> int:
    config = load_config(args.config)
    cfg = run_config_of(config)
    task = build_task(config)
    split = build_split(config, task)
    run_dir = run_dir_of(out_root(args), config["name"], config["seed"])
    os.makedirs(run_dir, exist_ok=True)
    classifier = warmed_classifier(config, task, split)
    clf_path = os.path.join(run_dir, "classifier_frozen.ckpt")
    clf.save_classifier(clf_path, classifier)
    policy = pretrained_policy(config)
    pre_path = os.path.join(run_dir, "policy_pretrained.ckpt")
    save_policy(pre_path, policy)
    checkpoints = training.finetune_paraphraser(policy, classifier, task, split, cfg, run_dir)
    best = training.select_best_checkpoint(checkpoints, training.METRIC_EXCL)
    best_path = os.path.join(run_dir, "policy_best.ckpt")
    save_policy(best_path, best.params)
    files = {
        "classifier_frozen": file_hash(clf_path),
        "policy_pretrained": file_hash(pre_path),
        "policy_best": file_hash(best_path),
    }
    write_manifest(run_dir, config, training.protocol_plan(cfg, len(split.train)), files)
    print(
        f"finetuned rewriter: best checkpoint step {best.step} "
        f"ensemble accuracy {best.metrics[training.METRIC_EXCL]:.3f} -> {best_path}"
    )
    return 0


def cmd_train_classifier(args) -> int:
    config = load_config(args.config)
    cfg = run_config_of(config)
    task = build_task(config)
    split = build_split(config, task)
    run_dir = run_dir_of(out_root(args), config["name"], config["seed"])
    os.makedirs(run_dir, exist_ok=True)
    policy = pretrained_policy(config) if cfg.m > 0 else None
    mode = clf.TuningMode(config["tuning_mode"])
    params = clf.ClassifierParams.init_random(classifier_config(config), mode, seed=config["seed"] + 59)
    checkpoints = training.train_classifier_augmented(
        params, policy, task, split, cfg.m, mode, cfg, run_dir
    )
    best = training.select_best_checkpoint(checkpoints, training.METRIC_INCL)
    best_path = os.path.join(run_dir, "classifier_best.ckpt")
    clf.save_classifier(best_path, best.params)
    write_manifest(
        run_dir, config, training.protocol_plan(cfg, len(split.train)),
        {"classifier_best": file_hash(best_path)},
    )
    print(
        f"trained classifier ({mode.value}): best checkpoint step {best.step} "
        f"ensemble accuracy {best.metrics[training.METRIC_INCL]:.3f} -> {best_path}"
    )
    return 0


def cmd_evaluate(args) -> int:
    config = load_config(args.config)
    cfg = run_config_of(config)
    task = build_task(config)
    split = build_split(config, task)
    classifier = (
        clf.load_classifier(config["classifier_checkpoint"])
        if config["classifier_checkpoint"]
        else warmed_classifier(config, task, split)
    )
    policy = pretrained_policy(config)
    verbalizer = clf.Verbalizer(task.verbalizer_ids)
    rows = []
    for name, examples in (("validation", split.validation), ("test", task.test)):
        plain = training.plain_accuracy(classifier, task.template, verbalizer, examples)
        incl = training.evaluate_ensemble_accuracy(
            policy, classifier, task.template, verbalizer, examples, cfg.m, True, cfg,
            training.derive_seed(cfg.seed, 0xE7A1),
        )
        excl = training.evaluate_ensemble_accuracy(
            policy, classifier, task.template, verbalizer, examples, cfg.m, False, cfg,
            training.derive_seed(cfg.seed, 0xE7A2),
        )
        rows.extend(
            [
                (0, name, "plain_acc", plain),
                (0, name, training.METRIC_INCL, incl),
                (0, name, training.METRIC_EXCL, excl),
            ]
        )
        print(f"{name}: plain {plain:.3f} ensemble+orig {incl:.3f} ensemble-only {excl:.3f}")
    ld_values = []
    pld_values = []
    for ex in list(task.test)[:16]:
        dc = training.decode_config(cfg, training.derive_seed(cfg.seed, 0x1D, ex.uid))
        zs = [data.strip_scaffold(z) for z in training.diverse_beam(policy, ex.x, dc)]
        zs = [z for z in zs if len(z.content) > 0]
        if len(zs) >= 2:
            ld_values.extend(metrics.lexical_diversity(ex.x.content, z.content) for z in zs)
            pld_values.append(metrics.pairwise_ld([z.content for z in zs]))
    if ld_values:
        rows.append((0, "test", "lexical_diversity", float(np.mean(ld_values))))
        rows.append((0, "test", "pairwise_lexical_diversity", float(np.mean(pld_values))))
        print(
            f"rewrite diversity: LD {np.mean(ld_values):.3f} PLD {np.mean(pld_values):.3f}"
        )
    run_dir = run_dir_of(out_root(args), config["name"], config["seed"])
    os.makedirs(run_dir, exist_ok=True)
    training.write_metrics_csv(os.path.join(run_dir, "eval_metrics.csv"), rows)
    return 0


def oracle_check(seed: int, instances: int = 20) -> float:
    """Gradient anchor sweep: exact posterior-weighted gradient vs central
    finite differences of the exact objective, on random tiny instances.

    Random policies carry large unterminated tail mass by construction; the
    objective excludes it consistently, so the tail warning is muted here.
    """
    import warnings

    warnings.filterwarnings("ignore", message="unterminated tail mass")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        vocab = int(rng.integers(3, 5))
        max_len = int(rng.integers(3, 5))
        pcfg = PolicyConfig(vocab_size=vocab, embed_dim=4, hidden_dim=5, max_len=max_len)
        policy = PolicyParams.init_random(pcfg, seed=int(rng.integers(2**31)), scale=0.6)
        x = TokenSeq.from_content([int(rng.integers(1, vocab)) for _ in range(3)])
        table_seed = int(rng.integers(2**31))

        def reward_fn(z, _seed=table_seed):
            local = np.random.default_rng([_seed, *z.ids])
            return float(-2.0 * local.random())

        analytic = oracle.exact_gradient(policy, x, reward_fn, max_len)

        def objective(flat, _p=policy, _x=x, _r=reward_fn, _ml=max_len):
            probe = PolicyParams(_p.cfg)
            probe.pv.values[:] = flat
            return oracle.exact_objective(probe, _x, _r, _ml)

        fd = finite_diff_grad(objective, policy.flat, h=1e-5)
        worst = max(worst, max_relative_error(analytic, fd))
    return worst


def cmd_oracle_check(args) -> int:
    worst = oracle_check(args.seed, args.instances)
    print(f"max relative gradient error over {args.instances} instances: {worst:.3e}")
    if worst < 1e-3:
        print("oracle check passed")
        return 0
    print("oracle check FAILED", file=sys.stderr)
    return 1


def parse_axis(text: str, allowed, axis_name: str) -> list[str]:
    values = [v.strip() for v in text.split(",") if v.strip()]
    for v in values:
        if v not in allowed:
            raise ConfigError(f"unknown {axis_name} {v!r}")
    if not values:
        raise ConfigError(f"empty {axis_name} axis")
    return values


def _grid_cell(cell_config: dict, out: str | None) -> str:
    cmd_riff_finetune(argparse.Namespace(config=cell_config, out=out))
    return f"{cell_config['name']}/{cell_config['seed']}"


def cmd_grid(args) -> int:
    config = load_config(args.config) if args.config else load_config({})
    estimators = parse_axis(args.estimators, training.ESTIMATORS, "estimator")
    regimes = parse_axis(args.regimes, training.REGIMES, "regime")
    decoders = parse_axis(args.decoders, training.DECODERS, "decoder")
    if args.normalize == "both":
        normalize_axis = [False, True]
    elif args.normalize in ("on", "off"):
        normalize_axis = [args.normalize == "on"]
    else:
        raise ConfigError(f"normalize must be on, off or both, got {args.normalize!r}")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise ConfigError("empty seed list")
    if args.workers < 1:
        raise ConfigError("workers must be at least 1")
    cells = list(itertools.product(estimators, regimes, decoders, normalize_axis))
    print(f"grid: {len(cells)} cells x {len(seeds)} seeds = {len(cells) * len(seeds)} runs")
    jobs = []
    for estimator, regime, decoder, normalize in cells:
        name = f"{estimator}-{regime}-{decoder}" + ("-z" if normalize else "")
        for seed in seeds:
            cell_config = dict(config)
            cell_config.update(
                {
                    "name": name,
                    "estimator": estimator,
                    "regime": regime,
                    "decoder": decoder,
                    "normalize": normalize,
                    "beta": None,
                    "seed": seed,
                }
            )
            jobs.append(cell_config)
    if args.workers == 1:
        for cell_config in jobs:
            _grid_cell(cell_config, args.out)
    else:
        # every run owns its directory exclusively, so cells can run in parallel
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            for done in pool.map(_grid_cell, jobs, [args.out] * len(jobs)):
                print(f"completed {done}")
    return 0


def summarize_runs(run_dirs, metric: str) -> list[dict]:
    """Aggregate metric CSVs: per run name, best-checkpoint accuracy averaged
    over seeds (with std) and the mean over all checkpoints."""
    by_name: dict[str, list[tuple[float, float]]] = {}
    flagged: list[str] = []
    for run_dir in run_dirs:
        name = os.path.basename(os.path.dirname(os.path.abspath(run_dir)))
        path = os.path.join(run_dir, "metrics.csv")
        if not os.path.exists(path):
            flagged.append(run_dir)
            continue
        rows = [
            r
            for r in training.read_metrics_csv(path)
            if r["metric"] == metric and r["split"] == "validation" and r["step"] > 0
        ]
        if not rows:
            flagged.append(run_dir)
            continue
        values = [r["value"] for r in rows]
        by_name.setdefault(name, []).append((max(values), float(np.mean(values))))
    table = []
    for name in sorted(by_name):
        bests = [b for b, _ in by_name[name]]
        trajs = [t for _, t in by_name[name]]
        table.append(
            {
                "name": name,
                "seeds": len(bests),
                "best_mean": float(np.mean(bests)),
                "best_std": float(np.std(bests)),
                "traj_mean": float(np.mean(trajs)),
            }
        )
    for run_dir in flagged:
        table.append(
            {"name": f"{run_dir} (incomplete)", "seeds": 0, "best_mean": float("nan"),
             "best_std": float("nan"), "traj_mean": float("nan")}
        )
    return table


def cmd_report(args) -> int:
    run_dirs = []
    for target in args.run_dirs:
        if os.path.exists(os.path.join(target, "metrics.csv")):
            run_dirs.append(target)
            continue
        for name in sorted(os.listdir(target)) if os.path.isdir(target) else []:
            for seed in sorted(os.listdir(os.path.join(target, name))):
                candidate = os.path.join(target, name, seed)
                if os.path.isdir(candidate):
                    run_dirs.append(candidate)
    if not run_dirs:
        print("no completed runs found", file=sys.stderr)
        return 1
    table = summarize_runs(run_dirs, args.metric)
    header = f"{'run':<28} {'seeds':>5} {'best':>8} {'std':>8} {'traj':>8}"
    print(header)
    print("-" * len(header))
    for row in table:
        print(
            f"{row['name']:<28} {row['seeds']:>5} {row['best_mean']:>8.3f} "
            f"{row['best_std']:>8.3f} {row['traj_mean']:>8.3f}"
        )
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as f:
            f.write("name,seeds,best_mean,best_std,traj_mean\n")
            for row in table:
                f.write(
                    f"{row['name']},{row['seeds']},{row['best_mean']},"
                    f"{row['best_std']},{row['traj_mean']}\n"
                )
        print(f"summary written to {args.csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riff")
    parser.add_argument("--out", default=None, help="output root (default: $RIFF_OUT or runs_out)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain the rewriter on rule-based rewrite targets")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("riff-finetune", help="reward-guided rewriter fine-tuning")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_riff_finetune)

    p = sub.add_parser("train-classifier", help="paraphrase-augmented classifier training")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("evaluate", help="accuracy and rewrite-diversity report")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("oracle-check", help="exact-gradient vs finite-difference sweep")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("grid", help="run the estimator/regime/decoder grid")
    p.add_argument("--config", default=None)
    p.add_argument("--estimators", default="mml,pg")
    p.add_argument("--regimes", default="on,off,klon")
    p.add_argument("--decoders", default="beam,top_p,mixed")
    p.add_argument("--normalize", default="both")
    p.add_argument("--seeds", default="0")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="aggregate run metrics into a summary table")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--metric", default=training.METRIC_EXCL)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"run failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
